"""Scenario files, deterministic orchestration and reports."""
from qkdnet.scenario.loader import (
    LinkSpec, Scenario, ScenarioError, load_preset, load_scenario, parse_scenario, preset_names, preset_path,
)
from qkdnet.scenario.report import render_report, render_text, validate_report
from qkdnet.scenario.runner import RunError, block_rng, build_kms, provision_kms, run
