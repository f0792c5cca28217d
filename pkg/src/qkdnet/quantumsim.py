"""Monte-Carlo QKD session simulators.

Each simulator turns a system configuration plus a channel into the block
statistics consumed by the key-rate engines. Counts are drawn in aggregate
(multinomial per block or per fading sub-block) rather than per pulse, so
blocks of 1e8 pulses stay cheap. All randomness flows from the ``rng``
argument.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from qkdnet.channel import CompositeLink, FadingModel, mean_transmission, sample_transmission
from qkdnet.errors import DomainError, ValidationError

Channel = Union[CompositeLink, FadingModel, float]

MIN_FADING_SUBBLOCKS = 100


@dataclass(frozen=True)
class DetectorModel:
    efficiency: float
    dark_count_prob: float = 0.0
    dead_time: float = 0.0
    jitter_fwhm: float = 0.0  # metadata only

    def __post_init__(self):
        if not 0.0 < self.efficiency <= 1.0:
            raise DomainError(f"detector efficiency must lie in (0, 1], got {self.efficiency}")
        if not 0.0 <= self.dark_count_prob < 1.0:
            raise DomainError(f"dark count probability must lie in [0, 1), got {self.dark_count_prob}")
        if self.dead_time < 0:
            raise DomainError("dead time must be >= 0")


@dataclass(frozen=True)
class DecoyConfig:
    mu1: float
    mu2: float
    p_mu1: float
    p_z_alice: float
    p_z_bob: float
    pulse_rate: float
    intrinsic_qber_z: float = 0.0
    intrinsic_qber_x: float = 0.0

    def __post_init__(self):
        if not self.mu1 > self.mu2 > 0:
            raise DomainError("decoy intensities must satisfy mu1 > mu2 > 0")
        for name in ("p_mu1", "p_z_alice", "p_z_bob"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise DomainError(f"{name} must lie in (0, 1)")
        if self.pulse_rate <= 0:
            raise DomainError("pulse rate must be positive")
        for name in ("intrinsic_qber_z", "intrinsic_qber_x"):
            if not 0.0 <= getattr(self, name) <= 0.5:
                raise DomainError(f"{name} must lie in [0, 0.5]")

    @property
    def p_mu2(self) -> float:
        return 1.0 - self.p_mu1

    @property
    def intensities(self) -> tuple[float, float]:
        return (self.mu1, self.mu2)

    @property
    def intensity_probs(self) -> tuple[float, float]:
        return (self.p_mu1, self.p_mu2)

    @property
    def sift_probs(self) -> tuple[float, float]:
        """Probability that both parties pick Z, respectively X."""
        za, zb = self.p_z_alice, self.p_z_bob
        return (za * zb, (1 - za) * (1 - zb))


@dataclass(frozen=True)
class DecoyBlockStats:
    """Sifted detections ``n_*`` and errors ``m_*`` per intensity (mu1, mu2)."""

    n_z: tuple[int, int]
    n_x: tuple[int, int]
    m_z: tuple[int, int]
    m_x: tuple[int, int]
    pulses_sent: int
    wall_time: float

    def validate(self) -> None:
        for n, m in zip(self.n_z + self.n_x, self.m_z + self.m_x):
            if n < 0 or m < 0 or m > n:
                raise ValidationError(f"inconsistent cell: n={n}, m={m}")
        if sum(self.n_z) + sum(self.n_x) > self.pulses_sent:
            raise ValidationError("more sifted detections than pulses sent")

    @property
    def qber_z(self) -> float:
        n = sum(self.n_z)
        return sum(self.m_z) / n if n else 0.0

    @property
    def qber_x(self) -> float:
        n = sum(self.n_x)
        return sum(self.m_x) / n if n else 0.0

    def scaled(self, factor: float) -> "DecoyBlockStats":
        """Every count multiplied by ``factor`` and rounded."""

        def sc(t):
            return tuple(int(round(v * factor)) for v in t)

        return DecoyBlockStats(
            sc(self.n_z), sc(self.n_x), sc(self.m_z), sc(self.m_x),
            int(round(self.pulses_sent * factor)), self.wall_time * factor,
        )


@dataclass(frozen=True)
class PairSourceModel:
    pair_rate: float
    visibility: float
    accidental_fraction: float = 0.0

    def __post_init__(self):
        if self.pair_rate < 0:
            raise DomainError("pair rate must be >= 0")
        if not 0.0 <= self.visibility <= 1.0:
            raise DomainError("visibility must lie in [0, 1]")
        if not 0.0 <= self.accidental_fraction < 1.0:
            raise DomainError("accidental fraction must lie in [0, 1)")

    @property
    def error_probability(self) -> float:
        a = self.accidental_fraction
        return (1 - self.visibility) / 2 * (1 - a) + 0.5 * a


@dataclass(frozen=True)
class PairBlockStats:
    n_sifted: int
    m_errors: int
    duration: float

    @property
    def qber(self) -> float:
        return self.m_errors / self.n_sifted if self.n_sifted else 0.0


@dataclass(frozen=True)
class CvConfig:
    modulation: str
    v_a: float
    xi: float
    eta: float
    v_el: float = 0.0
    symbol_rate: float = 1.0

    def __post_init__(self):
        if self.modulation not in ("gaussian", "qpsk"):
            raise DomainError(f"unknown modulation {self.modulation!r}")
        if self.v_a <= 0:
            raise DomainError("modulation variance must be positive")
        if self.xi < 0 or self.v_el < 0:
            raise DomainError("noise terms must be >= 0")
        if not 0.0 < self.eta <= 1.0:
            raise DomainError("detector efficiency must lie in (0, 1]")


@dataclass(frozen=True)
class CvBatch:
    alice_symbols: np.ndarray
    bob_quadratures: np.ndarray
    transmission_used: np.ndarray

    def __post_init__(self):
        if not len(self.alice_symbols) == len(self.bob_quadratures) == len(self.transmission_used):
            raise ValidationError("CV batch arrays differ in length")

    def __len__(self):
        return len(self.alice_symbols)

    def subset(self, mask) -> "CvBatch":
        return CvBatch(self.alice_symbols[mask], self.bob_quadratures[mask], self.transmission_used[mask])


def detection_probability(mu, eta_total, p_dark):
    """Click probability of a threshold detector fed a Poissonian pulse."""
    if np.any(np.asarray(mu) < 0):
        raise DomainError("mean photon number must be >= 0")
    if np.any((np.asarray(eta_total) < 0) | (np.asarray(eta_total) > 1)):
        raise DomainError("total efficiency must lie in [0, 1]")
    if not 0.0 <= p_dark < 1.0:
        raise DomainError("dark count probability must lie in [0, 1)")
    return 1.0 - (1.0 - p_dark) * np.exp(-np.asarray(mu) * eta_total)


def apply_dead_time(rate, dead_time: float):
    """Non-paralyzable dead-time model: observed = r / (1 + r * tau)."""
    return rate / (1.0 + rate * dead_time)


def _transmission_draws(channel: Channel, rng: np.random.Generator, n: int) -> np.ndarray:
    if isinstance(channel, CompositeLink):
        model = channel.fading_model()
        if model is None:
            return np.full(n, mean_transmission(channel))
        channel = model
    if isinstance(channel, FadingModel):
        return np.atleast_1d(sample_transmission(channel, rng, size=n))
    return np.full(n, float(channel))


def is_fading(channel: Channel) -> bool:
    if isinstance(channel, CompositeLink):
        return channel.is_fading
    return isinstance(channel, FadingModel) and channel.scintillation_index > 0


def decoy_cell_model(cfg: DecoyConfig, transmission, det: DetectorModel, detectors=(1, 2)):
    """Per-pulse probabilities of each sifted (basis, intensity) cell.

    Returns ``(p_cell, e_cell)`` arrays of shape ``(..., 2, 2)`` indexed as
    ``[basis Z/X, intensity mu1/mu2]``: the probability that a pulse ends up
    as a sifted detection in that cell, and the error probability of such a
    detection. ``transmission`` may be an array (one entry per sub-block).
    """
    t = np.asarray(transmission, dtype=float)[..., None]
    mu = np.array(cfg.intensities)
    pk = np.array(cfg.intensity_probs)
    eta = t * det.efficiency
    p_det = detection_probability(mu, eta, det.dark_count_prob)  # (..., 2)
    p_sig = 1.0 - np.exp(-mu * eta)
    p_dark_only = np.exp(-mu * eta) * det.dark_count_prob

    # Bob's passive basis split decides which detectors see the click.
    mean_click = (pk * p_det).sum(axis=-1)
    n_z_det, n_x_det = detectors
    rate_z = cfg.pulse_rate * cfg.p_z_bob * mean_click / n_z_det
    rate_x = cfg.pulse_rate * (1 - cfg.p_z_bob) * mean_click / n_x_det
    with np.errstate(invalid="ignore", divide="ignore"):
        surv_z = np.where(rate_z > 0, apply_dead_time(rate_z, det.dead_time) / rate_z, 1.0)
        surv_x = np.where(rate_x > 0, apply_dead_time(rate_x, det.dead_time) / rate_x, 1.0)

    sift_z, sift_x = cfg.sift_probs
    p_cell = np.stack(
        [pk * sift_z * p_det * surv_z[..., None], pk * sift_x * p_det * surv_x[..., None]], axis=-2
    )
    e_int = np.array([cfg.intrinsic_qber_z, cfg.intrinsic_qber_x])[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        e_cell = np.where(
            p_det[..., None, :] > 0,
            (e_int * p_sig[..., None, :] + 0.5 * p_dark_only[..., None, :]) / p_det[..., None, :],
            0.0,
        )
    return p_cell, e_cell


def simulate_decoy_block(
    cfg: DecoyConfig,
    link: Channel,
    det: DetectorModel,
    n_pulses: int,
    rng: np.random.Generator,
    detectors=(1, 2),
    fading_subblocks: int = MIN_FADING_SUBBLOCKS,
) -> DecoyBlockStats:
    """Simulate one block of the 1-decoy BB84 protocol.

    Static links use a single multinomial draw over the four sifted cells.
    Fading links split the block into ``fading_subblocks`` (at least 100)
    sub-blocks, each seeing its own transmission draw.
    """
    if n_pulses <= 0:
        raise DomainError("n_pulses must be positive")
    if is_fading(link):
        n_sub = max(MIN_FADING_SUBBLOCKS, fading_subblocks)
        n_sub = min(n_sub, n_pulses)
        sizes = np.full(n_sub, n_pulses // n_sub, dtype=np.int64)
        sizes[: n_pulses % n_sub] += 1
        t = _transmission_draws(link, rng, n_sub)
    else:
        sizes = np.array([n_pulses], dtype=np.int64)
        t = _transmission_draws(link, rng, 1)

    p_cell, e_cell = decoy_cell_model(cfg, t, det, detectors)
    flat = p_cell.reshape(len(sizes), 4)
    pvals = np.concatenate([flat, 1.0 - flat.sum(axis=1, keepdims=True)], axis=1)
    pvals = np.clip(pvals, 0.0, 1.0)
    counts = rng.multinomial(sizes, pvals)[:, :4]
    errors = rng.binomial(counts, e_cell.reshape(len(sizes), 4))
    n = counts.sum(axis=0)
    m = errors.sum(axis=0)
    return DecoyBlockStats(
        n_z=(int(n[0]), int(n[1])),
        n_x=(int(n[2]), int(n[3])),
        m_z=(int(m[0]), int(m[1])),
        m_x=(int(m[2]), int(m[3])),
        pulses_sent=int(n_pulses),
        wall_time=n_pulses / cfg.pulse_rate,
    )


def simulate_pair_block(
    src: PairSourceModel,
    link_a: Channel,
    link_b: Channel,
    det_a: DetectorModel,
    det_b: DetectorModel,
    duration: float,
    rng: np.random.Generator,
) -> PairBlockStats:
    """Coincidences and errors of an entangled-pair block of ``duration`` seconds."""
    if duration <= 0:
        raise DomainError("duration must be positive")
    n_pairs = int(round(src.pair_rate * duration))
    q = src.error_probability
    if is_fading(link_a) or is_fading(link_b):
        n_sub = MIN_FADING_SUBBLOCKS
        sizes = np.full(n_sub, n_pairs // n_sub, dtype=np.int64)
        sizes[: n_pairs % n_sub] += 1
        ta = _transmission_draws(link_a, rng, n_sub)
        tb = _transmission_draws(link_b, rng, n_sub)
    else:
        sizes = np.array([n_pairs], dtype=np.int64)
        ta = _transmission_draws(link_a, rng, 1)
        tb = _transmission_draws(link_b, rng, 1)
    p = det_a.efficiency * det_b.efficiency * ta * tb
    n = int(rng.binomial(sizes, p).sum())
    m = int(rng.binomial(n, q))
    return PairBlockStats(n_sifted=n, m_errors=m, duration=duration)


def simulate_cv_batch(
    cfg: CvConfig, transmission: Channel, n_symbols: int, rng: np.random.Generator
) -> CvBatch:
    """Heterodyne measurement of coherent states, in shot-noise units.

    Each quadrature of Alice's symbol has variance v_a / 2; Bob observes
    ``sqrt(T eta / 2) x + n`` with noise variance ``1 + v_el + T eta xi / 2``.
    """
    if n_symbols <= 0:
        raise DomainError("n_symbols must be positive")
    if is_fading(transmission):
        t = _transmission_draws(transmission, rng, n_symbols)
    else:
        t = np.full(n_symbols, _transmission_draws(transmission, rng, 1)[0])
    half = cfg.v_a / 2.0
    if cfg.modulation == "gaussian":
        xq = rng.normal(0.0, math.sqrt(half), size=(2, n_symbols))
    else:
        xq = np.sqrt(half) * (2.0 * rng.integers(0, 2, size=(2, n_symbols)) - 1.0)
    gain = np.sqrt(t * cfg.eta / 2.0)
    noise_sd = np.sqrt(1.0 + cfg.v_el + t * cfg.eta * cfg.xi / 2.0)
    yq = gain * xq + noise_sd * rng.standard_normal(size=(2, n_symbols))
    return CvBatch(xq[0] + 1j * xq[1], yq[0] + 1j * yq[1], t)
