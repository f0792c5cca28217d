"""Command line entry point: ``qkdnet run|validate|list-presets|kms-serve|gateway``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from pathlib import Path

from qkdnet.errors import DomainError, ValidationError
from qkdnet.gateway import INITIATOR, RESPONDER, GatewayEgress, GatewayEndpoint, GatewayIngress, TunnelConfig
from qkdnet.gateway.proxy import RekeyTimer
from qkdnet.gateway.tunnel import TunnelError
from qkdnet.kms import KmsClient, KmsServer, QoS, TcpTransport
from qkdnet.kms.errors import KmsError
from qkdnet.scenario import RunError, ScenarioError, load_scenario, preset_names, preset_path, provision_kms, run
from qkdnet.scenario.report import FORMATS, render_report

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_RUNTIME = 3

log = logging.getLogger("qkdnet")


def hostport(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def _resolve(arg: str) -> Path:
    """A scenario argument is a file path or the name of a bundled preset."""
    p = Path(arg)
    if p.exists() or arg.endswith(".json"):
        return p
    try:
        return preset_path(arg)
    except KeyError:
        return p


def _load(arg: str):
    path = _resolve(arg)
    if not path.exists():
        raise ScenarioError("/", f"no such scenario file or preset: {arg}")
    return load_scenario(path)


def cmd_run(args) -> int:
    sc = _load(args.scenario)
    if args.seed is not None:
        sc = sc.with_seed(args.seed)
    report = run(sc, real_sockets=args.real_sockets, workers=args.workers)
    out = render_report(report, args.format)
    if args.output:
        Path(args.output).write_bytes(out)
    else:
        sys.stdout.buffer.write(out)
        sys.stdout.flush()
    return EXIT_OK


def cmd_validate(args) -> int:
    sc = _load(args.scenario)
    print(f"{sc.name}: ok ({len(sc.links)} links, {len(sc.nodes)} nodes)")
    return EXIT_OK


def cmd_list_presets(args) -> int:
    for name in preset_names():
        desc = json.loads(preset_path(name).read_text(encoding="utf-8")).get("description", "")
        print(f"{name:<16} {desc}")
    return EXIT_OK


def _wait(stop: threading.Event, servers) -> int:
    try:
        stop.wait()
    except KeyboardInterrupt:
        pass
    finally:
        for s in servers:
            s.stop()
    return EXIT_OK


def cmd_kms_serve(args) -> int:
    sc = _load(args.scenario)
    kms = provision_kms(sc)
    server = KmsServer(kms, args.listen)
    host, port = server.serve_in_background()
    print(f"kms for {sc.name} listening on {host}:{port}", flush=True)
    return _wait(threading.Event(), [server])


def cmd_gateway(args) -> int:
    client = KmsClient(TcpTransport(args.kms), args.endpoint)
    qos = QoS(key_chunk_size=32)
    if args.role == "ingress":
        ksid = client.open_connect(args.peer_node, qos, ksid=args.ksid)
    else:
        if not args.ksid:
            raise ValidationError("the egress side must join an existing --ksid")
        ksid = client.open_connect(args.peer_node, qos, ksid=args.ksid)
    cfg = TunnelConfig(ksid, args.rekey)
    ep = GatewayEndpoint(cfg, client, INITIATOR if args.role == "ingress" else RESPONDER)
    ep.establish()
    if args.role == "ingress":
        server = GatewayIngress(args.listen, args.peer, ep)
    else:
        server = GatewayEgress(args.listen, args.forward, ep)
    host, port = server.serve_in_background()
    timer = RekeyTimer(ep, args.rekey).start()
    print(f"gateway {args.role} {host}:{port} ksid {ksid}", flush=True)
    try:
        return _wait(threading.Event(), [server])
    finally:
        timer.stop()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qkdnet", description="Seeded QKD network simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario and print its report")
    p.add_argument("scenario", help="scenario file or preset name")
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=FORMATS, default="json")
    p.add_argument("--real-sockets", action="store_true", help="fetch gateway files through TCP proxies")
    p.add_argument("--workers", type=int)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="check a scenario file")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("list-presets", help="list bundled scenarios")
    p.set_defaults(func=cmd_list_presets)

    p = sub.add_parser("kms-serve", help="serve the key store of a simulated scenario over TCP")
    p.add_argument("scenario")
    p.add_argument("--listen", type=hostport, default=("127.0.0.1", 7400))
    p.set_defaults(func=cmd_kms_serve)

    p = sub.add_parser("gateway", help="run one side of an encrypted tunnel")
    p.add_argument("role", choices=("ingress", "egress"))
    p.add_argument("--listen", type=hostport, required=True)
    dst = p.add_mutually_exclusive_group(required=True)
    dst.add_argument("--peer", type=hostport, help="egress gateway address (ingress only)")
    dst.add_argument("--forward", type=hostport, help="protected server address (egress only)")
    p.add_argument("--kms", type=hostport, required=True)
    p.add_argument("--endpoint", required=True, help="this gateway's KMS node")
    p.add_argument("--peer-node", required=True, help="the other gateway's KMS node")
    p.add_argument("--ksid")
    p.add_argument("--rekey", type=float, default=120.0)
    p.set_defaults(func=cmd_gateway)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "gateway" and (args.role == "ingress") != (args.peer is not None):
        print("qkdnet: ingress takes --peer, egress takes --forward", file=sys.stderr)
        return EXIT_SCHEMA
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"qkdnet: scenario error at {exc.pointer}: {exc.message}", file=sys.stderr)
        return EXIT_SCHEMA
    except ValidationError as exc:
        print(f"qkdnet: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (RunError, KmsError, TunnelError, DomainError, OSError) as exc:
        print(f"qkdnet: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
