"""``carechain`` command line.

Exit codes: 0 ok, 2 usage/config, 3 protocol rejection, 4 verification
failure, 5 I/O or not found. Expected errors print one ``error:`` line on
stderr and never a traceback.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import auth, crypto, ledger as ledger_mod
from .consortium import DeviceKind, TopologyConfig, create_topology, validate_topology
from .demo import DemoAborted, run_demo
from .errors import CareChainError, ConfigError, NotFoundError, ProtocolError, StorageIOError, VerificationError
from .ledger import Miner
from .nft import PrescriptionMetadata, PrescriptionNft, seal_batch
from .report import emit_report, render_figures
from .sim import MetricsReport, baseline_variants, load_scenario, run_comparison, simulate
from .store import ContentStore, parse_address
from .workspace import Workspace

EXIT_OK, EXIT_USAGE, EXIT_PROTOCOL, EXIT_VERIFY, EXIT_IO = 0, 2, 3, 4, 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise NotFoundError(f"no such file: {path}") from None
    except OSError as exc:
        raise StorageIOError(f"cannot read {path}: {exc.strerror}") from None


def _write(path, data: bytes):
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise StorageIOError(f"cannot write {path}: {exc.strerror}") from None


def _token_id(text: str) -> bytes:
    try:
        raw = bytes.fromhex(text)
    except ValueError:
        raise ConfigError(f"token id must be hex: {text!r}") from None
    if len(raw) != 32:
        raise ConfigError("token id must be 32 bytes")
    return raw


def _workspace(args) -> Workspace:
    ws = Workspace(args.state, seed=args.seed)
    topology = TopologyConfig.load(args.topology) if args.topology else None
    return ws.open(topology)


# -- patient ----------------------------------------------------------------

def cmd_register(args) -> int:
    ws = _workspace(args)
    c = ws.consortium
    if args.hospital not in c.gateways:
        raise NotFoundError(f"unknown hospital {args.hospital!r}")
    creds = auth.PatientCredentials.create(args.patient, args.mobile.encode(), args.password.encode(),
                                           rand=c.rand)
    card = auth.register(creds, c.gateways[args.hospital])
    path = ws.save_card(creds, card)
    ws.save()
    print(f"registered {args.patient} at {args.hospital}: cid {card.cid.hex()} card {path}")
    return EXIT_OK


def _hospital_of(ws: Workspace, card: auth.PatientCard) -> str:
    for hospital, gw in ws.consortium.gateways.items():
        if gw.gateway_id == card.gid:
            return hospital
    raise ProtocolError("card names an unknown gateway")


def cmd_login(args) -> int:
    ws = _workspace(args)
    device = ws.load_device(args.patient)
    card = auth.PatientCard.from_bytes(_read(args.card or ws.card_path(args.patient)))
    creds = auth.PatientCredentials(device["patient_id"], bytes.fromhex(device["mobile_id"]),
                                    args.password.encode(), bytes.fromhex(device["n0"]))
    hospital = _hospital_of(ws, card)
    gw = ws.consortium.gateways[hospital]
    if gw.lookup_cid(card.cid) is None:
        raise ProtocolError("card CID is not registered at its gateway")
    counter = device["counter"] + 1
    mine, theirs = auth.login(card, creds, gw, counter=counter, rand=ws.consortium.rand)
    ws.bump_counter(args.patient, counter)
    ws.save_sessions(args.patient, hospital, mine, theirs)
    ws.save()
    print(f"login ok: {args.patient} at {hospital}, session {crypto.hexdigest(mine.session_key)[:16]}")
    return EXIT_OK


def cmd_send(args) -> int:
    ws = _workspace(args)
    hospital, mine, theirs = ws.load_sessions(args.patient)
    payload = _read(args.file) if args.file else args.vitals.encode()
    try:
        json.loads(payload)
    except ValueError:
        raise ConfigError("vitals must be a JSON object") from None
    ct = auth.send_encrypted(mine, payload)
    loc = ws.consortium.ingest_vitals(hospital, theirs, ct, args.device)
    meta = json.loads(loc.tx.payload)
    ws.save_sessions(args.patient, hospital, mine, theirs)
    ws.save()
    print(f"stored record {meta['record']} priority {meta['priority']} "
          f"tx {loc.tx.tx_id.hex()} at {ws.consortium.chain_for(hospital).chain_id}:{loc.height}")
    return EXIT_OK


# -- nft ----------------------------------------------------------------------

def cmd_nft_mint(args) -> int:
    ws = _workspace(args)
    try:
        prescriptions = json.loads(_read(args.file))
    except ValueError:
        raise ConfigError("prescription file must be a JSON list") from None
    if not isinstance(prescriptions, list):
        raise ConfigError("prescription file must be a JSON list")
    flags = tuple(sorted({(p["cid"], p.get("priority", "routine"))
                          for p in prescriptions if isinstance(p, dict) and "cid" in p}))
    chain = ws.consortium.chain_for(args.hospital) if args.hospital in ws.consortium.gateways else None
    if chain is None:
        raise NotFoundError(f"unknown hospital {args.hospital!r}")
    meta = PrescriptionMetadata(args.hospital, args.doctor, args.period_start,
                                max(args.period_start, chain.clock), len({f[0] for f in flags}), flags)
    batch = seal_batch(ws.consortium, args.hospital, args.recipient, prescriptions)
    token = ws.registry.mint(args.hospital, batch, meta, insurer=args.insurer)
    if args.out:
        _write(args.out, batch)
    if args.export:
        _write(args.export, json.dumps(token.export(), indent=1).encode())
    ws.save()
    print(token.token_id.hex())
    return EXIT_OK


def cmd_nft_transfer(args) -> int:
    ws = _workspace(args)
    rec = ws.registry.transfer(_token_id(args.token), args.sender, args.to)
    ws.save()
    print(f"transferred {args.token} {rec.sender} -> {rec.recipient}")
    return EXIT_OK


def cmd_nft_verify(args) -> int:
    ws = _workspace(args)
    token_id = _token_id(args.token)
    presented = None
    if args.token_file:
        try:
            presented = PrescriptionNft.from_export(json.loads(_read(args.token_file)))
        except (ValueError, KeyError, TypeError):
            raise VerificationError("presented token file is malformed") from None
    report = ws.registry.verify_token(token_id, _read(args.file), presented)
    if not report.ok:
        raise VerificationError("; ".join(report.problems))
    print(f"token {args.token} verifies; owner {ws.registry.owner(token_id)}")
    return EXIT_OK


def cmd_nft_settle(args) -> int:
    ws = _workspace(args)
    token_id = _token_id(args.token)
    fin = ws.registry.settle(token_id, args.payer, args.amount)
    ws.save()
    receipt_id = ws.consortium.receipts[-1][0]
    print(f"settled: financial tx {fin.tx_id.hex()} receipt {receipt_id.hex()}")
    return EXIT_OK


# -- topology / devices / ledger ----------------------------------------------

def cmd_topology_validate(args) -> int:
    cfg = TopologyConfig.load(args.file)
    topo = create_topology(cfg)
    validate_topology(topo)
    for spec in topo.chains:
        print(f"{spec.chain_id}: hospitals {','.join(spec.hospitals)} miners {len(spec.miners)}")
    if topo.financial is not None:
        print(f"{topo.financial.chain_id}: miners {len(topo.financial.miners)}")
    return EXIT_OK


def cmd_device(args) -> int:
    ws = _workspace(args)
    c = ws.consortium
    if args.action == "register":
        try:
            kind = DeviceKind(args.kind)
        except ValueError:
            raise ConfigError(f"unknown device kind {args.kind!r}") from None
        txs = c.register_device(args.caller, args.id, kind, args.firmware)
    elif args.action == "update":
        txs = c.update_firmware(args.caller, args.id, args.version)
    else:
        txs = c.block_device(args.caller, args.id)
    ws.save()
    d = c.devices[args.id]
    print(f"device {d.device_id}: {d.kind.value} firmware {d.firmware_version} {d.status.value} "
          f"({len(txs)} chain(s) updated)")
    return EXIT_OK


def _verify_file(path, miners_path, chain_id) -> int:
    data = _read(path)
    miners = None
    if miners_path:
        try:
            miners = [Miner.from_dict(m) for m in json.loads(_read(miners_path))]
        except (ValueError, KeyError, TypeError):
            raise ConfigError(f"malformed miner roster {miners_path}") from None
    blocks, bad_frame = ledger_mod.decode_chain(data)
    if bad_frame is not None:
        raise VerificationError(f"{path}: undecodable block at height {bad_frame}")
    found = ledger_mod.explain_blocks(blocks, chain_id, miners)
    if found is not None:
        raise VerificationError(f"{path}: fails at height {found[0]}: {found[1]}")
    print(f"{path}: ok, {len(blocks)} blocks")
    return EXIT_OK


def cmd_ledger_verify(args) -> int:
    if args.file:
        return _verify_file(args.file, args.miners, args.chain_id)
    chains = Path(args.state) / "chains"
    files = sorted(chains.glob("*.chain"))
    if not files:
        raise NotFoundError(f"no chain files under {chains}")
    failed = []
    for f in files:
        roster = f.with_name(f.name.removesuffix(".chain") + ".miners.json")
        try:
            _verify_file(f, roster if roster.exists() else None, f.name.removesuffix(".chain"))
        except VerificationError as exc:
            print(exc)
            failed.append(f.name)
    if failed:
        raise VerificationError(f"{len(failed)} chain(s) failed verification")
    return EXIT_OK


# -- store ------------------------------------------------------------------

def _store(args) -> ContentStore:
    return ContentStore(Path(args.state) / "store" / args.namespace)


def cmd_store(args) -> int:
    store = _store(args)
    if args.action == "put":
        prev = parse_address(args.prev) if args.prev else None
        print(store.put(_read(args.file), prev).hex())
    elif args.action == "get":
        data = store.get(parse_address(args.address))
        if args.out:
            _write(args.out, data)
        else:
            sys.stdout.buffer.write(data)
    else:
        if not store.verify(parse_address(args.address), _read(args.file)):
            raise VerificationError(f"{args.file} does not match address {args.address}")
        print("ok")
    return EXIT_OK


# -- simulation ---------------------------------------------------------------

def _scenario(args):
    cfg, rates, variants = load_scenario(args.scenario)
    overrides = {k: getattr(args, k) for k in ("tx_count", "send_rate", "block_size")
                 if getattr(args, k) is not None}
    if args.sim_seed is not None:
        overrides["seed"] = args.sim_seed
    if args.send_rates:
        try:
            rates = tuple(float(r) for r in args.send_rates.split(","))
        except ValueError:
            raise ConfigError(f"bad --send-rates {args.send_rates!r}") from None
    cfg = replace(cfg, **overrides)
    variants = [replace(v, **{k: val for k, val in overrides.items() if k != "send_rate"}) for v in variants]
    cfg.validate()
    return cfg, rates, variants


def _emit(report: MetricsReport, args):
    out = emit_report(report, args.out)
    print(f"wrote {out} ({len(report.rows)} rows)")
    if not args.no_figures:
        png = Path(args.figures) if args.figures else out.with_suffix(".png")
        render_figures(report, png)
        print(f"wrote {png}")


def cmd_simulate(args) -> int:
    cfg, rates, _ = _scenario(args)
    if args.sweep:
        report = MetricsReport([simulate(replace(cfg, send_rate=r)).row for r in rates])
    else:
        report = MetricsReport([simulate(cfg).row])
    _emit(report, args)
    for row in report.rows:
        print(f"{row.scenario} @ {row.send_rate_tps:g} TPS: {row.total_time_s:.2f} s, "
              f"{row.throughput_tps:.2f} TPS, trace {row.trace_hash[:16]}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg, rates, variants = _scenario(args)
    report = run_comparison(cfg, variants or baseline_variants(cfg), rates)
    _emit(report, args)
    for row in report.rows:
        print(f"{row.scenario:>10} @ {row.send_rate_tps:>4g} TPS: time {row.total_time_s:8.2f} s  "
              f"ram {row.ram_mib_model:8.1f} MiB  energy {row.energy_units:9.1f}")
    return EXIT_OK


def cmd_demo(args) -> int:
    state = Path(args.state) if args.state_given else None
    if state is not None:
        state.mkdir(parents=True, exist_ok=True)
    run_demo(seed=args.seed, state_dir=state, block_device=args.block_device)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="carechain", description="Hospital consortium ledger toolkit")
    p.add_argument("--state", default=None, help="state directory (default ./carechain-state)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--topology", help="topology file used when the state directory is created")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("register", help="register a patient at a hospital gateway")
    s.add_argument("--patient", required=True)
    s.add_argument("--hospital", default="H1")
    s.add_argument("--mobile", required=True, help="mobile device id")
    s.add_argument("--password", required=True)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("login", help="run the login exchange and keep the session")
    s.add_argument("--patient", required=True)
    s.add_argument("--password", required=True)
    s.add_argument("--card", help="card file (default: the one saved at registration)")
    s.set_defaults(func=cmd_login)

    s = sub.add_parser("send", help="send encrypted vitals over the session")
    s.add_argument("--patient", required=True)
    s.add_argument("--device", required=True, help="registered patient gateway device id")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--vitals", help="JSON object")
    g.add_argument("--file")
    s.set_defaults(func=cmd_send)

    nft = sub.add_parser("nft", help="prescription NFTs").add_subparsers(dest="nft_cmd", required=True,
                                                                        parser_class=_Parser)
    s = nft.add_parser("mint")
    s.add_argument("--hospital", required=True)
    s.add_argument("--file", required=True, help="JSON list of prescriptions")
    s.add_argument("--recipient", default="P1", help="pharmacy the batch is encrypted for")
    s.add_argument("--doctor", default="dr-unknown")
    s.add_argument("--insurer")
    s.add_argument("--period-start", type=int, default=0)
    s.add_argument("--out", help="also write the encrypted batch here")
    s.add_argument("--export", help="write the token record as JSON here")
    s.set_defaults(func=cmd_nft_mint)
    s = nft.add_parser("transfer")
    s.add_argument("--token", required=True)
    s.add_argument("--from", dest="sender", required=True)
    s.add_argument("--to", required=True)
    s.set_defaults(func=cmd_nft_transfer)
    s = nft.add_parser("verify")
    s.add_argument("--token", required=True)
    s.add_argument("--file", required=True, help="batch bytes to check")
    s.add_argument("--token-file", help="presented token record (JSON export)")
    s.set_defaults(func=cmd_nft_verify)
    s = nft.add_parser("settle")
    s.add_argument("--token", required=True)
    s.add_argument("--payer", required=True)
    s.add_argument("--amount", type=int, required=True)
    s.set_defaults(func=cmd_nft_settle)

    topo = sub.add_parser("topology").add_subparsers(dest="topo_cmd", required=True, parser_class=_Parser)
    s = topo.add_parser("validate")
    s.add_argument("file")
    s.set_defaults(func=cmd_topology_validate)

    dev = sub.add_parser("device").add_subparsers(dest="action", required=True, parser_class=_Parser)
    s = dev.add_parser("register")
    s.add_argument("--caller", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--kind", default=DeviceKind.PATIENT_GATEWAY.value,
                   help="/".join(k.value for k in DeviceKind))
    s.add_argument("--firmware", type=int, default=1)
    s = dev.add_parser("update")
    s.add_argument("--caller", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--version", type=int, required=True)
    s = dev.add_parser("block")
    s.add_argument("--caller", required=True)
    s.add_argument("--id", required=True)
    for name in ("register", "update", "block"):
        dev.choices[name].set_defaults(func=cmd_device)

    led = sub.add_parser("ledger").add_subparsers(dest="ledger_cmd", required=True, parser_class=_Parser)
    s = led.add_parser("verify", help="verify a chain file, or every chain in the state directory")
    s.add_argument("file", nargs="?")
    s.add_argument("--miners", help="miner roster JSON for endorsement checks")
    s.add_argument("--chain-id")
    s.set_defaults(func=cmd_ledger_verify)

    st = sub.add_parser("store").add_subparsers(dest="action", required=True, parser_class=_Parser)
    s = st.add_parser("put")
    s.add_argument("file")
    s.add_argument("--prev", help="address of the version this one supersedes")
    s = st.add_parser("get")
    s.add_argument("address")
    s.add_argument("--out")
    s = st.add_parser("verify")
    s.add_argument("address")
    s.add_argument("file")
    for name in ("put", "get", "verify"):
        st.choices[name].add_argument("--namespace", default="cli")
        st.choices[name].set_defaults(func=cmd_store)

    for name, func, text in (("simulate", cmd_simulate, "run one scenario"),
                             ("compare", cmd_compare, "run the variant comparison over the send-rate sweep")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--scenario", required=True)
        s.add_argument("--out", required=True, help="CSV path")
        s.add_argument("--figures", help="PNG path (default: next to the CSV)")
        s.add_argument("--no-figures", action="store_true")
        s.add_argument("--tx-count", type=int)
        s.add_argument("--send-rate", type=float)
        s.add_argument("--send-rates", help="comma-separated sweep")
        s.add_argument("--block-size", type=int)
        s.add_argument("--sim-seed", type=int, help="workload seed (default: from the scenario file)")
        if name == "simulate":
            s.add_argument("--sweep", action="store_true", help="run every send rate in the sweep")
        s.set_defaults(func=func)

    s = sub.add_parser("demo", help="scripted end-to-end run")
    s.add_argument("--block-device", action="store_true", help="block the patient gateway before sending")
    s.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    args.state_given = args.state is not None
    if args.state is None:
        args.state = "carechain-state"
    try:
        return args.func(args)
    except DemoAborted as exc:
        cause = exc.cause
        code = cause.exit_code if isinstance(cause, CareChainError) else 1
        print(f"error: {exc}", file=sys.stderr)
        return code
    except CareChainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
