"""Command-line front end.

Every command writes its outputs into ``--out`` and appends one JSON line to
``<out>/manifest.jsonl``. ``rerun`` replays a manifest entry into a scratch
directory and byte-compares the regenerated files against the recorded hashes.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import shlex
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .equilibrium import analyze
from .errors import ConfigError, PatienceError, SpectrumError
from .policy import PolicyTables
from .scenario import load_config
from .sim import (
    PRESETS,
    Deviant,
    SweepSpec,
    best_punish_forgive,
    horizon_for,
    mean_ci,
    rows_to_csv,
    simulate_episode,
    stationary_optimal,
    summarize,
    sweep,
)

EXIT_CODES = {
    "ok": 0,
    "parse": 10,
    "condition1-violated": 11,
    "condition2-violated": 12,
    "empty-set": 13,
    "design-infeasible": 14,
    "state-escape": 15,
    "degenerate": 16,
    "degenerate-player": 16,
    "degenerate-grid": 16,
    "monitoring-infeasible": 17,
    "insufficient-patience": 18,
    "mismatch": 19,
}


def _write(out: Path, name: str, text: str, outputs: dict) -> None:
    path = out / name
    path.write_text(text)
    outputs[name] = hashlib.sha256(text.encode()).hexdigest()


def _fmt(x) -> str:
    return repr(float(x))


def _report_text(report) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def cmd_analyze(args, out: Path, outputs: dict, notes: dict) -> str:
    config = load_config(args.config)
    report = analyze(config)
    _write(out, "report.json", _report_text(report), outputs)
    row = {"config": Path(args.config).name}
    row.update(report.csv_row())
    _write(out, "report.csv", rows_to_csv([row]), outputs)
    print(f"status: {report.status}")
    if report.message:
        print(report.message)
    if report.delta_min == report.delta_min:
        print(f"minimum discount factor: {report.delta_min:.6f}")
    if report.operating_point is not None:
        print("operating point: " + ", ".join(f"{x:.6g}" for x in report.operating_point))
    return report.status


def cmd_simulate(args, out: Path, outputs: dict, notes: dict) -> str:
    config = load_config(args.config)
    report = analyze(config)
    if report.status != "ok":
        print(f"status: {report.status}: {report.message}", file=sys.stderr)
        return report.status
    delta = config.discount if args.discount is None else args.discount
    if delta < report.delta_min:
        raise PatienceError(
            f"discount {delta} is below the minimum discount factor {report.delta_min:.6g}",
            delta_min=report.delta_min,
        )
    horizon = horizon_for(delta) if args.horizon is None else args.horizon
    if delta ** horizon > 1e-3:
        msg = f"horizon {horizon} truncates discounted payoffs by {delta ** horizon:.3g} > 1e-3"
        notes.setdefault("warnings", []).append(msg)
        print("warning: " + msg, file=sys.stderr)
    model = report.extra["model"]
    tables = PolicyTables.from_report(report, config)
    target = report.normalized_target
    seeds = [args.seed + k for k in range(args.seeds)]
    deviant = Deviant.parse(args.deviant) if args.deviant else None
    if deviant is not None and not 0 <= deviant.player < config.n_players:
        raise ConfigError(f"deviant player {deviant.player + 1} out of range 1..{config.n_players}")

    n = config.n_players
    rows, trace_rows = [], []
    compliant = np.empty((len(seeds), n))
    deviating = np.empty((len(seeds), n)) if deviant else None
    for k, s in enumerate(seeds):
        tr = simulate_episode(config, model, tables, target, delta, s, horizon)
        compliant[k] = tr.discounted_avg
        if args.traces:
            trace_rows.extend(tr.rows())
        row = {"seed": s}
        row.update({f"u_{j + 1}": _fmt(tr.discounted_avg[j]) for j in range(n)})
        if deviant:
            dv = simulate_episode(config, model, tables, target, delta, s, horizon, deviant)
            deviating[k] = dv.discounted_avg
            p = deviant.player
            row[f"deviant_u_{p + 1}"] = _fmt(dv.discounted_avg[p])
            row["deviation_gain"] = _fmt(dv.discounted_avg[p] - tr.discounted_avg[p])
        rows.append(row)
    _write(out, "episodes.csv", rows_to_csv(rows), outputs)
    if args.traces:
        _write(out, "traces.csv", rows_to_csv(trace_rows), outputs)

    m, h = mean_ci(compliant)
    summary = []
    for j in range(n):
        row = {
            "player": j + 1, "target": _fmt(report.operating_point[j]), "mean": _fmt(m[j]),
            "ci95": "" if np.isnan(h[j]) else _fmt(h[j]),
            "rel_error": _fmt(abs(m[j] - report.operating_point[j]) / report.operating_point[j]),
        }
        if deviant and j == deviant.player:
            gm, gh = mean_ci(deviating[:, j] - compliant[:, j])
            row["deviation_gain_mean"] = _fmt(gm)
            row["deviation_gain_ci95"] = "" if np.isnan(gh) else _fmt(gh)
        summary.append(row)
    _write(out, "summary.csv", rows_to_csv(summary), outputs)
    notes.update({"delta": delta, "horizon": horizon, "seeds": seeds})
    for r in summary:
        print(f"player {r['player']}: mean {float(r['mean']):.6g} target {float(r['target']):.6g}")
    return "ok"


def _parse_lengths(text: str) -> list[float]:
    out = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        if tok in ("inf", "infinity"):
            out.append(math.inf)
        else:
            try:
                v = int(tok)
            except ValueError:
                raise ConfigError(f"--L: bad punishment length '{tok}'")
            if v < 1:
                raise ConfigError(f"--L: punishment length must be >= 1, got {v}")
            out.append(float(v))
    return out


def cmd_baseline(args, out: Path, outputs: dict, notes: dict) -> str:
    config = load_config(args.config)
    report = analyze(config)
    model = report.extra.get("model")
    if model is None:
        print(f"status: {report.status}: {report.message}", file=sys.stderr)
        return report.status
    n = config.n_players
    rows = []
    if args.policy == "stationary":
        st = stationary_optimal(config, model)
        row = {"policy": "stationary", "feasible": int(st.feasible), "welfare": _fmt(st.welfare)}
        for j in range(n):
            row[f"p_{j + 1}"] = "" if st.profile is None else _fmt(st.profile[j])
        row.update({f"u_{j + 1}": _fmt(st.payoffs[j]) for j in range(n)})
        rows.append(row)
    else:
        delta = config.discount if args.discount is None else args.discount
        lengths = _parse_lengths(args.L)
        best, results = best_punish_forgive(config, model, delta, lengths, args.mode, args.restart)
        for r in results:
            L = r.params.punishment_length
            row = {
                "policy": "punish_forgive", "mode": args.mode,
                "L": "inf" if L == math.inf else int(L),
                "feasible": int(r.feasible), "incentive_ok": int(r.incentive_ok),
                "incentive_gain": _fmt(r.incentive_gain), "meets_floor": int(r.meets_floor),
                "welfare": _fmt(r.welfare), "best": int(r is best),
            }
            row.update({f"u_{j + 1}": _fmt(r.payoffs[j]) for j in range(n)})
            rows.append(row)
    _write(out, "baseline.csv", rows_to_csv(rows), outputs)
    for r in rows:
        print(", ".join(f"{k}={v}" for k, v in r.items()))
    return "ok"


def cmd_sweep(args, out: Path, outputs: dict, notes: dict) -> str:
    if args.spec in PRESETS:
        spec = PRESETS[args.spec]()
    else:
        try:
            data = json.loads(Path(args.spec).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.spec}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        except OSError as exc:
            raise ConfigError(f"{args.spec}: {exc}") from exc
        spec = SweepSpec.from_dict(data)
    if args.seeds is not None:
        spec.seeds = list(range(args.seeds))
    rows = sweep(spec)
    _write(out, "sweep.csv", rows_to_csv(rows), outputs)
    _write(out, "sweep_summary.csv", rows_to_csv(summarize(rows)), outputs)
    notes["spec"] = spec.to_dict()
    failed = sum(1 for r in rows if r["policy"] == "proposed" and not int(r["feasible"]))
    print(f"{len(rows)} rows written; proposed policy infeasible in {failed} cells")
    return "ok"


def _load_manifest(path: Path, entry: int) -> dict:
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ConfigError(f"{path}: manifest is empty")
    try:
        return json.loads(lines[entry])
    except IndexError:
        raise ConfigError(f"{path}: no entry {entry} (has {len(lines)})")


def cmd_rerun(args) -> int:
    record = _load_manifest(Path(args.manifest), args.entry)
    argv = list(record["argv"])
    with tempfile.TemporaryDirectory() as tmp:
        i = argv.index("--out")
        argv[i + 1] = tmp
        code = main(argv, record_manifest=False)
        if code != record["exit_code"]:
            print(f"exit code {code} differs from recorded {record['exit_code']}")
            return EXIT_CODES["mismatch"]
        bad = []
        for name, digest in sorted(record["outputs"].items()):
            path = Path(tmp) / name
            if not path.exists() or hashlib.sha256(path.read_bytes()).hexdigest() != digest:
                bad.append(name)
    if bad:
        print("mismatch: " + ", ".join(bad))
        return EXIT_CODES["mismatch"]
    print(f"reproduced {len(record['outputs'])} file(s) byte-for-byte")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ppe-spectrum", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_out(p):
        p.add_argument("--out", default=".", help="output directory (default: current)")
        return p

    p = with_out(sub.add_parser("analyze", help="equilibrium analysis of one scenario"))
    p.add_argument("config")

    p = with_out(sub.add_parser("simulate", help="Monte-Carlo episodes of the index policy"))
    p.add_argument("config")
    p.add_argument("--seed", type=int, required=True, help="first episode seed")
    p.add_argument("--seeds", type=int, default=1, help="number of episodes (seeds seed..seed+n-1)")
    p.add_argument("--horizon", type=int, help="last slot index (default: discount**T < 1e-6)")
    p.add_argument("--discount", type=float, help="override the config discount factor")
    p.add_argument("--deviant", help='e.g. "2:max_power" (1-based player)')
    p.add_argument("--traces", action="store_true", help="also write per-slot traces")

    p = with_out(sub.add_parser("sweep", help="parameter sweep (preset name or JSON spec)"))
    p.add_argument("spec", help=f"one of {sorted(PRESETS)} or a JSON file")
    p.add_argument("--seeds", type=int, help="override the number of seeds (0..n-1)")

    p = with_out(sub.add_parser("baseline", help="stationary or punish-forgive baseline"))
    p.add_argument("config")
    p.add_argument("--policy", choices=["stationary", "punish_forgive"], default="stationary")
    p.add_argument("--L", default="1,2,5,10,20,50,inf", help="comma-separated punishment lengths")
    p.add_argument("--mode", choices=["stationary", "tdma"], default="stationary")
    p.add_argument("--restart", action="store_true", help="distress during punishment restarts it")
    p.add_argument("--discount", type=float)

    p = sub.add_parser("rerun", help="replay a manifest entry and byte-compare outputs")
    p.add_argument("manifest")
    p.add_argument("--entry", type=int, default=-1, help="line index in the manifest (default: last)")
    return ap


COMMANDS = {"analyze": cmd_analyze, "simulate": cmd_simulate, "sweep": cmd_sweep, "baseline": cmd_baseline}


def _absolutize(argv: list[str], args) -> list[str]:
    argv = list(argv)
    for attr in ("config", "spec"):
        val = getattr(args, attr, None)
        if val and Path(val).exists() and val in argv:
            argv[argv.index(val)] = str(Path(val).resolve())
    if "--out" not in argv:
        argv += ["--out", args.out]
    return argv


def _input_path(args) -> str:
    val = getattr(args, "config", None) or getattr(args, "spec", "")
    return str(Path(val).resolve()) if Path(val).exists() else val


def main(argv: list[str] | None = None, record_manifest: bool = True) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    if args.command == "rerun":
        try:
            return cmd_rerun(args)
        except SpectrumError as exc:
            print(f"error [{exc.reason}]: {exc}", file=sys.stderr)
            return EXIT_CODES.get(exc.reason, 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs: dict = {}
    notes: dict = {}
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    try:
        status = COMMANDS[args.command](args, out, outputs, notes)
    except SpectrumError as exc:
        status = exc.reason
        print(f"error [{exc.reason}]: {exc}", file=sys.stderr)
    except OSError as exc:
        status = "parse"
        print(f"error [parse]: {exc}", file=sys.stderr)
    code = EXIT_CODES.get(status, 1)
    if record_manifest:
        entry = {
            "command": args.command,
            "argv": _absolutize(argv, args),
            "cmdline": "ppe-spectrum " + shlex.join(argv),
            "config": _input_path(args),
            "seed": getattr(args, "seed", None),
            "tool_version": __version__,
            "started": started.isoformat(timespec="seconds"),
            "wall_clock_s": round(time.perf_counter() - t0, 3),
            "exit_code": code,
            "status": status,
            "outputs": outputs,
        }
        entry.update({k: v for k, v in notes.items() if k not in entry})
        with open(out / "manifest.jsonl", "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
