"""Command-line entry point: ``magsens {synthesize,analyze,plot,convergence}``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .bound import bound_report
from .magnus import TimeGrid, final_propagator
from .model import ControlSystem, field_from_dict, preset_spin_ring, preset_transmon
from .plot import scatter_svg
from .sensitivity import fd_oracle
from .synthesis import Archive, ConfigError, dump_archive, load_archive, load_config, optimize, worker_count

log = logging.getLogger("magsens")

EXIT_OK = 0
EXIT_FLAGGED = 3
EXIT_INPUT = 2


def fmt(v: float) -> str:
    """17 significant digits."""
    return f"{v:.16e}"


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, outputs: list[Path], started: str,
                   config: str | None = None, seed: int | None = None) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "started": started,
        "finished": _now(),
        "outputs": [
            {"path": p.name, "sha256": sha256_file(p), "bytes": p.stat().st_size} for p in outputs
        ],
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# synthesize
# ---------------------------------------------------------------------------


def cmd_synthesize(args) -> int:
    started = _now()
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
        config.validate()
    if args.restarts is not None:
        config.restarts = args.restarts
        config.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    controllers = optimize(config)
    archive = out / "controllers.json"
    archive.write_text(dump_archive(config, controllers))
    write_manifest(out, "synthesize", [archive], started, str(args.config), config.seed)
    if controllers:
        print(f"{len(controllers)} of {config.restarts} restarts above fidelity {config.threshold}; "
              f"best {controllers[0].fidelity:.8f}")
    else:
        print(f"no restart reached fidelity {config.threshold} ({config.restarts} restarts)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def analyze_controller(archive: Archive, index: int, fd_check: bool = False) -> dict:
    """Bound report plus re-validation for one archived controller."""
    ctrl = archive.controllers[index]
    status = []
    fid = archive.kind.fidelity(final_propagator(archive.system, ctrl.fields, archive.grid))
    if abs(fid - ctrl.fidelity) > 1e-10:
        status.append("fidelity-mismatch")
    if not all(f.is_feasible(archive.amplitude_bound) for f in ctrl.fields):
        status.append("infeasible")
    report = bound_report(archive.system, ctrl.fields, archive.grid, archive.kind)
    if not report.holds:
        status.append("bound-violated")
    row = {"id": ctrl.id, **report.to_dict(), "status": ";".join(status) or "ok"}
    row.pop("z_norms")
    if fd_check:
        fd = {}
        for mu, a in report.sensitivities.items():
            est = fd_oracle(archive.system, ctrl.fields, archive.grid, archive.kind, mu, richardson=True)
            fd[str(mu)] = {"estimate": est, "relative_error": abs(a - est) / max(abs(est), 1e-300)}
        row["finite_difference"] = fd
    return row


def _analyze_job(args):
    path, index, fd_check = args
    return analyze_controller(load_archive(path), index, fd_check)


def study_summary(rows: list[dict]) -> dict:
    ok = [r for r in rows if r["status"] == "ok"]
    ratios = [r["ratio"] for r in ok if math.isfinite(r["ratio"])]
    return {
        "controllers": len(rows),
        "flagged": len(rows) - len(ok),
        "cap": max((r["cap"] for r in rows), default=None),
        "mean_ratio": float(np.mean(ratios)) if ratios else None,
        "median_ratio": float(np.median(ratios)) if ratios else None,
        "bound_violations": sum(1 for r in rows if not r["holds"]),
    }


def analysis_csv(rows: list[dict], n_indices: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "infidelity"] + [f"abs_d{mu}F" for mu in range(n_indices)] + ["beta", "status"])
    for r in rows:
        sens = r["sensitivities"]
        w.writerow([r["id"], fmt(r["infidelity"])] + [fmt(abs(sens[str(mu)])) for mu in range(n_indices)]
                   + [fmt(r["beta"]), r["status"]])
    return buf.getvalue()


def sensitivity_csv(rows: list[dict], n_indices: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["id", "fidelity"] + [f"d{mu}F" for mu in range(n_indices)]
    fd = rows and "finite_difference" in rows[0]
    if fd:
        head += [f"fd_d{mu}F" for mu in range(n_indices)] + [f"fd_rel_err{mu}" for mu in range(n_indices)]
    head += ["cap", "z_l1", "beta", "ratio"]
    w.writerow(head)
    for r in rows:
        sens = r["sensitivities"]
        line = [r["id"], fmt(r["fidelity"])] + [fmt(sens[str(mu)]) for mu in range(n_indices)]
        if fd:
            line += [fmt(r["finite_difference"][str(mu)]["estimate"]) for mu in range(n_indices)]
            line += [fmt(r["finite_difference"][str(mu)]["relative_error"]) for mu in range(n_indices)]
        line += [fmt(r["cap"]), fmt(r["z_l1"]), fmt(r["beta"]), fmt(r["ratio"])]
        w.writerow(line)
    return buf.getvalue()


def cmd_analyze(args) -> int:
    started = _now()
    archive = load_archive(args.archive)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(args.archive, i, args.fd_check) for i in range(len(archive.controllers))]
    workers = worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_analyze_job, jobs))
    else:
        rows = [analyze_controller(archive, i, args.fd_check) for i in range(len(jobs))]
    n_idx = archive.system.n_controls + 1
    paths = [out / "analysis.csv", out / "sensitivity.csv", out / "reports.json", out / "summary.json"]
    paths[0].write_text(analysis_csv(rows, n_idx))
    paths[1].write_text(sensitivity_csv(rows, n_idx))
    paths[2].write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    summary = study_summary(rows)
    paths[3].write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    write_manifest(out, "analyze", paths, started, str(args.archive))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_FLAGGED if summary["flagged"] else EXIT_OK


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------


def plot_from_csv(text: str) -> str:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise ValueError("CSV has no data rows")
    keys = [k for k in rows[0] if k.startswith("abs_d")]
    series = {k.replace("abs_", "|").replace("F", "F|"): [float(r[k]) for r in rows] for k in keys}
    series["beta"] = [float(r["beta"]) for r in rows]
    return scatter_svg(
        [float(r["infidelity"]) for r in rows],
        series,
        xlabel="infidelity 1 - F",
        ylabel="sensitivity magnitude",
        title="differential sensitivity and worst-case bound",
        bound_key="beta",
    )


def cmd_plot(args) -> int:
    svg = plot_from_csv(Path(args.csv).read_text())
    Path(args.out).write_text(svg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# convergence
# ---------------------------------------------------------------------------


def load_convergence_config(path) -> tuple[ControlSystem, list, TimeGrid, int, int]:
    """JSON with ``system`` (preset name or system object), ``fields``, ``t_final``,
    ``steps`` and optional ``anharmonicity``, ``reference_factor`` (64), ``halvings`` (3)."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON: {err.msg} (column {err.colno})", line=err.lineno) from None
    for key in ("system", "fields", "t_final", "steps"):
        if key not in data:
            raise ConfigError("missing", key)
    choice = data["system"]
    if choice == "spin_ring":
        system = preset_spin_ring()[0]
    elif choice == "transmon":
        system = preset_transmon(float(data.get("anharmonicity", 1.0)))[0]
    elif isinstance(choice, dict):
        system = ControlSystem.from_dict(choice)
    else:
        raise ConfigError("must be 'spin_ring', 'transmon' or a system object", "system")
    fields = [field_from_dict(f) for f in data["fields"]]
    if len(fields) != system.n_controls:
        raise ConfigError(f"expected {system.n_controls} fields", "fields")
    grid = TimeGrid(float(data["t_final"]), int(data["steps"]))
    return system, fields, grid, int(data.get("reference_factor", 64)), int(data.get("halvings", 3))


FLOOR = 1e-12


def convergence_rows(system, fields, grid: TimeGrid, reference_factor: int = 64, halvings: int = 3) -> list[dict]:
    """Spectral-norm errors against a fine-step reference for ``h, h/2, ..., h/2^halvings``."""
    U_ref = final_propagator(system, fields, grid.refined(reference_factor))
    rows, prev = [], None
    for i in range(halvings + 1):
        g = grid.refined(2**i)
        err = float(np.linalg.norm(final_propagator(system, fields, g) - U_ref, 2))
        row = {"h": g.h, "steps": g.steps, "error": err, "ratio": float("nan"), "order": float("nan"), "status": "ok"}
        if prev is not None:
            if prev < FLOOR and err < FLOOR:
                row["status"] = "floor"
            else:
                row["ratio"] = prev / err if err > 0 else float("inf")
                row["order"] = math.log2(row["ratio"]) if err > 0 else float("inf")
                if err >= prev:
                    row["status"] = "warning:non-monotone"
        elif err < FLOOR:
            row["status"] = "floor"
        rows.append(row)
        prev = err
    return rows


def cmd_convergence(args) -> int:
    system, fields, grid, ref, halvings = load_convergence_config(args.config)
    rows = convergence_rows(system, fields, grid, ref, halvings)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["h", "steps", "error", "ratio", "order", "status"])
    for r in rows:
        w.writerow([fmt(r["h"]), r["steps"], fmt(r["error"]), fmt(r["ratio"]), fmt(r["order"]), r["status"]])
    Path(args.out).write_text(buf.getvalue())
    flagged = any(r["status"].startswith("warning") for r in rows)
    return EXIT_FLAGGED if flagged else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="magsens", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="multi-start controller synthesis")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("analyze", help="sensitivities and worst-case bound for an archive")
    p.add_argument("--archive", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fd-check", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plot", help="log-log scatter of an analysis CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("convergence", help="integrator error versus step size")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convergence)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
