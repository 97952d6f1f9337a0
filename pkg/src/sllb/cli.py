"""``sllb`` command-line front end."""

from __future__ import annotations

import argparse
import contextlib
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .fem import FeSpace, write_field
from .harness import (
    epsilon_convergence_study,
    estimate_rates,
    exceedance_probability,
    rate_base,
    run_coupled_study,
)
from .mesh import build_interval_mesh, build_structured_tri_mesh
from .noise import build_modes, flipped_stratonovich_sign, sample_path
from .scheme import StepFailure, run_trajectory

EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _g(x) -> str:
    return f"{x:.17g}"


def _open(path: Path):
    return open(path, "w", newline="\n")


def cmd_run(cfg: RunConfig, out: Path) -> int:
    d = cfg.dimension
    n = cfg["discretisation.n_cells"]
    lengths = cfg["model.lengths"]
    mesh = build_interval_mesh(lengths[0], n) if d == 1 else build_structured_tri_mesh(*lengths, n, n)
    params = cfg.run_parameters(mesh.h)
    space = FeSpace(mesh)
    model = cfg.model()
    modes = build_modes(model.noise_modes, model.decay, model.sigma, mesh)
    path = sample_path(cfg.seed, model.noise_modes, params.N, params.dt)
    try:
        rec = run_trajectory(model.initial, path.dW, params, space, modes)
    except StepFailure as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    header = cfg.header(__version__)
    out.mkdir(parents=True, exist_ok=True)
    with _open(out / "trajectory.csv") as f:
        rec.write_csv(f, header)
    if cfg["output.fields"]:
        fdir = out / "fields"
        fdir.mkdir(exist_ok=True)
        every = cfg["output.field_every"]
        for k in range(0, params.N + 1, every):
            with _open(fdir / f"step_{k:06d}.txt") as f:
                write_field(f, rec.field(k), version=__version__, config=cfg.digest()[:16], seed=cfg.seed, step=k)
    bad = int(np.sum(rec.energy_residuals > rec.energy_tolerances))
    stop = "none" if rec.stopped_at is None else str(rec.stopped_at)
    print(f"run: {params.N} steps, h={mesh.h:.4g}, R={params.R:.6g}, stopped_at={stop}, "
          f"energy-identity violations={bad}")
    print(f"wrote {out / 'trajectory.csv'}")
    return EXIT_OK


def _rate_line(report, axis):
    try:
        r = estimate_rates(report, axis)
    except ValueError as exc:
        return f"  slope vs {axis:>2}: n/a ({exc})"
    return f"  slope vs {axis:>2}: {r.slope:.4f} +/- {r.stderr:.4f}  95% CI [{r.ci_lo:.4f}, {r.ci_hi:.4f}]"


def cmd_convergence(cfg: RunConfig, out: Path, threads: int) -> int:
    plan, model = cfg.plan(), cfg.model()
    try:
        report = run_coupled_study(plan, model, workers=threads)
    except ValueError as exc:
        raise ConfigError("experiment", str(exc)) from None
    header = cfg.header(__version__)
    out.mkdir(parents=True, exist_ok=True)
    with _open(out / "report_paths.csv") as f:
        f.write(header + "\n")
        f.write("level,h,dt,path,e_max_sq,e_grad_sq,stopped_at\n")
        for p in np.flatnonzero(report.valid):
            for lv in range(report.n_levels):
                f.write(f"{lv},{_g(report.h[lv])},{_g(report.dt[lv])},{p},{_g(report.e_max_sq[p, lv])},"
                        f"{_g(report.e_grad_sq[p, lv])},{report.stopped_at[p, lv]}\n")
    eps = report.epsilon if model.dimension == 2 else None
    ex = exceedance_probability(report, plan.gamma, plan.beta,
                                rate_base(model.dimension, report.h, report.dt, plan.alpha), eps)
    valid = int(report.valid.sum())
    if valid:
        mean_max, mean_grad = report.mean("e_max_sq"), report.mean("e_grad_sq")
        lo, hi = report.bootstrap_ci("e_max_sq")
    else:
        mean_max = mean_grad = lo = hi = np.full(report.n_levels, np.nan)
    with _open(out / "report_aggregate.csv") as f:
        f.write(header + f" paths={valid} aborted={len(report.aborted)}\n")
        f.write("level,h,dt,mean_e_max_sq,mean_e_grad_sq,ci_lo,ci_hi,exceed_freq\n")
        for lv in range(report.n_levels):
            f.write(f"{lv},{_g(report.h[lv])},{_g(report.dt[lv])},{_g(mean_max[lv])},{_g(mean_grad[lv])},"
                    f"{_g(lo[lv])},{_g(hi[lv])},{_g(ex.frequency[lv])}\n")
    print(f"convergence: {valid} paths used, {len(report.aborted)} aborted")
    for msg in report.aborted:
        print(f"  aborted {msg}")
    print(" level        h         dt   mean e_max_sq  mean e_grad_sq  exceed")
    for lv in range(report.n_levels):
        tag = " (reference)" if lv == report.reference_level else ""
        print(f" {lv:5d} {report.h[lv]:9.4g} {report.dt[lv]:9.4g} {mean_max[lv]:14.6e} "
              f"{mean_grad[lv]:15.6e} {ex.frequency[lv]:7.3f}{tag}")
    if model.stopping == "none":
        print(" errors are unstopped (no stopping radius set)")
    if valid:
        print(_rate_line(report, "h"))
        print(_rate_line(report, "dt"))
    return EXIT_OK


def cmd_epsilon_study(cfg: RunConfig, out: Path, threads: int) -> int:
    model = cfg.model()
    try:
        rep = epsilon_convergence_study(
            cfg["epsilon_study.eps"], cfg["epsilon_study.n_modes"], cfg["epsilon_study.N"],
            cfg["epsilon_study.paths"], model, base_seed=cfg.seed, gamma=cfg["experiment.gamma"],
            beta=cfg["stopping.beta"], n_substeps=cfg["epsilon_study.substeps"], workers=threads,
        )
    except ValueError as exc:
        raise ConfigError("epsilon_study", str(exc)) from None
    ex = rep.exceedance()
    out.mkdir(parents=True, exist_ok=True)
    with _open(out / "epsilon_study.csv") as f:
        f.write(cfg.header(__version__) + "\n")
        f.write("epsilon,mean_sup_l2_sq,mean_grad_int,threshold,exceed_freq,ci_lo,ci_hi\n")
        for i, e in enumerate(rep.epsilons):
            f.write(f"{_g(e)},{_g(rep.mean_sup_l2_sq[i])},{_g(rep.mean_grad_int[i])},{_g(ex.threshold[i])},"
                    f"{_g(ex.frequency[i])},{_g(ex.ci_lo[i])},{_g(ex.ci_hi[i])}\n")
    print("   epsilon   mean sup|d|^2   mean int|grad d|^2  exceed")
    for i, e in enumerate(rep.epsilons):
        print(f" {e:9.4g} {rep.mean_sup_l2_sq[i]:15.6e} {rep.mean_grad_int[i]:20.6e} {ex.frequency[i]:7.3f}")
    return EXIT_OK


def cmd_validate(fault: str | None = None) -> int:
    from .validate import run_validation

    ctx = flipped_stratonovich_sign() if fault == "stratonovich-sign" else contextlib.nullcontext()
    with ctx:
        results = run_validation()
    width = max(len(name) for name, _, _ in results)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}")
    failed = [name for name, ok, _ in results if not ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_VALIDATION
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sllb", description="Stochastic LLB finite element experiments")
    parser.add_argument("--version", action="version", version=f"sllb {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "single trajectory with per-step CSV"),
                        ("convergence", "coupled multi-level error study"),
                        ("epsilon-study", "regularisation limit study (1D)")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--seed", type=int, help="override noise.seed")
        p.add_argument("--threads", type=int, default=1, help="worker processes for independent paths")
        p.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
    v = sub.add_parser("validate", help="run the built-in property suite")
    v.add_argument("--config", type=Path, help=argparse.SUPPRESS)
    v.add_argument("--inject-fault", choices=["stratonovich-sign"], help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate":
        return cmd_validate(args.inject_fault)
    if args.threads < 1:
        print("config error: --threads: must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    overrides = {} if args.seed is None else {"noise.seed": args.seed}
    try:
        cfg = load_config(args.config, overrides)
        out = args.out if args.out is not None else Path(cfg["output.dir"])
        if args.command == "run":
            return cmd_run(cfg, out)
        if args.command == "convergence":
            return cmd_convergence(cfg, out, args.threads)
        return cmd_epsilon_study(cfg, out, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
