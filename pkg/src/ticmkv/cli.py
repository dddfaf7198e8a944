"""Command-line entry points: end-to-end runs and thin solver wrappers.

Exit codes: 0 all requested work passed; 2 configuration error; 3 numerical
divergence or non-convergence (history still written); 4 a verification check
failed (reports still written).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import rng
from .config import ConfigError, RunConfig, load_run_config
from .equilibrium import (
    DivergenceError,
    EquilibriumOptions,
    EquilibriumResult,
    consistency_check,
    contraction_report,
    history_to_csv,
    solve_equilibrium,
)
from .hjb1d import GridStrategy
from .measures import curve_to_csv, moment_curve_from_csv
from .model import ParameterError, build_general_catalog, build_lq_catalog
from .riccati import AffineStrategy, riccati_diagonal_to_csv, solve_riccati_family
from .simulate import (
    SimOptions,
    SimulationBlowUp,
    gaussian_sampler,
    simulate_mckean_vlasov,
    write_paths,
)
from .strategies import zero_strategy
from .verify import McOptions, spike_test

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_VERIFY = 4

SEED_ENV_VAR = "TIC_MKV_SEED"
CONSISTENCY_SEED_TAG = 7


def _resolve_seed(flag_value: int | None, fallback: int | None = None) -> int | None:
    """Flag wins over the environment variable, which wins over the fallback."""
    if flag_value is not None:
        return flag_value
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"bad {SEED_ENV_VAR} value {env!r}") from exc
    return fallback


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_summary(outdir: Path, summary: dict, files: list[Path]) -> None:
    summary["manifest"] = {f.name: _sha256(f) for f in sorted(files)}
    with open(outdir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _bundle_core(outdir: Path, cfg: RunConfig, result: EquilibriumResult) -> list[Path]:
    outdir.mkdir(parents=True, exist_ok=True)
    files = []
    echo = outdir / "config-echo.toml"
    echo.write_bytes(cfg.raw_bytes)
    files.append(echo)
    curve_path = outdir / "curve.csv"
    curve_to_csv(result.mu_star, curve_path, functionals=cfg.model.functionals)
    files.append(curve_path)
    strategy_path = outdir / "strategy.csv"
    result.strategy_star.to_csv(strategy_path)
    files.append(strategy_path)
    history_path = outdir / "history.csv"
    history_to_csv(result.history, history_path)
    files.append(history_path)
    return files


def _summary_base(cfg: RunConfig, result: EquilibriumResult | None) -> dict:
    summary = {
        "model": {
            "kind": cfg.model_kind,
            "label": cfg.model.label,
            "fingerprint": hashlib.sha256(cfg.raw_bytes).hexdigest(),
        },
        "seeds": {"master": cfg.seed},
        "tolerances": {"tol_fp": cfg.tol_fp, "tol_fp_rel": cfg.tol_fp_rel},
        "numerics": {
            "n_particles": cfg.n_particles,
            "n_steps": cfg.n_steps,
            "backend": cfg.backend,
        },
        "converged": bool(result.converged) if result is not None else False,
        "iterations": result.iterations if result is not None else 0,
        "checks": {},
    }
    if result is not None:
        summary["tolerances"]["tol_fp_effective"] = result.tol_fp
        summary["strategy_kind"] = (
            "affine" if isinstance(result.strategy_star, AffineStrategy) else "grid"
        )
        if len(result.history) >= 2:
            rep = contraction_report(result.history)
            summary["fitted_rate"] = rep.fitted_rate
            summary["is_contraction"] = rep.is_contraction
        else:
            summary["fitted_rate"] = None
            summary["is_contraction"] = None
    return summary


def _cmd_run(args) -> int:
    try:
        seed = _resolve_seed(args.seed)
        cfg = load_run_config(args.config, seed_override=seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    outdir = Path(args.out if args.out else cfg.output_dir)
    sim = SimOptions(
        n_particles=cfg.n_particles, n_steps=cfg.n_steps, horizon=cfg.model.horizon, seed=cfg.seed
    )
    opts = EquilibriumOptions(
        sim=sim,
        tol_fp=cfg.tol_fp,
        tol_fp_rel=cfg.tol_fp_rel,
        max_iter=cfg.max_iter,
        backend=cfg.backend,
        damping=cfg.damping,
        x_domain=cfg.x_domain,
        k_x=cfg.k_x,
    )
    try:
        result = solve_equilibrium(cfg.model, cfg.init_sampler, opts)
    except DivergenceError as exc:
        outdir.mkdir(parents=True, exist_ok=True)
        history_path = outdir / "history.csv"
        history_to_csv(exc.history, history_path)
        echo = outdir / "config-echo.toml"
        echo.write_bytes(cfg.raw_bytes)
        summary = _summary_base(cfg, None)
        summary["error"] = str(exc)
        _write_summary(outdir, summary, [history_path, echo])
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except SimulationBlowUp as exc:
        print(f"blow-up: {exc}", file=sys.stderr)
        return EXIT_DIVERGED

    files = _bundle_core(outdir, cfg, result)
    summary = _summary_base(cfg, result)

    if not result.converged:
        _write_summary(outdir, summary, files)
        print(f"not converged after {result.iterations} iterations", file=sys.stderr)
        return EXIT_DIVERGED

    all_pass = True
    if "consistency" in cfg.checks:
        fresh = rng.derive_seed(cfg.seed, CONSISTENCY_SEED_TAG, 0)
        report = consistency_check(result, cfg.model, cfg.init_sampler, fresh)
        summary["checks"]["consistency"] = {
            "m_distance": report.m_distance,
            "tol": report.tol,
            "passed": report.passed,
        }
        summary["seeds"]["consistency"] = fresh
        all_pass = all_pass and report.passed
    if "spike" in cfg.checks:
        spike = spike_test(
            cfg.model,
            result.strategy_star,
            result.mu_star,
            eps_ladder=cfg.eps_ladder,
            mc=McOptions(n_paths=cfg.spike_paths, seed=cfg.seed),
        )
        spike_path = outdir / "spike.json"
        spike.to_json(spike_path)
        files.append(spike_path)
        summary["checks"]["spike"] = {
            "overall_pass": spike.overall_pass,
            "n_probes": len(spike.probes),
        }
        all_pass = all_pass and spike.overall_pass
    if cfg.dump_paths:
        _, paths = simulate_mckean_vlasov(cfg.model, result.strategy_star, cfg.init_sampler, sim)
        dump = outdir / "paths.bin"
        write_paths(paths, dump)
        files.append(dump)

    _write_summary(outdir, summary, files)
    print(f"bundle written to {outdir}")
    return EXIT_OK if all_pass else EXIT_VERIFY


# ---------------------------------------------------------------------------
# thin subcommands
# ---------------------------------------------------------------------------

def _parse_params(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--param expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        try:
            out[key] = float(value)
        except ValueError:
            out[key] = value
    return out


def _synth_config(kind: str, name: str, params: dict, args, backend: str) -> bytes:
    lines = [f"seed = {args.seed if args.seed is not None else 0}", "", "[model]"]
    lines.append(f'kind = "{kind}"')
    lines.append(f'name = "{name}"')
    if params:
        lines.append("")
        lines.append("[model.params]")
        for key, value in sorted(params.items()):
            lines.append(f"{key} = {value}")
    lines += [
        "",
        "[initial]",
        'law = "gaussian"',
        f"mean = {args.init_mean}",
        f"sd = {args.init_sd}",
        "",
        "[numerics]",
        f"n_particles = {args.n}",
        f"n_steps = {args.k}",
        f'backend = "{backend}"',
    ]
    if getattr(args, "kx", None) is not None:
        lines.append(f"k_x = {args.kx}")
    lines.append("")
    return ("\n".join(lines)).encode()


def _solve_common(args, model, backend: str, kind: str, name: str, params: dict) -> int:
    seed = _resolve_seed(args.seed, 0)
    sim = SimOptions(n_particles=args.n, n_steps=args.k, horizon=model.horizon, seed=seed)
    opts = EquilibriumOptions(
        sim=sim,
        tol_fp_rel=args.tol_rel,
        max_iter=args.max_iter,
        backend=backend,
        damping=args.damping,
        k_x=getattr(args, "kx", 200) or 200,
        x_domain=(args.x_lo, args.x_hi)
        if getattr(args, "x_lo", None) is not None and getattr(args, "x_hi", None) is not None
        else None,
    )
    sampler = gaussian_sampler(args.init_mean, args.init_sd)
    cfg = RunConfig(
        model=model,
        model_kind=kind,
        init_sampler=sampler,
        seed=seed,
        n_particles=args.n,
        n_steps=args.k,
        max_iter=args.max_iter,
        tol_fp=None,
        tol_fp_rel=args.tol_rel,
        backend=backend,
        damping=args.damping,
        k_x=getattr(args, "kx", 200) or 200,
        x_domain=opts.x_domain,
        spike_paths=4000,
        eps_ladder=None,
        checks=(),
        output_dir=args.out,
        dump_paths=False,
        raw_bytes=_synth_config(kind, name, params, args, backend),
    )
    try:
        result = solve_equilibrium(model, sampler, opts)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    files = _bundle_core(Path(args.out), cfg, result)
    _write_summary(Path(args.out), _summary_base(cfg, result), files)
    print(f"bundle written to {args.out}")
    return EXIT_OK if result.converged else EXIT_DIVERGED


def _cmd_solve_lq(args) -> int:
    try:
        params = _parse_params(args.param)
        model = build_lq_catalog(args.catalog, **params)
    except (ConfigError, ParameterError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return _solve_common(args, model, "riccati", "lq_catalog", args.catalog, params)


def _cmd_solve_hjb1d(args) -> int:
    try:
        params = _parse_params(args.param)
        model = build_general_catalog(args.model, **params)
    except (ConfigError, ParameterError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return _solve_common(args, model, "hjb1d", "general_catalog", args.model, params)


def _cmd_simulate(args) -> int:
    try:
        params = _parse_params(args.param)
        model = build_general_catalog(args.model, **params)
    except (ConfigError, ParameterError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seed = _resolve_seed(args.seed, 0)
    sim = SimOptions(n_particles=args.n, n_steps=args.k, horizon=model.horizon, seed=seed)
    sampler = gaussian_sampler(args.init_mean, args.init_sd)
    try:
        curve, _ = simulate_mckean_vlasov(model, zero_strategy(), sampler, sim)
    except SimulationBlowUp as exc:
        print(f"blow-up: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    curve_to_csv(curve, args.out, functionals=model.functionals)
    print(f"curve written to {args.out}")
    return EXIT_OK


def _cmd_riccati(args) -> int:
    try:
        params = _parse_params(args.param)
        model = build_lq_catalog(args.catalog, **params)
    except (ConfigError, ParameterError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seed = _resolve_seed(args.seed, 0)
    from .measures import EmpiricalMeasure, constant_curve, time_grid

    gen = rng.generator(seed, rng.INIT)
    cloud = gaussian_sampler(args.init_mean, args.init_sd)(gen, args.n)
    if cloud.shape[1] != model.dim:
        cloud = np.tile(cloud, (1, model.dim))
    mu = constant_curve(time_grid(0.0, model.horizon, args.k), EmpiricalMeasure(cloud))
    fam = solve_riccati_family(model, mu)
    riccati_diagonal_to_csv(fam, args.out)
    print(f"diagonal written to {args.out}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    bundle = Path(args.bundle)
    try:
        summary = json.loads((bundle / "summary.json").read_text())
        cfg = load_run_config(bundle / "config-echo.toml", seed_override=_resolve_seed(args.seed))
        mom = moment_curve_from_csv(bundle / "curve.csv")
        if summary.get("strategy_kind") == "grid":
            strategy = GridStrategy.from_csv(bundle / "strategy.csv")
        else:
            strategy = AffineStrategy.from_csv(bundle / "strategy.csv")
    except (OSError, KeyError, ConfigError, json.JSONDecodeError) as exc:
        print(f"config error: cannot load bundle: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    spike = spike_test(
        cfg.model,
        strategy,
        mom,
        eps_ladder=cfg.eps_ladder,
        mc=McOptions(n_paths=cfg.spike_paths, seed=cfg.seed),
    )
    stored = summary.get("checks", {}).get("spike", {}).get("overall_pass")
    out = {
        "overall_pass": spike.overall_pass,
        "matches_stored": (stored == spike.overall_pass) if stored is not None else None,
        "n_probes": len(spike.probes),
    }
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK if spike.overall_pass else EXIT_VERIFY


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common_solve_args(sub, default_n=4000, default_k=100):
    sub.add_argument("--n", type=int, default=default_n, help="particle count")
    sub.add_argument("--k", type=int, default=default_k, help="time steps")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--init-mean", type=float, default=1.0)
    sub.add_argument("--init-sd", type=float, default=0.5)
    sub.add_argument("--param", action="append", help="catalog parameter key=value", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ticmkv",
        description="Closed-loop equilibria for time-inconsistent McKean-Vlasov control",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    run = subs.add_parser("run", help="config-driven pipeline: solve, consistency, spike")
    run.add_argument("config")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default=None, help="override the output directory")
    run.set_defaults(fn=_cmd_run)

    lq = subs.add_parser("solve-lq", help="solve an LQ catalog problem (riccati backend)")
    lq.add_argument("--catalog", required=True)
    _add_common_solve_args(lq)
    lq.add_argument("--tol-rel", type=float, default=1e-3)
    lq.add_argument("--max-iter", type=int, default=25)
    lq.add_argument("--damping", type=float, default=1.0)
    lq.add_argument("--out", default="ticmkv-out")
    lq.set_defaults(fn=_cmd_solve_lq)

    hjb = subs.add_parser("solve-hjb1d", help="solve a general catalog problem (grid backend)")
    hjb.add_argument("--model", required=True)
    _add_common_solve_args(hjb, default_k=200)
    hjb.add_argument("--kx", type=int, default=120)
    hjb.add_argument("--x-lo", type=float, default=None)
    hjb.add_argument("--x-hi", type=float, default=None)
    hjb.add_argument("--tol-rel", type=float, default=1e-3)
    hjb.add_argument("--max-iter", type=int, default=25)
    hjb.add_argument("--damping", type=float, default=1.0)
    hjb.add_argument("--out", default="ticmkv-out")
    hjb.set_defaults(fn=_cmd_solve_hjb1d)

    sim = subs.add_parser("simulate", help="simulate a general catalog model under zero control")
    sim.add_argument("--model", required=True)
    _add_common_solve_args(sim, default_n=10000, default_k=200)
    sim.add_argument("--out", default="curve.csv")
    sim.set_defaults(fn=_cmd_simulate)

    ric = subs.add_parser("riccati", help="two-time backward solve on a frozen initial-law curve")
    ric.add_argument("--catalog", required=True)
    _add_common_solve_args(ric, default_n=1000, default_k=2000)
    ric.add_argument("--out", default="riccati-diagonal.csv")
    ric.set_defaults(fn=_cmd_riccati)

    ver = subs.add_parser("verify", help="re-run the spike test on a saved bundle")
    ver.add_argument("--bundle", required=True)
    ver.add_argument("--seed", type=int, default=None)
    ver.set_defaults(fn=_cmd_verify)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
