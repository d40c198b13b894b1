"""Command-line entry point: ``run``, ``report``, ``check`` and ``nstar``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import platform
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import __version__, agent, envs, gp, suites
from .planner import PlannerConfig

logger = logging.getLogger("safeexplore")

OUT_ENV = "SAFEEXPLORE_OUT"
METRICS_HEADER = ["seed", "episode", "phase", "J_r", "J_c", "cumulative_cost",
                  "zero_shot_J_r", "zero_shot_J_c", "wall_ms"]


class ConfigError(ValueError):
    pass


# -- configuration ----------------------------------------------------------------------------
# flat config key -> PlannerConfig field
_PLANNER_KEYS = {
    "plan_horizon": "horizon", "particles": "particles", "population": "population", "elites": "elites",
    "icem_iters": "icem_iters", "noise_beta": "noise_beta", "init_std": "init_std", "momentum": "momentum",
    "penalty": "penalty", "objective_agg": "objective_agg", "keep_elites": "keep_elites",
    "fallback": "fallback", "particle_scale": "particle_scale",
}
_AGENT_KEYS = ("n_star", "replan_every", "lengthscales", "signal_std", "kernel", "noise_var", "beta",
               "beta_schedule", "delta", "prior_mean", "gp_stride", "gp_max_points", "exploit_updates",
               "warmup")
_ENV_KEYS = ("horizon", "noise_std", "cost_threshold")

# key -> (type, default); None defaults come from the chosen profile or stay unset
SCHEMA = {
    "env": (str, "pendulum"),
    "mode": (str, "actsafe"),
    "profile": (str, "desk"),
    "seeds": (list, [0, 1, 2, 3, 4]),
    "episodes": (int, 10),
    "n_star": (int, 10),
    "eval_episodes": (int, 1),
    "record_timing": (bool, False),
    # environment overrides
    "horizon": (int, None),
    "noise_std": (float, None),
    "cost_threshold": (float, None),
    # model
    "kernel": (str, None),
    "signal_std": (float, None),
    "lengthscales": (list, None),
    "noise_var": (float, None),
    "beta": (float, None),
    "beta_schedule": (str, None),
    "delta": (float, None),
    "prior_mean": (str, None),
    "gp_stride": (int, None),
    "gp_max_points": (int, None),
    # agent
    "replan_every": (int, None),
    "exploit_updates": (bool, None),
    "warmup": (bool, None),
    # planner
    "plan_horizon": (int, None),
    "particles": (int, None),
    "population": (int, None),
    "elites": (int, None),
    "icem_iters": (int, None),
    "noise_beta": (float, None),
    "init_std": (float, None),
    "momentum": (float, None),
    "penalty": (float, None),
    "objective_agg": (str, None),
    "keep_elites": (float, None),
    "fallback": (str, None),
    "particle_scale": (float, None),
}


@dataclass(frozen=True)
class ExperimentConfig:
    env: str
    mode: str
    seeds: tuple
    spec: envs.EnvSpec
    agent: agent.AgentConfig
    eval_episodes: int
    record_timing: bool
    resolved: dict  # canonical flat form, every key present


def _key_line(text: str, key: str) -> int | None:
    for i, line in enumerate(text.splitlines(), 1):
        if re.match(rf"\s*{re.escape(key)}\s*=", line):
            return i
    return None


def _where(text, key):
    line = _key_line(text, key)
    return f" (line {line})" if line else ""


def _coerce(key, value, typ, text):
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is list and isinstance(value, list):
        return value
    if isinstance(value, typ) and not (typ is int and isinstance(value, bool)):
        return value
    raise ConfigError(f"key {key!r}{_where(text, key)}: expected {typ.__name__}, got {type(value).__name__}")


def _profile_defaults(env: str, profile: str) -> dict:
    """Flat defaults for model, agent and planner keys under a profile."""
    base_agent = agent.AgentConfig()
    kw = agent.desk_profile(env) if profile == "desk" else {}
    cfg = replace(base_agent, **kw)
    out = {k: getattr(cfg, k) for k in _AGENT_KEYS}
    out["lengthscales"] = list(out["lengthscales"]) if out["lengthscales"] is not None else None
    for flat, attr in _PLANNER_KEYS.items():
        out[flat] = getattr(cfg.planner, attr)
    return out


def parse_config(text: str) -> ExperimentConfig:
    """Parse and fully resolve a flat TOML experiment configuration."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    for key, value in raw.items():
        if isinstance(value, dict):
            raise ConfigError(f"table {key!r}: tables are not allowed, the config is flat")
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}{_where(text, key)}")
    vals = {k: _coerce(k, v, SCHEMA[k][0], text) for k, v in raw.items()}
    env = vals.get("env", SCHEMA["env"][1])
    if env not in envs.ENVS:
        raise ConfigError(f"key 'env'{_where(text, 'env')}: unknown environment {env!r}")
    mode = vals.get("mode", SCHEMA["mode"][1])
    if mode not in agent.MODES:
        raise ConfigError(f"key 'mode'{_where(text, 'mode')}: mode must be one of {agent.MODES}")
    profile = vals.get("profile", SCHEMA["profile"][1])
    if profile not in ("desk", "full"):
        raise ConfigError(f"key 'profile'{_where(text, 'profile')}: profile must be 'desk' or 'full'")
    seeds = vals.get("seeds", SCHEMA["seeds"][1])
    if not seeds:
        raise ConfigError(f"no seeds given{_where(text, 'seeds')}")
    if not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        raise ConfigError(f"key 'seeds'{_where(text, 'seeds')}: seeds must be nonnegative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"key 'seeds'{_where(text, 'seeds')}: duplicate seeds")

    resolved = {k: d for k, (_, d) in SCHEMA.items()}
    resolved.update(_profile_defaults(env, profile))
    base_spec = envs.make_env(env)
    for k in _ENV_KEYS:
        resolved[k] = getattr(base_spec, k)
    resolved.update(vals)
    resolved["seeds"] = sorted(seeds)
    if resolved["lengthscales"] is not None:
        resolved["lengthscales"] = [float(x) for x in resolved["lengthscales"]]
    try:
        spec = envs.make_env(env, **{k: resolved[k] for k in _ENV_KEYS})
        planner_cfg = PlannerConfig(**{attr: resolved[flat] for flat, attr in _PLANNER_KEYS.items()})
        agent_kw = {k: resolved[k] for k in _AGENT_KEYS}
        if agent_kw["lengthscales"] is not None:
            agent_kw["lengthscales"] = tuple(agent_kw["lengthscales"])
            if len(agent_kw["lengthscales"]) != spec.d_model + spec.d_a:
                raise ValueError(f"lengthscales needs {spec.d_model + spec.d_a} entries")
        if resolved["plan_horizon"] > spec.horizon:
            raise ValueError("plan_horizon must not exceed the episode horizon")
        if resolved["eval_episodes"] < 0:
            raise ValueError("eval_episodes must be nonnegative")
        acfg = agent.AgentConfig(mode=mode, total_episodes=resolved["episodes"], planner=planner_cfg, **agent_kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    resolved = {k: v for k, v in sorted(resolved.items()) if v is not None}
    return ExperimentConfig(env, mode, tuple(resolved["seeds"]), spec, acfg, resolved["eval_episodes"],
                            resolved["record_timing"], resolved)


def canonical_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.resolved)


# -- run ------------------------------------------------------------------------------------------
def passive_return(spec: envs.EnvSpec) -> float:
    """Noise-free return of the zero-action policy from the initial state."""
    traj = envs.rollout_true(spec.with_overrides(noise_std=0.0), lambda s: np.zeros(spec.d_a), rng=0)
    return traj.J_r


@dataclass
class SeedResult:
    seed: int
    rows: list
    trajectories: list
    error: str | None
    wall_s: float


def run_seed(cfg: ExperimentConfig, seed: int) -> SeedResult:
    t0 = time.perf_counter()
    spec, acfg = cfg.spec, cfg.agent
    zero_shot = {}

    def hook(model, rec):
        if rec.episode == acfg.n_star and cfg.eval_episodes > 0:
            ev = agent.zero_shot_eval(model, spec, acfg.planner, cfg.eval_episodes, seed, acfg.replan_every)
            zero_shot[rec.episode] = ev

    error = None
    try:
        records = agent.run_agent(spec, acfg, seed, on_episode=hook)
    except (gp.GpFitError, envs.RolloutError, FloatingPointError) as exc:
        records, error = [], f"{type(exc).__name__}: {exc}"
    rows, trajs = [], []
    for rec in records:
        ev = zero_shot.get(rec.episode)
        rows.append({
            "seed": seed, "episode": rec.episode, "phase": rec.phase,
            "J_r": rec.J_r, "J_c": rec.J_c, "cumulative_cost": rec.cumulative_cost,
            "zero_shot_J_r": ev.mean_J_r if ev else None, "zero_shot_J_c": ev.mean_J_c if ev else None,
            "wall_ms": round(rec.wall_time * 1000) if cfg.record_timing else None,
        })
        t = rec.trajectory
        trajs.append({"seed": seed, "episode": rec.episode, "states": t.states.tolist(),
                      "actions": t.actions.tolist(), "costs": t.costs.tolist()})
        if rec.error and error is None:
            error = rec.error
    return SeedResult(seed, rows, trajs, error, time.perf_counter() - t0)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(path: Path, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in sorted(rows, key=lambda r: (r["seed"], r["episode"])):
        w.writerow([_fmt(r[k]) for k in METRICS_HEADER])
    path.write_text(buf.getvalue())


def write_artifacts(out: Path, cfg: ExperimentConfig, results: list[SeedResult], started: float):
    out.mkdir(parents=True, exist_ok=True)
    results = sorted(results, key=lambda r: r.seed)
    write_metrics(out / "metrics.csv", [row for r in results for row in r.rows])
    with open(out / "trajectories.jsonl", "w") as fh:
        for r in results:
            for t in r.trajectories:
                fh.write(json.dumps(t, separators=(",", ":")) + "\n")
    (out / "config.resolved").write_text(canonical_config(cfg))
    meta = {
        "seeds": list(cfg.seeds),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "seed_wall_s": {str(r.seed): round(r.wall_s, 3) for r in results},
        "errors": {str(r.seed): r.error for r in results if r.error},
    }
    (out / "run.meta").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def cmd_run(args) -> int:
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        cfg = parse_config(text)
    except ConfigError as exc:
        print(f"error: {args.config}: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else default_out_root() / f"{cfg.env}-{cfg.mode}"
    started = time.time()
    if args.jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        results = [run_seed(cfg, s) for s in cfg.seeds]
    write_artifacts(out, cfg, results, started)
    failed = [r for r in results if r.error]
    for r in failed:
        print(f"error: seed {r.seed}: {r.error}", file=sys.stderr)
    print(f"wrote {out}")
    return 1 if failed else 0


# -- report ---------------------------------------------------------------------------------------
RUN_FILES = ("metrics.csv", "trajectories.jsonl", "config.resolved", "run.meta")
SUMMARY_HEADER = ["mode", "env", "seeds", "final_cost_median", "final_cost_se",
                  "zero_shot_norm_median", "zero_shot_norm_se"]


def _se(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0


def load_run(d: Path) -> dict:
    cfg = tomli.loads((d / "config.resolved").read_text())
    with open(d / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    by_seed: dict[int, list] = {}
    for r in rows:
        by_seed.setdefault(int(r["seed"]), []).append(r)
    spec = envs.make_env(cfg["env"], **{k: cfg[k] for k in _ENV_KEYS if k in cfg})
    offset = passive_return(spec)
    final_cost, perf = [], []
    for seed in sorted(by_seed):
        rs = sorted(by_seed[seed], key=lambda r: int(r["episode"]))
        final_cost.append(float(rs[-1]["cumulative_cost"]))
        zs = [float(r["zero_shot_J_r"]) for r in rs if r["zero_shot_J_r"] != ""]
        if zs:
            perf.append(zs[-1] - offset)
    return {"mode": cfg["mode"], "env": cfg["env"], "final_cost": final_cost, "performance": perf}


def summarize(runs: list[dict]) -> list[dict]:
    """Per-mode summary; performance is normalized by the best mean across modes."""
    groups: dict[tuple, dict] = {}
    for r in runs:
        g = groups.setdefault((r["env"], r["mode"]), {"final_cost": [], "performance": []})
        g["final_cost"] += r["final_cost"]
        g["performance"] += r["performance"]
    out = []
    for env in sorted({e for e, _ in groups}):
        modes = {m: g for (e, m), g in groups.items() if e == env}
        means = [np.mean(g["performance"]) for g in modes.values() if g["performance"]]
        best = max(means) if means else float("nan")
        for mode in sorted(modes):
            g = modes[mode]
            norm = np.asarray(g["performance"], dtype=float) / best if best and best > 0 else np.array([])
            out.append({
                "mode": mode, "env": env, "seeds": len(g["final_cost"]),
                "final_cost_median": float(np.median(g["final_cost"])), "final_cost_se": _se(g["final_cost"]),
                "zero_shot_norm_median": float(np.median(norm)) if len(norm) else None,
                "zero_shot_norm_se": _se(norm) if len(norm) else None,
            })
    return out


def cmd_report(args) -> int:
    root = Path(args.dir)
    if not root.is_dir():
        print(f"error: {root} is not a directory", file=sys.stderr)
        return 1
    candidates = sorted({p.parent for name in RUN_FILES for p in root.rglob(name)})
    missing = [str(d / f) for d in candidates for f in RUN_FILES if not (d / f).exists()]
    if not candidates:
        missing = [str(root / f) for f in RUN_FILES]
    if missing:
        print("error: missing artifacts:\n  " + "\n  ".join(missing), file=sys.stderr)
        return 1
    try:
        runs = [load_run(d) for d in candidates]
    except (KeyError, ValueError, tomli.TOMLDecodeError) as exc:
        print(f"error: unreadable artifacts: {exc}", file=sys.stderr)
        return 1
    summary = summarize(runs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for s in summary:
        w.writerow([_fmt(s[k]) for k in SUMMARY_HEADER])
    (root / "summary.csv").write_text(buf.getvalue())
    print(buf.getvalue(), end="")
    print("# zero-shot performance = J_r minus the passive zero-action return, "
          "divided by the best mean across modes of the same env")
    return 0


# -- check / nstar --------------------------------------------------------------------------------
def cmd_check(args) -> int:
    results = suites.run_suite(args.suite, args.seed)
    for r in results:
        print(json.dumps(r.to_json()))
    return 0 if all(r.passed for r in results if r.gating) else 1


_GAMMA = {
    "log": lambda d: (lambda n: math.log1p(n)),
    "se": lambda d: (lambda n: math.log1p(n) ** (d + 1)),
    "linear": lambda d: (lambda n: d * math.log1p(n)),
}


def cmd_nstar(args) -> int:
    beta = args.beta
    gamma = _GAMMA[args.gamma](args.gamma_dim if args.gamma_dim is not None else args.ds + 1)
    try:
        C = gp.complexity_constant(args.ds, args.c_max, args.r_max, args.sigma0, args.reading, sigma=args.sigma)
        n = gp.sample_complexity_n_star(args.H, args.T, args.c_max, args.r_max, args.sigma0, args.sigma,
                                        args.ds, args.eps, lambda n: beta, gamma, reading=args.reading,
                                        n_limit=args.n_limit)
    except gp.UnboundedNStar as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    rhs = gp.n_star_rhs(args.H, args.T, C, args.sigma0, args.sigma, args.ds, args.eps)
    print(json.dumps({"n_star": n, "C": C, "rhs": rhs}))
    return 0


# -- entry point ------------------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="safeexplore", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run a multi-seed experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<env>-<mode>)")
    r.add_argument("--jobs", type=int, default=1)
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("report", help="summarize run directories")
    rp.add_argument("--dir", required=True)
    rp.set_defaults(func=cmd_report)

    c = sub.add_parser("check", help="run numerical check suites")
    c.add_argument("--suite", required=True, choices=suites.SUITES + ("all",))
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)

    n = sub.add_parser("nstar", help="smallest n satisfying the sample-complexity inequality")
    n.add_argument("--eps", type=float, required=True)
    n.add_argument("--H", type=int, required=True)
    n.add_argument("--T", type=int, required=True)
    n.add_argument("--ds", type=int, default=1)
    n.add_argument("--c-max", type=float, default=1.0)
    n.add_argument("--r-max", type=float, default=1.0)
    n.add_argument("--sigma0", type=float, default=1.0)
    n.add_argument("--sigma", type=float, default=1.0)
    n.add_argument("--beta", type=float, default=2.0, help="constant calibration scale")
    n.add_argument("--gamma", choices=sorted(_GAMMA), default="log", help="information-gain schedule")
    n.add_argument("--gamma-dim", type=int, help="input dimension for the se/linear schedules")
    n.add_argument("--reading", choices=("unscaled", "noise-scaled"), default="unscaled")
    n.add_argument("--n-limit", type=int, default=10**12)
    n.set_defaults(func=cmd_nstar)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
