"""Command-line entry point: ``mocha run|explore|oracle|eval-ncis|validate``.

Exit codes: 0 success, 1 other failure, 2 invalid config or input,
3 divergence, 4 instance too large, 5 zero behavior probability.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__, oracle
from .actor import DEFAULT_CLAMP_EPS, ActorConfig, run_mocha
from .critic import CriticConfig
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    InputError,
    InstanceTooLargeError,
    MochaError,
)
from .explorer import (
    DEFAULT_GAP_TOL,
    ExplorationSet,
    ExploreConfig,
    LoggedDataset,
    explore,
    frontier_csv,
    frontier_json,
    generate_weight_grid,
    ncis_evaluate,
)
from .momdp import TabularMOMDP, validate
from .policy import FeatureMap, SoftmaxPolicy

log = logging.getLogger("mocha")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED, EXIT_TOO_LARGE, EXIT_DATA = 0, 1, 2, 3, 4, 5
ORACLE_WHAT = ("values", "gradient", "fixed-point", "front", "gap", "mixing", "constants")
FEATURE_KINDS = ("tabular", "orthogonal_to_ones")


@dataclass
class ExperimentConfig:
    momdp_path: str
    actor: dict
    mode: str = "discounted"
    critic: dict = field(default_factory=dict)
    weights: dict = field(default_factory=lambda: {"grid": 1})
    seeds: List[int] = field(default_factory=lambda: [0])
    output_dir: str = "mocha_out"
    ablation: dict = field(default_factory=lambda: {"exact_gradients": False})
    features: Optional[str] = None  # "tabular", "orthogonal_to_ones" or a JSON path
    policy_theta: Optional[List[float]] = None
    clamp_eps: float = DEFAULT_CLAMP_EPS
    gap_tol: float = DEFAULT_GAP_TOL
    base_dir: str = field(default=".", compare=False, repr=False)

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f for f in cls.__dataclass_fields__ if f != "base_dir"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        for key in ("momdp_path", "actor"):
            if key not in data:
                raise ConfigError(f"config is missing {key!r}")
        cfg = cls(**data, base_dir=str(base_dir))
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from err
        return cls.from_dict(data, path.parent)

    def to_dict(self) -> dict:
        out = asdict(self)
        del out["base_dir"]
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def check(self) -> None:
        if self.mode not in oracle.SETTINGS:
            raise ConfigError(f"mode must be one of {oracle.SETTINGS}, got {self.mode!r}")
        if not self.seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        if not self.resolve(self.momdp_path).is_file():
            raise ConfigError(f"MOMDP file not found: {self.resolve(self.momdp_path)}")
        if self.features not in (None,) + FEATURE_KINDS and not self.resolve(self.features).is_file():
            raise ConfigError(f"feature file not found: {self.resolve(self.features)}")
        if set(self.weights) not in ({"grid"}, {"list"}):
            raise ConfigError('weights must be {"grid": resolution} or {"list": [[...], ...]}')
        if set(self.ablation) - {"exact_gradients"}:
            raise ConfigError("ablation accepts only 'exact_gradients'")
        self.critic_config()
        self.actor_config()

    def critic_config(self) -> CriticConfig:
        extra = set(self.critic) - {"beta", "N", "D", "beta_mu"}
        if extra:
            raise ConfigError(f"unknown critic keys: {sorted(extra)}")
        try:
            return CriticConfig(mode=self.mode, **self.critic)
        except TypeError as err:
            raise ConfigError(str(err)) from err

    def actor_config(self, **overrides) -> ActorConfig:
        allowed = {"alpha", "B", "T", "u", "J_ub", "eta_schedule", "eta", "gradient_mode", "qp_tol", "qp_max_iters"}
        extra = set(self.actor) - allowed
        if extra:
            raise ConfigError(f"unknown actor keys: {sorted(extra)}")
        if "alpha" not in self.actor:
            raise ConfigError("actor.alpha is required (no default step size)")
        kw = dict(self.actor)
        if kw.get("J_ub") is not None:
            kw["J_ub"] = tuple(kw["J_ub"])
        kw["exact_gradients"] = bool(self.ablation.get("exact_gradients", False))
        kw.update(overrides)
        return ActorConfig(**kw)

    def load_momdp(self) -> TabularMOMDP:
        path = self.resolve(self.momdp_path)
        try:
            momdp = TabularMOMDP.load(path)
        except (OSError, KeyError, ValueError) as err:
            raise ConfigError(f"cannot load MOMDP {path}: {err}") from err
        problems = validate(momdp)
        if problems:
            raise ConfigError(f"invalid MOMDP {path}: " + "; ".join(problems))
        return momdp

    def feature_map(self, num_states: int) -> FeatureMap:
        kind = self.features
        if kind is None:
            kind = "tabular" if self.mode == "discounted" else "orthogonal_to_ones"
        if kind == "tabular":
            return FeatureMap.tabular(num_states)
        if kind == "orthogonal_to_ones":
            return FeatureMap.orthogonal_to_ones(num_states)
        fm = FeatureMap.load(self.resolve(kind))
        if fm.num_states != num_states:
            raise ConfigError(f"feature map has {fm.num_states} rows for {num_states} states")
        return fm

    def policy(self, momdp: TabularMOMDP) -> SoftmaxPolicy:
        S, A = momdp.num_states, momdp.num_actions
        theta = None if self.policy_theta is None else np.asarray(self.policy_theta, dtype=float)
        if theta is not None and theta.shape != (S * A,):
            raise ConfigError(f"policy_theta must have {S * A} entries")
        return SoftmaxPolicy.tabular(S, A, theta)

    def exploration_set(self, M: int) -> ExplorationSet:
        if "grid" in self.weights:
            return generate_weight_grid(M, self.weights["grid"], self.clamp_eps)
        values = self.weights["list"]
        if any(len(v) != M for v in values):
            raise ConfigError(f"every weight vector needs {M} entries")
        return ExplorationSet.from_list(values, self.clamp_eps)


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_once(path, text: str) -> Path:
    """Write ``text`` to ``path`` unless it already exists.

    An existing file with identical bytes is reused; different bytes go to
    ``<stem>.<sha256[:12]><suffix>`` instead of overwriting.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = text.encode()
    if path.exists():
        if path.read_bytes() == data:
            return path
        digest = hashlib.sha256(data).hexdigest()[:12]
        path = path.with_name(f"{path.stem}.{digest}{path.suffix}")
        if path.exists():
            return path
    path.write_bytes(data)
    return path


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _manifest(cfg: ExperimentConfig, command: str, seeds, outputs: dict) -> str:
    return _dump({
        "command": command,
        "config": cfg.to_dict(),
        "config_sha256": cfg.sha256(),
        "momdp_file": str(cfg.resolve(cfg.momdp_path).resolve()),
        "momdp_sha256": hashlib.sha256(cfg.resolve(cfg.momdp_path).read_bytes()).hexdigest(),
        "seeds": list(seeds),
        "version": version_string(),
        "outputs": {k: Path(v).name for k, v in outputs.items()},
    })


def _pool_size(requested: Optional[int]) -> int:
    n = requested or 1
    cap = os.environ.get("MOCHA_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"MOCHA_THREADS must be an integer, got {cap!r}")
    return n


def _prepare(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "seed_override", None) is not None:
        cfg.seeds = [int(args.seed_override)]
    if getattr(args, "out", None):
        cfg.output_dir = str(Path(args.out).resolve())
    return cfg


def cmd_run(args) -> int:
    cfg = _prepare(args)
    momdp = cfg.load_momdp()
    weights = cfg.exploration_set(momdp.num_objectives)
    if len(weights) != 1:
        raise ConfigError(f"run needs exactly one weight vector, config gives {len(weights)}")
    seed = cfg.seeds[0]
    result = run_mocha(
        momdp, cfg.policy(momdp), cfg.critic_config(), cfg.actor_config(), weights.weights[0],
        np.random.default_rng(seed), features=cfg.feature_map(momdp.num_states),
    )
    out = cfg.resolve(cfg.output_dir)
    payload = result.to_dict()
    payload.update({"p": weights.weights[0].p.tolist(), "seed": seed})
    path = write_once(out / "run_result.json", _dump(payload))
    write_once(out / "manifest.json", _manifest(cfg, "run", [seed], {"result": path}))
    print(path)
    return EXIT_OK


def cmd_explore(args) -> int:
    cfg = _prepare(args)
    momdp = cfg.load_momdp()
    weights = cfg.exploration_set(momdp.num_objectives)
    ecfg = ExploreConfig(
        cfg.critic_config(), cfg.actor_config(), cfg.feature_map(momdp.num_states),
        None if cfg.policy_theta is None else cfg.policy(momdp).theta, cfg.gap_tol,
    )
    points = explore(momdp, ecfg, weights, cfg.seeds, _pool_size(args.parallelism))
    out = cfg.resolve(cfg.output_dir)
    csv_path = write_once(out / "frontier.csv", frontier_csv(points, momdp.num_objectives))
    json_path = write_once(out / "frontier.json", frontier_json(points))
    write_once(out / "manifest.json", _manifest(cfg, "explore", cfg.seeds, {"csv": csv_path, "json": json_path}))
    failed = [pt for pt in points if pt.error]
    for pt in failed:
        print(f"point p={pt.p.p.tolist()} seed={pt.seed} failed: {pt.error}", file=sys.stderr)
    print(csv_path)
    if not any(pt.converged for pt in points):
        print("no frontier point converged", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def oracle_report(cfg: ExperimentConfig, what: str) -> dict:
    momdp = cfg.load_momdp()
    policy = cfg.policy(momdp)
    setting = cfg.mode
    if what == "values":
        return oracle.exact_evaluation(momdp, policy, setting).to_dict()
    if what == "gradient":
        modes = ("stationary",) if setting == "average" else oracle.GRADIENT_MODES
        return {m: oracle.gradient_matrix(momdp, policy, m, setting).tolist() for m in modes}
    if what == "fixed-point":
        fm = cfg.feature_map(momdp.num_states)
        w = [oracle.td_fixed_point(momdp, policy, fm, i, setting) for i in range(momdp.num_objectives)]
        return {"w_star": np.array(w).tolist()}
    if what == "front":
        front = oracle.brute_force_pareto_front(momdp, setting)
        vals = front.values
        verified = bool(oracle._non_dominated(vals, weak=False).all())
        return {**front.to_dict(), "non_dominated_verified": verified}
    if what == "gap":
        return {"gap": oracle.pareto_stationarity_gap(momdp, policy, None, setting)}
    if what == "mixing":
        fit = oracle.estimate_mixing(momdp, policy)
        return {"kappa": fit.kappa, "rho": fit.rho, "tv": fit.tv.tolist(), "max_residual": fit.max_residual}
    if what == "constants":
        fm = cfg.feature_map(momdp.num_states)
        seed = cfg.seeds[0]
        return oracle.matrix_A_and_constants(momdp, policy, fm, setting,
                                             smoothness_rng=np.random.default_rng(seed)).to_dict()
    raise ConfigError(f"unknown oracle query {what!r}")


def cmd_oracle(args) -> int:
    cfg = _prepare(args)
    report = oracle_report(cfg, args.what)
    out = cfg.resolve(cfg.output_dir)
    path = write_once(out / f"oracle_{args.what}.json", _dump(report))
    print(path)
    return EXIT_OK


def _load_theta(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"policy file not found: {path}")
    data = json.loads(path.read_text())
    for key in ("theta", "final_theta", "behavior_policy_theta"):
        if isinstance(data, dict) and key in data:
            return np.asarray(data[key], dtype=float)
    if isinstance(data, list):
        return np.asarray(data, dtype=float)
    raise ConfigError(f"{path}: expected a JSON list or an object with 'theta'")


def cmd_eval_ncis(args) -> int:
    if not args.cap > 0:
        raise ConfigError(f"--cap must be > 0, got {args.cap}")
    ds_path = Path(args.dataset)
    if not ds_path.is_file():
        raise ConfigError(f"dataset file not found: {ds_path}")
    dataset = LoggedDataset.load(ds_path)
    theta = _load_theta(args.policy)
    beh = dataset.behavior
    if theta.shape != beh.theta.shape:
        raise ConfigError(f"policy has {theta.size} parameters, dataset policy has {beh.theta.size}")
    scores = ncis_evaluate(dataset, beh.with_theta(theta), args.cap)
    text = _dump({"ncis": scores.tolist(), "cap_C": args.cap, "n": len(dataset)})
    if args.out:
        print(write_once(Path(args.out) / "ncis.json", text))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _prepare(args)
    momdp = cfg.load_momdp()
    cfg.feature_map(momdp.num_states)
    cfg.policy(momdp)
    n = len(cfg.exploration_set(momdp.num_objectives))
    print(f"ok: {momdp.num_states} states, {momdp.num_actions} actions, "
          f"{momdp.num_objectives} objectives, {n} weight vectors, {len(cfg.seeds)} seeds")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mocha", description="Multi-objective actor-critic on tabular MOMDPs")
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, parallel=False):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", help="output directory, overrides output_dir")
        p.add_argument("--seed-override", type=int, help="replace the config's seeds with this one")
        if parallel:
            p.add_argument("--parallelism", type=int, default=1, help="worker processes (capped by MOCHA_THREADS)")
        return p

    common(sub.add_parser("run", help="single MOCHA run")).set_defaults(func=cmd_run)
    common(sub.add_parser("explore", help="sweep weight vectors and seeds"), parallel=True).set_defaults(
        func=cmd_explore)
    p = common(sub.add_parser("oracle", help="exact quantities for the configured policy"))
    p.add_argument("--what", required=True, choices=ORACLE_WHAT)
    p.set_defaults(func=cmd_oracle)
    p = sub.add_parser("eval-ncis", help="NCIS scores of a policy on a logged dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--policy", required=True, help="JSON with 'theta' (or a run result)")
    p.add_argument("--cap", type=float, default=10.0, help="importance ratio cap C")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_ncis)
    common(sub.add_parser("validate", help="check a config and its MOMDP")).set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as err:
        print(f"error: divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except InstanceTooLargeError as err:
        print(f"error: instance too large: {err}", file=sys.stderr)
        return EXIT_TOO_LARGE
    except DataError as err:
        print(f"error: data: {err}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, InputError) as err:
        print(f"error: config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except MochaError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_FAIL
    except (OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
