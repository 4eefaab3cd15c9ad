"""Command-line front end: ``diflab <subcommand> ...``.

Training commands take one JSON run config; only ``--seed`` and ``--output-dir``
may override it.  Exit codes: 0 ok, 2 config error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dif, targets, train
from .diffable import NonFiniteError
from .dif import ConditionalDifModel, DifLayer, DifStack
from .targets import DensityGrid, DataFormatError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

TARGET_KINDS = ("two_moons", "s_curve", "gaussian_mixture", "image_density", "csv_dataset", "five_modes_1d")
INITS = ("spread", "prior", "gmm")


class ConfigError(ValueError):
    """One or more config problems, each prefixed with its field path."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class RunConfig:
    target: dict
    layers: list
    train: train.TrainConfig
    output_dir: str = "runs/out"
    seed: int = 0
    n_samples: int = 5000
    init: str = "spread"
    gmm_iters: int = 200
    baseline_gmm: bool = True
    sir_proposals: int = 100_000
    grid: list | None = None
    raw: dict = field(default_factory=dict, repr=False)

    def hash(self) -> str:
        return config_hash(self.raw)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


# -- validation ------------------------------------------------------------------------------
def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)


def _check_widths(v, path, problems):
    if not isinstance(v, list) or not all(_is_int(w) and w >= 1 for w in v):
        problems.append(f"{path}: expected a list of positive integers")


def _validate_layers(layers, problems, command) -> None:
    if not isinstance(layers, list) or not layers:
        problems.append("model.layers: expected a non-empty list")
        return
    for i, spec in enumerate(layers):
        path = f"model.layers[{i}]"
        if not isinstance(spec, dict):
            problems.append(f"{path}: expected an object")
            continue
        kind = spec.get("kind")
        allowed = ("conditional_dif",) if command == "fit-conditional" else ("dif", "coupling")
        if kind not in allowed:
            problems.append(f"{path}.kind: expected one of {list(allowed)}, got {kind!r}")
            continue
        if kind in ("dif", "conditional_dif"):
            K = spec.get("K", 2)
            if not _is_int(K) or K < 1:
                problems.append(f"{path}.K: expected an integer >= 1")
            wn = spec.get("weightnet", {})
            if not isinstance(wn, dict):
                problems.append(f"{path}.weightnet: expected an object")
            else:
                if "hidden" in wn:
                    _check_widths(wn["hidden"], f"{path}.weightnet.hidden", problems)
                if wn.get("activation", "tanh") not in ("tanh", "sigmoid"):
                    problems.append(f"{path}.weightnet.activation: expected 'tanh' or 'sigmoid'")
            if "covnet" in spec and "hidden" in spec["covnet"]:
                hidden = spec["covnet"]["hidden"]
                if not isinstance(hidden, list) or not all(_is_int(w) and w >= 1 for w in hidden):
                    problems.append(f"{path}.covnet.hidden: expected a list of positive integers")
        else:
            if "hidden" in spec:
                _check_widths(spec["hidden"], f"{path}.hidden", problems)
    names = [s.get("name") for s in layers if isinstance(s, dict) and "name" in s]
    if any(not isinstance(n, str) or not n for n in names) or len(set(names)) != len(names):
        problems.append("model.layers: layer names must be distinct non-empty strings")
    if command == "fit-conditional" and len(layers) != 1:
        problems.append("model.layers: a conditional model holds exactly one conditional_dif layer")


def _validate_target(tgt, problems) -> None:
    if not isinstance(tgt, dict):
        problems.append("target: expected an object")
        return
    kind = tgt.get("kind")
    if kind not in TARGET_KINDS:
        problems.append(f"target.kind: expected one of {list(TARGET_KINDS)}, got {kind!r}")
        return
    if kind in ("image_density", "csv_dataset") and not isinstance(tgt.get("path"), str):
        problems.append(f"target.path: required string for kind {kind!r}")
    if kind == "gaussian_mixture":
        for key in ("weights", "means", "stds"):
            if key not in tgt:
                problems.append(f"target.{key}: required for gaussian_mixture")
        if "scale" in tgt and not (_is_num(tgt["scale"]) and tgt["scale"] > 0):
            problems.append("target.scale: expected a positive number")
    if "noise" in tgt and not (_is_num(tgt["noise"]) and tgt["noise"] >= 0):
        problems.append("target.noise: expected a number >= 0")


def _validate_train(tcfg, command, problems) -> train.TrainConfig | None:
    if not isinstance(tcfg, dict):
        problems.append("train: expected an object")
        return None
    known = {f.name for f in fields(train.TrainConfig)}
    for key in tcfg:
        if key not in known:
            problems.append(f"train.{key}: unknown field")
    allowed = {"fit-vde": ("mle", "gem"), "fit-vi": ("rb_kl",),
               "fit-conditional": ("conditional_mle",)}[command]
    defaults = {"fit-vde": "mle", "fit-vi": "rb_kl", "fit-conditional": "conditional_mle"}
    objective = tcfg.get("objective", defaults[command])
    if objective not in allowed:
        problems.append(f"train.objective: {command} accepts {list(allowed)}, got {objective!r}")
    checks = {
        "steps": lambda v: _is_int(v) and v >= 1,
        "batch_size": lambda v: _is_int(v) and v >= 1,
        "lr": lambda v: _is_num(v) and v > 0,
        "beta1": lambda v: _is_num(v) and 0 <= v < 1,
        "beta2": lambda v: _is_num(v) and 0 <= v < 1,
        "seed": _is_int,
        "optimizer": lambda v: v in train.OPTIMIZERS,
        "line_search": lambda v: isinstance(v, bool),
        "fixed_batch": lambda v: isinstance(v, bool),
        "full_batch": lambda v: v is None or isinstance(v, bool),
        "schedule": lambda v: v in train.SCHEDULES,
    }
    bad = False
    for key, ok in checks.items():
        if key in tcfg and not ok(tcfg[key]):
            problems.append(f"train.{key}: invalid value {tcfg[key]!r}")
            bad = True
    if bad or objective not in allowed or any(k not in known for k in tcfg):
        return None
    return train.TrainConfig(**{**tcfg, "objective": objective})


def parse_run_config(cfg, command: str, seed=None, output_dir=None) -> RunConfig:
    """Validate everything up front; raise ConfigError listing every problem."""
    problems: list[str] = []
    if not isinstance(cfg, dict):
        raise ConfigError(["<root>: expected a JSON object"])
    known = {"target", "dataset", "model", "train", "output_dir", "seed", "n_samples",
             "evaluation"}
    for key in cfg:
        if key not in known:
            problems.append(f"{key}: unknown field")
    tgt = cfg.get("target", cfg.get("dataset"))
    if tgt is None:
        problems.append("target: required")
    else:
        _validate_target(tgt, problems)
        if command == "fit-conditional" and isinstance(tgt, dict) and tgt.get("kind") != "csv_dataset":
            problems.append("target.kind: fit-conditional needs a csv_dataset with covariate columns")
        if command == "fit-vi" and isinstance(tgt, dict) and tgt.get("kind") in ("s_curve", "image_density", "csv_dataset"):
            problems.append(f"target.kind: {tgt.get('kind')!r} has no evaluable unnormalized density")
    model = cfg.get("model")
    init = "spread"
    if not isinstance(model, dict):
        problems.append("model: required object")
        layers = None
    else:
        layers = model.get("layers")
        _validate_layers(layers, problems, command)
        init = model.get("init", "spread" if command == "fit-vde" else "prior")
        if init not in INITS:
            problems.append(f"model.init: expected one of {list(INITS)}")
        elif init == "gmm" and isinstance(layers, list):
            if command != "fit-vde":
                problems.append("model.init: 'gmm' warm start is only available for fit-vde")
            elif len(layers) != 1 or not isinstance(layers[0], dict) or layers[0].get("kind") != "dif":
                problems.append("model.init: 'gmm' warm start needs exactly one dif layer")
    tcfg = _validate_train(cfg.get("train", {}), command, problems)
    run_seed = cfg.get("seed", 0) if seed is None else seed
    if not _is_int(run_seed):
        problems.append("seed: expected an integer")
    n_samples = cfg.get("n_samples", 5000)
    if not _is_int(n_samples) or n_samples < 10:
        problems.append("n_samples: expected an integer >= 10")
    ev = cfg.get("evaluation", {})
    if not isinstance(ev, dict):
        problems.append("evaluation: expected an object")
        ev = {}
    for key in ev:
        if key not in ("gmm_iters", "baseline_gmm", "sir_proposals", "grid"):
            problems.append(f"evaluation.{key}: unknown field")
    if "sir_proposals" in ev and not (_is_int(ev["sir_proposals"]) and ev["sir_proposals"] >= 1):
        problems.append("evaluation.sir_proposals: expected a positive integer")
    if "gmm_iters" in ev and not (_is_int(ev["gmm_iters"]) and ev["gmm_iters"] >= 1):
        problems.append("evaluation.gmm_iters: expected a positive integer")
    grid = ev.get("grid")
    if grid is not None:
        try:
            _grid_from_spec(grid)
        except ValueError as exc:
            problems.append(f"evaluation.grid: {exc}")
    out = cfg.get("output_dir", "runs/out") if output_dir is None else output_dir
    if not isinstance(out, str) or not out:
        problems.append("output_dir: expected a non-empty string")
    if problems:
        raise ConfigError(problems)
    if tcfg.seed == 0 and "seed" not in cfg.get("train", {}):
        tcfg.seed = run_seed
    raw = {**cfg, "seed": run_seed, "output_dir": out}
    return RunConfig(tgt, layers, tcfg, out, run_seed, n_samples, init,
                     ev.get("gmm_iters", 200), ev.get("baseline_gmm", True),
                     ev.get("sir_proposals", 100_000), grid, raw)


def _grid_from_spec(spec) -> DensityGrid:
    if not isinstance(spec, list) or not spec:
        raise ValueError("expected a list of [min, max, n_points] per axis")
    axes = []
    for i, ax in enumerate(spec):
        if (not isinstance(ax, (list, tuple)) or len(ax) != 3 or not all(_is_num(v) for v in ax)
                or not float(ax[2]).is_integer()):
            raise ValueError(f"axis {i}: expected [min, max, n_points]")
        if not ax[1] > ax[0] or ax[2] < 2:
            raise ValueError(f"axis {i}: need max > min and n_points >= 2")
        axes.append((float(ax[0]), float(ax[1]), int(ax[2])))
    return DensityGrid(axes)


# -- shared pieces ------------------------------------------------------------------------------
def split_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 90/10 train/held-out split by seeded shuffle."""
    perm = np.random.default_rng([seed, 90]).permutation(n)
    n_test = max(1, n // 10)
    return perm[n_test:], perm[:n_test]


def _load_data(rc: RunConfig, base_dir: Path):
    """(x, omega or None)."""
    tgt = rc.target
    if tgt["kind"] == "csv_dataset":
        ds = targets.load_csv_dataset(base_dir / tgt["path"])
        return ds.x, ds.omega
    spec = targets.target_from_config(tgt, base_dir)
    return targets.sample_target(spec, rc.n_samples, np.random.default_rng([rc.seed, 1])), None


def _default_grid(x: np.ndarray) -> DensityGrid:
    lo, hi = x.min(axis=0), x.max(axis=0)
    pad = 0.25 * (hi - lo) + 1.0
    n = 2001 if x.shape[1] == 1 else 201
    return DensityGrid([(float(a), float(b), n) for a, b in zip(lo - pad, hi + pad)])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _build_stack(rc: RunConfig, dim: int, x_train=None) -> DifStack:
    try:
        layers = dif.build_layers(dim, rc.layers)
    except ValueError as exc:
        raise ConfigError([f"model.layers: {exc} (data dimension {dim})"]) from None
    locs = None
    if rc.init == "spread" and x_train is not None:
        rng = np.random.default_rng([rc.seed, 2])
        locs = {i: dif.spread_locations(x_train, l.K, rng) for i, l in enumerate(layers)
                if isinstance(l, DifLayer) and l.K > 1}
    return DifStack(dim, layers, seed=rc.seed, locs=locs)


def _trend(trace: train.TraceRecord) -> dict:
    obj = np.asarray(trace.objective)
    q = max(1, len(obj) // 4)
    return {"first_quartile_mean": float(obj[:q].mean()), "last_quartile_mean": float(obj[-q:].mean())}


# -- commands ------------------------------------------------------------------------------------
def cmd_fit_vde(rc: RunConfig, base_dir: Path) -> dict:
    x, _ = _load_data(rc, base_dir)
    dim = x.shape[1]
    tr_idx, te_idx = split_indices(len(x), rc.seed)
    x_train, x_test = x[tr_idx], x[te_idx]
    model = _build_stack(rc, dim, x_train)
    summary: dict = {}
    first = next((l for l in model.layers if isinstance(l, DifLayer) and l.K > 1), None)
    gmm = None
    if rc.init == "gmm" or (rc.baseline_gmm and first is not None):
        K = model.layers[0].K if rc.init == "gmm" else first.K
        gmm = train.gmm_em_fit(x_train, K, rc.gmm_iters, seed=rc.seed)
        summary["gmm_baseline"] = {"K": K, "train_loglik": gmm.mean_loglik(x_train),
                                   "heldout_loglik": gmm.mean_loglik(x_test)}
    if rc.init == "gmm":
        train.warm_start_from_gmm(model, gmm)
    trace = train.fit(model, x_train, rc.train)
    summary.update(_finish(model, x_train, x_test, rc, trace))
    if dim <= 2:
        grid = _grid_from_spec(rc.grid) if rc.grid else _default_grid(x)
        summary["grid_integral"] = targets.quadrature_integral(lambda g: np.exp(model.log_density(g)), grid)
    return summary


def cmd_fit_vi(rc: RunConfig, base_dir: Path) -> dict:
    spec = targets.target_from_config(rc.target, base_dir)
    if not spec.can_eval_unnorm_logpdf:
        raise ConfigError([f"target.kind: {spec.kind!r} has no evaluable unnormalized density"])
    dim = spec.dim
    model = _build_stack(rc, dim)
    trace = train.fit(model, spec, rc.train)
    sir = train.sir_resample(model, targets.log_p_callable(spec), rc.sir_proposals,
                             min(1000, rc.sir_proposals), seed=[rc.seed, 3])
    summary = {"final_objective": trace.objective[-1], "trend": _trend(trace),
               "sir": {"Z": sir.Z, "Z_se": sir.Z_se, "log_Z": sir.log_Z, "ess": sir.ess,
                       "n_proposals": rc.sir_proposals}}
    _save(model, trace, rc, summary)
    return summary


def cmd_fit_conditional(rc: RunConfig, base_dir: Path) -> dict:
    x, omega = _load_data(rc, base_dir)
    if omega is None or omega.shape[1] == 0:
        raise ConfigError(["target.path: dataset has no covariate columns (prefix 'w_')"])
    tr_idx, te_idx = split_indices(len(x), rc.seed)
    spec = {**rc.layers[0], "cov_dim": omega.shape[1]}
    try:
        layer = dif.layer_from_spec(spec.get("name", "layer0"), x.shape[1], spec)
    except ValueError as exc:
        raise ConfigError([f"model.layers[0]: {exc}"]) from None
    locs = dif.spread_locations(x[tr_idx], layer.K, np.random.default_rng([rc.seed, 2]))
    model = ConditionalDifModel(layer, seed=rc.seed, locs=locs)
    trace = train.fit(model, (x[tr_idx], omega[tr_idx]), rc.train)
    train_ll = float(np.mean(model.log_density(x[tr_idx], omega[tr_idx])))
    test_ll = float(np.mean(model.log_density(x[te_idx], omega[te_idx])))
    summary = {"train_loglik": train_ll, "heldout_loglik": test_ll, "n_train": len(tr_idx),
               "n_heldout": len(te_idx), "final_objective": trace.objective[-1]}
    _save(model, trace, rc, summary)
    return summary


def _finish(model, x_train, x_test, rc, trace) -> dict:
    summary = {"train_loglik": float(np.mean(model.log_density(x_train))),
               "heldout_loglik": float(np.mean(model.log_density(x_test))),
               "n_train": len(x_train), "n_heldout": len(x_test),
               "final_objective": trace.objective[-1] if len(trace) else None,
               "converged": trace.converged, "steps_run": len(trace)}
    if not np.isfinite(summary["train_loglik"]):
        raise NonFiniteError("trained model assigns zero density to training data")
    _save(model, trace, rc, summary)
    return summary


def _save(model, trace, rc: RunConfig, summary: dict) -> None:
    out = Path(rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "model.json", model.to_dict())
    trace.write_csv(out / "trace.csv")
    summary["seed"] = rc.seed
    summary["config_hash"] = rc.hash()
    summary["n_params"] = model.n_params()


def load_model(path) -> DifStack | ConditionalDifModel:
    try:
        blob = json.loads(Path(path).read_text())
        return dif.model_from_dict(blob)
    except FileNotFoundError:
        raise ConfigError([f"model: file not found: {path}"]) from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError([f"model: corrupt model file {path}: {exc}"]) from None


def cmd_sample(model_path, n: int, seed: int, out, with_path: bool = False) -> None:
    model = load_model(model_path)
    if not isinstance(model, DifStack):
        raise ConfigError(["model: conditional models need covariates; sampling is for stacks"])
    if n < 0:
        raise ConfigError(["n: expected >= 0"])
    header = [f"x{j}" for j in range(model.dim)]
    if with_path:
        header += [f"u_layer{i}" for i in range(len(model.layers))]
    rows = []
    if n > 0:
        if with_path:
            x, u = model.sample(n, seed, return_path=True)
            rows = [[*map(repr, map(float, xi)), *map(str, ui)] for xi, ui in zip(x, u)]
        else:
            rows = [list(map(repr, map(float, xi))) for xi in model.sample(n, seed)]
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_density_grid(model_path, axes, out) -> dict:
    model = load_model(model_path)
    if not isinstance(model, DifStack):
        raise ConfigError(["model: density grids are for unconditional models"])
    if model.dim > 2:
        raise ConfigError([f"model: density grids need dim 1 or 2, model has dim {model.dim}"])
    try:
        grid = _grid_from_spec(axes)
    except ValueError as exc:
        raise ConfigError([f"axis: {exc}"]) from None
    if len(grid.axes) != model.dim:
        raise ConfigError([f"axis: model has dim {model.dim}, got {len(grid.axes)} axes"])
    grid.values = np.exp(model.log_density(grid.points())).reshape(grid.shape)
    Path(out).write_text(grid.to_csv())
    summary = {"integral": targets.quadrature_integral(lambda g: np.exp(model.log_density(g)), grid),
               "axes": [list(a) for a in grid.axes]}
    _write_json(Path(str(out) + ".summary.json"), summary)
    return summary


def cmd_loglik(model_path, data_path) -> dict:
    model = load_model(model_path)
    try:
        ds = targets.load_csv_dataset(data_path)
    except (OSError, DataFormatError) as exc:
        raise ConfigError([f"data: {exc}"]) from None
    if ds.x.shape[1] != model.dim:
        raise ConfigError([f"data: model has dim {model.dim}, data has {ds.x.shape[1]} columns"])
    if isinstance(model, ConditionalDifModel):
        if ds.omega is None or ds.omega.shape[1] != model.cov_dim:
            raise ConfigError([f"data: conditional model needs {model.cov_dim} covariate columns"])
        ll = model.log_density(ds.x, ds.omega)
    else:
        ll = model.log_density(ds.x)
    return {"mean_loglik": float(np.mean(ll)), "n": len(ll)}


# -- entry point ---------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diflab", description="Discretely indexed flows")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("fit-vde", "fit-vi", "fit-conditional"):
        p = sub.add_parser(name)
        p.add_argument("config", help="JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--output-dir")
    p = sub.add_parser("sample")
    p.add_argument("model")
    p.add_argument("-n", "--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--with-path", action="store_true", help="add u_layer columns")
    p = sub.add_parser("density-grid")
    p.add_argument("model")
    p.add_argument("--axis", nargs=3, type=float, action="append", required=True,
                   metavar=("MIN", "MAX", "N"))
    p.add_argument("-o", "--out", required=True)
    p = sub.add_parser("loglik")
    p.add_argument("model")
    p.add_argument("data", help="CSV dataset")
    return ap


def _read_config(path) -> tuple[dict, Path]:
    try:
        return json.loads(Path(path).read_text()), Path(path).resolve().parent
    except FileNotFoundError:
        raise ConfigError([f"<file>: not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"<file>: invalid JSON: {exc}"]) from None


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("fit-vde", "fit-vi", "fit-conditional"):
            cfg, base = _read_config(args.config)
            rc = parse_run_config(cfg, args.command, args.seed, args.output_dir)
            cmd = {"fit-vde": cmd_fit_vde, "fit-vi": cmd_fit_vi,
                   "fit-conditional": cmd_fit_conditional}[args.command]
            try:
                summary = cmd(rc, base)
            except (OSError, DataFormatError, targets.CapabilityError) as exc:
                raise ConfigError([f"target: {exc}"]) from None
            _write_json(Path(rc.output_dir) / "summary.json", summary)
            print(json.dumps(summary, sort_keys=True))
        elif args.command == "sample":
            cmd_sample(args.model, args.n, args.seed, args.out, args.with_path)
        elif args.command == "density-grid":
            print(json.dumps(cmd_density_grid(args.model, args.axis, args.out)))
        else:
            print(json.dumps(cmd_loglik(args.model, args.data)))
    except ConfigError as exc:
        for line in exc.problems:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
