"""End-to-end experiments shared by ``scripts/`` and the acceptance tests.

Each runner takes a dataclass config and returns a plain dict of results.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dif, targets, train
from .cli import split_indices
from .dif import DifStack

WEIGHTNET_PAPER = (128, 128, 128)


def _heldout(model, x) -> float:
    return float(np.mean(model.log_density(x)))


# -- DIF vs GMM -------------------------------------------------------------------------------
@dataclass
class GmmComparison:
    K: int = 4
    n: int = 5000
    hidden: tuple = WEIGHTNET_PAPER
    em_iters: int = 300
    steps: int = 1500
    batch_size: int = 256
    lr: float = 1e-3
    schedule: str = "constant"
    full_batch: bool = False
    seed: int = 0


# Settings used for the acceptance runs. Full-batch steps suit the small 1-D set; the image run
# needs a decaying step size to settle above the EM optimum.
FIVE_MODES = GmmComparison(K=4, n=5000, steps=300, lr=3e-3, full_batch=True)
IMAGE = GmmComparison(K=40, n=20000, em_iters=200, steps=1200, batch_size=512, lr=1e-3, schedule="cosine")


def dif_vs_gmm(x: np.ndarray, cfg: GmmComparison) -> dict:
    """EM baseline, then warm-started DIF trained by minibatch MLE; both scored on a held-out 10%."""
    t0 = time.perf_counter()
    tr, te = split_indices(len(x), cfg.seed)
    x_tr, x_te = x[tr], x[te]
    gmm = train.gmm_em_fit(x_tr, cfg.K, cfg.em_iters, seed=cfg.seed)
    model = DifStack(x.shape[1], [dif.DifLayer("layer0", x.shape[1], cfg.K, cfg.hidden)], seed=cfg.seed)
    train.warm_start_from_gmm(model, gmm)
    warm = _heldout(model, x_te)
    trace = train.fit(model, x_tr, train.TrainConfig("mle", cfg.steps, cfg.batch_size, cfg.lr, seed=cfg.seed,
                                                     schedule=cfg.schedule, full_batch=cfg.full_batch))
    return {"config": asdict(cfg), "gmm_heldout": gmm.mean_loglik(x_te), "gmm_train": gmm.mean_loglik(x_tr),
            "warm_heldout": warm, "dif_heldout": _heldout(model, x_te), "dif_train": _heldout(model, x_tr),
            "final_objective": trace.objective[-1], "seconds": time.perf_counter() - t0}


def five_modes_experiment(cfg: GmmComparison | None = None) -> dict:
    cfg = cfg or FIVE_MODES
    x = targets.sample_target(targets.five_modes_1d(), cfg.n, cfg.seed)
    return dif_vs_gmm(x, cfg)


def synthetic_image(size: int = 64) -> np.ndarray:
    """Deterministic grayscale test card: a ring, a bar and two soft blobs on black."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    r = np.hypot(xx - 0.35, yy - 0.4)
    ring = np.exp(-0.5 * ((r - 0.22) / 0.03) ** 2)
    bar = ((np.abs(xx - 0.78) < 0.06) & (yy > 0.15) & (yy < 0.85)).astype(float)
    blobs = np.exp(-((xx - 0.3) ** 2 + (yy - 0.82) ** 2) / 0.004) + 0.7 * np.exp(-((xx - 0.6) ** 2 + (yy - 0.12) ** 2) / 0.002)
    img = ring + 0.8 * bar + blobs
    return np.round(255 * img / img.max()).astype(int)


def image_experiment(cfg: GmmComparison | None = None, image=None) -> dict:
    cfg = cfg or IMAGE
    spec = targets.image_density(synthetic_image() if image is None else image)
    x = targets.sample_target(spec, cfg.n, cfg.seed)
    return dif_vs_gmm(x, cfg)


# -- topology -------------------------------------------------------------------------------------
@dataclass
class MoonsConfig:
    n_train: int = 5000
    n_test: int = 1000
    coupling_hidden: tuple = (32, 32)
    dif_hidden: tuple = (16, 16)
    steps: int = 3000
    batch_size: int = 256
    lr: float = 3e-3
    seeds: tuple = (0, 1, 2)


MOONS = MoonsConfig()


def moons_layers(cfg: MoonsConfig, with_dif: bool) -> list[dict]:
    c = {"kind": "coupling", "hidden": list(cfg.coupling_hidden)}
    mid = [{"kind": "dif", "K": 2, "weightnet": {"hidden": list(cfg.dif_hidden)}}] if with_dif else []
    return [c, c, *mid, c, c]


def moons_experiment(cfg: MoonsConfig | None = None) -> dict:
    """Four coupling layers with and without a K=2 DIF layer between the 2nd and 3rd."""
    cfg = cfg or MoonsConfig()
    spec = targets.two_moons()
    rows = []
    for seed in cfg.seeds:
        x = targets.sample_target(spec, cfg.n_train + cfg.n_test, [seed, 7])
        x_tr, x_te = x[: cfg.n_train], x[cfg.n_train:]
        scores = {}
        for name, with_dif in (("nf", False), ("dif", True)):
            layers = dif.build_layers(2, moons_layers(cfg, with_dif))
            rng = np.random.default_rng([seed, 8])
            locs = {i: dif.spread_locations(x_tr, l.K, rng) for i, l in enumerate(layers) if l.K > 1}
            model = DifStack(2, layers, seed=seed, locs=locs)
            train.fit(model, x_tr, train.TrainConfig("mle", cfg.steps, cfg.batch_size, cfg.lr, seed=seed))
            scores[name] = {"heldout": _heldout(model, x_te), "n_params": model.n_params()}
        rows.append({"seed": seed, **scores})
    wins = sum(r["dif"]["heldout"] > r["nf"]["heldout"] for r in rows)
    return {"config": asdict(cfg), "runs": rows, "wins": wins}


# -- VI -------------------------------------------------------------------------------------------------
@dataclass
class ViConfig:
    weights: tuple = (0.3, 0.7)
    means: tuple = (-2.0, 2.0)
    stds: tuple = (0.5, 1.0)
    scale: float = 3.0
    K: int = 2
    hidden: tuple = (16, 16)
    steps: int = 600
    batch_size: int = 64
    lr: float = 1e-2
    n_proposals: int = 100_000
    seed: int = 0
    init_locs: tuple | None = field(default=None)


def vi_experiment(cfg: ViConfig | None = None) -> dict:
    cfg = cfg or ViConfig()
    spec = targets.gaussian_mixture(cfg.weights, cfg.means, cfg.stds, scale=cfg.scale)
    locs = None if cfg.init_locs is None else {0: np.asarray(cfg.init_locs, dtype=float)[:, None]}
    model = DifStack(1, [dif.DifLayer("layer0", 1, cfg.K, cfg.hidden)], seed=cfg.seed, locs=locs)
    trace = train.fit(model, spec, train.TrainConfig("rb_kl", cfg.steps, cfg.batch_size, cfg.lr, seed=cfg.seed))
    log_p = targets.log_p_callable(spec)
    sir = train.sir_resample(model, log_p, cfg.n_proposals, 1000, seed=cfg.seed)
    obj = np.asarray(trace.objective)
    q = len(obj) // 4
    return {"config": asdict(cfg), "Z_true": cfg.scale, "Z": sir.Z, "Z_se": sir.Z_se,
            "rel_error": abs(sir.Z - cfg.scale) / cfg.scale,
            "first_quartile": float(obj[:q].mean()), "last_quartile": float(obj[-q:].mean()),
            "trace": trace}
