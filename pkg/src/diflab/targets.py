"""Benchmark targets, dataset ingestion and trapezoidal quadrature on rectangular grids.

Fixed constants for the toy targets (the usual toolkit defaults, declared here):
two moons use radius 1, second moon offset (1, 0.5) and Gaussian noise 0.05;
the S-curve uses the standard parametric curve with noise 0.05; ``five_modes_1d``
is an equal mixture at {-4, -2, 0, 2, 4} with standard deviation 0.35.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffable as df
from .diffable import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))
MOON_OFFSET = (1.0, 0.5)


class CapabilityError(ValueError):
    pass


class DataFormatError(ValueError):
    pass


@dataclass
class TargetSpec:
    kind: str
    dim: int
    params: dict = field(default_factory=dict)
    can_sample: bool = True
    can_eval_unnorm_logpdf: bool = False

    def __post_init__(self):
        if not (self.can_sample or self.can_eval_unnorm_logpdf):
            raise ValueError("a target needs at least one capability")


# -- constructors ---------------------------------------------------------------------
def gaussian_mixture(weights, means, stds, scale: float = 1.0) -> TargetSpec:
    """Diagonal Gaussian mixture; ``unnorm_log_pdf`` returns log(scale * p)."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    if means.shape[0] == 1 and len(np.atleast_1d(weights)) > 1:
        means = means.T
    stds = np.asarray(stds, dtype=np.float64)
    if stds.ndim == 1 and stds.size == len(means) and means.shape[1] > 1:
        stds = stds[:, None]
    elif stds.ndim == 1 and means.shape[1] == 1:
        stds = stds.reshape(-1, 1)
    stds = np.broadcast_to(stds, means.shape)
    weights = np.asarray(weights, dtype=np.float64)
    weights = weights / weights.sum()
    return TargetSpec("gaussian_mixture", means.shape[1],
                      {"weights": weights, "means": means, "stds": np.array(stds), "scale": float(scale)},
                      can_sample=True, can_eval_unnorm_logpdf=True)


def five_modes_1d() -> TargetSpec:
    spec = gaussian_mixture(np.full(5, 0.2), np.array([[-4.0], [-2.0], [0.0], [2.0], [4.0]]), 0.35)
    spec.kind = "five_modes_1d"
    return spec


def two_moons(noise: float = 0.05) -> TargetSpec:
    return TargetSpec("two_moons", 2, {"noise": float(noise)}, True, True)


def s_curve(noise: float = 0.05) -> TargetSpec:
    return TargetSpec("s_curve", 2, {"noise": float(noise)}, True, False)


def image_density(intensity) -> TargetSpec:
    img = np.asarray(intensity, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise DataFormatError("image must be a non-empty 2-D array")
    if np.any(img < 0) or img.sum() <= 0:
        raise DataFormatError("image intensities must be non-negative and not all zero")
    return TargetSpec("image_density", 2, {"image": img}, True, True)


def dataset_target(x: np.ndarray) -> TargetSpec:
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    return TargetSpec("csv_dataset", x.shape[1], {"x": x}, True, False)


def reflect_moons(x: np.ndarray) -> np.ndarray:
    """Point reflection exchanging the two moons."""
    return np.array(MOON_OFFSET) - np.asarray(x)


# -- sampling -------------------------------------------------------------------------
def sample_target(spec: TargetSpec, n: int, seed=0) -> np.ndarray:
    if not spec.can_sample:
        raise CapabilityError(f"target {spec.kind!r} cannot be sampled")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    kind, prm = spec.kind, spec.params
    if kind in ("gaussian_mixture", "five_modes_1d"):
        comp = rng.choice(len(prm["weights"]), size=n, p=prm["weights"])
        return prm["means"][comp] + prm["stds"][comp] * rng.standard_normal((n, spec.dim))
    if kind == "two_moons":
        t = rng.uniform(0.0, np.pi, size=n)
        upper = rng.random(n) < 0.5
        pts = np.where(upper[:, None],
                       np.stack([np.cos(t), np.sin(t)], axis=1),
                       np.stack([MOON_OFFSET[0] - np.cos(t), MOON_OFFSET[1] - np.sin(t)], axis=1))
        return pts + prm["noise"] * rng.standard_normal((n, 2))
    if kind == "s_curve":
        t = 3.0 * np.pi * (rng.random(n) - 0.5)
        pts = np.stack([np.sin(t), np.sign(t) * (np.cos(t) - 1.0)], axis=1)
        return pts + prm["noise"] * rng.standard_normal((n, 2))
    if kind == "image_density":
        img = prm["image"]
        h, w = img.shape
        flat = img.ravel() / img.sum()
        cell = rng.choice(flat.size, size=n, p=flat)
        r, c = np.divmod(cell, w)
        x = (c + rng.random(n)) / w
        y = (h - 1 - r + rng.random(n)) / h
        return np.stack([x, y], axis=1)
    if kind == "csv_dataset":
        data = prm["x"]
        return data[rng.integers(0, len(data), size=n)]
    raise ValueError(f"unknown target kind {kind!r}")


# -- unnormalized log densities -----------------------------------------------------------
def _mixture_graph(prm: dict, x: Tensor) -> Tensor:
    means, stds, weights = prm["means"], prm["stds"], prm["weights"]
    n, d = x.shape
    diff = (x.reshape(n, 1, d) - means) * (1.0 / stds)
    comp = (-0.5 * df.square(diff).sum(axis=2)
            + (np.log(weights) - np.log(stds).sum(axis=1) - 0.5 * d * LOG_2PI))
    return df.logsumexp(comp, axis=1) + np.log(prm["scale"])


def _moons_graph(prm: dict, x: Tensor) -> Tensor:
    s2 = 2.0 * prm["noise"] ** 2
    ox, oy = MOON_OFFSET
    x0, x1 = x[:, 0], x[:, 1]
    r_up = df.sqrt(df.square(x0) + df.square(x1) + 1e-12)
    r_lo = df.sqrt(df.square(x0 - ox) + df.square(x1 - oy) + 1e-12)
    up = -(df.square(r_up - 1.0) + df.square(df.relu(-x1))) * (1.0 / s2)
    lo = -(df.square(r_lo - 1.0) + df.square(df.relu(x1 - oy))) * (1.0 / s2)
    return df.logsumexp(df.stack([up, lo], axis=1), axis=1) + np.log(0.5)


def _image_log_pdf(prm: dict, x: np.ndarray) -> np.ndarray:
    img = prm["image"]
    h, w = img.shape
    dens = img * (h * w / img.sum())
    inside = np.all((x >= 0.0) & (x <= 1.0), axis=1)
    c = np.clip((x[:, 0] * w).astype(int), 0, w - 1)
    r = np.clip(h - 1 - (x[:, 1] * h).astype(int), 0, h - 1)
    with np.errstate(divide="ignore"):
        return np.where(inside, np.log(dens[r, c]), -np.inf)


def unnorm_log_pdf(spec: TargetSpec, x):
    """log p~(x).  Accepts numpy (returns numpy) or a Tensor (returns a differentiable Tensor)."""
    if not spec.can_eval_unnorm_logpdf:
        raise CapabilityError(f"target {spec.kind!r} has no evaluable density")
    is_tensor = isinstance(x, Tensor)
    arr = x.data if is_tensor else np.asarray(x, dtype=np.float64)
    single = arr.ndim == 0 or (arr.ndim == 1 and spec.dim > 1)
    rows = arr.reshape(-1, spec.dim)
    xt = x.reshape(len(rows), spec.dim) if is_tensor else Tensor(rows)
    if spec.kind in ("gaussian_mixture", "five_modes_1d"):
        out = _mixture_graph(spec.params, xt)
    elif spec.kind == "two_moons":
        out = _moons_graph(spec.params, xt)
    elif spec.kind == "image_density":
        out = Tensor(_image_log_pdf(spec.params, rows))
    else:
        raise CapabilityError(f"target {spec.kind!r} has no evaluable density")
    if is_tensor:
        return out
    return float(out.data[0]) if single else out.data


def log_p_callable(spec: TargetSpec):
    return lambda x: unnorm_log_pdf(spec, x)


def mixture_cdf(spec: TargetSpec, x) -> np.ndarray:
    """CDF of a 1-D Gaussian mixture target."""
    from scipy.stats import norm

    prm = spec.params
    x = np.asarray(x, dtype=np.float64)[..., None]
    return (prm["weights"] * norm.cdf(x, prm["means"][:, 0], prm["stds"][:, 0])).sum(axis=-1)


# -- files --------------------------------------------------------------------------------
def read_pgm(path) -> np.ndarray:
    """Plain-text PGM ("P2"); returns intensities as float, row 0 at the top."""
    text = Path(path).read_text()
    tokens = []
    for line in text.splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] != "P2":
        raise DataFormatError("not a plain PGM file (magic 'P2' expected)")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        pixels = np.array([int(t) for t in tokens[4:]], dtype=np.float64)
    except (IndexError, ValueError) as exc:
        raise DataFormatError(f"malformed PGM header or body: {exc}") from None
    if w < 1 or h < 1 or not 0 < maxval <= 65535:
        raise DataFormatError("PGM dimensions must be positive and maxval in 1..65535")
    if pixels.size != w * h:
        raise DataFormatError(f"PGM body has {pixels.size} values, expected {w * h}")
    if np.any(pixels < 0) or np.any(pixels > maxval):
        raise DataFormatError("PGM pixel outside [0, maxval]")
    return pixels.reshape(h, w)


def write_pgm(path, image) -> None:
    img = np.asarray(image)
    h, w = img.shape
    maxval = max(int(img.max()), 1)
    rows = "\n".join(" ".join(str(int(v)) for v in row) for row in img)
    Path(path).write_text(f"P2\n{w} {h}\n{maxval}\n{rows}\n")


def load_image_density(path) -> TargetSpec:
    img = read_pgm(path)
    if img.sum() <= 0:
        raise DataFormatError("image is entirely black")
    return image_density(img)


@dataclass
class Dataset:
    x: np.ndarray
    omega: np.ndarray | None
    x_columns: list[str]
    omega_columns: list[str]


def load_csv_dataset(path) -> Dataset:
    """Header-named numeric CSV; columns prefixed ``w_`` are covariates."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError("empty CSV file")
    header = [h.strip() for h in rows[0]]
    body = []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataFormatError(f"line {i}: {len(row)} cells, header has {len(header)}")
        try:
            body.append([float(c) for c in row])
        except ValueError:
            raise DataFormatError(f"line {i}: non-numeric cell") from None
    data = np.array(body, dtype=np.float64).reshape(len(body), len(header))
    cov = [i for i, h in enumerate(header) if h.startswith("w_")]
    xs = [i for i, h in enumerate(header) if not h.startswith("w_")]
    if not xs:
        raise DataFormatError("dataset has no observation columns")
    return Dataset(data[:, xs], data[:, cov] if cov else None,
                   [header[i] for i in xs], [header[i] for i in cov])


def write_csv_dataset(path, x, omega=None, x_columns=None, omega_columns=None) -> None:
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    cols = list(x_columns or [f"x{i}" for i in range(x.shape[1])])
    data = x
    if omega is not None:
        omega = np.asarray(omega, dtype=np.float64).reshape(len(omega), -1)
        cols = list(omega_columns or [f"w_{i}" for i in range(omega.shape[1])]) + cols
        data = np.concatenate([omega, x], axis=1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        writer.writerows([[repr(float(v)) for v in row] for row in data])


# -- quadrature -----------------------------------------------------------------------------
@dataclass
class DensityGrid:
    """Rectangular grid: one (min, max, n_points) triple per axis, values row-major."""

    axes: list[tuple[float, float, int]]
    values: np.ndarray | None = None

    def __post_init__(self):
        self.axes = [(float(a), float(b), int(n)) for a, b, n in self.axes]
        for a, b, n in self.axes:
            if n < 2 or not b > a:
                raise ValueError("each axis needs max > min and at least 2 points")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(n for _, _, n in self.axes)

    @property
    def volume(self) -> float:
        return float(np.prod([b - a for a, b, _ in self.axes]))

    def coords(self) -> list[np.ndarray]:
        return [np.linspace(a, b, n) for a, b, n in self.axes]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.coords(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def weights(self) -> np.ndarray:
        per_axis = []
        for a, b, n in self.axes:
            h = (b - a) / (n - 1)
            w = np.full(n, h)
            w[[0, -1]] = h / 2
            per_axis.append(w)
        out = per_axis[0]
        for w in per_axis[1:]:
            out = np.multiply.outer(out, w)
        return np.asarray(out).ravel()

    def to_csv(self) -> str:
        if self.values is None:
            raise ValueError("grid has no values")
        buf = io.StringIO()
        buf.write("# axes=" + json.dumps([list(a) for a in self.axes]) + "\n")
        cols = [f"x{i}" for i in range(len(self.axes))] + ["density"]
        buf.write(",".join(cols) + "\n")
        for pt, v in zip(self.points(), np.ravel(self.values)):
            buf.write(",".join(repr(float(c)) for c in pt) + "," + repr(float(v)) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DensityGrid":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# axes="):
            raise DataFormatError("grid CSV must start with '# axes=' comment")
        axes = json.loads(lines[0][len("# axes="):])
        vals = np.array([float(l.rsplit(",", 1)[1]) for l in lines[2:] if l])
        grid = cls([tuple(a) for a in axes])
        if vals.size != int(np.prod(grid.shape)):
            raise DataFormatError(f"grid CSV has {vals.size} values, axes imply {int(np.prod(grid.shape))}")
        grid.values = vals.reshape(grid.shape)
        return grid


def quadrature_integral(f, grid: DensityGrid) -> float:
    """Trapezoidal integral of a vectorized ``f: (N, d) -> (N,)`` over the grid."""
    vals = np.asarray(f(grid.points()), dtype=np.float64).ravel()
    return float(np.dot(grid.weights(), vals))


# -- config helper ------------------------------------------------------------------------------
def target_from_config(cfg: dict, base_dir=".") -> TargetSpec:
    kind = cfg.get("kind")
    if kind == "five_modes_1d":
        return five_modes_1d()
    if kind == "two_moons":
        return two_moons(cfg.get("noise", 0.05))
    if kind == "s_curve":
        return s_curve(cfg.get("noise", 0.05))
    if kind == "gaussian_mixture":
        return gaussian_mixture(cfg["weights"], cfg["means"], cfg["stds"], cfg.get("scale", 1.0))
    if kind == "image_density":
        return load_image_density(Path(base_dir) / cfg["path"])
    if kind == "csv_dataset":
        return dataset_target(load_csv_dataset(Path(base_dir) / cfg["path"]).x)
    raise ValueError(f"unknown target kind {kind!r}")
