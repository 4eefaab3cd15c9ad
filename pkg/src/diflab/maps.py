"""Invertible maps T with forward, inverse and log|det J| evaluation.

All maps act on row batches ``(N, d)`` and read their parameters from a name ->
Tensor mapping, so the same object serves gradient evaluation (leaves) and plain
evaluation (constants).  ``forward`` computes ``z = T(x)`` with ``log|det J_T(x)|``;
``inverse`` computes ``x = T^{-1}(z)`` with ``log|det J_{T^{-1}}(z)|``.
"""
from __future__ import annotations

import numpy as np

from . import diffable as df
from .diffable import Tensor

SCALE_CLAMP = 5.0


def _glorot(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-a, a, size=(n_in, n_out))


class Map:
    dim: int
    name: str

    def register(self, store: df.ParameterStore, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def forward(self, p, x: Tensor) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def inverse(self, p, z: Tensor) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def spec(self) -> dict:
        raise NotImplementedError


class DiagonalAffineMap(Map):
    """Location-scale map with ``T^{-1}(z) = loc + exp(log_scale) * z``."""

    kind = "diagonal_affine"

    def __init__(self, name: str, dim: int):
        self.name = name
        self.dim = dim

    @property
    def loc_name(self) -> str:
        return f"{self.name}.loc"

    @property
    def log_scale_name(self) -> str:
        return f"{self.name}.log_scale"

    def register(self, store, rng, loc=None, log_scale=None) -> None:
        store.add(self.loc_name, np.zeros(self.dim) if loc is None else loc)
        store.add(self.log_scale_name, np.zeros(self.dim) if log_scale is None else log_scale)

    def set(self, store, loc, scale) -> None:
        store.set(self.loc_name, loc)
        store.set(self.log_scale_name, np.log(scale))

    def forward(self, p, x):
        loc, ls = p[self.loc_name], p[self.log_scale_name]
        z = (x - loc) * df.exp(-ls)
        logdet = -ls.sum() * np.ones(x.shape[0])
        return z, logdet

    def inverse(self, p, z):
        loc, ls = p[self.loc_name], p[self.log_scale_name]
        x = loc + df.exp(ls) * z
        logdet = ls.sum() * np.ones(z.shape[0])
        return x, logdet

    def spec(self) -> dict:
        return {"kind": self.kind}


class MLP:
    """tanh perceptron on row batches; parameters ``{name}.W{l}`` (n_l x n_{l+1}) and ``{name}.b{l}``."""

    def __init__(self, name: str, widths: list[int], activation: str = "tanh"):
        if activation not in ("tanh", "sigmoid"):
            raise ValueError(f"unknown activation {activation!r}")
        self.name = name
        self.widths = list(widths)
        self.activation = activation

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def register(self, store, rng, zero_last: bool = False) -> None:
        for l, (n_in, n_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            last = l == self.n_layers - 1
            W = np.zeros((n_in, n_out)) if (last and zero_last) else _glorot(rng, n_in, n_out)
            store.add(f"{self.name}.W{l}", W)
            store.add(f"{self.name}.b{l}", np.zeros(n_out))

    def __call__(self, p, h: Tensor) -> Tensor:
        act = df.tanh if self.activation == "tanh" else df.sigmoid
        for l in range(self.n_layers):
            h = h @ p[f"{self.name}.W{l}"] + p[f"{self.name}.b{l}"]
            if l < self.n_layers - 1:
                h = act(h)
        return h


def alternating_mask(dim: int, parity: int) -> np.ndarray:
    return ((np.arange(dim) + parity) % 2 == 0).astype(float)


class AffineCouplingMap(Map):
    """Real NVP coupling: masked coordinates pass through, the others get
    ``z_u = x_u * exp(s(x_m)) + t(x_m)`` with ``s`` soft-clamped to [-5, 5]."""

    kind = "coupling"

    def __init__(self, name: str, mask, hidden=(32, 32)):
        mask = np.asarray(mask, dtype=float)
        if mask.ndim != 1 or mask.size < 2:
            raise ValueError("coupling maps need dimension >= 2")
        kept, moved = np.flatnonzero(mask), np.flatnonzero(mask == 0)
        if kept.size == 0 or moved.size == 0:
            raise ValueError("mask must keep at least one and move at least one coordinate")
        self.name = name
        self.dim = mask.size
        self.mask = mask
        self.hidden = tuple(hidden)
        eye = np.eye(self.dim)
        self._gather = eye[:, kept]  # (d, m)
        self._scatter = eye[moved, :]  # (u, d)
        self._pick = eye[:, moved]  # (d, u)
        widths = [kept.size, *self.hidden, moved.size]
        self.scale_net = MLP(f"{name}.scale", widths)
        self.shift_net = MLP(f"{name}.shift", widths)

    def register(self, store, rng) -> None:
        self.scale_net.register(store, rng, zero_last=True)
        self.shift_net.register(store, rng, zero_last=True)

    def _scale_shift(self, p, x):
        xm = x @ self._gather
        s = SCALE_CLAMP * df.tanh(self.scale_net(p, xm) * (1.0 / SCALE_CLAMP))
        return s, self.shift_net(p, xm)

    def forward(self, p, x):
        s, t = self._scale_shift(p, x)
        zu = (x @ self._pick) * df.exp(s) + t
        return x * self.mask + zu @ self._scatter, s.sum(axis=1)

    def inverse(self, p, z):
        s, t = self._scale_shift(p, z)  # masked coordinates of z equal those of x
        xu = ((z @ self._pick) - t) * df.exp(-s)
        return z * self.mask + xu @ self._scatter, -s.sum(axis=1)

    def spec(self) -> dict:
        return {"kind": self.kind, "mask": self.mask.astype(int).tolist(), "hidden": list(self.hidden)}


class ChainMap(Map):
    """Composition applying ``maps[0]`` first in the forward direction."""

    kind = "chain"

    def __init__(self, maps: list[Map]):
        if not maps:
            raise ValueError("empty chain")
        dims = {m.dim for m in maps}
        if len(dims) != 1:
            raise ValueError(f"chain dimension mismatch: {sorted(dims)}")
        self.maps = list(maps)
        self.dim = maps[0].dim
        self.name = "(" + "->".join(m.name for m in maps) + ")"

    def register(self, store, rng) -> None:
        for m in self.maps:
            if not any(s.name.startswith(m.name + ".") for s in store.registry):
                m.register(store, rng)

    def forward(self, p, x):
        total = 0.0
        for m in self.maps:
            x, ld = m.forward(p, x)
            total = total + ld
        return x, total

    def inverse(self, p, z):
        total = 0.0
        for m in reversed(self.maps):
            z, ld = m.inverse(p, z)
            total = total + ld
        return z, total

    def spec(self) -> dict:
        return {"kind": self.kind, "maps": [m.spec() for m in self.maps]}


# -- numpy conveniences ---------------------------------------------------------
def _rows(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input point")
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def apply_forward(m: Map, store, x) -> np.ndarray:
    rows, single = _rows(x)
    with df.no_grad():
        z, _ = m.forward(store.constants(), Tensor(rows))
    return z.data[0] if single else z.data


def apply_inverse(m: Map, store, z) -> np.ndarray:
    rows, single = _rows(z)
    with df.no_grad():
        x, _ = m.inverse(store.constants(), Tensor(rows))
    return x.data[0] if single else x.data


def log_abs_det_jacobian(m: Map, store, x) -> np.ndarray | float:
    """log|det J_T(x)| of the forward direction."""
    rows, single = _rows(x)
    with df.no_grad():
        _, ld = m.forward(store.constants(), Tensor(rows))
    ld = np.broadcast_to(np.asarray(ld.data if isinstance(ld, Tensor) else ld), (rows.shape[0],))
    return float(ld[0]) if single else np.array(ld)
