"""Softmax classifier producing the K weight functions w_k(z) (optionally w_k(z; omega))."""
from __future__ import annotations

import numpy as np

from . import diffable as df
from .diffable import Tensor
from .maps import MLP


class WeightNetwork:
    """MLP with ``hidden`` tanh layers and a K-way log-softmax head.

    Input width is ``dim + cov_dim``; the covariate columns come last.  With
    ``K == 1`` no parameters are registered and the log-weight is identically 0.
    """

    def __init__(self, name: str, dim: int, K: int, hidden=(128, 128, 128),
                 activation: str = "tanh", cov_dim: int = 0):
        if K < 1:
            raise ValueError("K must be >= 1")
        self.name = name
        self.dim = dim
        self.K = K
        self.cov_dim = cov_dim
        self.hidden = tuple(hidden)
        self.activation = activation
        self.mlp = MLP(name, [dim + cov_dim, *self.hidden, K], activation)

    @property
    def last(self) -> int:
        return self.mlp.n_layers - 1

    def register(self, store, rng) -> None:
        if self.K > 1:
            self.mlp.register(store, rng)

    def log_weights(self, p, z: Tensor, omega: Tensor | None = None) -> Tensor:
        """(N, n_0) -> (N, K) log w_k(z)."""
        n = z.shape[0]
        if self.K == 1:
            return Tensor(np.zeros((n, 1)))
        h = z if omega is None else df.concat([z, omega], axis=1)
        return df.log_softmax(self.mlp(p, h), axis=1)

    def init_for_mixture(self, store, mixture_weights) -> None:
        """Zero the output layer and set its bias to log(mixture_weights): w(z) = alpha for all z."""
        alpha = np.asarray(mixture_weights, dtype=np.float64)
        if alpha.shape != (self.K,):
            raise ValueError(f"expected {self.K} mixture weights, got shape {alpha.shape}")
        if np.any(alpha <= 0):
            raise ValueError("mixture weights must be strictly positive")
        if self.K == 1:
            return
        alpha = alpha / alpha.sum()
        store.set(f"{self.name}.W{self.last}", 0.0)
        store.set(f"{self.name}.b{self.last}", np.log(alpha))

    def spec(self) -> dict:
        return {"hidden": list(self.hidden), "activation": self.activation}


def log_weights(net: WeightNetwork, store, z, omega=None) -> np.ndarray:
    """numpy convenience: log w(z) for one point or a batch."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    rows = z[None] if single else z
    om = None
    if omega is not None:
        om = np.asarray(omega, dtype=np.float64)
        om = Tensor(np.broadcast_to(om, (rows.shape[0], net.cov_dim)) if om.ndim == 1 else om)
    with df.no_grad():
        out = net.log_weights(store.constants(), Tensor(rows), om).data
    return out[0] if single else out
