"""Discretely indexed flow layers and stacks.

A layer holds K invertible maps T_k and a weight function w(z) on the simplex.  Its
density over an inner density q is

    psi(x) = sum_k w_k(T_k(x)) q(T_k(x)) |det J_{T_k}(x)|,

and a stack applies this recursively, ``layers[0]`` being the layer nearest the
data and the innermost density being the standard normal.  Normalizing-flow steps
are K = 1 layers.  Everything is evaluated in log space.

Graph-level methods take a parameter mapping ``p`` (see :mod:`diflab.diffable`);
the numpy-level methods evaluate at the model's own store without recording.
"""
from __future__ import annotations

import numpy as np

from . import diffable as df
from .diffable import ParameterStore, Tensor
from .maps import AffineCouplingMap, ChainMap, DiagonalAffineMap, MLP, Map, alternating_mask
from .weightnet import WeightNetwork

MODEL_VERSION = "dif-lab/model/v1"
LOG_2PI = float(np.log(2.0 * np.pi))


def std_normal_logpdf(x: Tensor) -> Tensor:
    return -0.5 * df.square(x).sum(axis=1) - 0.5 * x.shape[1] * LOG_2PI


def categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row with a single uniform, components in fixed order."""
    c = np.cumsum(probs, axis=1)
    c = c / c[:, -1:]
    u = rng.random(probs.shape[0])
    return np.minimum((c < u[:, None]).sum(axis=1), probs.shape[1] - 1)


def _rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def spread_locations(data: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """Initial locations spread over the data: quantiles in 1-D, random points otherwise."""
    data = _rows(data) if data.ndim > 1 else data[:, None]
    if data.shape[1] == 1:
        return np.quantile(data[:, 0], (np.arange(K) + 0.5) / K)[:, None]
    return data[rng.choice(len(data), size=K, replace=len(data) < K)].copy()


class DifLayer:
    kind = "dif"

    def __init__(self, name: str, dim: int, K: int = 2, hidden=(128, 128, 128),
                 activation: str = "tanh", maps: list[Map] | None = None, weights=None):
        if maps is None:
            maps = [DiagonalAffineMap(f"{name}.map{k}", dim) for k in range(K)]
        if not maps or any(m.dim != dim for m in maps):
            raise ValueError("a layer needs K >= 1 maps of matching dimension")
        self.name = name
        self.dim = dim
        self.maps = list(maps)
        self.weights = weights if weights is not None else WeightNetwork(
            f"{name}.w", dim, len(self.maps), hidden, activation)

    @property
    def K(self) -> int:
        return len(self.maps)

    @property
    def affine(self) -> bool:
        return all(isinstance(m, DiagonalAffineMap) for m in self.maps)

    def register(self, store, rng, locs=None) -> None:
        if locs is None:
            locs = rng.standard_normal((self.K, self.dim))
        for k, m in enumerate(self.maps):
            if isinstance(m, DiagonalAffineMap):
                m.register(store, rng, loc=locs[k])
            else:
                m.register(store, rng)
        self.weights.register(store, rng)

    def _bank(self, p):
        loc = df.stack([p[m.loc_name] for m in self.maps])
        ls = df.stack([p[m.log_scale_name] for m in self.maps])
        return loc, ls

    def push(self, p, x: Tensor) -> tuple[Tensor, Tensor]:
        """(N, d) -> T_k(x) as (N, K, d) and log|det J_{T_k}(x)| as (N, K)."""
        n = x.shape[0]
        if self.affine:
            loc, ls = self._bank(p)
            z = (x.reshape(n, 1, self.dim) - loc) * df.exp(-ls)
            return z, (-ls.sum(axis=1)) * np.ones((n, 1))
        outs = [m.forward(p, x) for m in self.maps]
        ld = [o[1] * np.ones(n) for o in outs]
        return df.stack([o[0] for o in outs], axis=1), df.stack(ld, axis=1)

    def pull(self, p, z: Tensor) -> tuple[Tensor, Tensor]:
        """(N, d) -> T_k^{-1}(z) as (N, K, d) and log|det J_{T_k^{-1}}(z)| as (N, K)."""
        n = z.shape[0]
        if self.affine:
            loc, ls = self._bank(p)
            x = loc + df.exp(ls) * z.reshape(n, 1, self.dim)
            return x, ls.sum(axis=1) * np.ones((n, 1))
        outs = [m.inverse(p, z) for m in self.maps]
        ld = [o[1] * np.ones(n) for o in outs]
        return df.stack([o[0] for o in outs], axis=1), df.stack(ld, axis=1)

    def log_weights(self, p, z: Tensor) -> Tensor:
        return self.weights.log_weights(p, z)

    def log_weights_diag(self, p, zk: Tensor) -> Tensor:
        """(N, K, d) -> (N, K) with entry k = log w_k(zk[:, k])."""
        n = zk.shape[0]
        if self.K == 1:
            return Tensor(np.zeros((n, 1)))
        lw = self.log_weights(p, zk.reshape(n * self.K, self.dim))
        return df.take_diagonal(lw.reshape(n, self.K, self.K))

    def spec(self) -> dict:
        if not isinstance(self.weights, WeightNetwork):
            raise ValueError("expanded cascade layers are not serializable")
        return {"kind": self.kind, "name": self.name, "K": self.K, "weightnet": self.weights.spec(),
                "maps": [m.spec() for m in self.maps]}


class CouplingLayer(DifLayer):
    """Normalizing-flow step: a K = 1 layer holding one affine coupling map."""

    kind = "coupling"

    def __init__(self, name: str, dim: int, parity: int = 0, hidden=(32, 32), mask=None):
        mask = alternating_mask(dim, parity) if mask is None else np.asarray(mask, dtype=float)
        super().__init__(name, dim, maps=[AffineCouplingMap(f"{name}.coupling", mask, hidden)])

    def spec(self) -> dict:
        m = self.maps[0]
        return {"kind": self.kind, "name": self.name, "K": 1, "mask": m.mask.astype(int).tolist(), "hidden": list(m.hidden)}


class CascadeWeights:
    """Weights of the expanded two-layer cascade, component index k0 * K1 + k1:
    w_{k0,k1}(z) = w0_{k0}(T1_{k1}^{-1}(z)) * w1_{k1}(z)."""

    def __init__(self, inner: DifLayer, outer: DifLayer):
        self.inner, self.outer = inner, outer
        self.K = inner.K * outer.K

    def log_weights(self, p, z: Tensor) -> Tensor:
        n, K0, K1, d = z.shape[0], self.inner.K, self.outer.K, z.shape[1]
        lw1 = self.outer.log_weights(p, z)
        z1, _ = self.outer.pull(p, z)
        lw0 = self.inner.log_weights(p, z1.reshape(n * K1, d)).reshape(n, K1, K0)
        total = lw0 + lw1.reshape(n, K1, 1)
        return total.transpose(0, 2, 1).reshape(n, K0 * K1)


class DifStack:
    """Ordered layers over a standard-normal prior; owns the parameter store."""

    def __init__(self, dim: int, layers: list[DifLayer], seed: int = 0,
                 store: ParameterStore | None = None, locs: dict | None = None):
        if any(l.dim != dim for l in layers):
            raise ValueError("layer dimension mismatch")
        self.dim = dim
        self.layers = list(layers)
        if store is None:
            store = ParameterStore()
            rng = np.random.default_rng(seed)
            for i, layer in enumerate(self.layers):
                layer.register(store, rng, locs=(locs or {}).get(i))
        self.store = store

    # -- graph level ------------------------------------------------------------
    def path_log_terms(self, p, x: Tensor, start: int = 0) -> Tensor:
        """(N, P) log-contributions of every index path; logsumexp over paths is log psi."""
        n = x.shape[0]
        if start == len(self.layers):
            return std_normal_logpdf(x).reshape(n, 1)
        layer = self.layers[start]
        z, ld = layer.push(p, x)
        lw = layer.log_weights_diag(p, z)
        inner = self.path_log_terms(p, z.reshape(n * layer.K, self.dim), start + 1)
        rest = inner.shape[1]
        terms = (lw + ld).reshape(n, layer.K, 1) + inner.reshape(n, layer.K, rest)
        return terms.reshape(n, layer.K * rest)

    def log_density_graph(self, p, x) -> Tensor:
        return df.logsumexp(self.path_log_terms(p, df.as_tensor(x)), axis=1)

    def backward_paths(self, p, z: Tensor) -> tuple[Tensor, Tensor]:
        """Push prior points through every index path towards data space.

        Returns points (M * P, d) and path log-weights (M, P) where the weight of a
        path is the product of the categorical probabilities along it."""
        m = z.shape[0]
        cur, logw = z, Tensor(np.zeros((m, 1)))
        for layer in reversed(self.layers):
            n = cur.shape[0]
            lw = layer.log_weights(p, cur)
            xk, _ = layer.pull(p, cur)
            logw = (logw.reshape(n, 1) + lw).reshape(m, -1)
            cur = xk.reshape(n * layer.K, self.dim)
        return cur, logw

    def forward_log_weights_graph(self, p, x: Tensor) -> Tensor:
        """log v_k(x) for the first layer, (N, K0)."""
        n = x.shape[0]
        terms = self.path_log_terms(p, x)
        per_k = df.logsumexp(terms.reshape(n, self.layers[0].K, -1), axis=2)
        return per_k - df.logsumexp(terms, axis=1).reshape(n, 1)

    # -- numpy level --------------------------------------------------------------
    def _as_rows(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 0 or (x.ndim == 1 and self.dim > 1)
        return x.reshape(-1, self.dim), single

    def log_density(self, x, chunk: int = 20000) -> np.ndarray:
        rows, single = self._as_rows(x)
        p = self.store.constants()
        with df.no_grad():
            out = np.concatenate([self.log_density_graph(p, Tensor(rows[i:i + chunk])).data
                                  for i in range(0, len(rows), chunk)]) if len(rows) else np.zeros(0)
        return float(out[0]) if single else out

    def forward_log_weights(self, x) -> np.ndarray:
        rows, single = self._as_rows(x)
        with df.no_grad():
            out = self.forward_log_weights_graph(self.store.constants(), Tensor(rows)).data
        return out[0] if single else out

    def log_weights(self, z, layer: int = 0) -> np.ndarray:
        rows, single = self._as_rows(z)
        with df.no_grad():
            out = self.layers[layer].log_weights(self.store.constants(), Tensor(rows)).data
        return out[0] if single else out

    def sample(self, n: int, seed=0, return_path: bool = False):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return self.transport(rng.standard_normal((n, self.dim)), rng, return_path)

    def transport(self, z, rng: np.random.Generator, return_path: bool = False):
        """Carry prior draws ``z`` to data space, drawing one index per layer (last layer first)."""
        z = np.asarray(z, dtype=np.float64).reshape(-1, self.dim)
        n = len(z)
        p = self.store.constants()
        path = []
        with df.no_grad():
            for layer in reversed(self.layers):
                if layer.K == 1:
                    u = np.zeros(n, dtype=int)
                else:
                    u = categorical(rng, np.exp(layer.log_weights(p, Tensor(z)).data))
                xk, _ = layer.pull(p, Tensor(z))
                z = xk.data[np.arange(n), u]
                path.append(u)
        if return_path:
            return z, np.stack(path[::-1], axis=1) if path else np.zeros((n, 0), dtype=int)
        return z

    def sample_forward(self, x, seed=0) -> np.ndarray:
        """Draw U ~ Categorical(v(x)) and return T_U(x) through the first layer."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        rows, single = self._as_rows(x)
        lv = self.forward_log_weights(rows)
        u = categorical(rng, np.exp(lv))
        with df.no_grad():
            zk, _ = self.layers[0].push(self.store.constants(), Tensor(rows))
        out = zk.data[np.arange(len(rows)), u]
        return out[0] if single else out

    def phi_log_density(self, log_p, z) -> np.ndarray:
        """log phi(z) = log sum_k v_k(T_k^{-1}(z)) p(T_k^{-1}(z)) |det J_{T_k^{-1}}(z)| (first layer)."""
        rows, single = self._as_rows(z)
        n, layer = len(rows), self.layers[0]
        with df.no_grad():
            xk, ldinv = layer.pull(self.store.constants(), Tensor(rows))
        pts = xk.data.reshape(n * layer.K, self.dim)
        lv = self.forward_log_weights(pts).reshape(n, layer.K, layer.K)
        lv_own = lv[:, np.arange(layer.K), np.arange(layer.K)]
        lp = np.asarray(log_p(pts), dtype=np.float64).reshape(n, layer.K)
        with df.no_grad():
            out = df.logsumexp(Tensor(lv_own + lp + ldinv.data), axis=1).data
        return float(out[0]) if single else out

    # -- serialization --------------------------------------------------------------
    def to_dict(self) -> dict:
        return {"version": MODEL_VERSION, "dim": self.dim,
                "layers": [l.spec() for l in self.layers], "params": self.store.to_dict()}

    def n_params(self) -> int:
        return len(self.store)


def expand_cascade(stack: DifStack) -> DifStack:
    """Equivalent single-layer model of a two-layer stack (K0 * K1 components), sharing parameters."""
    if len(stack.layers) != 2:
        raise ValueError("expand_cascade expects exactly two layers")
    inner, outer = stack.layers
    if inner.dim != outer.dim:
        raise ValueError("dimension mismatch")
    maps = [ChainMap([m0, m1]) for m0 in inner.maps for m1 in outer.maps]
    layer = DifLayer(f"{inner.name}x{outer.name}", stack.dim, maps=maps,
                     weights=CascadeWeights(inner, outer))
    return DifStack(stack.dim, [layer], store=stack.store)


class ConditionalDifLayer:
    """DIF whose weights see (z, omega) and whose location-scale maps are predicted from omega.

    The covariate network outputs K*d locations followed by K*d log-scales; with
    ``skip`` it adds a linear term in omega to its MLP output."""

    kind = "conditional_dif"

    def __init__(self, name: str, dim: int, cov_dim: int, K: int = 2, hidden=(64, 64),
                 activation: str = "tanh", cov_hidden=(32,), skip: bool = True):
        if cov_dim < 1:
            raise ValueError("conditional layer needs at least one covariate")
        self.name = name
        self.dim = dim
        self.cov_dim = cov_dim
        self.K = K
        self.cov_hidden = tuple(cov_hidden)
        self.skip = skip and bool(self.cov_hidden)
        self.weights = WeightNetwork(f"{name}.w", dim, K, hidden, activation, cov_dim=cov_dim)
        self.covnet = MLP(f"{name}.cov", [cov_dim, *self.cov_hidden, 2 * K * dim], activation)

    @property
    def last_bias(self) -> str:
        return f"{self.covnet.name}.b{self.covnet.n_layers - 1}"

    def register(self, store, rng, locs=None) -> None:
        self.covnet.register(store, rng, zero_last=True)
        if self.skip:
            store.add(f"{self.name}.cov.skip", np.zeros((self.cov_dim, 2 * self.K * self.dim)))
        if locs is None:
            locs = rng.standard_normal((self.K, self.dim))
        store.set(self.last_bias, np.concatenate([np.ravel(locs), np.zeros(self.K * self.dim)]))
        self.weights.register(store, rng)

    def loc_log_scale(self, p, omega: Tensor) -> tuple[Tensor, Tensor]:
        n = omega.shape[0]
        out = self.covnet(p, omega)
        if self.skip:
            out = out + omega @ p[f"{self.name}.cov.skip"]
        out = out.reshape(n, 2, self.K, self.dim)
        return out[:, 0], out[:, 1]

    def path_log_terms(self, p, x: Tensor, omega: Tensor) -> Tensor:
        n, K, d = x.shape[0], self.K, self.dim
        loc, ls = self.loc_log_scale(p, omega)
        z = (x.reshape(n, 1, d) - loc) * df.exp(-ls)
        ld = -ls.sum(axis=2)
        flat = z.reshape(n * K, d)
        if K == 1:
            lw = Tensor(np.zeros((n, 1)))
        else:
            om = omega.reshape(n, 1, self.cov_dim) * np.ones((1, K, 1))
            lw = self.weights.log_weights(p, flat, om.reshape(n * K, self.cov_dim))
            lw = df.take_diagonal(lw.reshape(n, K, K))
        return lw + ld + std_normal_logpdf(flat).reshape(n, K)

    def log_density_graph(self, p, x, omega) -> Tensor:
        return df.logsumexp(self.path_log_terms(p, df.as_tensor(x), df.as_tensor(omega)), axis=1)

    def spec(self) -> dict:
        return {"kind": self.kind, "name": self.name, "K": self.K, "cov_dim": self.cov_dim,
                "weightnet": self.weights.spec(),
                "covnet": {"hidden": list(self.cov_hidden), "skip": self.skip}}


class ConditionalDifModel:
    """A conditional layer with its own parameter store."""

    def __init__(self, layer: ConditionalDifLayer, seed: int = 0, store=None, locs=None):
        self.layer = layer
        self.dim = layer.dim
        self.cov_dim = layer.cov_dim
        if store is None:
            store = ParameterStore()
            layer.register(store, np.random.default_rng(seed), locs=locs)
        self.store = store

    @property
    def layers(self) -> list:
        return [self.layer]

    def log_density_graph(self, p, x, omega) -> Tensor:
        return self.layer.log_density_graph(p, x, omega)

    def log_density(self, x, omega) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.dim)
        om = np.asarray(omega, dtype=np.float64).reshape(-1, self.cov_dim)
        om = np.broadcast_to(om, (len(x), self.cov_dim))
        with df.no_grad():
            return self.log_density_graph(self.store.constants(), Tensor(x), Tensor(om)).data

    def sample(self, omega, seed=0) -> np.ndarray:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        om = np.asarray(omega, dtype=np.float64).reshape(-1, self.cov_dim)
        n, K, d = len(om), self.layer.K, self.dim
        p = self.store.constants()
        z = rng.standard_normal((n, d))
        with df.no_grad():
            loc, ls = self.layer.loc_log_scale(p, Tensor(om))
            if K == 1:
                u = np.zeros(n, dtype=int)
            else:
                lw = self.layer.weights.log_weights(p, Tensor(z), Tensor(om)).data
                u = categorical(rng, np.exp(lw))
        idx = np.arange(n)
        return loc.data[idx, u] + np.exp(ls.data[idx, u]) * z

    def to_dict(self) -> dict:
        return {"version": MODEL_VERSION, "dim": self.dim, "layers": [self.layer.spec()],
                "params": self.store.to_dict()}

    def n_params(self) -> int:
        return len(self.store)


# -- construction from specs ----------------------------------------------------------
def map_from_spec(name: str, dim: int, spec: dict) -> Map:
    kind = spec.get("kind")
    if kind == "diagonal_affine":
        return DiagonalAffineMap(name, dim)
    if kind == "coupling":
        return AffineCouplingMap(name, spec["mask"], spec.get("hidden", (32, 32)))
    raise ValueError(f"unknown map kind {kind!r}")


def layer_from_spec(name: str, dim: int, spec: dict, parity: int = 0):
    kind = spec.get("kind")
    if kind == "dif":
        K = int(spec.get("K", 2))
        wn = spec.get("weightnet", {})
        map_specs = spec.get("maps") or [{"kind": "diagonal_affine"}] * K
        if len(map_specs) != K:
            raise ValueError(f"{name}: K={K} but {len(map_specs)} map specs")
        maps = [map_from_spec(f"{name}.map{k}", dim, ms) for k, ms in enumerate(map_specs)]
        return DifLayer(name, dim, maps=maps, hidden=wn.get("hidden", (128, 128, 128)),
                        activation=wn.get("activation", "tanh"))
    if kind == "coupling":
        return CouplingLayer(name, dim, parity, spec.get("hidden", (32, 32)), spec.get("mask"))
    if kind == "conditional_dif":
        wn, cn = spec.get("weightnet", {}), spec.get("covnet", {})
        return ConditionalDifLayer(name, dim, int(spec["cov_dim"]), int(spec.get("K", 2)),
                                   wn.get("hidden", (64, 64)), wn.get("activation", "tanh"),
                                   cn.get("hidden", (32,)), cn.get("skip", True))
    raise ValueError(f"unknown layer kind {kind!r}")


def build_layers(dim: int, specs: list[dict]) -> list:
    layers, n_coupling = [], 0
    for i, spec in enumerate(specs):
        layers.append(layer_from_spec(spec.get("name", f"layer{i}"), dim, spec, parity=n_coupling % 2))
        n_coupling += spec.get("kind") == "coupling"
    return layers


def model_from_dict(blob: dict):
    if blob.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {blob.get('version')!r}")
    dim = int(blob["dim"])
    store = ParameterStore.from_dict(blob["params"])
    layers = build_layers(dim, blob["layers"])
    if layers and isinstance(layers[0], ConditionalDifLayer):
        if len(layers) != 1:
            raise ValueError("conditional models hold exactly one layer")
        model = ConditionalDifModel(layers[0], store=store)
    else:
        model = DifStack(dim, layers, store=store)
    missing = set(_expected_names(model)) - set(store.names)
    if missing:
        raise ValueError(f"model file lacks parameters: {sorted(missing)[:5]}")
    return model


def _expected_names(model) -> list[str]:
    probe = ParameterStore()
    rng = np.random.default_rng(0)
    for layer in model.layers:
        layer.register(probe, rng)
    return probe.names
