"""Residual MLP denoiser with timestep-interval LoRA experts and routers.

All tensors live in one :class:`ParamStore`. Names follow::

    <layer>.W, <layer>.b                    base weight (d x k) and bias
    <layer>.lora.n<n>.i<i>.A / .B           expert for interval i of scale n
    <layer>.router.F / .Fb / .E             gate map, gate bias, timestep table

Adapters act through the two-path form ``W z + (alpha/r) B (A z)``; merged
effective weights are available for inspection and must agree with it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DivergenceError, ShapeError
from .numerics import ParamStore
from .schedule import ScaleSet, interval_index

# Numerator of the LoRA init bound, matching kaiming-uniform with a=sqrt(5).
_A_INIT = 1.0


@dataclass(frozen=True)
class Mode:
    kind: str = "base"
    scale: int | None = None

    def __post_init__(self):
        if self.kind not in ("base", "fostering", "assembled"):
            raise ValueError(f"unknown mode {self.kind!r}")
        if (self.kind == "fostering") != (self.scale is not None):
            raise ValueError("fostering mode needs exactly one scale")

    @classmethod
    def base(cls) -> Mode:
        return cls("base")

    @classmethod
    def fostering(cls, n: int) -> Mode:
        return cls("fostering", int(n))

    @classmethod
    def assembled(cls) -> Mode:
        return cls("assembled")

    @classmethod
    def parse(cls, text: str) -> Mode:
        if text.startswith("fostering"):
            _, _, n = text.partition(":")
            if not n:
                raise ValueError("fostering mode must name a scale, e.g. 'fostering:8'")
            return cls.fostering(int(n))
        return cls(text)

    def __str__(self) -> str:
        return f"fostering:{self.scale}" if self.kind == "fostering" else self.kind


BASE = Mode.base()
ASSEMBLED = Mode.assembled()


def silu(a: np.ndarray) -> np.ndarray:
    return a * expit(a)


def silu_grad(a: np.ndarray) -> np.ndarray:
    s = expit(a)
    return s * (1.0 + a * (1.0 - s))


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding, one row per timestep: ``[sin(t f), cos(t f)]``."""
    if dim % 2:
        raise ValueError("embedding dimension must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def lora_delta(A: np.ndarray, B: np.ndarray, alpha: float) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or B.shape[1] != A.shape[0]:
        raise ShapeError(f"LoRA factors do not conform: B {B.shape}, A {A.shape}")
    r = A.shape[0]
    return (alpha / r) * (B @ A)


@dataclass
class LoRAAdapter:
    """View onto one expert's factors inside a parameter store."""

    A: np.ndarray
    B: np.ndarray
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return lora_delta(self.A, self.B, self.alpha)

    def n_params(self) -> int:
        return self.A.size + self.B.size


@dataclass
class Router:
    F: np.ndarray
    Fb: np.ndarray
    E: np.ndarray

    @property
    def n_context(self) -> int:
        return self.F.shape[0]

    def n_params(self) -> int:
        return self.F.size + self.Fb.size + self.E.size


def pool_tokens(z: np.ndarray) -> np.ndarray:
    """Mean over token positions of a ``k x l`` layer input."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        return z
    return z.mean(axis=1)


def router_gate(router: Router, z: np.ndarray, t: int) -> np.ndarray:
    T = router.E.shape[0]
    if not (1 <= t <= T):
        raise ValueError(f"timestep {t} out of range [1, {T}]")
    pooled = pool_tokens(z)
    return router.F @ pooled + router.Fb + router.E[t - 1]


class AdaptedLinear:
    """A linear layer that may host an expert bank and a router."""

    def __init__(self, model: DenoiserModel, name: str, d: int, k: int):
        self.model = model
        self.name = name
        self.d = d
        self.k = k
        self.has_bank = False
        self.has_router = False
        self._names: dict[tuple[int, int], tuple[str, str]] = {}

    # parameter access -------------------------------------------------
    @property
    def params(self) -> ParamStore:
        return self.model.params

    @property
    def W(self) -> np.ndarray:
        return self.params[f"{self.name}.W"]

    @property
    def bias(self) -> np.ndarray:
        return self.params[f"{self.name}.b"]

    def adapter_prefix(self, n: int, i: int) -> str:
        return f"{self.name}.lora.n{n}.i{i}"

    def _adapter_names(self, n: int, i: int) -> tuple[str, str]:
        names = self._names.get((n, i))
        if names is None:
            p = self.adapter_prefix(n, i)
            names = self._names[(n, i)] = (p + ".A", p + ".B")
        return names

    def adapter(self, n: int, i: int) -> LoRAAdapter:
        p = self.adapter_prefix(n, i)
        return LoRAAdapter(self.params[p + ".A"], self.params[p + ".B"], self.model.lora_alpha)

    @property
    def router(self) -> Router:
        p = f"{self.name}.router"
        return Router(self.params[p + ".F"], self.params[p + ".Fb"], self.params[p + ".E"])

    # merged weights ---------------------------------------------------
    def effective_weight_fostering(self, t: int, n: int) -> np.ndarray:
        if not self.has_bank:
            raise ValueError(f"layer {self.name} has no expert bank")
        i = interval_index(t, self.model.T, n)
        return self.W + self.adapter(n, i).delta()

    def effective_weight_assembled(self, z: np.ndarray, t: int) -> np.ndarray:
        if not self.has_bank:
            raise ValueError(f"layer {self.name} has no expert bank")
        scales = self.model.scales
        T = self.model.T
        weight = self.W + self.adapter(scales.core, interval_index(t, T, scales.core)).delta()
        if scales.m == 1:
            return weight
        if not self.has_router:
            raise ValueError(f"layer {self.name} has no router")
        router = self.router
        if router.n_context != scales.m - 1:
            raise ShapeError(
                f"router of {self.name} gates {router.n_context} experts, bank has {scales.m - 1}"
            )
        g = router_gate(router, z, t)
        for j, n in enumerate(scales.scales[1:]):
            weight = weight + g[j] * self.adapter(n, interval_index(t, T, n)).delta()
        return weight

    # batched two-path forward / backward ------------------------------
    def forward(self, x: np.ndarray, t: np.ndarray, mode: Mode, cache: dict | None, plan=None):
        """Two-path forward for a batch; ``plan`` maps scale -> [(i, rows)]."""
        tensors = self.model.params.tensors
        name = self.name
        y = x @ tensors[name + ".W"].T + tensors[name + ".b"]
        if mode.kind == "base" or not self.has_bank:
            if cache is not None:
                cache["x"] = x
            return y
        scales = self.model.scales
        if plan is None:
            plan = routing_plan(t, self.model.T, scales)
        s = self.model.lora_alpha / self.model.lora_rank
        core_n = mode.scale if mode.kind == "fostering" else scales.core
        names = self._adapter_names
        groups = []
        for i, rows in plan[core_n]:
            pa, pb = names(core_n, i)
            u = x[rows] @ tensors[pa].T
            y[rows] += s * (u @ tensors[pb].T)
            groups.append((pa, pb, rows, u, None))
        g = None
        if mode.kind == "assembled" and scales.m > 1:
            if not self.has_router:
                raise ValueError(f"layer {name} has no router")
            rp = name + ".router"
            g = x @ tensors[rp + ".F"].T + tensors[rp + ".Fb"] + tensors[rp + ".E"][t - 1]
            for j, n in enumerate(scales.scales[1:]):
                for i, rows in plan[n]:
                    pa, pb = names(n, i)
                    u = x[rows] @ tensors[pa].T
                    v = u @ tensors[pb].T
                    y[rows] += g[rows, j : j + 1] * (s * v)
                    groups.append((pa, pb, rows, u, (j, v)))
        if cache is not None:
            cache["x"] = x
            cache["t"] = t
            cache["groups"] = groups
            cache["g"] = g
        return y

    def backward(self, cache: dict, dy: np.ndarray, grads: dict) -> np.ndarray:
        params = self.params
        x = cache["x"]
        W = self.W
        dx = dy @ W
        wname, bname = f"{self.name}.W", f"{self.name}.b"
        if params.is_trainable(wname):
            _acc(grads, wname, dy.T @ x)
        if params.is_trainable(bname):
            _acc(grads, bname, dy.sum(axis=0))
        groups = cache.get("groups")
        if not groups:
            return dx
        s = self.model.lora_alpha / self.model.lora_rank
        g = cache["g"]
        dg = None if g is None else np.zeros_like(g)
        for pa, pb, rows, u, ctx in groups:
            A, B = params[pa], params[pb]
            dyr = dy[rows]
            if ctx is not None:
                j, v = ctx
                dg[rows, j] = s * np.sum(dyr * v, axis=1)
                dyr = g[rows, j : j + 1] * dyr
            dyB = dyr @ B
            if params.is_trainable(pb):
                _acc(grads, pb, s * (dyr.T @ u))
            if params.is_trainable(pa):
                _acc(grads, pa, s * (dyB.T @ x[rows]))
            dx[rows] += s * (dyB @ A)
        if dg is not None:
            rp = f"{self.name}.router"
            F = params[rp + ".F"]
            if params.is_trainable(rp + ".F"):
                _acc(grads, rp + ".F", dg.T @ x)
            if params.is_trainable(rp + ".Fb"):
                _acc(grads, rp + ".Fb", dg.sum(axis=0))
            if params.is_trainable(rp + ".E"):
                dE = np.zeros_like(params[rp + ".E"])
                np.add.at(dE, cache["t"] - 1, dg)
                _acc(grads, rp + ".E", dE)
            dx += dg @ F
        return dx


def routing_plan(t: np.ndarray, T: int, scales: ScaleSet) -> dict[int, list]:
    """Group batch rows by active interval, per scale.

    Groups are slices when rows are sorted by ``t`` (interval indices are
    monotone in ``t``, so every scale's groups are then contiguous) and index
    arrays otherwise.
    """
    plan = {}
    for n in scales:
        idx = interval_index(t, T, n)
        cuts = np.flatnonzero(idx[1:] != idx[:-1]) + 1
        if cuts.size == 0:
            plan[n] = [(int(idx[0]), slice(None))]
        elif np.all(idx[cuts] > idx[cuts - 1]):
            edges = [0, *cuts.tolist(), len(idx)]
            plan[n] = [(int(idx[a]), slice(a, b)) for a, b in zip(edges[:-1], edges[1:])]
        else:
            plan[n] = [(int(i), np.flatnonzero(idx == i)) for i in np.unique(idx)]
    return plan


def _acc(grads: dict, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


@dataclass
class ForwardCache:
    layers: dict = field(default_factory=dict)
    pre_acts: dict = field(default_factory=dict)
    hidden: list = field(default_factory=list)
    gates: dict = field(default_factory=dict)
    cond: np.ndarray | None = None


class DenoiserModel:
    """Noise predictor ``eps_hat(x_t, t, c)``.

    Input projection, SiLU, plus a projected sinusoidal timestep embedding
    (and optional class embedding), then ``depth`` residual blocks
    ``h + silu(L(h))`` and a linear output projection.
    """

    def __init__(
        self,
        data_dim: int = 2,
        width: int = 64,
        depth: int = 3,
        time_dim: int = 32,
        n_classes: int = 0,
        T: int = 1000,
        adapt_io: bool = False,
        rng: np.random.Generator | None = None,
    ):
        rng = np.random.default_rng(0) if rng is None else rng
        self.data_dim = data_dim
        self.width = width
        self.depth = depth
        self.time_dim = time_dim
        self.n_classes = n_classes
        self.T = T
        self.adapt_io = adapt_io
        self.params = ParamStore()
        self.scales: ScaleSet | None = None
        self.lora_rank = 0
        self.lora_alpha = 0.0
        self._plan_memo = None
        self._emb_memo = None

        self.inp = self._linear("in", width, data_dim, rng)
        self.temb = self._linear("temb", width, time_dim, rng)
        self.hidden = [self._linear(f"h{l}", width, width, rng) for l in range(depth)]
        self.out = self._linear("out", data_dim, width, rng)
        if n_classes:
            self.params.add("cond.E", rng.normal(0.0, 0.1, size=(n_classes, width)))

    def _linear(self, name, d, k, rng) -> AdaptedLinear:
        bound = 1.0 / math.sqrt(k)
        self.params.add(f"{name}.W", rng.uniform(-bound, bound, size=(d, k)))
        self.params.add(f"{name}.b", np.zeros(d))
        return AdaptedLinear(self, name, d, k)

    # structure ----------------------------------------------------------
    @property
    def adapted_layers(self) -> list[AdaptedLinear]:
        layers = list(self.hidden)
        if self.adapt_io:
            layers = [self.inp, *layers, self.out]
        return layers

    @property
    def middle_layer(self) -> str:
        return self.hidden[len(self.hidden) // 2].name

    def base_names(self) -> list[str]:
        return [n for n in self.params if ".lora." not in n and ".router." not in n]

    def expert_names(self, n: int | None = None, i: int | None = None) -> list[str]:
        key = ".lora." if n is None else f".lora.n{n}." if i is None else f".lora.n{n}.i{i}."
        return [name for name in self.params if key in name]

    def router_names(self) -> list[str]:
        return [n for n in self.params if ".router." in n]

    @property
    def has_routers(self) -> bool:
        return bool(self.adapted_layers) and all(l.has_router for l in self.adapted_layers)

    def attach_experts(self, scales: ScaleSet, rank: int, alpha: float, rng: np.random.Generator):
        """Create one zero-delta adapter per interval per scale on every adapted layer."""
        if self.scales is not None:
            raise ValueError("experts already attached")
        for layer in self.adapted_layers:
            if rank < 1 or rank > min(layer.d, layer.k) // 2:
                raise ValueError(
                    f"rank {rank} too large for layer {layer.name} ({layer.d}x{layer.k})"
                )
        self.scales = scales
        self.lora_rank = rank
        self.lora_alpha = float(alpha)
        for layer in self.adapted_layers:
            bound = _A_INIT / math.sqrt(layer.k)
            for n in scales:
                for i in range(1, n + 1):
                    p = layer.adapter_prefix(n, i)
                    self.params.add(p + ".A", rng.uniform(-bound, bound, size=(rank, layer.k)))
                    self.params.add(p + ".B", np.zeros((layer.d, rank)))
            layer.has_bank = True

    def attach_routers(self):
        if self.scales is None:
            raise ValueError("attach experts before routers")
        m = self.scales.m
        if m == 1:
            return
        for layer in self.adapted_layers:
            p = f"{layer.name}.router"
            self.params.add(p + ".F", np.zeros((m - 1, layer.k)))
            self.params.add(p + ".Fb", np.zeros(m - 1))
            self.params.add(p + ".E", np.zeros((self.T, m - 1)))
            layer.has_router = True

    def _check_mode(self, mode: Mode):
        if mode.kind == "base":
            return
        if self.scales is None:
            raise ValueError(f"mode {mode} needs an expert bank")
        if mode.kind == "fostering" and mode.scale not in self.scales.scales:
            raise ValueError(f"scale {mode.scale} not in bank {self.scales.scales}")
        if mode.kind == "assembled" and self.scales.m > 1 and not self.has_routers:
            raise ValueError("assembled mode needs routers")

    def _plan(self, t: np.ndarray) -> dict:
        key = t.tobytes()
        memo = self._plan_memo
        if memo is None or memo[0] != key or memo[1] is not self.scales:
            memo = (key, self.scales, routing_plan(t, self.T, self.scales))
            self._plan_memo = memo
        return memo[2]

    def _embedding(self, t: np.ndarray) -> np.ndarray:
        key = t.tobytes()
        memo = self._emb_memo
        if memo is None or memo[0] != key:
            memo = (key, timestep_embedding(t, self.time_dim))
            self._emb_memo = memo
        return memo[1]

    # forward / backward -------------------------------------------------
    def forward(self, x, t, c=None, mode: Mode = BASE, cache: ForwardCache | None = None):
        """Predict the noise for a batch. ``t`` is a scalar or one per row."""
        self._check_mode(mode)
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        bsz = x.shape[0]
        t = np.asarray(t, dtype=np.int64)
        if t.ndim == 0:
            t = np.full(bsz, int(t), dtype=np.int64)
        if t.shape != (bsz,):
            raise ShapeError(f"need one timestep per row, got {t.shape} for batch {bsz}")
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]")
        lc = None if cache is None else {}
        plan = None if mode.kind == "base" else self._plan(t)

        def run(layer, inp):
            c_l = None if lc is None else lc.setdefault(layer.name, {})
            out = layer.forward(inp, t, mode, c_l, plan)
            if not np.isfinite(out).all():
                raise DivergenceError(f"non-finite activations in layer {layer.name}")
            if c_l is not None and c_l.get("g") is not None:
                cache.gates[layer.name] = c_l["g"]
            return out

        a_in = run(self.inp, x)
        emb = self._embedding(t)
        h = silu(a_in) + run(self.temb, emb)
        if self.n_classes and c is not None:
            c = np.broadcast_to(np.asarray(c, dtype=np.int64), (bsz,))
            h = h + self.params["cond.E"][c]
        if cache is not None:
            cache.pre_acts["in"] = a_in
            cache.hidden.append(h)
            cache.layers = lc
            cache.cond = c if self.n_classes else None
        for layer in self.hidden:
            a = run(layer, h)
            h = h + silu(a)
            if cache is not None:
                cache.pre_acts[layer.name] = a
                cache.hidden.append(h)
        return run(self.out, h)

    def backward(self, cache: ForwardCache, d_out: np.ndarray) -> dict[str, np.ndarray]:
        """Reverse pass; returns gradients of trainable tensors only."""
        grads: dict[str, np.ndarray] = {}
        lc = cache.layers
        dh = self.out.backward(lc["out"], d_out, grads)
        for layer in reversed(self.hidden):
            da = dh * silu_grad(cache.pre_acts[layer.name])
            dh = dh + layer.backward(lc[layer.name], da, grads)
        if cache.cond is not None and self.params.is_trainable("cond.E"):
            dE = np.zeros_like(self.params["cond.E"])
            np.add.at(dE, cache.cond, dh)
            _acc(grads, "cond.E", dE)
        self.temb.backward(lc["temb"], dh, grads)
        self.inp.backward(lc["in"], dh * silu_grad(cache.pre_acts["in"]), grads)
        return grads

    __call__ = forward

    # accounting ---------------------------------------------------------
    def adapter_param_count(self) -> int:
        return sum(self.params[n].size for n in self.expert_names())

    def router_param_count(self) -> int:
        return sum(self.params[n].size for n in self.router_names())

    def architecture(self) -> dict:
        return {
            "data_dim": self.data_dim,
            "width": self.width,
            "depth": self.depth,
            "time_dim": self.time_dim,
            "n_classes": self.n_classes,
            "T": self.T,
            "adapt_io": self.adapt_io,
        }


def denoising_loss(model: DenoiserModel, x0, t, eps, sched, c=None, mode: Mode = BASE):
    """Loss closure for the mean squared noise-prediction error on one batch.

    The loss is ``mean_b ||eps_b - eps_hat_b||^2`` (squared norm summed over
    data dimensions). ``x0``, ``t`` and ``eps`` are fixed inside the closure.
    """
    from .schedule import forward_diffuse

    # rows sorted by t let the routing plan use slices; the mean is order-free
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (np.shape(eps)[0],))
    order = np.argsort(t, kind="stable")
    x_t = forward_diffuse(x0, t, eps, sched)[order]
    eps = np.asarray(eps, dtype=np.float64)[order]
    t = t[order]
    if c is not None:
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), t.shape)[order]
    bsz = eps.shape[0]

    def loss_fn(params=None, backward=True):
        cache = ForwardCache() if backward else None
        pred = model.forward(x_t, t, c, mode, cache)
        resid = pred - eps
        loss = float(np.sum(resid * resid) / bsz)
        if not backward:
            return loss, None
        return loss, model.backward(cache, (2.0 / bsz) * resid)

    return loss_fn
