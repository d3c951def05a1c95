"""Small deterministic neural-network engine.

Layers are immutable descriptors; parameters live in a separate
:class:`NetworkState`.  A network is a shared trunk followed by named heads,
each head being its own short layer list.  Everything is float64 so that
gradients can be checked tightly against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give bit-identical streams."""
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int

    def param_shapes(self):
        return {"weight": (self.n_in, self.n_out), "bias": (self.n_out,)}

    def fan_in(self):
        return self.n_in

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.n_in,):
            raise ShapeError(f"Dense expects ({self.n_in},), got {in_shape}")
        return (self.n_out,)

    def forward(self, p, x):
        return x @ p["weight"] + p["bias"], x

    def backward(self, p, x, gy):
        return gy @ p["weight"].T, {"weight": x.T @ gy, "bias": gy.sum(axis=0)}


@dataclass(frozen=True)
class Conv2D:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    pad: int = 0

    def param_shapes(self):
        k = self.kernel
        return {"weight": (self.out_ch, self.in_ch, k, k), "bias": (self.out_ch,)}

    def fan_in(self):
        return self.in_ch * self.kernel * self.kernel

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ShapeError(f"Conv2D expects ({self.in_ch}, H, W), got {in_shape}")
        _, h, w = in_shape
        ho = (h + 2 * self.pad - self.kernel) // self.stride + 1
        wo = (w + 2 * self.pad - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"Conv2D kernel {self.kernel} does not fit {in_shape}")
        return (self.out_ch, ho, wo)

    def _slices(self, ho, wo):
        s = self.stride
        for i in range(self.kernel):
            for j in range(self.kernel):
                yield i, j, (slice(None), slice(None),
                             slice(i, i + s * (ho - 1) + 1, s),
                             slice(j, j + s * (wo - 1) + 1, s))

    def forward(self, p, x):
        pad = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        _, ho, wo = self.out_shape(x.shape[1:])
        w = p["weight"]
        y = np.zeros((x.shape[0], self.out_ch, ho, wo))
        for i, j, sl in self._slices(ho, wo):
            y += np.einsum("oc,bchw->bohw", w[:, :, i, j], xp[sl], optimize=True)
        y += p["bias"][None, :, None, None]
        return y, (x.shape, xp)

    def backward(self, p, cache, gy):
        x_shape, xp = cache
        pad = self.pad
        ho, wo = gy.shape[2], gy.shape[3]
        w = p["weight"]
        g_w = np.empty_like(w)
        gxp = np.zeros(xp.shape)
        for i, j, sl in self._slices(ho, wo):
            g_w[:, :, i, j] = np.einsum("bohw,bchw->oc", gy, xp[sl], optimize=True)
            gxp[sl] += np.einsum("oc,bohw->bchw", w[:, :, i, j], gy, optimize=True)
        g_b = gy.sum(axis=(0, 2, 3))
        if pad:
            gxp = gxp[:, :, pad:pad + x_shape[2], pad:pad + x_shape[3]]
        return np.ascontiguousarray(gxp), {"weight": g_w, "bias": g_b}


@dataclass(frozen=True)
class Upsample2D:
    """Nearest-neighbour upsampling by an integer factor."""

    factor: int = 2

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"Upsample2D expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        return (c, h * self.factor, w * self.factor)

    def forward(self, p, x):
        f = self.factor
        return x.repeat(f, axis=2).repeat(f, axis=3), None

    def backward(self, p, cache, gy):
        b, c, h, w = gy.shape
        f = self.factor
        return gy.reshape(b, c, h // f, f, w // f, f).sum(axis=(3, 5)), {}


@dataclass(frozen=True)
class Activation:
    kind: str  # "relu" | "sigmoid" | "identity"

    def __post_init__(self):
        if self.kind not in ("relu", "sigmoid", "identity"):
            raise ValueError(f"unknown activation {self.kind!r}")

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, p, x):
        if self.kind == "relu":
            return np.maximum(x, 0.0), x > 0
        if self.kind == "sigmoid":
            y = sigmoid(x)
            return y, y
        return x, None

    def backward(self, p, cache, gy):
        if self.kind == "relu":
            return gy * cache, {}
        if self.kind == "sigmoid":
            return gy * cache * (1.0 - cache), {}
        return gy, {}


@dataclass(frozen=True)
class Flatten:
    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, p, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, p, shape, gy):
        return gy.reshape(shape), {}


@dataclass(frozen=True)
class Reshape:
    shape: tuple

    def out_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise ShapeError(f"cannot reshape {in_shape} to {self.shape}")
        return tuple(self.shape)

    def forward(self, p, x):
        return x.reshape((x.shape[0],) + tuple(self.shape)), x.shape

    def backward(self, p, shape, gy):
        return gy.reshape(shape), {}


@dataclass(frozen=True)
class Stash:
    """Remember the current activation under ``tag`` for a later :class:`Concat`."""

    tag: str

    def out_shape(self, in_shape):
        return tuple(in_shape)


@dataclass(frozen=True)
class Concat:
    """Concatenate the stashed activation ``tag`` along the channel axis."""

    tag: str


Layer = Dense | Conv2D | Upsample2D | Activation | Flatten | Reshape | Stash | Concat

_PARAM_LAYERS = (Dense, Conv2D)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# network description and state


@dataclass(frozen=True)
class NetworkSpec:
    """Shared trunk plus named heads.

    ``heads`` maps a head name to its layer list; every head starts from the
    trunk output.  Shapes are per-sample (no batch axis).
    """

    input_shape: tuple
    trunk: tuple
    heads: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "trunk", tuple(self.trunk))
        object.__setattr__(self, "heads", {k: tuple(v) for k, v in self.heads.items()})
        if not self.heads:
            raise ShapeError("network needs at least one head")
        self.output_shapes()  # validate

    def head_names(self):
        return sorted(self.heads)

    def _walk(self, layers, shape, stash):
        shapes = []
        for layer in layers:
            if isinstance(layer, Stash):
                stash[layer.tag] = shape
            elif isinstance(layer, Concat):
                if layer.tag not in stash:
                    raise ShapeError(f"Concat {layer.tag!r} before its Stash")
                other = stash[layer.tag]
                if len(shape) != 3 or tuple(other[1:]) != tuple(shape[1:]):
                    raise ShapeError(f"cannot concat {shape} with {other}")
                shape = (shape[0] + other[0],) + tuple(shape[1:])
                shapes.append(shape)
                continue
            else:
                shape = layer.out_shape(shape)
            shapes.append(shape)
        return shape, shapes

    def trunk_shape(self):
        return self._walk(self.trunk, self.input_shape, {})[0]

    def output_shapes(self):
        stash = {}
        trunk_out, _ = self._walk(self.trunk, self.input_shape, stash)
        return {name: self._walk(layers, trunk_out, dict(stash))[0]
                for name, layers in self.heads.items()}

    def param_layers(self):
        """Yield ``(prefix, layer)`` in canonical order: trunk by index, then
        heads in ASCII order, each by index."""
        for i, layer in enumerate(self.trunk):
            if isinstance(layer, _PARAM_LAYERS):
                yield f"trunk.{i:02d}", layer
        for name in self.head_names():
            for i, layer in enumerate(self.heads[name]):
                if isinstance(layer, _PARAM_LAYERS):
                    yield f"{name}.{i:02d}", layer

    def param_shapes(self):
        shapes = {}
        for prefix, layer in self.param_layers():
            for pname, shp in layer.param_shapes().items():
                shapes[f"{prefix}.{pname}"] = shp
        return shapes


@dataclass
class NetworkState:
    params: dict
    m: dict
    v: dict
    step: int = 0

    def copy(self):
        return NetworkState(
            {k: a.copy() for k, a in self.params.items()},
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.step,
        )

    def check(self, spec: NetworkSpec):
        for name, shp in spec.param_shapes().items():
            for store in (self.params, self.m, self.v):
                if name not in store or store[name].shape != tuple(shp):
                    raise ShapeError(f"parameter {name!r} missing or misshapen")


def init_params(spec: NetworkSpec, rng: np.random.Generator,
                scheme: str = "he_uniform") -> NetworkState:
    """Fan-in scaled uniform weights, zero biases, zero Adam moments.

    ``he_uniform`` draws from U(-sqrt(6/fan_in), sqrt(6/fan_in)) (target std
    sqrt(2/fan_in)); ``lecun_uniform`` uses sqrt(3/fan_in) (std sqrt(1/fan_in)).
    """
    gains = {"he_uniform": 6.0, "lecun_uniform": 3.0}
    if scheme not in gains:
        raise ValueError(f"unknown init scheme {scheme!r}")
    params = {}
    for prefix, layer in spec.param_layers():
        shapes = layer.param_shapes()
        limit = np.sqrt(gains[scheme] / layer.fan_in())
        params[f"{prefix}.weight"] = rng.uniform(-limit, limit, size=shapes["weight"])
        params[f"{prefix}.bias"] = np.zeros(shapes["bias"])
    zeros = {k: np.zeros_like(a) for k, a in params.items()}
    return NetworkState(params, zeros, {k: a.copy() for k, a in zeros.items()}, 0)


def init_target_std(fan_in: int, scheme: str = "he_uniform") -> float:
    return float(np.sqrt({"he_uniform": 2.0, "lecun_uniform": 1.0}[scheme] / fan_in))


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    input_shape: tuple
    trunk: list
    heads: dict
    stash_shapes: dict


def _layer_params(state, prefix, layer):
    if isinstance(layer, _PARAM_LAYERS):
        return {k: state.params[f"{prefix}.{k}"] for k in layer.param_shapes()}
    return None


def _run(layers, prefix, state, x, stash):
    caches = []
    for i, layer in enumerate(layers):
        if isinstance(layer, Stash):
            stash[layer.tag] = x
            caches.append(None)
            continue
        if isinstance(layer, Concat):
            other = stash[layer.tag]
            caches.append(x.shape[1])
            x = np.concatenate([x, other], axis=1)
            continue
        x, cache = layer.forward(_layer_params(state, f"{prefix}.{i:02d}", layer), x)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite activation after {prefix}.{i:02d} ({layer})")
        caches.append(cache)
    return x, caches


def forward(spec: NetworkSpec, state: NetworkState, x):
    """Run the network on a batch; returns ``(outputs, cache)``.

    ``outputs`` maps head name to a ``(batch, *head_shape)`` array.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != len(spec.input_shape) + 1 or x.shape[1:] != spec.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} != {spec.input_shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite network input")
    stash = {}
    h, trunk_caches = _run(spec.trunk, "trunk", state, x, stash)
    outputs, head_caches = {}, {}
    for name in spec.head_names():
        outputs[name], head_caches[name] = _run(spec.heads[name], name, state, h,
                                                dict(stash))
    cache = ForwardCache(x.shape, trunk_caches, head_caches,
                         {k: v.shape for k, v in stash.items()})
    cache.trunk_out_shape = h.shape
    return outputs, cache


def _back(layers, prefix, state, caches, g, grads, stash_grads):
    for i in range(len(layers) - 1, -1, -1):
        layer, cache = layers[i], caches[i]
        if isinstance(layer, Stash):
            if layer.tag in stash_grads:
                g = g + stash_grads.pop(layer.tag)
            continue
        if isinstance(layer, Concat):
            n_own = cache
            extra = g[:, n_own:]
            stash_grads[layer.tag] = stash_grads.get(layer.tag, 0.0) + extra
            g = g[:, :n_own]
            continue
        key = f"{prefix}.{i:02d}"
        g, pg = layer.backward(_layer_params(state, key, layer), cache, g)
        for pname, arr in pg.items():
            grads[f"{key}.{pname}"] = arr
    return g


def backward(spec: NetworkSpec, state: NetworkState, cache: ForwardCache,
             head_grads: Mapping[str, np.ndarray]):
    """Reverse pass.  Returns ``(param_grads, input_grad)``.

    Heads absent from ``head_grads`` contribute nothing.
    """
    if cache is None:
        raise ValueError("backward needs the cache from a forward call")
    unknown = set(head_grads) - set(spec.heads)
    if unknown:
        raise ShapeError(f"unknown heads {sorted(unknown)}")
    grads = {}
    g_trunk = np.zeros(cache.trunk_out_shape)
    stash_grads: dict = {}
    for name in spec.head_names():
        if name not in head_grads:
            continue
        g = np.asarray(head_grads[name], dtype=np.float64)
        g = _back(spec.heads[name], name, state, cache.heads[name], g, grads, stash_grads)
        g_trunk = g_trunk + g
    # zero grads for skipped heads keep the gradient dict complete
    for pname, shp in spec.param_shapes().items():
        if pname not in grads and not pname.startswith("trunk."):
            grads[pname] = np.zeros(shp)
    g_in = _back(spec.trunk, "trunk", state, cache.trunk, g_trunk, grads, stash_grads)
    return {k: grads[k] for k in spec.param_shapes()}, g_in


def adam_step(state: NetworkState, grads: Mapping[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> NetworkState:
    """One Adam update with bias correction; returns a new state."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
        if g.shape != state.params[k].shape:
            raise ShapeError(f"gradient shape mismatch for {k}")
    t = state.step + 1
    params, m, v = {}, {}, {}
    for k, p in state.params.items():
        g = grads.get(k)
        if g is None:
            params[k], m[k], v[k] = p.copy(), state.m[k].copy(), state.v[k].copy()
            continue
        m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        m_hat = m[k] / (1.0 - beta1 ** t)
        v_hat = v[k] / (1.0 - beta2 ** t)
        params[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return NetworkState(params, m, v, t)


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(a, b, floor: float = 1e-6):
    """Elementwise |a-b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(fn, x, eps: float = 1e-5):
    """Central finite-difference gradient of scalar ``fn`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = fn(x)
        flat[i] = old - eps
        fm = fn(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def gradient_check(spec: NetworkSpec, state: NetworkState, x, rng: np.random.Generator,
                   eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    The scalar probed is a random linear functional of every head output, so
    all heads and the trunk are exercised together.  Covers parameters and the
    input gradient.
    """
    outs, _ = forward(spec, state, x)
    weights = {k: rng.standard_normal(o.shape) for k, o in outs.items()}

    def scalar(st, xx):
        o, _ = forward(spec, st, xx)
        return sum(float(np.sum(weights[k] * o[k])) for k in o)

    _, cache = forward(spec, state, x)
    grads, g_in = backward(spec, state, cache, weights)
    worst = 0.0
    for name in spec.param_shapes():
        def fn(p, name=name):
            st = NetworkState({**state.params, name: p}, state.m, state.v, state.step)
            return scalar(st, x)
        num = numeric_grad(fn, state.params[name], eps)
        worst = max(worst, float(relative_error(grads[name], num).max()))
    num_in = numeric_grad(lambda xx: scalar(state, xx), x, eps)
    return max(worst, float(relative_error(g_in, num_in).max()))


def count_params(spec: NetworkSpec) -> int:
    return sum(int(np.prod(s)) for s in spec.param_shapes().values())


def sequential(input_shape: Sequence[int], trunk: Sequence, heads: Mapping[str, Sequence]):
    return NetworkSpec(tuple(input_shape), tuple(trunk), dict(heads))
