"""Small dense-tensor neural toolkit: layers with hand-written backward
passes, softmax cross-entropy, Adam, a finite-difference checker, and the
``.ancn`` checkpoint format.

Layers keep their parameters in a shared ``params`` dict and accumulate
gradients into a matching ``grads`` dict, so a model is just an ordered
list of layers over one pair of dicts.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import CorruptFile, NumericFault, ShapeError


class Layer:
    """Base layer: ``forward`` caches what ``backward`` needs."""

    prefix = ""

    def __init__(self, params: dict, grads: dict, prefix: str = ""):
        self.params = params
        self.grads = grads
        self.prefix = prefix
        self.cache = None

    def p(self, name):
        return self.params[self.prefix + name]

    def acc(self, name, value):
        key = self.prefix + name
        self.grads[key] += value

    def _register(self, name, value):
        key = self.prefix + name
        self.params[key] = value
        self.grads[key] = np.zeros_like(value)

    def kinks(self):
        """Discrete state (masks, argmaxes) whose change marks a kink crossing."""
        return ()


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Conv2d(Layer):
    """Stride-1 'same' convolution on a single (C, H, W) map via im2col."""

    def __init__(self, params, grads, prefix, c_in, c_out, kernel=3, rng=None, dtype=np.float64,
                 need_input_grad=True):
        super().__init__(params, grads, prefix)
        if kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        self.c_in, self.c_out, self.k = c_in, c_out, kernel
        self.need_input_grad = need_input_grad
        rng = np.random.default_rng(rng)
        bound = math.sqrt(6.0 / (c_in * kernel * kernel))
        self._register("weight", rng.uniform(-bound, bound, (c_out, c_in, kernel, kernel)).astype(dtype))
        self._register("bias", np.zeros(c_out, dtype=dtype))

    def _cols(self, x):
        c, h, w = x.shape
        k, pad = self.k, self.k // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
        return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, h * w)

    def forward(self, x):
        if x.ndim != 3 or x.shape[0] != self.c_in:
            raise ShapeError(f"{self.prefix}conv expects ({self.c_in}, H, W), got {x.shape}")
        _, h, w = x.shape
        cols = self._cols(x)
        wm = self.p("weight").reshape(self.c_out, -1)
        y = wm @ cols
        y += self.p("bias")[:, None]
        self.cache = (cols, h, w)
        return y.reshape(self.c_out, h, w)

    def backward(self, dy):
        cols, h, w = self.cache
        dy2 = dy.reshape(self.c_out, h * w)
        self.acc("weight", (dy2 @ cols.T).reshape(self.p("weight").shape))
        self.acc("bias", dy2.sum(axis=1))
        if not self.need_input_grad:
            return None
        k, pad = self.k, self.k // 2
        dcols = (self.p("weight").reshape(self.c_out, -1).T @ dy2).reshape(self.c_in, k, k, h, w)
        dxp = np.zeros((self.c_in, h + 2 * pad, w + 2 * pad), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + h, j : j + w] += dcols[:, i, j]
        return dxp[:, pad : pad + h, pad : pad + w] if pad else dxp


class GroupNorm(Layer):
    def __init__(self, params, grads, prefix, channels, groups=4, eps=1e-5, dtype=np.float64, affine=True):
        super().__init__(params, grads, prefix)
        if channels % groups:
            raise ValueError("channels must be divisible by groups")
        self.c, self.g, self.eps, self.affine = channels, groups, eps, affine
        if affine:
            self._register("gamma", np.ones(channels, dtype=dtype))
            self._register("beta", np.zeros(channels, dtype=dtype))

    def forward(self, x):
        c, h, w = x.shape
        xg = x.reshape(self.g, -1)
        mean = xg.mean(axis=1, keepdims=True)
        xc = xg - mean
        var = np.mean(xc * xc, axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (xc * inv).reshape(c, h, w)
        self.cache = (xhat, inv)
        if not self.affine:
            return xhat
        return xhat * self.p("gamma")[:, None, None] + self.p("beta")[:, None, None]

    def backward(self, dy):
        xhat, inv = self.cache
        c = self.c
        if self.affine:
            self.acc("gamma", np.einsum("chw,chw->c", dy, xhat))
            self.acc("beta", dy.sum(axis=(1, 2)))
            dxhat = dy * self.p("gamma")[:, None, None]
        else:
            dxhat = dy
        dg = dxhat.reshape(self.g, -1)
        xg = xhat.reshape(self.g, -1)
        n = dg.shape[1]
        dx = inv * (dg - dg.mean(axis=1, keepdims=True) - xg * (np.sum(dg * xg, axis=1, keepdims=True) / n))
        return dx.reshape(c, *dy.shape[1:])


class ReLU(Layer):
    def __init__(self):
        super().__init__({}, {})

    def forward(self, x):
        mask = x > 0
        self.cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self.cache

    def kinks(self):
        return (self.cache,)


class MaxPool2(Layer):
    """2x2 max pool, stride 2; a trailing odd row/column is dropped.
    Ties go to the first element in row-major window order."""

    def __init__(self):
        super().__init__({}, {})

    def forward(self, x):
        c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        if h2 == 0 or w2 == 0:
            raise ShapeError(f"cannot pool a {h}x{w} map")
        win = x[:, : 2 * h2, : 2 * w2].reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
        idx = win.argmax(axis=-1)
        self.cache = (idx, x.shape)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        idx, shape = self.cache
        c, h, w = shape
        h2, w2 = dy.shape[1:]
        win = np.zeros((c, h2, w2, 4), dtype=dy.dtype)
        np.put_along_axis(win, idx[..., None], dy[..., None], axis=-1)
        dx = np.zeros(shape, dtype=dy.dtype)
        dx[:, : 2 * h2, : 2 * w2] = win.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * h2, 2 * w2)
        return dx

    def kinks(self):
        return (self.cache[0],)


class ConvBlock(Layer):
    """conv -> group norm -> ReLU -> 2x2 max pool."""

    def __init__(self, params, grads, prefix, c_in, c_out, kernel=3, groups=4, rng=None,
                 dtype=np.float64, norm=True, need_input_grad=True):
        super().__init__(params, grads, prefix)
        self.conv = Conv2d(params, grads, prefix + "conv.", c_in, c_out, kernel, rng, dtype, need_input_grad)
        self.norm = GroupNorm(params, grads, prefix + "norm.", c_out, groups, dtype=dtype) if norm else None
        self.relu = ReLU()
        self.pool = MaxPool2()

    @property
    def layers(self):
        return [l for l in (self.conv, self.norm, self.relu, self.pool) if l is not None]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
            if dy is None:
                return None
        return dy

    def kinks(self):
        return self.relu.kinks() + self.pool.kinks()


def conv_block_forward(x, block: ConvBlock):
    return block.forward(x)


class FreqAvgPool(Layer):
    """Mean over the frequency axis of (C, F, T), returned time-major (T, C)."""

    def __init__(self):
        super().__init__({}, {})

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] < 1:
            raise ShapeError(f"expected (C, F>=1, T), got {x.shape}")
        self.cache = x.shape
        return x.mean(axis=1).T.copy()

    def backward(self, dy):
        c, f, t = self.cache
        return np.broadcast_to((dy.T / f)[:, None, :], (c, f, t)).copy()


def adaptive_avg_pool_freq(x):
    return FreqAvgPool().forward(np.asarray(x))


class GRU(Layer):
    """Single-layer GRU over a (T, D) sequence; gates stacked [reset, update, candidate]."""

    def __init__(self, params, grads, prefix, d_in, hidden, rng=None, dtype=np.float64):
        super().__init__(params, grads, prefix)
        self.d, self.h = d_in, hidden
        rng = np.random.default_rng(rng)
        bound = 1.0 / math.sqrt(hidden)
        self._register("W", rng.uniform(-bound, bound, (3 * hidden, d_in)).astype(dtype))
        self._register("U", rng.uniform(-bound, bound, (3 * hidden, hidden)).astype(dtype))
        self._register("b", np.zeros(3 * hidden, dtype=dtype))

    def step(self, z, h_prev):
        """One step, no caching; used for inference and reference checks."""
        hd = self.h
        W, U, b = self.p("W"), self.p("U"), self.p("b")
        a = W @ z + b
        r = sigmoid(a[:hd] + U[:hd] @ h_prev)
        u = sigmoid(a[hd : 2 * hd] + U[hd : 2 * hd] @ h_prev)
        n = np.tanh(a[2 * hd :] + U[2 * hd :] @ (r * h_prev))
        h = (1.0 - u) * h_prev + u * n
        if not np.all(np.isfinite(h)):
            raise NumericFault("GRU state became non-finite")
        return h

    def forward(self, z, h0=None):
        t_len = z.shape[0]
        if z.ndim != 2 or z.shape[1] != self.d:
            raise ShapeError(f"GRU expects (T, {self.d}), got {z.shape}")
        hd = self.h
        W, U, b = self.p("W"), self.p("U"), self.p("b")
        az = z @ W.T + b
        hs = np.zeros((t_len + 1, hd), dtype=z.dtype)
        if h0 is not None:
            hs[0] = h0
        rs = np.empty((t_len, hd), dtype=z.dtype)
        us = np.empty_like(rs)
        ns = np.empty_like(rs)
        for t in range(t_len):
            h = hs[t]
            uh = U[: 2 * hd] @ h
            r = sigmoid(az[t, :hd] + uh[:hd])
            u = sigmoid(az[t, hd : 2 * hd] + uh[hd:])
            n = np.tanh(az[t, 2 * hd :] + U[2 * hd :] @ (r * h))
            hs[t + 1] = (1.0 - u) * h + u * n
            rs[t], us[t], ns[t] = r, u, n
        if not np.all(np.isfinite(hs)):
            raise NumericFault("GRU state became non-finite")
        self.cache = (z, hs, rs, us, ns)
        return hs[1:]

    def backward(self, dhs):
        """``dhs`` is the gradient w.r.t. every output state, shape (T, H)."""
        z, hs, rs, us, ns = self.cache
        hd = self.h
        W, U = self.p("W"), self.p("U")
        t_len = z.shape[0]
        da_all = np.empty((t_len, 3 * hd), dtype=z.dtype)
        dU = np.zeros_like(U)
        dh = np.zeros(hd, dtype=z.dtype)
        for t in range(t_len - 1, -1, -1):
            dh = dh + dhs[t]
            h_prev, r, u, n = hs[t], rs[t], us[t], ns[t]
            dn = dh * u
            du = dh * (n - h_prev)
            dh_prev = dh * (1.0 - u)
            da_n = dn * (1.0 - n * n)
            da_u = du * u * (1.0 - u)
            drh = U[2 * hd :].T @ da_n
            da_r = drh * h_prev * r * (1.0 - r)
            dh_prev += drh * r
            dh_prev += U[:hd].T @ da_r + U[hd : 2 * hd].T @ da_u
            dU[:hd] += np.outer(da_r, h_prev)
            dU[hd : 2 * hd] += np.outer(da_u, h_prev)
            dU[2 * hd :] += np.outer(da_n, r * h_prev)
            da_all[t, :hd], da_all[t, hd : 2 * hd], da_all[t, 2 * hd :] = da_r, da_u, da_n
            dh = dh_prev
        self.acc("W", da_all.T @ z)
        self.acc("U", dU)
        self.acc("b", da_all.sum(axis=0))
        return da_all @ W


def gru_step(z_t, h_prev, gru: GRU):
    return gru.step(np.asarray(z_t), np.asarray(h_prev))


class Linear(Layer):
    def __init__(self, params, grads, prefix, d_in, d_out, rng=None, dtype=np.float64):
        super().__init__(params, grads, prefix)
        rng = np.random.default_rng(rng)
        bound = 1.0 / math.sqrt(d_in)
        self._register("weight", rng.uniform(-bound, bound, (d_out, d_in)).astype(dtype))
        self._register("bias", np.zeros(d_out, dtype=dtype))

    def forward(self, x):
        self.cache = x
        return self.p("weight") @ x + self.p("bias")

    def backward(self, dy):
        x = self.cache
        self.acc("weight", np.outer(dy, x))
        self.acc("bias", dy)
        return self.p("weight").T @ dy


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def linear_softmax(h, layer: Linear):
    return softmax(layer.forward(np.asarray(h)))


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray  # w.r.t. logits
    clamped: bool = False


def cross_entropy(p_hat, y) -> LossResult:
    """``-sum y log p`` with the logit gradient ``p - y``.

    Probabilities under 1e-30 at the true class are clamped and flagged.
    """
    p = np.asarray(p_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError("prediction and label shapes differ")
    true_p = float(np.sum(p * y))
    clamped = true_p < 1e-30
    loss = -math.log(max(true_p, 1e-30))
    return LossResult(loss, p - y, clamped)


def one_hot(index: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[index] = 1.0
    return v


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """Bias-corrected Adam step applied in place; returns both for chaining."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient for {k}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.lr:
            params[k] -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params, state


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst: tuple = ()


def grad_check(
    loss_fn: Callable[[], float],
    params: dict,
    analytic: dict,
    eps: float = 1e-5,
    n_coords: int = 200,
    rng=0,
    kink_fn: Callable[[], object] | None = None,
    names: list[str] | None = None,
) -> GradCheckResult:
    """Compare ``analytic`` gradients with central differences of ``loss_fn``.

    Coordinates are drawn at random across ``names`` (all parameters by
    default), proportionally to parameter size but with every tensor
    represented.  If ``kink_fn`` is given, a coordinate whose +/-eps
    perturbation changes the returned ReLU/max-pool state is skipped and
    counted in ``skipped_kinks``.
    """
    rng = np.random.default_rng(rng)
    names = list(names or params)
    sizes = np.array([params[k].size for k in names], dtype=float)
    picks = [(k, int(rng.integers(params[k].size))) for k in names]
    extra = max(n_coords - len(picks), 0)
    which = rng.choice(len(names), size=extra, p=sizes / sizes.sum())
    picks += [(names[i], int(rng.integers(params[names[i]].size))) for i in which]
    base_kinks = _freeze(kink_fn()) if kink_fn else None
    scale = max(max(float(np.max(np.abs(analytic[k]))) for k in names), 1e-12)
    worst, worst_at, skipped, checked = 0.0, (), 0, 0
    for name, flat in picks:
        arr = params[name].reshape(-1)
        old = arr[flat]
        arr[flat] = old + eps
        fp = loss_fn()
        kp = _freeze(kink_fn()) if kink_fn else None
        arr[flat] = old - eps
        fm = loss_fn()
        km = _freeze(kink_fn()) if kink_fn else None
        arr[flat] = old
        if kink_fn and (not _same(kp, base_kinks) or not _same(km, base_kinks)):
            skipped += 1
            continue
        num = (fp - fm) / (2 * eps)
        ana = float(analytic[name].reshape(-1)[flat])
        rel = abs(num - ana) / max(abs(num), abs(ana), 1e-6 * scale)
        checked += 1
        if rel > worst:
            worst, worst_at = rel, (name, flat, ana, num)
    return GradCheckResult(worst, checked, skipped, worst_at)


def _freeze(state):
    return [np.array(s, copy=True) for s in state]


def _same(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def input_grad_check(forward: Callable[[np.ndarray], np.ndarray], x: np.ndarray, analytic_dx: np.ndarray,
                     upstream: np.ndarray, eps=1e-5, n_coords=200, rng=0, kink_fn=None) -> GradCheckResult:
    """Check d(sum(upstream * f(x)))/dx against central differences."""
    box = {"x": x}
    result = grad_check(
        lambda: float(np.sum(upstream * forward(box["x"]))),
        box,
        {"x": analytic_dx},
        eps,
        n_coords,
        rng,
        kink_fn,
    )
    forward(x)
    return result


CHECKPOINT_MAGIC = b"ANCN"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict, extra_manifest: str = ""):
    """Binary checkpoint plus a ``<path>.txt`` manifest listing name and shape."""
    path = Path(path)
    names = list(params)
    head = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(names))]
    for name in names:
        raw = name.encode()
        shape = params[name].shape
        head.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(shape)))
        head.append(struct.pack(f"<{len(shape)}I", *shape))
    body = [np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names]
    path.write_bytes(b"".join(head + body))
    lines = [f"{n}\t{'x'.join(map(str, params[n].shape))}\t{params[n].size}" for n in names]
    total = sum(params[n].size for n in names)
    text = "\n".join(lines) + f"\ntotal\t-\t{total}\n"
    if extra_manifest:
        text += extra_manifest.rstrip("\n") + "\n"
    Path(str(path) + ".txt").write_text(text)


def load_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    try:
        if data[:4] != CHECKPOINT_MAGIC:
            raise CorruptFile(f"{path}: bad checkpoint magic")
        version, count = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CorruptFile(f"{path}: unsupported checkpoint version {version}")
        off = 12
        manifest = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + n].decode()
            off += n
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            manifest.append((name, shape))
        out = {}
        for name, shape in manifest:
            size = int(np.prod(shape))
            if off + 8 * size > len(data):
                raise CorruptFile(f"{path}: truncated payload")
            out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).copy()
            off += 8 * size
        if off != len(data):
            raise CorruptFile(f"{path}: trailing bytes after payload")
        return out
    except struct.error as exc:
        raise CorruptFile(f"{path}: truncated header") from exc
