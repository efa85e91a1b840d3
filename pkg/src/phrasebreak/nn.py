"""Neural primitives with hand-derived backward passes.

All layers operate on plain numpy arrays and keep their parameters in a
ParameterStore. Sequence layers accept [T, d] or [B, T, d] input; batched
calls may pass a [B, T] validity mask (1 = real token) that gates recurrent
state updates, so right-padded batches stay exact in both LSTM directions.

Training runs in float32. Gradient checks build the same layers in float64
and compare analytic gradients against central finite differences.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError
from .rng import stream

# ---------------------------------------------------------------------------
# parameter storage


class Param:
    """One named tensor with its gradient, AdamW moments, and trainable flag."""

    __slots__ = ("value", "grad", "m", "v", "trainable")

    def __init__(self, value: np.ndarray, trainable: bool = True):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.trainable = trainable


class ParameterStore:
    """Insertion-ordered name -> Param map owned by one model or training loop."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Param:
        if name in self._params:
            raise ShapeError(f"duplicate parameter name: {name}")
        p = Param(value, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for name, p in self._params.items():
            if name.startswith(prefix):
                p.trainable = flag

    def reset_optimizer(self) -> None:
        for p in self._params.values():
            p.m[...] = 0
            p.v[...] = 0

    def replace(self, name: str, value: np.ndarray,
                trainable: bool = False) -> Param:
        """Swap an entry for a fresh Param, shape changes allowed."""
        if name not in self._params:
            raise ShapeError(f"unknown parameter: {name}")
        p = Param(value, trainable)
        self._params[name] = p
        return p

    def values(self) -> dict[str, np.ndarray]:
        """Copies of all parameter values, in registration order."""
        return {name: p.value.copy() for name, p in self._params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        """Copy values into existing entries; shapes must match exactly."""
        for name, value in values.items():
            if name not in self._params:
                raise ShapeError(f"unknown parameter: {name}")
            p = self._params[name]
            if p.value.shape != np.shape(value):
                raise ShapeError(
                    f"{name}: shape {np.shape(value)} != {p.value.shape}"
                )
            p.value[...] = value


# ---------------------------------------------------------------------------
# initializers and pointwise functions


def xavier_init(shape, seed: int) -> np.ndarray:
    """Uniform on [-b, b] with b = sqrt(6 / (fan_in + fan_out)).

    fan_in is shape[0] and fan_out is shape[-1]; a rank-1 shape uses its only
    dim for both. Returns float64; callers cast to their working dtype.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ShapeError(f"bad shape for xavier_init: {shape}")
    fan_in = shape[0]
    fan_out = shape[-1] if len(shape) > 1 else shape[0]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    rng = stream(seed, "xavier")
    return rng.uniform(-bound, bound, size=shape)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids exp overflow for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_erf = np.vectorize(math.erf, otypes=[np.float64])

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact Gaussian-CDF form: x * Phi(x), no tanh approximation."""
    x = np.asarray(x)
    phi = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    return (x * phi).astype(x.dtype)


def gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.astype(np.float64) ** 2)
    return (dy * (cdf + x * pdf)).astype(x.dtype)


class Activation:
    """Pointwise nonlinearity with cached input (or output, for sigmoid)."""

    KINDS = ("relu", "gelu", "sigmoid")

    def __init__(self, kind: str):
        if kind not in self.KINDS:
            raise ShapeError(f"unknown activation kind: {kind!r}")
        self.kind = kind
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            self._cache = x > 0
            return np.where(self._cache, x, 0.0).astype(x.dtype)
        if self.kind == "gelu":
            self._cache = x
            return gelu(x)
        y = sigmoid(x)
        self._cache = y
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            return np.where(self._cache, dy, 0.0).astype(dy.dtype)
        if self.kind == "gelu":
            return gelu_backward(self._cache, dy)
        y = self._cache
        return (dy * y * (1.0 - y)).astype(dy.dtype)


# ---------------------------------------------------------------------------
# layers


class Linear:
    """y = x @ W + b over the trailing axis; leading axes are batch."""

    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int,
                 seed: int, dtype=np.float32):
        self.W = store.add(f"{name}/W", xavier_init((d_in, d_out), seed).astype(dtype))
        self.b = store.add(f"{name}/b", np.zeros(d_out, dtype=dtype))
        self.d_in = d_in
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"linear expects trailing dim {self.d_in}, got {x.shape}")
        self._x = x
        return x @ self.W.value + self.b.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        self.W.grad += x2.T @ dy2
        self.b.grad += dy2.sum(axis=0)
        return (dy2 @ self.W.value.T).reshape(x.shape)


class LayerNorm:
    """Per-position normalization over the trailing axis, learned gain/bias."""

    def __init__(self, store: ParameterStore, name: str, dim: int,
                 eps: float = 1e-5, dtype=np.float32):
        self.gamma = store.add(f"{name}/gamma", np.ones(dim, dtype=dtype))
        self.beta = store.add(f"{name}/beta", np.zeros(dim, dtype=dtype))
        self.eps = eps
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv.astype(x.dtype))
        return (self.gamma.value * xhat + self.beta.value).astype(x.dtype)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv = self._cache
        axes = tuple(range(dy.ndim - 1))
        self.gamma.grad += (dy * xhat).sum(axis=axes)
        self.beta.grad += dy.sum(axis=axes)
        dxhat = dy * self.gamma.value
        # dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return (inv * (dxhat - m1 - xhat * m2)).astype(dy.dtype)


class Dropout:
    """Inverted dropout: scales kept units by 1/(1-rate) during training."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ShapeError(f"dropout rate out of range: {rate}")
        self.rate = rate
        self._mask = None

    def forward(self, x: np.ndarray, training: bool, seed: int = 0) -> np.ndarray:
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        rng = stream(seed, "dropout")
        keep = (rng.random(x.shape) >= self.rate)
        self._mask = keep.astype(x.dtype) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._mask is None:
            return dy
        return dy * self._mask


class Embedding:
    """id -> row lookup with scatter-add gradients."""

    def __init__(self, store: ParameterStore, name: str, count: int, dim: int,
                 seed: int, dtype=np.float32):
        self.table = store.add(f"{name}/table",
                               xavier_init((count, dim), seed).astype(dtype))
        self.count = count
        self._ids = None

    def forward(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.count):
            raise IndexError(
                f"embedding id out of range [0, {self.count}): "
                f"min={ids.min()} max={ids.max()}"
            )
        self._ids = ids
        return self.table.value[ids]

    def backward(self, dy: np.ndarray) -> None:
        flat_ids = self._ids.reshape(-1)
        flat_dy = dy.reshape(-1, dy.shape[-1])
        np.add.at(self.table.grad, flat_ids, flat_dy)


class _LSTMDirection:
    """One direction of an LSTM, full backpropagation through time.

    Gate order in the packed weight matrices is [i, f, g, o]. For a masked
    step the state carries over unchanged, which makes right-padded batches
    correct even when this direction runs from the padded end.
    """

    def __init__(self, store: ParameterStore, name: str, d_in: int, hidden: int,
                 reverse: bool, seed: int, dtype=np.float32):
        self.Wx = store.add(f"{name}/Wx",
                            xavier_init((d_in, 4 * hidden), seed).astype(dtype))
        self.Wh = store.add(f"{name}/Wh",
                            xavier_init((hidden, 4 * hidden), seed + 1).astype(dtype))
        self.b = store.add(f"{name}/b", np.zeros(4 * hidden, dtype=dtype))
        self.hidden = hidden
        self.reverse = reverse
        self._cache = None

    def forward(self, x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
        B, T, D = x.shape
        H = self.hidden
        zx = x.reshape(B * T, D) @ self.Wx.value + self.b.value
        zx = zx.reshape(B, T, 4 * H)
        h = np.zeros((B, H), dtype=x.dtype)
        c = np.zeros((B, H), dtype=x.dtype)
        out = np.zeros((B, T, H), dtype=x.dtype)
        order = range(T - 1, -1, -1) if self.reverse else range(T)
        steps = []
        for t in order:
            z = zx[:, t] + h @ self.Wh.value
            i = sigmoid(z[:, :H])
            f = sigmoid(z[:, H:2 * H])
            g = np.tanh(z[:, 2 * H:3 * H])
            o = sigmoid(z[:, 3 * H:])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            if mask is not None:
                m = mask[:, t:t + 1].astype(x.dtype)
                c_next = m * c_new + (1.0 - m) * c
                h_next = m * h_new + (1.0 - m) * h
            else:
                m = None
                c_next, h_next = c_new, h_new
            steps.append((t, i, f, g, o, c, tc, h, m))
            h, c = h_next, c_next
            out[:, t] = h
        self._cache = (x, steps)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x, steps = self._cache
        B, T, D = x.shape
        H = self.hidden
        dzx = np.zeros((B, T, 4 * H), dtype=x.dtype)
        dh_next = np.zeros((B, H), dtype=x.dtype)
        dc_next = np.zeros((B, H), dtype=x.dtype)
        for t, i, f, g, o, c_prev, tc, h_prev, m in reversed(steps):
            dh_total = dout[:, t] + dh_next
            dc_total = dc_next
            if m is not None:
                dh_new = m * dh_total
                dh_carry = (1.0 - m) * dh_total
                dc_new = m * dc_total
                dc_carry = (1.0 - m) * dc_total
            else:
                dh_new, dh_carry = dh_total, 0.0
                dc_new, dc_carry = dc_total, 0.0
            do = dh_new * tc
            dc_new = dc_new + dh_new * o * (1.0 - tc * tc)
            di = dc_new * g
            df = dc_new * c_prev
            dg = dc_new * i
            dc_prev = dc_new * f + dc_carry
            dz = np.concatenate(
                [di * i * (1.0 - i),
                 df * f * (1.0 - f),
                 dg * (1.0 - g * g),
                 do * o * (1.0 - o)],
                axis=1,
            )
            dzx[:, t] = dz
            self.Wh.grad += h_prev.T @ dz
            dh_next = dz @ self.Wh.value.T + dh_carry
            dc_next = dc_prev
        dzx2 = dzx.reshape(B * T, 4 * H)
        self.Wx.grad += x.reshape(B * T, D).T @ dzx2
        self.b.grad += dzx2.sum(axis=0)
        return (dzx2 @ self.Wx.value.T).reshape(B, T, D)


class BiLSTM:
    """Bidirectional LSTM: output concatenates [forward; backward], width 2H.

    Accepts [T, d] or [B, T, d] input and returns the matching rank. The
    optional mask marks valid positions; padded steps leave state untouched.
    """

    def __init__(self, store: ParameterStore, name: str, d_in: int, hidden: int,
                 seed: int, dtype=np.float32):
        self.fw = _LSTMDirection(store, f"{name}/fw", d_in, hidden, False, seed, dtype)
        self.bw = _LSTMDirection(store, f"{name}/bw", d_in, hidden, True, seed + 2, dtype)
        self.hidden = hidden
        self._was_2d = False

    def forward(self, x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        self._was_2d = x.ndim == 2
        if self._was_2d:
            x = x[None]
            mask = None if mask is None else np.asarray(mask)[None]
        out = np.concatenate([self.fw.forward(x, mask), self.bw.forward(x, mask)],
                             axis=-1)
        return out[0] if self._was_2d else out

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._was_2d:
            dy = dy[None]
        H = self.hidden
        dx = self.fw.backward(dy[..., :H]) + self.bw.backward(dy[..., H:])
        return dx[0] if self._was_2d else dx


# ---------------------------------------------------------------------------
# loss


BCE_EPS = 1e-7


def masked_bce(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray):
    """Binary cross entropy averaged over mask-selected positions.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs. Returns
    (loss, dloss/dprobs); the gradient is zero wherever mask is zero.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=probs.dtype)
    mask = np.asarray(mask, dtype=probs.dtype)
    if not (probs.shape == labels.shape == mask.shape):
        raise ShapeError(
            f"masked_bce shape mismatch: {probs.shape} {labels.shape} {mask.shape}"
        )
    count = mask.sum()
    denom = max(1.0, float(count))
    p = np.clip(probs, BCE_EPS, 1.0 - BCE_EPS)
    terms = labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)
    loss = -float((terms * mask).sum()) / denom
    inside = (probs > BCE_EPS) & (probs < 1.0 - BCE_EPS)
    dp = np.where(inside, mask * (p - labels) / (p * (1.0 - p)) / denom, 0.0)
    return loss, dp.astype(probs.dtype)


# ---------------------------------------------------------------------------
# optimization


def adamw_step(store: ParameterStore, lr: float, step_index: int,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.01) -> None:
    """One AdamW update over all trainable parameters.

    Weight decay is decoupled (theta <- theta - lr*wd*theta, applied before
    the moment update and excluded from the gradient). step_index starts at 1.
    """
    if step_index < 1:
        raise ShapeError(f"step_index must be >= 1, got {step_index}")
    bc1 = 1.0 - beta1 ** step_index
    bc2 = 1.0 - beta2 ** step_index
    for p in (p for _, p in store.items() if p.trainable):
        if weight_decay:
            p.value *= 1.0 - lr * weight_decay
        p.m *= beta1
        p.m += (1.0 - beta1) * p.grad
        p.v *= beta2
        p.v += (1.0 - beta2) * p.grad * p.grad
        m_hat = p.m / bc1
        v_hat = p.v / bc2
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)


def warmup_linear_lr(step: int, total_steps: int, peak: float) -> float:
    """Linear ramp to peak over the first ceil(0.1*total) steps, then linear
    decay to zero at the final step. step counts from 1."""
    if total_steps < 1 or not 1 <= step <= total_steps:
        raise ShapeError(f"bad schedule query: step={step} total={total_steps}")
    warmup = math.ceil(0.1 * total_steps)
    if step <= warmup:
        return peak * step / warmup
    return peak * (total_steps - step) / (total_steps - warmup)


def clip_global_norm(store: ParameterStore, prefix: str, max_norm: float) -> float:
    """Scale gradients under prefix so their joint L2 norm is <= max_norm.

    Returns the applied scale (1.0 when no clipping happened). The norm is
    accumulated in float64 over sorted names so the result does not depend
    on registration order.
    """
    names = sorted(n for n in store.names() if n.startswith(prefix))
    total = 0.0
    for n in names:
        g = store[n].grad
        total += float(np.dot(g.reshape(-1).astype(np.float64),
                              g.reshape(-1).astype(np.float64)))
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for n in names:
        store[n].grad *= scale
    return scale


# ---------------------------------------------------------------------------
# verification


def grad_check(loss_fn, store: ParameterStore, names: list[str] | None = None,
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn() must run forward and backward at the current parameter values,
    accumulate gradients into the store, and return the scalar loss. All
    checked parameters should be float64. Relative error per element is
    |a - n| / max(1e-8, |a| + |n|).
    """
    if names is None:
        names = store.names()
    store.zero_grads()
    loss_fn()
    analytic = {n: store[n].grad.copy() for n in names}
    worst = 0.0
    for n in names:
        value = store[n].value
        flat = value.reshape(-1)
        a_flat = analytic[n].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            store.zero_grads()
            lp = loss_fn()
            flat[idx] = orig - eps
            store.zero_grads()
            lm = loss_fn()
            flat[idx] = orig
            numeric = (lp - lm) / (2.0 * eps)
            err = abs(a_flat[idx] - numeric) / max(1e-8, abs(a_flat[idx]) + abs(numeric))
            worst = max(worst, err)
    store.zero_grads()
    return worst
