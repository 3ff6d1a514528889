"""Dense tensors with tape-based reverse-mode differentiation.

Feature maps are ``(N, C, H, W)``; every primitive also accepts a single
``(C, H, W)`` map and returns an unbatched result in that case.  Operations
only record onto a tape while one is active (``with Tape() as tape:``), so
inference runs without building a graph.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def dims(self):
        return self.data.shape

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(dims={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else Tensor(-np.asarray(other)))


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Ordered record of primitive applications.

    Each entry keeps the output, its inputs and a vector-Jacobian product
    closure over whatever activations the primitive saved.
    """

    _stack: list["Tape"] = []

    def __init__(self, check_finite=False):
        self.entries = []
        self.check_finite = check_finite

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    def __len__(self):
        return len(self.entries)

    def clear(self):
        self.entries = []

    def backward(self, loss, seed=None):
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring grad")
        if seed is None:
            seed = np.ones_like(loss.data)
        loss.grad = loss.grad + seed
        for out, inputs, vjp in reversed(self.entries):
            if out.grad is None or not out.grad.any():
                continue
            grads = vjp(out.grad)
            for t, g in zip(inputs, grads):
                if g is not None and t.requires_grad:
                    t.grad += g
        # saved activations are no longer needed once gradients are out
        self.clear()


def _active_tape():
    return Tape._stack[-1] if Tape._stack else None


def _result(data, inputs, vjp):
    """Wrap ``data``; record ``vjp`` if a tape is active and any input needs grad."""
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    if tape is not None and tape.check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by primitive")
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.entries.append((out, inputs, vjp))
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _batched(*ts):
    """Promote (C,H,W) maps to (1,C,H,W); returns arrays and an unbatch flag."""
    ndims = {t.data.ndim for t in ts}
    if ndims == {3}:
        return [t.data[None] for t in ts], True
    if ndims == {4}:
        return [t.data for t in ts], False
    raise ShapeError(f"expected all (C,H,W) or all (N,C,H,W) operands, got {[t.shape for t in ts]}")


# ---------------------------------------------------------------------------
# Convolution and pooling


def conv2d(x, weight, bias=None, padding=0, stride=1):
    """2-D cross-correlation (no kernel flip)."""
    if stride != 1:
        raise ValueError("only stride 1 is supported")
    (xd,), unbatch = _batched(x)
    w = weight.data
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"weight must be (C_out,C_in,k,k), got {w.shape}")
    n, c, h, wd = xd.shape
    co, ci, k, _ = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")
    p = int(padding)
    ho, wo = h + 2 * p - k + 1, wd + 2 * p - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d: kernel larger than padded input")
    # channels-last im2col: cols[n, y, x, i, j, c] = xpad[n, c, y+i, x+j]
    xt = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=xd.dtype)
    xt[:, p:p + h, p:p + wd, :] = xd.transpose(0, 2, 3, 1)
    if k == 1:
        cols = xt.reshape(n * ho * wo, c)
    else:
        cols6 = np.empty((n, ho, wo, k, k, c), dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                cols6[:, :, :, i, j, :] = xt[:, i:i + ho, j:j + wo, :]
        cols = cols6.reshape(n * ho * wo, k * k * c)
    wmat = w.transpose(0, 2, 3, 1).reshape(co, k * k * ci)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))
    if unbatch:
        out = out[0]

    def vjp(g):
        g4 = g[None] if unbatch else g
        gm = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        gw = None
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(co, k, k, ci).transpose(0, 3, 1, 2)
        gb = gm.sum(axis=0) if (bias is not None and bias.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, ho, wo, k, k, ci)
            gxt = np.zeros_like(xt)
            for i in range(k):
                for j in range(k):
                    gxt[:, i:i + ho, j:j + wo, :] += gcols[:, :, :, i, j, :]
            gx = np.ascontiguousarray(gxt[:, p:p + h, p:p + wd, :].transpose(0, 3, 1, 2))
            if unbatch:
                gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, vjp)


def max_pool2(x):
    """2x2 max-pool with stride 2; odd trailing rows/columns are dropped."""
    (xd,), unbatch = _batched(x)
    n, c, h, w = xd.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"max_pool2: spatial size {h}x{w} too small")
    xc = xd[:, :, :2 * h2, :2 * w2]
    blocks = xc.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    if unbatch:
        out = out[0]

    def vjp(g):
        g4 = g[None] if unbatch else g
        gb = np.zeros((n, c, h2, w2, 4), dtype=g4.dtype)
        np.put_along_axis(gb, idx[..., None], g4[..., None], axis=-1)
        gx = np.zeros_like(xd)
        gx[:, :, :2 * h2, :2 * w2] = gb.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        return [gx[0] if unbatch else gx]

    return _result(out, (x,), vjp)


def global_avg_pool(x):
    """Per-channel spatial mean: (N,C,H,W) -> (N,C)."""
    (xd,), unbatch = _batched(x)
    n, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3))
    if unbatch:
        out = out[0]

    def vjp(g):
        g2 = g[None] if unbatch else g
        gx = np.broadcast_to(g2[:, :, None, None] / (h * w), xd.shape).copy()
        return [gx[0] if unbatch else gx]

    return _result(out, (x,), vjp)


def resize_nearest(x, size):
    """Nearest-neighbour resize of the spatial extent to ``size=(H, W)``."""
    (xd,), unbatch = _batched(x)
    n, c, h, w = xd.shape
    ho, wo = size
    if (ho, wo) == (h, w):
        return x
    rows = (np.arange(ho) * h) // ho
    cols = (np.arange(wo) * w) // wo
    out = xd[:, :, rows][:, :, :, cols]
    if unbatch:
        out = out[0]

    def vjp(g):
        g4 = g[None] if unbatch else g
        gx = np.zeros_like(xd)
        np.add.at(gx, (slice(None), slice(None), rows[:, None], cols[None, :]), g4)
        return [gx[0] if unbatch else gx]

    return _result(out, (x,), vjp)


# ---------------------------------------------------------------------------
# Element-wise


def relu(x):
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: [g * mask])


def sigmoid(x):
    # exp(-|x|) form never overflows
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.data.dtype)
    # keep the open interval: float32 rounds sigmoid(17) up to exactly 1
    dt = s.dtype.type
    s = np.clip(s, np.finfo(s.dtype).tiny, np.nextafter(dt(1), dt(0)))
    return _result(s, (x,), lambda g: [g * s * (1.0 - s)])


def scale(x, factor):
    f = float(factor)
    return _result(x.data * f, (x,), lambda g: [g * f])


def _channel_broadcast(a, b):
    """Return how ``b`` broadcasts onto ``a``: 'same', 'channel' or raise."""
    if a.shape == b.shape:
        return "same"
    if a.data.ndim in (3, 4) and b.data.ndim == a.data.ndim - 2 and a.shape[:-2] == b.shape:
        return "channel"
    raise ShapeError(f"cannot broadcast {b.shape} onto {a.shape}: only identical dims or channel vectors")


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < b.data.ndim:
        a, b = b, a
    mode = _channel_broadcast(a, b)
    if mode == "same":
        return _result(a.data + b.data, (a, b), lambda g: [g, g])
    out = a.data + b.data[..., None, None]
    return _result(out, (a, b), lambda g: [g, g.sum(axis=(-2, -1))])


def mul(a, b):
    """Element-wise product; ``b`` may be a channel vector scaling map ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < b.data.ndim:
        a, b = b, a
    mode = _channel_broadcast(a, b)
    if mode == "same":
        ad, bd = a.data, b.data
        return _result(ad * bd, (a, b), lambda g: [g * bd, g * ad])
    ad, bd = a.data, b.data[..., None, None]
    return _result(ad * bd, (a, b), lambda g: [g * bd, (g * ad).sum(axis=(-2, -1))])


def elementwise(kind, *operands):
    """Dispatch by name: relu, sigmoid, add, mul, scale."""
    ops = {"relu": relu, "sigmoid": sigmoid, "add": add, "mul": mul, "scale": scale}
    if kind not in ops:
        raise ValueError(f"unknown element-wise kind {kind!r}")
    return ops[kind](*operands)


# ---------------------------------------------------------------------------
# Channel structure


def concat_channels(a, b):
    (ad, bd), unbatch = _batched(a, b)
    if ad.shape[0] != bd.shape[0] or ad.shape[2:] != bd.shape[2:]:
        raise ShapeError(f"concat_channels: spatial mismatch {a.shape} vs {b.shape}")
    c1 = ad.shape[1]
    out = np.concatenate([ad, bd], axis=1)
    if unbatch:
        out = out[0]
    axis = 0 if unbatch else 1

    def vjp(g):
        ga, gb = np.split(g, [c1], axis=axis)
        return [ga, gb]

    return _result(out, (a, b), vjp)


def slice_channels(x, start, stop):
    axis = 0 if x.data.ndim == 3 else 1
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return [gx]

    return _result(x.data[sl].copy(), (x,), vjp)


def channel_cosine(a, b):
    """Cosine similarity between corresponding channels, each flattened.

    A channel with zero norm in either operand yields 0 and no gradient.
    """
    (ad, bd), unbatch = _batched(a, b)
    if ad.shape != bd.shape:
        raise ShapeError(f"channel_cosine: dims differ {a.shape} vs {b.shape}")
    n, c = ad.shape[:2]
    af, bf = ad.reshape(n, c, -1), bd.reshape(n, c, -1)
    dot = np.einsum("ncs,ncs->nc", af, bf)
    sa = np.einsum("ncs,ncs->nc", af, af)
    sb = np.einsum("ncs,ncs->nc", bf, bf)
    na, nb = np.sqrt(sa), np.sqrt(sb)
    ok = (na > 0) & (nb > 0)
    # sqrt of the product keeps s exactly 1 when a is b
    denom = np.where(ok, np.sqrt(sa * sb), 1.0)
    s = np.where(ok, dot / denom, 0.0)
    # rounding can push |s| a hair past 1
    s = np.clip(s, -1.0, 1.0).astype(ad.dtype)
    out = s[0] if unbatch else s

    def vjp(g):
        g2 = (g[None] if unbatch else g) * ok
        ia = np.where(ok, 1.0 / np.where(ok, na * na, 1.0), 0.0)
        ib = np.where(ok, 1.0 / np.where(ok, nb * nb, 1.0), 0.0)
        inv = np.where(ok, 1.0 / denom, 0.0)
        ga = g2[..., None] * (bf * inv[..., None] - s[..., None] * af * ia[..., None])
        gb = g2[..., None] * (af * inv[..., None] - s[..., None] * bf * ib[..., None])
        ga, gb = ga.reshape(ad.shape), gb.reshape(bd.shape)
        if unbatch:
            ga, gb = ga[0], gb[0]
        return [ga.astype(ad.dtype), gb.astype(bd.dtype)]

    return _result(out, (a, b), vjp)


def bilinear_pool(x, y):
    """Spatially summed outer product, signed square root, then l2 normalisation.

    Output is (N, C1*C2) flattened row-major over (c1, c2).  Exact zeros in
    the pooled matrix receive zero gradient through the square root, and an
    all-zero vector normalises to zero.
    """
    (xd, yd), unbatch = _batched(x, y)
    if xd.shape[0] != yd.shape[0] or xd.shape[2:] != yd.shape[2:]:
        raise ShapeError(f"bilinear_pool: spatial mismatch {x.shape} vs {y.shape}")
    n, c1 = xd.shape[:2]
    c2 = yd.shape[1]
    xf, yf = xd.reshape(n, c1, -1), yd.reshape(n, c2, -1)
    z = np.matmul(xf, yf.transpose(0, 2, 1)).reshape(n, c1 * c2)
    az = np.abs(z)
    r = np.sign(z) * np.sqrt(az)
    norm = np.sqrt((r * r).sum(axis=1))
    safe = np.where(norm > 0, norm, 1.0)
    out = np.where(norm[:, None] > 0, r / safe[:, None], 0.0).astype(xd.dtype)
    res = out[0] if unbatch else out

    def vjp(g):
        g2 = g[None] if unbatch else g
        gr = (g2 - out * (out * g2).sum(axis=1, keepdims=True)) / safe[:, None]
        gr = np.where(norm[:, None] > 0, gr, 0.0)
        nz = az > 0
        gz = np.where(nz, gr / (2.0 * np.sqrt(np.where(nz, az, 1.0))), 0.0).reshape(n, c1, c2)
        gx = np.matmul(gz, yf).reshape(xd.shape).astype(xd.dtype)
        gy = np.matmul(gz.transpose(0, 2, 1), xf).reshape(yd.shape).astype(yd.dtype)
        if unbatch:
            gx, gy = gx[0], gy[0]
        return [gx, gy]

    return _result(res, (x, y), vjp)


# ---------------------------------------------------------------------------
# Dense layers, reductions and losses


def linear(x, weight, bias=None):
    """x (N,Din) or (Din,) times weight (Dout,Din)^T plus bias."""
    xd = x.data
    single = xd.ndim == 1
    x2 = xd[None] if single else xd
    if x2.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x2.shape[1]} != weight fan-in {weight.shape[1]}")
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    res = out[0] if single else out

    def vjp(g):
        g2 = g[None] if single else g
        gx = g2 @ weight.data if x.requires_grad else None
        if gx is not None and single:
            gx = gx[0]
        gw = g2.T @ x2 if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(res, inputs, vjp)


def reshape(x, shape):
    orig = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: [g.reshape(orig)])


def sum_all(x):
    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                   lambda g: [np.broadcast_to(g, x.shape).astype(x.data.dtype)])


def mean_all(x):
    m = x.data.size
    return _result(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,),
                   lambda g: [np.broadcast_to(g / m, x.shape).astype(x.data.dtype)])


def log_softmax_np(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels, reduction="sum"):
    """Softmax cross-entropy of (N,K) logits against integer labels.

    ``reduction='sum'`` gives the batch sum, ``'mean'`` divides by N.
    """
    labels = np.asarray(labels, dtype=np.int64)
    lg = logits.data
    if lg.ndim == 1:
        raise ShapeError("cross_entropy expects (N,K) logits")
    n, k = lg.shape
    if labels.shape != (n,):
        raise ShapeError("labels must be one integer per row")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"class label outside [0, {k})")
    lsm = log_softmax_np(lg.astype(np.float64))
    total = -lsm[np.arange(n), labels].sum()
    div = float(n) if reduction == "mean" else 1.0
    val = np.asarray(total / div, dtype=lg.dtype)

    def vjp(g):
        p = np.exp(lsm)
        p[np.arange(n), labels] -= 1.0
        return [(p * (g / div)).astype(lg.dtype)]

    return _result(val, (logits,), vjp)


def mse(pred, target):
    """Mean squared error between a prediction tensor and a target array."""
    t = np.asarray(target, dtype=pred.data.dtype).reshape(pred.shape)
    diff = pred.data - t
    m = diff.size
    val = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)
    return _result(val, (pred,), lambda g: [g * 2.0 * diff / m])
