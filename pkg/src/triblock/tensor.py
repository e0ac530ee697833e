"""Dense tensors with reverse-mode autodiff on a flat tape.

Values are row-major numpy arrays, float32 for training and float64 for
gradient checking. Broadcasting is deliberately narrow: an op takes operands
of identical shape, or a trailing-axis vector against the rows of the first
operand. Anything else is an error, as is any op that produces a non-finite
value.

Node ids increase in creation order, and every edge points from an older node
to a newer one, so walking ids in descending order is a valid reverse
topological order. backward() consumes the tape it touches.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# chunk width for the blocked scan and the decay floor below which the scan
# falls back to the stepwise path (the blocked path splits decay powers around
# the chunk midpoint, which needs w**(-chunk/2) to stay finite in float64)
_SCAN_CHUNK = 64
_SCAN_W_FLOOR = 1e-6

_RMS_EPS = 1e-8

_GRAD_ENABLED = [True]
_NEXT_ID = [0]


class NumericsError(Exception):
    """Shape, dtype, domain, or finiteness violation in the numerics layer."""


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by {op}")


def _as_array(data):
    arr = np.asarray(data)
    if arr.dtype not in _ALLOWED_DTYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._id = _NEXT_ID[0]
        _NEXT_ID[0] += 1

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"


class Parameter:
    """Named leaf tensor tracked by the optimizer."""

    __slots__ = ("name", "tensor")

    def __init__(self, name, data, dtype=None):
        arr = np.array(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        self.name = name
        self.tensor = Tensor(arr, requires_grad=True)

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    old = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = old


def _result(data, op, parents, backward_fn):
    arr = np.asarray(data)
    _check_finite(arr, op)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        return Tensor(arr, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(arr)


def _same_dtype(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise NumericsError(f"mixed dtypes {dt} vs {t.data.dtype}")
    return dt


def _bcast_check(a, b, op):
    """Equal shapes, or b a vector matching a's trailing axis."""
    if a.data.shape == b.data.shape:
        return False
    if b.data.ndim == 1 and a.data.ndim >= 1 and b.data.shape[0] == a.data.shape[-1]:
        return True
    raise NumericsError(f"{op}: incompatible shapes {a.data.shape} and {b.data.shape}")


def _reduce_to_vector(g):
    # gradient of a trailing-axis vector broadcast against leading axes
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


# ----------------------------------------------------------- arithmetic ops --


def add(a, b):
    _same_dtype(a, b)
    bcast = _bcast_check(a, b, "add")

    def bw(g):
        return (g, _reduce_to_vector(g) if bcast else g)

    return _result(a.data + b.data, "add", (a, b), bw)


def sub(a, b):
    _same_dtype(a, b)
    bcast = _bcast_check(a, b, "sub")

    def bw(g):
        return (g, -(_reduce_to_vector(g) if bcast else g))

    return _result(a.data - b.data, "sub", (a, b), bw)


def mul(a, b):
    _same_dtype(a, b)
    bcast = _bcast_check(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g * bd
        gb = g * ad
        return (ga, _reduce_to_vector(gb) if bcast else gb)

    return _result(ad * bd, "mul", (a, b), bw)


def neg(a):
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a, c):
    c = float(c)
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def addc(a, c):
    c = float(c)
    return _result(a.data + c, "addc", (a,), lambda g: (g,))


def matmul(a, b):
    _same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise NumericsError(f"matmul: bad shapes {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T, ad.T @ g)

    return _result(ad @ bd, "matmul", (a, b), bw)


def transpose2d(a):
    if a.data.ndim != 2:
        raise NumericsError("transpose2d: rank-2 input required")
    return _result(a.data.T.copy(), "transpose2d", (a,), lambda g: (g.T,))


def reshape(a, shape):
    old = a.data.shape
    return _result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


# ----------------------------------------------------------- elementwise ops --


def sigmoid(a):
    y = _sigmoid_np(a.data)
    return _result(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(a):
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _result(y, "exp", (a,), lambda g: (g * y,))


def square(a):
    ad = a.data
    return _result(ad * ad, "square", (a,), lambda g: (2.0 * ad * g,))


def relu2(a):
    r = np.maximum(a.data, 0.0)
    return _result(r * r, "relu2", (a,), lambda g: (2.0 * r * g,))


def rsqrt(a):
    y = 1.0 / np.sqrt(a.data)
    return _result(y, "rsqrt", (a,), lambda g: (-0.5 * y**3 * g,))


_ELEMENTWISE = {
    "add": lambda a, b: add(a, b),
    "mul": lambda a, b: mul(a, b),
    "sigmoid": lambda a, b: sigmoid(a),
    "exp": lambda a, b: exp(a),
    "square": lambda a, b: square(a),
    "relu2": lambda a, b: relu2(a),
    "rsqrt": lambda a, b: rsqrt(a),
}


def elementwise(kind, a, b=None):
    """Dispatch by op name; binary kinds require b."""
    fn = _ELEMENTWISE.get(kind)
    if fn is None:
        raise NumericsError(f"unknown elementwise op {kind!r}")
    if kind in ("add", "mul") and b is None:
        raise NumericsError(f"{kind} needs two operands")
    return fn(a, b)


# ------------------------------------------------------------ structure ops --


def rms_norm(x, gain):
    """y = x / sqrt(mean(x^2, last axis) + eps) * gain."""
    _same_dtype(x, gain)
    xd = x.data
    n = xd.shape[-1]
    if gain.data.shape != (n,):
        raise NumericsError("rms_norm: gain must match the trailing axis")
    ms = (xd * xd).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + _RMS_EPS)
    gd = gain.data

    def bw(g):
        gg = g * gd
        s = (gg * xd).sum(axis=-1, keepdims=True)
        dx = r * gg - (r**3 / n) * xd * s
        dgain = _reduce_to_vector(g * (xd * r))
        return (dx, dgain)

    return _result(xd * r * gd, "rms_norm", (x, gain), bw)


def shift_time(x):
    """Shift a (batch, T, d) tensor one step along T; position 0 becomes zero."""
    if x.data.ndim != 3:
        raise NumericsError("shift_time: rank-3 input required")
    y = np.zeros_like(x.data)
    y[:, 1:] = x.data[:, :-1]

    def bw(g):
        gx = np.zeros_like(g)
        gx[:, :-1] = g[:, 1:]
        return (gx,)

    return _result(y, "shift_time", (x,), bw)


def gather_rows(x, idx):
    """Select rows of a rank-2 tensor; duplicate indices accumulate on backward."""
    if x.data.ndim != 2:
        raise NumericsError("gather_rows: rank-2 input required")
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise NumericsError("gather_rows: index must be a 1-d integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise NumericsError("gather_rows: index out of range")
    xd = x.data

    def bw(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(xd[idx], "gather_rows", (x,), bw)


def cross_entropy_rows(logits, targets):
    """Per-row negative log softmax probability of the target index."""
    z = logits.data
    if z.ndim != 2:
        raise NumericsError("cross_entropy_rows: rank-2 logits required")
    y = np.asarray(targets)
    if y.shape != (z.shape[0],) or not np.issubdtype(y.dtype, np.integer):
        raise NumericsError("cross_entropy_rows: targets must be one index per row")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise NumericsError("cross_entropy_rows: target out of range")
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    nll = lse - z[np.arange(z.shape[0]), y]

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(z.shape[0]), y] -= 1.0
        return (p * g[:, None],)

    return _result(nll, "cross_entropy_rows", (logits,), bw)


def entropy_rows(logits):
    """Shannon entropy of softmax(logits) per row, in nats."""
    z = logits.data
    if z.ndim != 2:
        raise NumericsError("entropy_rows: rank-2 logits required")
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    logp = z - lse
    p = np.exp(logp)
    h = -(p * logp).sum(axis=-1)

    def bw(g):
        return (-p * (logp + h[:, None]) * g[:, None],)

    return _result(np.maximum(h, 0.0), "entropy_rows", (logits,), bw)


def mean_all(a):
    n = a.data.size

    def bw(g):
        return (np.full_like(a.data, float(g) / n),)

    return _result(np.asarray(a.data.mean(), dtype=a.data.dtype), "mean_all", (a,), bw)


def sum_all(a):
    def bw(g):
        return (np.full_like(a.data, float(g)),)

    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), "sum_all", (a,), bw)


# -------------------------------------------------------------- decay scan --


def _scan_stepwise(w, A, B, Qa, Qb, S0):
    b, T, d = A.shape
    S = np.zeros((b, d, d), dtype=A.dtype) if S0 is None else S0.copy()
    wcol = w[None, :, None]
    Ya = np.empty_like(A) if Qa is not None else None
    Yb = np.empty_like(A) if Qb is not None else None
    for t in range(T):
        S *= wcol
        S += A[:, t, :, None] * B[:, t, None, :]
        if Qa is not None:
            Ya[:, t] = np.matmul(Qa[:, t, None, :], S)[:, 0]
        if Qb is not None:
            Yb[:, t] = np.matmul(S, Qb[:, t, :, None])[:, :, 0]
    return Ya, Yb, S


def _scan_blocked(w, A, B, Qa, Qb, S0, C):
    """Chunked scan in float64 with decay powers split around the chunk midpoint.

    Within a chunk, S_i = w^(i+1) (.) P + sum_{j<=i} w^(i-j) A_j B_j^T, and the
    relative power w^(i-j) factors as w^(i-h) * w^(h-j), turning the masked
    pair sums into two plain matmuls.
    """
    b, T, d = A.shape
    out_dtype = A.dtype
    w = w.astype(np.float64)
    S = np.zeros((b, d, d)) if S0 is None else S0.astype(np.float64)
    Ya = np.empty((b, T, d)) if Qa is not None else None
    Yb = np.empty((b, T, d)) if Qb is not None else None
    for lo in range(0, T, C):
        c = min(C, T - lo)
        i = np.arange(c)[:, None]
        h = c // 2
        pw1 = w[None, :] ** (i + 1)
        pw_up = w[None, :] ** (i - h)
        pw_dn = w[None, :] ** (h - i)
        mask = np.tril(np.ones((c, c)))
        Ac = A[:, lo : lo + c].astype(np.float64)
        Bc = B[:, lo : lo + c].astype(np.float64)
        if Qa is not None:
            Qac = Qa[:, lo : lo + c].astype(np.float64)
            M = np.matmul(Qac * pw_up[None], (Ac * pw_dn[None]).transpose(0, 2, 1)) * mask
            Ya[:, lo : lo + c] = np.matmul(Qac * pw1[None], S) + np.matmul(M, Bc)
        if Qb is not None:
            Qbc = Qb[:, lo : lo + c].astype(np.float64)
            N = np.matmul(Qbc, Bc.transpose(0, 2, 1)) * mask
            Yb[:, lo : lo + c] = pw1[None] * np.matmul(Qbc, S.transpose(0, 2, 1)) + pw_up[
                None
            ] * np.matmul(N, Ac * pw_dn[None])
        pw_rev = w[None, :] ** (c - 1 - i)
        S = (w**c)[None, :, None] * S + np.matmul(
            (Ac * pw_rev[None]).transpose(0, 2, 1), Bc
        )
    cast = lambda x: None if x is None else x.astype(out_dtype)
    return cast(Ya), cast(Yb), S.astype(out_dtype)


def _decay_scan(w, A, B, Qa=None, Qb=None, S0=None, chunk=0):
    """Linear recurrence S_t = diag(w) S_{t-1} + A_t B_t^T over axis 1.

    Returns (Ya, Yb, S_T) with Ya_t = S_t^T Qa_t and Yb_t = S_t Qb_t for the
    queries that were provided. chunk: -1 forces the stepwise path, 0 picks
    the default blocked width, a positive value forces that width.
    """
    if chunk == -1 or w.min() < _SCAN_W_FLOOR:
        return _scan_stepwise(w, A, B, Qa, Qb, S0)
    return _scan_blocked(w, A, B, Qa, Qb, S0, _SCAN_CHUNK if chunk == 0 else chunk)


def wkv_scan(decay, k, v, q, chunk=0):
    """Single-head decayed key/value scan from a fresh (zero) state.

    w = sigmoid(decay) per channel; S_t = diag(w) S_{t-1} + k_t v_t^T;
    out_t = S_t^T q_t. Inputs k, v, q are (batch, T, d); decay is (d,).
    The decay gradient uses the position-weighted identity
    d/dlog w = sum_t t * (q_t . dq_t - k_t . dk_t).
    """
    dt = _same_dtype(decay, k, v, q)
    kd, vd, qd = k.data, v.data, q.data
    if kd.ndim != 3 or vd.shape != kd.shape or qd.shape != kd.shape:
        raise NumericsError("wkv_scan: k, v, q must share a (batch, T, d) shape")
    if decay.data.shape != (kd.shape[2],):
        raise NumericsError("wkv_scan: decay must be a (d,) vector")
    w = _sigmoid_np(decay.data)
    out, _, _ = _decay_scan(w, kd, vd, Qa=qd, chunk=chunk)

    def bw(g):
        _, dq, _ = _decay_scan(w, kd, vd, Qb=g, chunk=chunk)
        rev = lambda x: np.ascontiguousarray(x[:, ::-1])
        dv_r, dk_r, _ = _decay_scan(
            w, rev(qd), rev(g), Qa=rev(kd), Qb=rev(vd), chunk=chunk
        )
        dk, dv = rev(dk_r), rev(dv_r)
        tpos = np.arange(kd.shape[1], dtype=np.float64)[None, :, None]
        dlogw = (tpos * (qd * dq - kd * dk).astype(np.float64)).sum(axis=(0, 1))
        dp = (dlogw * (1.0 - w.astype(np.float64))).astype(dt)
        return (dp, dk, dv, dq)

    return _result(out, "wkv_scan", (decay, k, v, q), bw)


# ---------------------------------------------------------------- backward --


def backward(root):
    """Reverse-mode sweep from a scalar root; accumulates into leaf .grad."""
    if root.data.shape != ():
        raise NumericsError("backward: root must be a scalar")
    if not root.requires_grad:
        raise NumericsError("backward: root is not connected to any tape")
    nodes = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(t._parents)
    grads = {root._id: np.ones((), dtype=root.data.dtype)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if not t._parents:
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
            continue
        parent_grads = t._backward(g)
        for p, pg in zip(t._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(p._id)
            grads[p._id] = pg if acc is None else acc + pg
        t._parents = ()
        t._backward = None


# --------------------------------------------------------------- gradcheck --


def finite_difference(f, x, h=1e-5):
    """Central-difference gradient of a scalar function of one array."""
    g = np.zeros(x.shape, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    """Worst-case relative error with an absolute floor for near-zero entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())
