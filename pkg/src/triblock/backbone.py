"""Strictly causal recurrent backbone with a single-head decayed kv state.

Per layer, a time-mix sublayer feeds a token-shifted projection of the
normalized residual into the scan S_t = diag(w) S_{t-1} + k_t v_t^T with
w = sigmoid(decay) per channel, reads o_t = sigmoid(r_t) * (S_t^T q_t), and a
channel-mix sublayer applies a token-shifted squared-relu MLP at 4x width.
No positional encoding: all positional information lives in the recurrent
state, which moves strictly forward. Training passes record a tape; the
step/chunk paths are plain numpy and carry state explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import NumericsError, Parameter, Tensor, _decay_scan, _sigmoid_np

_KIND_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class BackboneConfig:
    n_layers: int = 2
    d_model: int = 64
    vocab_size: int = 259
    decay_init_lo: float = 0.9
    decay_init_hi: float = 0.999
    tie_embeddings: bool = False
    elem_kind: str = "f32"

    def dtype(self):
        if self.elem_kind not in _KIND_DTYPES:
            raise NumericsError(f"unknown elem_kind {self.elem_kind!r}")
        return _KIND_DTYPES[self.elem_kind]


def param_count(cfg: BackboneConfig) -> int:
    """Closed-form parameter total for a config."""
    d, v, nl = cfg.d_model, cfg.vocab_size, cfg.n_layers
    per_layer = 13 * d * d + 5 * d  # 4 proj + out proj + 8d^2 mlp; gains, mixes, decay
    head = 0 if cfg.tie_embeddings else d * v
    return v * d + nl * per_layer + d + head


class Model:
    def __init__(self, cfg: BackboneConfig, params: dict[str, Parameter]):
        self.cfg = cfg
        self.named = params
        self.params = list(params.values())

    def p(self, name):
        return self.named[name].tensor

    def a(self, name):
        return self.named[name].data

    # thin wrappers so callers (and test stubs) can stay method-based
    def fresh_state(self):
        return fresh_state(self)

    def forward_step(self, state, token):
        return forward_step(self, state, token)

    def forward_chunk(self, state, tokens):
        return forward_chunk(self, state, tokens)

    def snapshot_state(self, state):
        return snapshot(state)

    def restore_state(self, snap):
        return restore(snap)


def _layer_names(i):
    base = f"layer{i}."
    return [
        base + s
        for s in (
            "att.gain",
            "att.mu",
            "att.decay",
            "att.wk",
            "att.wv",
            "att.wq",
            "att.wr",
            "att.wo",
            "ffn.gain",
            "ffn.mu",
            "ffn.w1",
            "ffn.w2",
        )
    ]


def init_model(cfg: BackboneConfig, seed: int, zero_init: bool = False) -> Model:
    """Seeded init; zero_init zeroes every projection so logits are uniform."""
    dt = cfg.dtype()
    rng = np.random.default_rng(seed)
    d, v = cfg.d_model, cfg.vocab_size
    std = 0.02 / np.sqrt(cfg.n_layers)

    def mat(shape, s):
        if zero_init:
            return np.zeros(shape, dtype=dt)
        return (rng.standard_normal(shape) * s).astype(dt)

    params: dict[str, Parameter] = {}

    def put(name, arr):
        params[name] = Parameter(name, arr, dtype=dt)

    put("emb", mat((v, d), 0.02))
    # per-channel decay spread across the init range, mapped through logit
    w0 = np.linspace(cfg.decay_init_lo, cfg.decay_init_hi, d)
    decay0 = np.log(w0 / (1.0 - w0))
    for i in range(cfg.n_layers):
        g1, mu1, dec, wk, wv, wq, wr, wo, g2, mu2, w1, w2 = _layer_names(i)
        put(g1, np.ones(d, dtype=dt))
        put(mu1, np.full(d, 0.5, dtype=dt))
        put(dec, decay0.astype(dt))
        put(wk, mat((d, d), std))
        put(wv, mat((d, d), std))
        put(wq, mat((d, d), std))
        put(wr, mat((d, d), std))
        put(wo, mat((d, d), std))
        put(g2, np.ones(d, dtype=dt))
        put(mu2, np.full(d, 0.5, dtype=dt))
        put(w1, mat((d, 4 * d), std))
        put(w2, mat((4 * d, d), std))
    put("head.gain", np.ones(d, dtype=dt))
    if not cfg.tie_embeddings:
        put("head.w", mat((d, v), std))
    model = Model(cfg, params)
    total = sum(p.data.size for p in model.params)
    assert total == param_count(cfg)
    return model


# ------------------------------------------------------------ training path --


def _check_tokens(cfg, tokens):
    tokens = np.asarray(tokens)
    if not np.issubdtype(tokens.dtype, np.integer):
        raise NumericsError("tokens must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise NumericsError("token id out of vocabulary range")
    return tokens


def forward_batch(model: Model, tokens) -> Tensor:
    """Tape-recorded forward over (batch, T) token rows from fresh state.

    Returns (batch*T, V) logits; row b*T + t is the next-token distribution
    after consuming tokens[b, :t+1].
    """
    tokens = _check_tokens(model.cfg, tokens)
    if tokens.ndim != 2:
        raise NumericsError("forward_batch expects a (batch, T) token array")
    b, T = tokens.shape
    d = model.cfg.d_model

    def lerp(u, us, mu):
        onem = tt.addc(tt.neg(mu), 1.0)
        return tt.add(tt.mul(u, mu), tt.mul(us, onem))

    x = tt.gather_rows(model.p("emb"), tokens.reshape(-1))
    x = tt.reshape(x, (b, T, d))
    for i in range(model.cfg.n_layers):
        g1, mu1, dec, wk, wv, wq, wr, wo, g2, mu2, w1, w2 = _layer_names(i)
        u = tt.rms_norm(x, model.p(g1))
        xm = lerp(u, tt.shift_time(u), model.p(mu1))
        flat = tt.reshape(xm, (b * T, d))
        k = tt.reshape(tt.matmul(flat, model.p(wk)), (b, T, d))
        v = tt.reshape(tt.matmul(flat, model.p(wv)), (b, T, d))
        q = tt.reshape(tt.matmul(flat, model.p(wq)), (b, T, d))
        r = tt.reshape(tt.matmul(flat, model.p(wr)), (b, T, d))
        a = tt.wkv_scan(model.p(dec), k, v, q)
        o = tt.mul(tt.sigmoid(r), a)
        y = tt.matmul(tt.reshape(o, (b * T, d)), model.p(wo))
        x = tt.add(x, tt.reshape(y, (b, T, d)))

        u2 = tt.rms_norm(x, model.p(g2))
        zm = lerp(u2, tt.shift_time(u2), model.p(mu2))
        hmid = tt.relu2(tt.matmul(tt.reshape(zm, (b * T, d)), model.p(w1)))
        y2 = tt.matmul(hmid, model.p(w2))
        x = tt.add(x, tt.reshape(y2, (b, T, d)))

    xn = tt.rms_norm(x, model.p("head.gain"))
    head = (
        tt.transpose2d(model.p("emb"))
        if model.cfg.tie_embeddings
        else model.p("head.w")
    )
    return tt.matmul(tt.reshape(xn, (b * T, d)), head)


def forward_full(model: Model, tokens) -> Tensor:
    """Tape-recorded forward over one sequence; returns (T, V) logits."""
    tokens = _check_tokens(model.cfg, tokens)
    if tokens.ndim != 1 or tokens.size == 0:
        raise NumericsError("forward_full expects a non-empty 1-d token array")
    out = forward_batch(model, tokens[None, :])
    return tt.reshape(out, (tokens.size, model.cfg.vocab_size))


# ----------------------------------------------------------- inference path --


class RecurrentState:
    """Per-layer (S, time-shift, channel-shift) plus a position counter."""

    __slots__ = ("pos", "layers")

    def __init__(self, pos, layers):
        self.pos = pos
        self.layers = layers


def fresh_state(model: Model) -> RecurrentState:
    d = model.cfg.d_model
    dt = model.cfg.dtype()
    layers = [
        {
            "S": np.zeros((d, d), dtype=dt),
            "tshift": np.zeros(d, dtype=dt),
            "cshift": np.zeros(d, dtype=dt),
        }
        for _ in range(model.cfg.n_layers)
    ]
    return RecurrentState(0, layers)


def snapshot(state: RecurrentState) -> RecurrentState:
    """Deep copy; the snapshot shares no memory with the live state."""
    return RecurrentState(
        state.pos, [{k: v.copy() for k, v in layer.items()} for layer in state.layers]
    )


def restore(snap: RecurrentState) -> RecurrentState:
    """A fresh mutable state from a snapshot (another deep copy)."""
    return snapshot(snap)


def _rms_np(x, gain):
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x / np.sqrt(ms + tt._RMS_EPS) * gain


def forward_step(model: Model, state: RecurrentState, token: int):
    """Consume one token; returns ((V,) logits, advanced state). Mutates state."""
    tok = int(token)
    if not 0 <= tok < model.cfg.vocab_size:
        raise NumericsError("token id out of vocabulary range")
    x = model.a("emb")[tok].copy()
    for i in range(model.cfg.n_layers):
        g1, mu1, dec, wk, wv, wq, wr, wo, g2, mu2, w1, w2 = _layer_names(i)
        st = state.layers[i]
        mu = model.a(mu1)
        u = _rms_np(x, model.a(g1))
        xm = mu * u + (1.0 - mu) * st["tshift"]
        st["tshift"] = u
        k = xm @ model.a(wk)
        v = xm @ model.a(wv)
        q = xm @ model.a(wq)
        r = xm @ model.a(wr)
        w = _sigmoid_np(model.a(dec))
        st["S"] = st["S"] * w[:, None] + np.outer(k, v)
        o = _sigmoid_np(r) * (st["S"].T @ q)
        x = x + o @ model.a(wo)

        mu2v = model.a(mu2)
        u2 = _rms_np(x, model.a(g2))
        zm = mu2v * u2 + (1.0 - mu2v) * st["cshift"]
        st["cshift"] = u2
        h = np.maximum(zm @ model.a(w1), 0.0)
        x = x + (h * h) @ model.a(w2)
    xn = _rms_np(x, model.a("head.gain"))
    head = model.a("emb").T if model.cfg.tie_embeddings else model.a("head.w")
    logits = xn @ head
    if not np.all(np.isfinite(logits)):
        raise NumericsError("non-finite logits in forward_step")
    state.pos += 1
    return logits, state


def forward_chunk(model: Model, state: RecurrentState, tokens):
    """Consume a token chunk; returns ((k, V) logits, advanced state).

    Row j is the next-token distribution after consuming tokens[:j+1].
    Mutates state. Equivalent to k forward_step calls.
    """
    tokens = _check_tokens(model.cfg, tokens)
    if tokens.ndim != 1 or tokens.size == 0:
        raise NumericsError("forward_chunk expects a non-empty 1-d token array")
    n = tokens.size
    x = model.a("emb")[tokens]
    for i in range(model.cfg.n_layers):
        g1, mu1, dec, wk, wv, wq, wr, wo, g2, mu2, w1, w2 = _layer_names(i)
        st = state.layers[i]
        mu = model.a(mu1)
        u = _rms_np(x, model.a(g1))
        us = np.empty_like(u)
        us[0] = st["tshift"]
        us[1:] = u[:-1]
        st["tshift"] = u[-1].copy()
        xm = mu * u + (1.0 - mu) * us
        k = xm @ model.a(wk)
        v = xm @ model.a(wv)
        q = xm @ model.a(wq)
        r = xm @ model.a(wr)
        w = _sigmoid_np(model.a(dec))
        ya, _, s_fin = _decay_scan(w, k[None], v[None], Qa=q[None], S0=st["S"][None])
        st["S"] = s_fin[0]
        o = _sigmoid_np(r) * ya[0]
        x = x + o @ model.a(wo)

        mu2v = model.a(mu2)
        u2 = _rms_np(x, model.a(g2))
        us2 = np.empty_like(u2)
        us2[0] = st["cshift"]
        us2[1:] = u2[:-1]
        st["cshift"] = u2[-1].copy()
        zm = mu2v * u2 + (1.0 - mu2v) * us2
        h = np.maximum(zm @ model.a(w1), 0.0)
        x = x + (h * h) @ model.a(w2)
    xn = _rms_np(x, model.a("head.gain"))
    head = model.a("emb").T if model.cfg.tie_embeddings else model.a("head.w")
    logits = xn @ head
    if not np.all(np.isfinite(logits)):
        raise NumericsError("non-finite logits in forward_chunk")
    state.pos += n
    return logits, state
