"""Training objective, batch assembly, train loop, and checkpoints.

The objective pools supervised positions across the whole batch into one
global mean: L = L_ce + cap_weight * L_cap, where L_ce is mean cross-entropy
over supervised rows and L_cap is mean predictive entropy over the subset of
supervised rows whose argmax already equals the gold token. Membership in
that subset is decided on values only; no gradient flows through the gate.

Checkpoints are a single binary blob: magic, version, a JSON header (model
config, step, optimizer meta, data-order rng state), length-prefixed named
tensors in the model dtype, and a trailing CRC32 over everything before it.
"""

from __future__ import annotations

import json
import os
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .backbone import BackboneConfig, Model, forward_batch, init_model
from .layout import LayoutConfig, Sample, Vocab, build_triplet, pi
from .optim import Adam
from .tensor import Tensor


class CheckpointError(Exception):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-4
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    clip_norm: float = 0.5
    cap_weight: float = 0.5
    batch_size: int = 16
    total_steps: int = 1000
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.cap_weight < 0:
            raise ValueError("cap_weight must be nonnegative")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size and total_steps must be sensible")


def make_optimizer(model: Model, tcfg: TrainConfig) -> Adam:
    return Adam(
        model.params,
        lr=tcfg.lr,
        beta1=tcfg.beta1,
        beta2=tcfg.beta2,
        eps=tcfg.eps,
        clip_norm=tcfg.clip_norm,
    )


@dataclass
class LossReport:
    ce: float
    cap: float
    total: float
    n_supervised: int
    n_gated: int
    masked_top1_acc: float
    lr: float = 0.0
    step: int = -1


@dataclass
class Batch:
    tokens: np.ndarray  # (b, 3*N*B) int64
    rows: np.ndarray  # (n_sup,) flat row index into the (b*T, V) logits
    gold: np.ndarray  # (n_sup,) target ids


def make_batch(samples, lcfg: LayoutConfig, vocab: Vocab) -> Batch:
    """Unfold samples and pool every supervised position into flat row lists."""
    B, N = lcfg.block_size, lcfg.n_blocks
    T = 3 * N * B
    toks = np.empty((len(samples), T), dtype=np.int64)
    rows, gold = [], []
    for s_i, s in enumerate(samples):
        phys, sup = build_triplet(s, lcfg, vocab)
        toks[s_i] = phys
        for i, j in sup:
            rows.append(s_i * T + pi(i, j, B) - 1)
            gold.append(int(s.gold[(i - 1) * B + j]))
    return Batch(toks, np.asarray(rows, dtype=np.int64), np.asarray(gold, dtype=np.int64))


def batch_objective(
    model: Model, batch: Batch, cap_weight: float = 0.5, fixed_gate=None
):
    """Returns (scalar loss Tensor, LossReport).

    fixed_gate, when given, is a bool array over batch.rows that replaces the
    value-computed gate; finite-difference checks need the gate held constant
    so the objective stays differentiable at the probe point.
    """
    if batch.rows.size == 0:
        raise ValueError("batch has no supervised positions")
    logits = forward_batch(model, batch.tokens)
    rows = tt.gather_rows(logits, batch.rows)
    ce_vec = tt.cross_entropy_rows(rows, batch.gold)
    n_sup = batch.rows.size
    l_ce = tt.scale(tt.sum_all(ce_vec), 1.0 / n_sup)

    # gate on values only: correct-argmax rows get the entropy penalty
    gate = rows.data.argmax(axis=1) == batch.gold
    top1 = float(gate.mean())
    if fixed_gate is not None:
        gate = np.asarray(fixed_gate, dtype=bool)
        if gate.shape != (n_sup,):
            raise ValueError("fixed_gate must cover every supervised row")
    n_gated = int(gate.sum())
    if n_gated:
        h = tt.entropy_rows(tt.gather_rows(logits, batch.rows[gate]))
        l_cap = tt.scale(tt.sum_all(h), 1.0 / n_gated)
    else:
        l_cap = Tensor(np.zeros((), dtype=model.cfg.dtype()))
    total = tt.add(l_ce, tt.scale(l_cap, cap_weight))
    report = LossReport(
        ce=float(l_ce.data),
        cap=float(l_cap.data),
        total=float(total.data),
        n_supervised=n_sup,
        n_gated=n_gated,
        masked_top1_acc=top1,
    )
    return total, report


def _single_sample_batch(sample: Sample, lcfg: LayoutConfig, vocab: Vocab):
    return make_batch([sample], lcfg, vocab)


def loss_ce(logits, sample: Sample, lcfg: LayoutConfig, vocab: Vocab):
    """Mean cross-entropy over one sample's supervised positions.

    Returns (scalar Tensor, count). An empty supervised set yields a plain
    zero with no tape edge; callers count those as degenerate.
    """
    b = _single_sample_batch(sample, lcfg, vocab)
    if b.rows.size == 0:
        return Tensor(np.zeros((), dtype=logits.data.dtype)), 0
    rows = tt.gather_rows(logits, b.rows)
    ce_vec = tt.cross_entropy_rows(rows, b.gold)
    return tt.scale(tt.sum_all(ce_vec), 1.0 / b.rows.size), int(b.rows.size)


def loss_cap(logits, sample: Sample, lcfg: LayoutConfig, vocab: Vocab):
    """Mean entropy over supervised positions already predicted correctly.

    Gate membership comes from values only; no gradient flows through it.
    """
    b = _single_sample_batch(sample, lcfg, vocab)
    if b.rows.size == 0:
        return Tensor(np.zeros((), dtype=logits.data.dtype)), 0
    gate = logits.data[b.rows].argmax(axis=1) == b.gold
    n_gated = int(gate.sum())
    if n_gated == 0:
        return Tensor(np.zeros((), dtype=logits.data.dtype)), 0
    h = tt.entropy_rows(tt.gather_rows(logits, b.rows[gate]))
    return tt.scale(tt.sum_all(h), 1.0 / n_gated), n_gated


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)


def train_step(model: Model, opt: Adam, batch: Batch, tcfg: TrainConfig, step: int):
    opt.lr = warmup_lr(tcfg.lr, step, tcfg.warmup_steps)
    opt.zero_grad()
    loss, report = batch_objective(model, batch, tcfg.cap_weight)
    tt.backward(loss)
    opt.step()
    report.lr = opt.lr
    report.step = step
    return report


def evaluate(model: Model, samples, lcfg: LayoutConfig, vocab: Vocab, batch_size=16):
    """Mean supervised cross-entropy and masked top-1 accuracy, no gradients."""
    tot_ce = 0.0
    tot_hit = 0
    tot_n = 0
    with tt.no_grad():
        for lo in range(0, len(samples), batch_size):
            batch = make_batch(samples[lo : lo + batch_size], lcfg, vocab)
            if batch.rows.size == 0:
                continue
            _, report = batch_objective(model, batch)
            tot_ce += report.ce * report.n_supervised
            tot_hit += round(report.masked_top1_acc * report.n_supervised)
            tot_n += report.n_supervised
    if tot_n == 0:
        return float("nan"), float("nan")
    return tot_ce / tot_n, tot_hit / tot_n


@dataclass
class TrainResult:
    steps_run: int
    skipped_batches: int
    history: list = field(default_factory=list)  # (step, eval_ce, eval_top1)
    last_report: LossReport | None = None
    stopped_early: bool = False


def train_loop(
    model: Model,
    opt: Adam,
    samples,
    lcfg: LayoutConfig,
    vocab: Vocab,
    tcfg: TrainConfig,
    gen: np.random.Generator,
    start_step: int = 0,
    eval_samples=None,
    stop_top1: float | None = None,
    stop_ce: float | None = None,
    log=None,
    step_hook=None,
) -> TrainResult:
    """Runs steps [start_step, tcfg.total_steps). Batches are drawn iid from
    gen, so resuming with the saved rng state reproduces the original run."""
    res = TrainResult(steps_run=0, skipped_batches=0)

    def maybe_eval(step):
        if eval_samples is None:
            return False
        ce, top1 = evaluate(model, eval_samples, lcfg, vocab, tcfg.batch_size)
        res.history.append((step, ce, top1))
        if log:
            log(f"step {step}  eval ce {ce:.4f}  masked top1 {top1:.4f}")
        hit_acc = stop_top1 is not None and top1 >= stop_top1
        hit_ce = stop_ce is not None and ce < stop_ce
        if stop_top1 is not None and stop_ce is not None:
            return hit_acc and hit_ce
        return hit_acc or hit_ce

    for step in range(start_step, tcfg.total_steps):
        idx = gen.integers(0, len(samples), size=tcfg.batch_size)
        batch = make_batch([samples[i] for i in idx], lcfg, vocab)
        if batch.rows.size == 0:
            res.skipped_batches += 1
            continue
        try:
            res.last_report = train_step(model, opt, batch, tcfg, step)
        except tt.NumericsError as e:
            raise tt.NumericsError(
                f"step {step}, batch samples {idx.tolist()}: {e}"
            ) from e
        res.steps_run += 1
        if step_hook:
            step_hook(step, res.last_report)
        if log and (step % 50 == 0 or step == tcfg.total_steps - 1):
            r = res.last_report
            log(
                f"step {step}  loss {r.total:.4f}  ce {r.ce:.4f}  cap {r.cap:.4f}"
                f"  top1 {r.masked_top1_acc:.3f}  lr {r.lr:.2e}"
            )
        if tcfg.eval_every and (step + 1) % tcfg.eval_every == 0:
            if maybe_eval(step + 1):
                res.stopped_early = True
                break
    if (
        not res.stopped_early
        and eval_samples is not None
        and (not res.history or res.history[-1][0] != tcfg.total_steps)
    ):
        maybe_eval(tcfg.total_steps)
    return res


# ------------------------------------------------------------- checkpoints --

_CKPT_MAGIC = b"B3DK"
_CKPT_VERSION = 1


def _cfg_to_dict(cfg: BackboneConfig) -> dict:
    return {
        "n_layers": cfg.n_layers,
        "d_model": cfg.d_model,
        "vocab_size": cfg.vocab_size,
        "decay_init_lo": cfg.decay_init_lo,
        "decay_init_hi": cfg.decay_init_hi,
        "tie_embeddings": cfg.tie_embeddings,
        "elem_kind": cfg.elem_kind,
    }


def save_checkpoint(path, model: Model, opt: Adam | None = None, step: int = 0, rng_state=None):
    """Atomic write; tensor payloads use the model dtype so a resumed run in
    f64 mode sees the exact trained values."""
    cfg = model.cfg
    meta = {
        "config": _cfg_to_dict(cfg),
        "elem_kind": cfg.elem_kind,
        "step": int(step),
        "rng_state": rng_state,
        "opt": None
        if opt is None
        else {
            "lr": opt.lr,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "clip_norm": opt.clip_norm,
            "step_count": opt.step_count,
        },
    }
    wire = "<f4" if cfg.elem_kind == "f32" else "<f8"
    tensors = [(p.name, p.data) for p in model.params]
    if opt is not None:
        for p in model.params:
            m, v = opt.moments[p.name]
            tensors.append((f"opt/{p.name}.m", m))
            tensors.append((f"opt/{p.name}.v", v))
    head = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [_CKPT_MAGIC, np.uint32(_CKPT_VERSION).tobytes(), np.uint32(len(head)).tobytes(), head]
    for name, arr in tensors:
        nb = name.encode("utf-8")
        parts.append(np.uint32(len(nb)).tobytes())
        parts.append(nb)
        parts.append(np.uint32(arr.ndim).tobytes())
        parts.append(np.asarray(arr.shape, dtype="<u4").tobytes())
        parts.append(np.ascontiguousarray(arr, dtype=wire).tobytes())
    blob = b"".join(parts)
    blob += np.uint32(zlib.crc32(blob) & 0xFFFFFFFF).tobytes()
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class CheckpointBundle:
    model: Model
    step: int
    rng_state: dict | None
    opt_meta: dict | None
    moments: dict  # name -> (m, v)


def load_checkpoint(path) -> CheckpointBundle:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise CheckpointError("checkpoint too short")
    crc = int(np.frombuffer(blob[-4:], "<u4")[0])
    if crc != (zlib.crc32(blob[:-4]) & 0xFFFFFFFF):
        raise CheckpointError("checkpoint crc mismatch")
    if blob[:4] != _CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    off = 4
    version = int(np.frombuffer(blob, "<u4", 1, off)[0]); off += 4
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    hlen = int(np.frombuffer(blob, "<u4", 1, off)[0]); off += 4
    try:
        meta = json.loads(blob[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"bad checkpoint header: {e}")
    off += hlen
    cfg = BackboneConfig(**meta["config"])
    wire = "<f4" if cfg.elem_kind == "f32" else "<f8"
    itemsize = 4 if cfg.elem_kind == "f32" else 8
    arrays = {}
    end = len(blob) - 4
    while off < end:
        nlen = int(np.frombuffer(blob, "<u4", 1, off)[0]); off += 4
        name = blob[off : off + nlen].decode("utf-8"); off += nlen
        rank = int(np.frombuffer(blob, "<u4", 1, off)[0]); off += 4
        if rank > 8:
            raise CheckpointError("implausible tensor rank")
        shape = tuple(int(x) for x in np.frombuffer(blob, "<u4", rank, off)); off += 4 * rank
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = count * itemsize
        if off + payload > end:
            raise CheckpointError("tensor payload runs past the checkpoint")
        arrays[name] = np.frombuffer(blob, wire, count, off).reshape(shape).astype(cfg.dtype())
        off += payload
    if off != end:
        raise CheckpointError("trailing bytes in checkpoint body")

    model = init_model(cfg, seed=0, zero_init=True)
    moments = {}
    seen = set()
    for name, arr in arrays.items():
        if name.startswith("opt/"):
            base, kind = name[4:-2], name[-1]
            if name[-2] != "." or kind not in "mv":
                raise CheckpointError(f"bad moment tensor name {name!r}")
            moments.setdefault(base, [None, None])["mv".index(kind)] = arr
            continue
        if name not in model.named:
            raise CheckpointError(f"unknown tensor {name!r}")
        if model.named[name].data.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name!r}")
        model.named[name].data[...] = arr
        seen.add(name)
    missing = set(model.named) - seen
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)}")
    moments = {k: (m, v) for k, (m, v) in moments.items() if m is not None and v is not None}
    return CheckpointBundle(model, int(meta["step"]), meta.get("rng_state"), meta.get("opt"), moments)


def restore_optimizer(bundle: CheckpointBundle, model: Model) -> Adam:
    om = bundle.opt_meta
    if om is None:
        raise CheckpointError("checkpoint has no optimizer state")
    opt = Adam(
        model.params,
        lr=om["lr"],
        beta1=om["beta1"],
        beta2=om["beta2"],
        eps=om["eps"],
        clip_norm=om["clip_norm"],
    )
    opt.step_count = om["step_count"]
    for name, (m, v) in bundle.moments.items():
        if name not in opt.moments:
            raise CheckpointError(f"moments for unknown parameter {name!r}")
        opt.moments[name][0][...] = m
        opt.moments[name][1][...] = v
    return opt


# --------------------------------------------------------------- gradcheck --


def gradcheck_objective(model: Model, batch: Batch, cap_weight=0.5, n_probe=24, h=1e-4, seed=0):
    """Central-difference check of the full objective against the tape.

    The confidence gate is frozen at its value-computed state so the function
    stays smooth at the probe point. Probes a pinned random subset of
    coordinates per parameter; returns {param name: max rel err}.

    h balances truncation against cancellation: the loss is O(1), so the
    difference lp - lm carries ~eps/h of roundoff while truncation is O(h^2);
    1e-4 keeps both comfortably below the 1e-4 acceptance tolerance.
    """
    if model.cfg.dtype() != np.float64:
        raise ValueError("gradcheck needs an f64 model")
    # gate frozen at its value at the unperturbed point
    with tt.no_grad():
        logits0 = forward_batch(model, batch.tokens)
    gate = logits0.data[batch.rows].argmax(axis=1) == batch.gold

    for p in model.params:
        p.tensor.grad = None
    loss, _ = batch_objective(model, batch, cap_weight, fixed_gate=gate)
    tt.backward(loss)

    rng = np.random.default_rng(seed)
    errs = {}
    for p in model.params:
        g = p.grad
        flat = p.data.reshape(-1)
        n = flat.size
        picks = rng.choice(n, size=min(n_probe, n), replace=False)
        worst = 0.0
        for ix in picks:
            keep = flat[ix]
            flat[ix] = keep + h
            lp, _ = batch_objective(model, batch, cap_weight, fixed_gate=gate)
            flat[ix] = keep - h
            lm, _ = batch_objective(model, batch, cap_weight, fixed_gate=gate)
            flat[ix] = keep
            fd = (float(lp.data) - float(lm.data)) / (2 * h)
            an = float(g.reshape(-1)[ix])
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
        errs[p.name] = worst
    return errs
