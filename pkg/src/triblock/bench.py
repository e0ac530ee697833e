"""Throughput and latency harness with deterministic synthetic tasks.

Two desk-scale corpora with known ground truth: "periodic" docs tile a fixed
master pattern at a per-document phase, "copy" docs tile a per-document
random pattern. Both are fully determined by their first period, which is
laid out as an unmaskable prompt span, so masked prediction always has the
phase in context and exact task accuracy is well defined (Bayes error 0).

Timing: monotonic clock, median of 5 runs after 1 warmup, min/max kept.
CSV schema is fixed: mode,B,T,tau,k_min,tokens,seconds,tok_per_s,mean_iters,accuracy.
AR rows echo 0 for the knobs that do not apply (T, tau, k_min, mean_iters).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .layout import LayoutConfig, Vocab, build_sample, pack_document
from .sampler import SamplerConfig, denoise_block, masked_logit_filter, prefill

CSV_HEADER = "mode,B,T,tau,k_min,tokens,seconds,tok_per_s,mean_iters,accuracy"


@dataclass
class BenchResult:
    mode: str  # "ar" | "diffusion"
    B: int
    T: int
    tau: float
    k_min: int
    tokens: int
    seconds: float
    tok_per_s: float
    mean_iters: float
    accuracy: float
    seconds_min: float = 0.0  # not in the CSV
    seconds_max: float = 0.0


# ---------------------------------------------------------------- corpora --


@dataclass
class SyntheticTask:
    kind: str = "periodic"  # "periodic" | "copy"
    period: int = 32
    alphabet: int = 16  # distinct byte values, 'a' upward
    doc_len: int = 127  # content tokens per document
    n_docs: int = 2048
    n_heldout: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("periodic", "copy"):
            raise ValueError("kind must be periodic or copy")
        if not 2 <= self.alphabet <= 26:
            raise ValueError("alphabet must be 2..26 byte values")
        if self.period < 2 or self.doc_len < self.period:
            raise ValueError("need doc_len >= period >= 2")


def _alphabet_ids(task: SyntheticTask, vocab: Vocab) -> np.ndarray:
    # byte values 'a'.. mapped into token ids
    return vocab.encode(bytes(range(ord("a"), ord("a") + task.alphabet)))


def task_pattern(task: SyntheticTask, vocab: Vocab) -> np.ndarray:
    """The master pattern of the periodic task (token ids, length period)."""
    ids = _alphabet_ids(task, vocab)
    rng = np.random.default_rng(np.random.SeedSequence([task.seed, 0]))
    return ids[rng.integers(0, task.alphabet, size=task.period)]


def make_docs(task: SyntheticTask, split: str = "train", n: int | None = None):
    """Token-id documents.

    The periodic source is one deterministic stream: every doc is the same
    phase-0 window of the tiled master pattern (Bayes CE is 0 without any
    context). The copy task draws a fresh pattern per doc from seed streams
    disjoint between splits; its answer is a function of the doc's prompt.
    """
    vocab = Vocab()
    if n is None:
        n = task.n_docs if split == "train" else task.n_heldout
    tag = {"train": 1, "heldout": 2}[split]
    pattern = task_pattern(task, vocab)
    ids = _alphabet_ids(task, vocab)
    docs = []
    reps = -(-task.doc_len // task.period)
    for k in range(n):
        if task.kind == "periodic":
            base = pattern
        else:
            rng = np.random.default_rng(np.random.SeedSequence([task.seed, tag, k]))
            base = ids[rng.integers(0, task.alphabet, size=task.period)]
        docs.append(np.tile(base, reps)[: task.doc_len])
    return docs


def make_samples(task: SyntheticTask, lcfg: LayoutConfig, split: str = "train", n=None):
    """Pack documents and draw masks. The first period of every doc is a
    prompt span (never masked), so the pattern is always visible in context
    (the copy task's answer is only defined given its prompt). Held-out
    samples use a disjoint sample-index range, so their mask draws never
    collide with training ones."""
    vocab = Vocab()
    docs = make_docs(task, split, n)
    base = 0 if split == "train" else 1_000_000_000
    out = []
    for k, doc in enumerate(docs):
        packed = pack_document(doc, lcfg, vocab, prompt_len=task.period)
        out.append(build_sample(packed, base + k, lcfg, vocab))
    return out


def expected_continuation(prompt, period: int, k: int) -> int:
    """Ground-truth token k positions after a prompt that tiles a pattern of
    the given period. Needs len(prompt) >= period."""
    prompt = np.asarray(prompt)
    if prompt.size < period:
        raise ValueError("prompt shorter than one period")
    return int(prompt[(prompt.size + k) % period])


def continuation_accuracy(prompt, generated, period: int) -> float:
    if len(generated) == 0:
        return 0.0
    hits = sum(
        1 for k, t in enumerate(generated) if t == expected_continuation(prompt, period, k)
    )
    return hits / len(generated)


# ----------------------------------------------------------------- timing --


def timed(fn, repeats: int = 5, warmup: int = 1):
    """(median, min, max) wall seconds over repeats after warmup calls."""
    for _ in range(warmup):
        fn()
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts)), float(min(ts)), float(max(ts))


def _safe_rate(tokens: int, seconds: float) -> float:
    return tokens / seconds if tokens and seconds > 0 else 0.0


# ------------------------------------------------------------ ar decoding --


def ar_decode(model, vocab: Vocab, prompt, n_tokens: int):
    """Greedy single-copy decoding with the plain step path."""
    state = model.fresh_state()
    logits = None
    for t in np.asarray(prompt, dtype=np.int64):
        logits, state = model.forward_step(state, int(t))
    out = []
    for _ in range(n_tokens):
        if logits is None:  # empty prompt: nothing to condition on yet
            logits, state = model.forward_step(state, vocab.eos_id)
        row = masked_logit_filter(logits, vocab)
        nxt = int(row.argmax())
        out.append(nxt)
        logits, state = model.forward_step(state, nxt)
    return out


def bench_ar(model, vocab: Vocab, task: SyntheticTask, prompt, n_tokens: int, repeats: int = 5):
    prompt = np.asarray(prompt, dtype=np.int64)
    out = ar_decode(model, vocab, prompt, n_tokens)  # also serves as warmup

    def run():
        ar_decode(model, vocab, prompt, n_tokens)

    med, lo, hi = timed(run, repeats=repeats, warmup=0) if n_tokens else (0.0, 0.0, 0.0)
    acc = continuation_accuracy(prompt, out, task.period)
    return BenchResult(
        mode="ar", B=int(task.period), T=0, tau=0.0, k_min=0,
        tokens=n_tokens, seconds=med, tok_per_s=_safe_rate(n_tokens, med),
        mean_iters=0.0, accuracy=acc, seconds_min=lo, seconds_max=hi,
    )


# ----------------------------------------------------- diffusion decoding --


def _emit_blocks(model, vocab: Vocab, snap, scfg: SamplerConfig, n_blocks: int):
    state = model.restore_state(snap)
    tokens, iters = [], []
    for _ in range(n_blocks):
        block, state, it = denoise_block(model, vocab, state, scfg)
        iters.append(it)
        hits = np.flatnonzero(block == vocab.eos_id)
        if hits.size:
            tokens.extend(int(t) for t in block[: hits[0]])
            break
        tokens.extend(int(t) for t in block)
    return tokens, iters


def bench_diffusion_point(
    model, vocab: Vocab, task: SyntheticTask, prompt, scfg: SamplerConfig,
    n_blocks: int, repeats: int = 5,
):
    prompt = np.asarray(prompt, dtype=np.int64)
    state = prefill(model, model.fresh_state(), prompt, scfg.block_size)
    snap = model.snapshot_state(state)
    tokens, iters = _emit_blocks(model, vocab, snap, scfg, n_blocks)

    def run():
        _emit_blocks(model, vocab, snap, scfg, n_blocks)

    med, lo, hi = timed(run, repeats=repeats, warmup=0)
    acc = continuation_accuracy(prompt, tokens, task.period)
    return BenchResult(
        mode="diffusion", B=scfg.block_size, T=scfg.max_iters, tau=scfg.tau,
        k_min=scfg.k_min, tokens=len(tokens), seconds=med,
        tok_per_s=_safe_rate(len(tokens), med),
        mean_iters=float(np.mean(iters)) if iters else 0.0,
        accuracy=acc, seconds_min=lo, seconds_max=hi,
    )


def bench_diffusion_sweep(
    model, vocab: Vocab, task: SyntheticTask, prompt, B: int,
    taus=(0.3, 0.5, 0.7, 0.9), max_iters_grid=(8, 16, 24, 32),
    k_min: int = 1, n_blocks: int = 3, repeats: int = 5,
):
    results = []
    for T in max_iters_grid:
        for tau in taus:
            scfg = SamplerConfig(block_size=B, max_iters=T, tau=tau, k_min=k_min,
                                 max_blocks=n_blocks)
            results.append(
                bench_diffusion_point(model, vocab, task, prompt, scfg, n_blocks, repeats)
            )
    return results


def bench_forced_steps(
    model, vocab: Vocab, task: SyntheticTask, prompt, B: int,
    steps_list=(4, 8, 16, 32), n_blocks: int = 3, repeats: int = 5,
):
    """Force the realized iteration count: unreachable threshold plus
    k_min = B/steps makes every block take exactly `steps` iterations."""
    results = []
    for steps in steps_list:
        if B % steps:
            raise ValueError("steps must divide the block size")
        scfg = SamplerConfig(
            block_size=B, max_iters=steps, tau=1.1, k_min=B // steps, max_blocks=n_blocks
        )
        results.append(
            bench_diffusion_point(model, vocab, task, prompt, scfg, n_blocks, repeats)
        )
    return results


# ---------------------------------------------------------------- prefill --


def bench_prefill(
    model, vocab: Vocab, lengths=(1024, 2048, 4096, 8192, 16384, 32768, 65536),
    B: int = 32, repeats: int = 5, max_len_cap: int = 1 << 20, pattern=None,
):
    """Wall time of chunked prefill per prompt length, plus a linear fit.

    Returns (points, fit): points are (length, median, min, max) with
    zero lengths dropped; fit has slope/intercept/r2 over the points.
    """
    if max(lengths) > max_len_cap:
        raise ValueError(f"prefill length above configured cap {max_len_cap}")
    if pattern is None:
        ids = _alphabet_ids(SyntheticTask(), vocab)
        pattern = ids[np.arange(B) % len(ids)]
    points = []
    for L in lengths:
        if L == 0:
            continue
        prompt = np.tile(pattern, -(-L // len(pattern)))[:L]

        def run():
            prefill(model, model.fresh_state(), prompt, B)

        med, lo, hi = timed(run, repeats=repeats, warmup=1)
        points.append((int(L), med, lo, hi))
    xs = np.array([p[0] for p in points], dtype=np.float64)
    ys = np.array([p[1] for p in points], dtype=np.float64)
    fit = linear_fit(xs, ys)
    return points, fit


def linear_fit(xs, ys) -> dict:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size < 2:
        raise ValueError("need at least two points to fit")
    slope, intercept = np.polyfit(xs, ys, 1)
    pred = slope * xs + intercept
    ss_res = float(((ys - pred) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": float(r2)}


# -------------------------------------------------------- self-calibration --


def calibrate_commit_threshold(model, vocab: Vocab, B: int, repeats: int = 5) -> float:
    """Commits-per-iteration above which diffusion decoding out-rates AR.

    One denoising iteration forwards a 2B chunk; one AR token forwards one
    step. Diffusion emits B tokens in `iters` chunk passes, AR in B steps,
    so diffusion wins when B/iters > t_chunk(2B)/t_step."""
    tokens = np.ones(2 * B, dtype=np.int64)

    def chunk_pass():
        model.forward_chunk(model.fresh_state(), tokens)

    def step_pass():
        model.forward_step(model.fresh_state(), 1)

    t_chunk, _, _ = timed(chunk_pass, repeats=repeats, warmup=1)
    t_step, _, _ = timed(step_pass, repeats=repeats, warmup=1)
    return t_chunk / max(t_step, 1e-12)


# -------------------------------------------------------------------- csv --


def emit_csv(results, path):
    cols = CSV_HEADER.split(",")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in results:
            w.writerow([
                r.mode, r.B, r.T, repr(float(r.tau)), r.k_min, r.tokens,
                repr(float(r.seconds)), repr(float(r.tok_per_s)),
                repr(float(r.mean_iters)), repr(float(r.accuracy)),
            ])


def parse_csv(path):
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd)
        if header != CSV_HEADER.split(","):
            raise ValueError("unexpected csv header")
        out = []
        for row in rd:
            out.append(BenchResult(
                mode=row[0], B=int(row[1]), T=int(row[2]), tau=float(row[3]),
                k_min=int(row[4]), tokens=int(row[5]), seconds=float(row[6]),
                tok_per_s=float(row[7]), mean_iters=float(row[8]),
                accuracy=float(row[9]),
            ))
    return out
