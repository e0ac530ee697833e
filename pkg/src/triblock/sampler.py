"""Block-wise iterative denoising inference.

Each logical block starts as B mask tokens. Every iteration restores the
recurrent state snapshot taken at the block boundary, forwards the current
guess twice ([guess | guess]), and reads the prediction for slot j from the
row at chunk offset B+j-1: the next-token head of the second copy, which has
already absorbed every unmasked token of the first copy. Positions whose
filtered top-1 probability clears tau commit to their argmax; if fewer than
min(k_min, remaining) clear it, the most confident remaining positions are
committed instead, so progress is strictly positive and the loop ends within
ceil(B / k_min) iterations even when tau is never met (tau > 1 is allowed as
exactly that test mode).

Works against any model object exposing fresh_state / forward_chunk /
snapshot_state / restore_state; tests drive it with table stubs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layout import Vocab


@dataclass
class SamplerConfig:
    block_size: int = 32
    max_iters: int = 32  # T, per block
    tau: float = 0.9
    k_min: int = 1
    max_blocks: int = 16
    temperature: float = 1.0
    refresh_extra_pass: bool = False
    seed: int = 0  # reserved; greedy commits consume no randomness

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive (tau > 1 = threshold never met)")
        if not 1 <= self.k_min <= self.block_size:
            raise ValueError("need 1 <= k_min <= block_size")
        if self.max_blocks < 0:
            raise ValueError("max_blocks must be nonnegative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass
class BlockDenoiseState:
    guess: np.ndarray  # (B,) int64, mask_id where uncommitted
    committed: np.ndarray  # (B,) bool
    iter: int
    pre_block_snapshot: object


@dataclass
class GenerationResult:
    tokens: list
    blocks_emitted: int
    iterations_per_block: list = field(default_factory=list)
    stopped_by: str = "max_blocks"  # "eos" | "max_blocks"


def masked_logit_filter(row, vocab: Vocab, temperature: float = 1.0) -> np.ndarray:
    """Suppress pad and mask outputs, apply temperature. Returns logits."""
    out = np.asarray(row, dtype=np.float64) / temperature
    out[vocab.pad_id] = -np.inf
    out[vocab.mask_id] = -np.inf
    return out


def filtered_probs(row, vocab: Vocab, temperature: float = 1.0) -> np.ndarray:
    z = masked_logit_filter(row, vocab, temperature)
    z = z - z[np.isfinite(z)].max()
    p = np.exp(z)
    return p / p.sum()


def begin_block(model, vocab: Vocab, prefix_state, cfg: SamplerConfig) -> BlockDenoiseState:
    B = cfg.block_size
    return BlockDenoiseState(
        guess=np.full(B, vocab.mask_id, dtype=np.int64),
        committed=np.zeros(B, dtype=bool),
        iter=0,
        pre_block_snapshot=model.snapshot_state(prefix_state),
    )


def _read_slots(model, vocab, st: BlockDenoiseState, cfg: SamplerConfig):
    """One [guess | guess] pass from the snapshot; returns per-slot
    (confidence, candidate) for uncommitted slots."""
    B = cfg.block_size
    state = model.restore_state(st.pre_block_snapshot)
    logits, _ = model.forward_chunk(state, np.concatenate([st.guess, st.guess]))
    conf = np.full(B, -1.0)
    cand = np.zeros(B, dtype=np.int64)
    for j in np.flatnonzero(~st.committed):
        p = filtered_probs(logits[B + j - 1], vocab, cfg.temperature)
        conf[j] = p.max()
        cand[j] = int(p.argmax())
    return conf, cand


def denoise_iteration(model, vocab: Vocab, st: BlockDenoiseState, cfg: SamplerConfig):
    """Commit by threshold, then top-min(k_min, remaining) fallback."""
    remaining = np.flatnonzero(~st.committed)
    if remaining.size == 0:
        raise ValueError("block already fully committed")
    conf, cand = _read_slots(model, vocab, st, cfg)
    commit = (conf > cfg.tau) & ~st.committed
    need = min(cfg.k_min, remaining.size)
    if commit.sum() < need:
        # highest confidence first, lower slot index on ties; threshold
        # passers are a prefix of this order, so this is a pure extension
        order = remaining[np.lexsort((remaining, -conf[remaining]))]
        commit[order[:need]] = True
    st.guess[commit] = cand[commit]
    st.committed |= commit
    st.iter += 1
    return st


def denoise_block(model, vocab: Vocab, prefix_state, cfg: SamplerConfig):
    """Denoise one block to completion.

    Returns (clean block (B,), next_state, iterations). On max_iters
    exhaustion, the remaining slots commit to their argmax in one extra pass
    (counted as an iteration). next_state always comes from a
    [clean | clean] pass off the pre-block snapshot, keeping the carried
    state independent of the commit trajectory.
    """
    st = begin_block(model, vocab, prefix_state, cfg)
    while not st.committed.all() and st.iter < cfg.max_iters:
        denoise_iteration(model, vocab, st, cfg)
    if not st.committed.all():
        conf, cand = _read_slots(model, vocab, st, cfg)
        left = ~st.committed
        st.guess[left] = cand[left]
        st.committed |= left
        st.iter += 1
    state = model.restore_state(st.pre_block_snapshot)
    _, next_state = model.forward_chunk(
        state, np.concatenate([st.guess, st.guess])
    )
    if cfg.refresh_extra_pass:
        _, next_state = model.forward_chunk(next_state, st.guess)
    return st.guess.copy(), next_state, st.iter


def prefill(model, state, prompt, block_size: int):
    """Consume a prompt in B-sized chunks, each forwarded twice (the
    replicate form a clean block takes at train time; partial tail chunk
    handled the same way)."""
    prompt = np.asarray(prompt, dtype=np.int64)
    for lo in range(0, prompt.size, block_size):
        chunk = prompt[lo : lo + block_size]
        _, state = model.forward_chunk(state, np.concatenate([chunk, chunk]))
    return state


def generate(model, vocab: Vocab, prompt, cfg: SamplerConfig) -> GenerationResult:
    """Prefill, then emit blocks until EOS or max_blocks."""
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    if prompt.size and np.isin(
        prompt, (vocab.eos_id, vocab.pad_id, vocab.mask_id)
    ).any():
        raise ValueError("prompt contains reserved token ids")
    state = prefill(model, model.fresh_state(), prompt, cfg.block_size)
    out = GenerationResult(tokens=[], blocks_emitted=0)
    for _ in range(cfg.max_blocks):
        block, state, iters = denoise_block(model, vocab, state, cfg)
        out.blocks_emitted += 1
        out.iterations_per_block.append(iters)
        hits = np.flatnonzero(block == vocab.eos_id)
        if hits.size:
            out.tokens.extend(int(t) for t in block[: hits[0]])
            out.stopped_by = "eos"
            return out
        out.tokens.extend(int(t) for t in block)
    out.stopped_by = "max_blocks"
    return out
