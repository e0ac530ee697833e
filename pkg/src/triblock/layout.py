"""Byte vocabulary, block packing, mask sampling, and triplet construction.

A document becomes N logical blocks of B gold tokens: content, one EOS, PAD
fill, then all-PAD trailing blocks. Each block i unfolds physically as
[b1 | b2 | b3] where b1 = b2 = the masked copy and b3 is clean, so the
physical stream has 3*N*B tokens and the prediction row for slot j of block i
sits at pi(i, j) - 1 with pi(i, j) = 3*B*(i-1) + B + j.

Masks are drawn per block from a stream derived from (seed, sample, block),
so regeneration order never matters.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np


class LayoutError(Exception):
    pass


@dataclass(frozen=True)
class Vocab:
    """Reserved ids by position: eos 0, pad size-2, mask size-1.

    The byte codec (ids 1..256) applies only to the standard 259-way vocab;
    smaller vocabs are used by tests that never touch bytes.
    """

    size: int = 259

    def __post_init__(self):
        if self.size < 4:
            raise LayoutError("vocab needs eos, pad, mask and one payload id")

    @property
    def eos_id(self):
        return 0

    @property
    def pad_id(self):
        return self.size - 2

    @property
    def mask_id(self):
        return self.size - 1

    def encode(self, data: bytes) -> np.ndarray:
        if self.size != 259:
            raise LayoutError("byte codec requires the 259-way vocab")
        return np.frombuffer(data, dtype=np.uint8).astype(np.int64) + 1

    def decode(self, tokens) -> bytes:
        if self.size != 259:
            raise LayoutError("byte codec requires the 259-way vocab")
        toks = np.asarray(tokens)
        if toks.size == 0:
            return b""
        if toks.min() < 0 or toks.max() >= self.size:
            raise LayoutError("token id out of range")
        if (toks == self.mask_id).any():
            raise LayoutError("mask token in decode input")
        keep = toks[(toks != self.eos_id) & (toks != self.pad_id)]
        return (keep - 1).astype(np.uint8).tobytes()


@dataclass
class LayoutConfig:
    block_size: int = 32
    n_blocks: int = 64
    r_min: float = 0.0
    r_max: float = 1.0
    p_full: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.block_size < 1 or self.n_blocks < 1:
            raise LayoutError("block_size and n_blocks must be positive")
        if not (0.0 <= self.r_min <= self.r_max <= 1.0):
            raise LayoutError("need 0 <= r_min <= r_max <= 1")
        if not 0.0 <= self.p_full <= 1.0:
            raise LayoutError("p_full must be a probability")


@dataclass
class PackedDoc:
    gold: np.ndarray  # (N*B,) int64
    lossable: np.ndarray  # (N*B,) bool
    eos_block: int  # 1-based; 0 means no EOS (never produced by pack_document)
    truncated: bool


@dataclass
class Sample:
    gold: np.ndarray
    mask: np.ndarray  # (N*B,) bool
    lossable: np.ndarray
    eos_block: int


def pi(i: int, j: int, block_size: int) -> int:
    """Physical position of slot j (0-based) in the lossy copy of block i (1-based)."""
    return 3 * block_size * (i - 1) + block_size + j


def block_rng(seed: int, sample_index: int, block_index: int) -> np.random.Generator:
    """Independent stream per (sample, block); index order never matters."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, sample_index, block_index])
    )


def pack_document(
    tokens, cfg: LayoutConfig, vocab: Vocab, prompt_len: int = 0
) -> PackedDoc:
    """Lay content + EOS + PAD into N*B gold positions.

    Content longer than N*B - 1 is truncated (flagged). lossable is 1 on
    content and EOS, 0 on PAD and everywhere in trailing all-PAD blocks.
    prompt_len clears lossable over a leading prompt span (conditioning hook;
    unconditional corpora leave it 0).
    """
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1:
        raise LayoutError("pack_document expects a flat token array")
    if toks.size and (
        toks.min() < 0
        or toks.max() >= vocab.size
        or np.isin(toks, (vocab.eos_id, vocab.pad_id, vocab.mask_id)).any()
    ):
        raise LayoutError("document tokens must be payload ids")
    if not 0 <= prompt_len <= toks.size:
        raise LayoutError("prompt_len out of range")
    cap = cfg.n_blocks * cfg.block_size
    truncated = toks.size > cap - 1
    if truncated:
        toks = toks[: cap - 1]
    n = toks.size
    gold = np.full(cap, vocab.pad_id, dtype=np.int64)
    gold[:n] = toks
    gold[n] = vocab.eos_id
    lossable = np.zeros(cap, dtype=bool)
    lossable[: n + 1] = True
    lossable[:prompt_len] = False
    eos_block = n // cfg.block_size + 1
    return PackedDoc(gold, lossable, eos_block, truncated)


def sample_mask(
    gold_block, lossable_block, is_eos_block, rng, cfg: LayoutConfig, vocab: Vocab
) -> np.ndarray:
    """Draw one block's mask.

    Stream protocol (fixed): r ~ U[r_min, r_max], then the full-mask override
    draw, then the no-replacement position draw. floor(r*B) positions come
    from the lossable set (capped by its size); the EOS and, in the EOS
    block, every PAD are force-masked afterwards without consuming budget.
    """
    B = cfg.block_size
    gold_block = np.asarray(gold_block)
    lossable_idx = np.flatnonzero(np.asarray(lossable_block))
    m = np.zeros(B, dtype=bool)
    if lossable_idx.size:
        r = rng.uniform(cfg.r_min, cfg.r_max)
        if rng.random() < cfg.p_full:
            r = 1.0
        n_draw = min(int(r * B), lossable_idx.size)
        if n_draw:
            chosen = rng.choice(lossable_idx, size=n_draw, replace=False)
            m[chosen] = True
    if is_eos_block:
        m[gold_block == vocab.eos_id] = True
        m[gold_block == vocab.pad_id] = True
    return m


def build_sample(
    packed: PackedDoc, sample_index: int, cfg: LayoutConfig, vocab: Vocab
) -> Sample:
    """Draw masks for every block of a packed document."""
    B, N = cfg.block_size, cfg.n_blocks
    mask = np.zeros(N * B, dtype=bool)
    for i in range(1, N + 1):
        sl = slice((i - 1) * B, i * B)
        rng = block_rng(cfg.seed, sample_index, i)
        mask[sl] = sample_mask(
            packed.gold[sl], packed.lossable[sl], i == packed.eos_block, rng, cfg, vocab
        )
    return Sample(packed.gold.copy(), mask, packed.lossable.copy(), packed.eos_block)


def build_triplet(sample: Sample, cfg: LayoutConfig, vocab: Vocab):
    """Unfold a sample into the physical stream.

    Returns (physical (3*N*B,) int64, supervised) where supervised lists
    (i, j) pairs, 1-based block and 0-based slot, with mask and lossable both
    set. The prediction row for (i, j) is physical row pi(i, j) - 1.
    """
    B, N = cfg.block_size, cfg.n_blocks
    if sample.gold.shape != (N * B,):
        raise LayoutError("sample does not match the layout config")
    phys = np.empty(3 * N * B, dtype=np.int64)
    supervised = []
    for i in range(1, N + 1):
        sl = slice((i - 1) * B, i * B)
        g = sample.gold[sl]
        m = sample.mask[sl]
        b1 = g.copy()
        b1[m] = vocab.mask_id
        base = 3 * B * (i - 1)
        phys[base : base + B] = b1
        phys[base + B : base + 2 * B] = b1
        phys[base + 2 * B : base + 3 * B] = g
        for j in np.flatnonzero(m & sample.lossable[sl]):
            supervised.append((i, int(j)))
    return phys, supervised


# ------------------------------------------------------------- container io --

_MAGIC = b"TRPL"
_VERSION = 1


def write_samples(path, samples, cfg: LayoutConfig, vocab: Vocab) -> None:
    """Fixed-shape sample container: gold u16, mask/lossable bitsets, eos block."""
    B, N = cfg.block_size, cfg.n_blocks
    nb = N * B
    if vocab.size > 0xFFFF:
        raise LayoutError("vocab too large for u16 gold storage")
    parts = [struct.pack("<4sIIIIQ", _MAGIC, _VERSION, B, N, vocab.size, len(samples))]
    for s in samples:
        if s.gold.shape != (nb,):
            raise LayoutError("sample shape does not match the layout config")
        parts.append(s.gold.astype("<u2").tobytes())
        parts.append(np.packbits(s.mask, bitorder="little").tobytes())
        parts.append(np.packbits(s.lossable, bitorder="little").tobytes())
        parts.append(struct.pack("<I", s.eos_block))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_samples(path):
    """Returns (samples, block_size, n_blocks, vocab). Validates everything."""
    with open(path, "rb") as f:
        blob = f.read()
    head_len = struct.calcsize("<4sIIIIQ")
    if len(blob) < head_len:
        raise LayoutError("container too short for its header")
    magic, version, B, N, vsize, count = struct.unpack("<4sIIIIQ", blob[:head_len])
    if magic != _MAGIC:
        raise LayoutError("bad container magic")
    if version != _VERSION:
        raise LayoutError(f"unsupported container version {version}")
    if B < 1 or N < 1 or not 4 <= vsize <= 0xFFFF:
        raise LayoutError("implausible container header")
    nb = N * B
    bitset = (nb + 7) // 8
    rec = 2 * nb + 2 * bitset + 4
    if len(blob) != head_len + count * rec:
        raise LayoutError("container length does not match its header")
    vocab = Vocab(vsize)
    samples = []
    off = head_len
    for _ in range(count):
        gold = np.frombuffer(blob, "<u2", nb, off).astype(np.int64)
        off += 2 * nb
        mask = np.unpackbits(
            np.frombuffer(blob, np.uint8, bitset, off), count=nb, bitorder="little"
        ).astype(bool)
        off += bitset
        lossable = np.unpackbits(
            np.frombuffer(blob, np.uint8, bitset, off), count=nb, bitorder="little"
        ).astype(bool)
        off += bitset
        (eos_block,) = struct.unpack_from("<I", blob, off)
        off += 4
        if gold.max(initial=0) >= vsize or eos_block > N:
            raise LayoutError("corrupt sample record")
        samples.append(Sample(gold, mask, lossable, int(eos_block)))
    return samples, B, N, vocab


def container_crc(path) -> int:
    with open(path, "rb") as f:
        return zlib.crc32(f.read())


# -------------------------------------------------------------- inspection --


def _glyph(tok, vocab: Vocab):
    if tok == vocab.mask_id:
        return "·"
    if tok == vocab.eos_id:
        return "$"
    if tok == vocab.pad_id:
        return "_"
    b = tok - 1
    return chr(b) if 32 <= b < 127 else "?"


def render_sample(sample: Sample, cfg: LayoutConfig, vocab: Vocab) -> str:
    """Block-by-block text view of the physical layout of one sample."""
    B, N = cfg.block_size, cfg.n_blocks
    phys, supervised = build_triplet(sample, cfg, vocab)
    sup = set(supervised)
    lines = []
    for i in range(1, N + 1):
        base = 3 * B * (i - 1)
        sl = slice((i - 1) * B, i * B)
        tag = "  (eos)" if i == sample.eos_block else ""
        lines.append(f"block {i}  pi {pi(i, 0, B)}..{pi(i, B - 1, B)}{tag}")
        for name, lo in (("b1", base), ("b2", base + B), ("b3", base + 2 * B)):
            row = "".join(_glyph(int(t), vocab) for t in phys[lo : lo + B])
            lines.append(f"  {name}   {row}")
        lines.append(
            "  loss " + "".join("1" if x else "0" for x in sample.lossable[sl])
        )
        lines.append(
            "  sup  " + "".join("S" if (i, j) in sup else "." for j in range(B))
        )
    return "\n".join(lines)
