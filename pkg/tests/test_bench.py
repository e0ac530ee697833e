"""Bench tests: synthetic corpora, decode harnesses, fits, CSV."""

import numpy as np
import pytest

import triblock.backbone as bb
import triblock.bench as bn
import triblock.layout as tl
import triblock.sampler as sm

V = tl.Vocab()


def small_task(**kw):
    kw.setdefault("period", 8)
    kw.setdefault("alphabet", 4)
    kw.setdefault("doc_len", 31)
    kw.setdefault("n_docs", 6)
    kw.setdefault("n_heldout", 3)
    return bn.SyntheticTask(**kw)


# ----------------------------------------------------------------- corpora --


def test_task_validation():
    with pytest.raises(ValueError):
        bn.SyntheticTask(kind="nope")
    with pytest.raises(ValueError):
        bn.SyntheticTask(alphabet=1)
    with pytest.raises(ValueError):
        bn.SyntheticTask(period=32, doc_len=16)


def test_periodic_docs_tile_the_master_pattern():
    task = small_task()
    pattern = bn.task_pattern(task, V)
    assert pattern.shape == (8,)
    docs = bn.make_docs(task, "train")
    assert len(docs) == 6
    for doc in docs:
        assert doc.shape == (31,)
        # every doc is the same phase-0 window of the tiled pattern
        assert (doc == np.tile(pattern, 4)[:31]).all()
    # alphabet ids are bytes 'a'..'d' shifted by one
    lo, hi = ord("a") + 1, ord("a") + 4 + 1
    assert all(lo <= t < hi for doc in docs for t in doc)


def test_copy_docs_have_per_doc_patterns():
    task = small_task(kind="copy", n_docs=8)
    docs = bn.make_docs(task, "train")
    firsts = {tuple(d[:8]) for d in docs}
    assert len(firsts) > 1  # patterns vary across docs
    for d in docs:
        assert (d == np.tile(d[:8], 4)[:31]).all()  # doc tiles its own head


def test_docs_deterministic_and_splits_disjoint():
    task = small_task()
    a = bn.make_docs(task, "train")
    b = bn.make_docs(task, "train")
    for x, y in zip(a, b):
        assert (x == y).all()
    # the periodic stream is one deterministic source: held-out gold matches
    held = bn.make_docs(task, "heldout")
    assert all((x == y).all() for x, y in zip(a, held))
    # copy-task pattern streams are disjoint between splits
    ctask = small_task(kind="copy", n_docs=6)
    ca = bn.make_docs(ctask, "train")
    ch = bn.make_docs(ctask, "heldout")
    assert any((x[:8] != y[:8]).any() for x, y in zip(ca, ch))


def test_heldout_samples_draw_different_masks():
    task = small_task()
    lcfg = tl.LayoutConfig(block_size=8, n_blocks=4)
    tr = bn.make_samples(task, lcfg, "train", n=6)
    hd = bn.make_samples(task, lcfg, "heldout", n=6)
    for a, b in zip(tr, hd):
        assert (a.gold == b.gold).all()  # same deterministic source
    assert any((a.mask != b.mask).any() for a, b in zip(tr, hd))


def test_samples_keep_first_period_unmasked():
    task = small_task()
    lcfg = tl.LayoutConfig(block_size=8, n_blocks=4)
    samples = bn.make_samples(task, lcfg, "train")
    for s in samples:
        assert not s.mask[:8].any()
        assert not s.lossable[:8].any()
        assert s.lossable[8:32].all()  # content plus eos
        assert s.eos_block == 4


def test_expected_continuation_oracle():
    task = small_task()
    doc = bn.make_docs(task, "train", n=1)[0]
    for plen in (8, 12, 20):
        prompt = doc[:plen]
        for k in range(31 - plen):
            assert bn.expected_continuation(prompt, 8, k) == doc[plen + k]
    with pytest.raises(ValueError):
        bn.expected_continuation(doc[:4], 8, 0)


def test_continuation_accuracy_counts_matches():
    prompt = np.array([1, 2, 3, 4] * 2)
    good = [1, 2, 3, 4]
    assert bn.continuation_accuracy(prompt, good, 4) == 1.0
    assert bn.continuation_accuracy(prompt, [1, 2, 9, 9], 4) == 0.5
    assert bn.continuation_accuracy(prompt, [], 4) == 0.0


# ------------------------------------------------------------------ stubs --


class EchoStub:
    """Predicts the token seen 2*period steps ago; before that, token 1.
    With block_size == period that lag solves the periodic task in both
    decode modes: 2p = 0 mod p for the single-copy AR stream, and in the
    2-replicate layout it reads the same slot of the previous clean copy."""

    def __init__(self, vocab, period):
        self.vocab = vocab
        self.lag = 2 * period

    def fresh_state(self):
        return []

    def forward_step(self, state, token):
        hist = state + [int(token)]
        row = np.full(self.vocab.size, -10.0)
        tgt = hist[-self.lag] if len(hist) >= self.lag else 1
        row[tgt] = 10.0
        return row, hist

    def forward_chunk(self, state, tokens):
        rows = []
        hist = list(state)
        for t in tokens:
            row, hist = self.forward_step(hist, int(t))
            rows.append(row)
        return np.stack(rows), hist

    def snapshot_state(self, state):
        return list(state)

    def restore_state(self, snap):
        return list(snap)


def test_ar_bench_on_echo_stub():
    task = small_task()
    stub = EchoStub(V, 8)
    doc = bn.make_docs(task, "train", n=1)[0]
    # two periods of prompt so the stub's lag-16 read starts in range
    res = bn.bench_ar(stub, V, task, doc[:16], n_tokens=16, repeats=2)
    assert res.mode == "ar"
    assert res.tokens == 16
    assert res.accuracy == 1.0
    assert res.tok_per_s > 0
    assert res.mean_iters == 0.0 and res.tau == 0.0 and res.k_min == 0
    assert res.seconds_min <= res.seconds <= res.seconds_max


def test_ar_bench_zero_tokens_guarded():
    task = small_task()
    stub = EchoStub(V, 8)
    res = bn.bench_ar(stub, V, task, [2, 3], n_tokens=0, repeats=2)
    assert res.tokens == 0
    assert res.seconds == 0.0
    assert res.tok_per_s == 0.0


def test_ar_decode_doubling_roughly_doubles_time():
    cfg = bb.BackboneConfig(n_layers=2, d_model=32, vocab_size=32, elem_kind="f32")
    model = bb.init_model(cfg, seed=0)
    voc = tl.Vocab(32)
    task = small_task()

    def cost(n):
        med, _, _ = bn.timed(lambda: bn.ar_decode(model, voc, [1, 2, 3], n), repeats=5)
        return med

    c1, c2 = cost(200), cost(400)
    assert 1.5 < c2 / c1 < 2.5


def test_diffusion_bench_on_echo_stub():
    task = small_task()
    stub = EchoStub(V, 8)
    doc = bn.make_docs(task, "train", n=1)[0]
    scfg = sm.SamplerConfig(block_size=8, max_iters=8, tau=0.9, k_min=1, max_blocks=2)
    res = bn.bench_diffusion_point(stub, V, task, doc[:8], scfg, n_blocks=2, repeats=2)
    assert res.mode == "diffusion"
    assert res.tokens == 16
    assert res.accuracy == 1.0
    assert res.B == 8 and res.T == 8 and res.tau == 0.9
    assert 1.0 <= res.mean_iters <= 8.0


def test_sweep_covers_full_grid():
    task = small_task()
    stub = EchoStub(V, 8)
    doc = bn.make_docs(task, "train", n=1)[0]
    res = bn.bench_diffusion_sweep(
        stub, V, task, doc[:8], B=8,
        taus=(0.3, 0.9), max_iters_grid=(2, 8), n_blocks=1, repeats=1,
    )
    assert len(res) == 4
    assert {(r.T, r.tau) for r in res} == {(2, 0.3), (2, 0.9), (8, 0.3), (8, 0.9)}
    for r in res:
        assert r.mean_iters <= 8 + 1  # bound plus the exhaustion sweep


def test_forced_steps_realize_exact_iteration_counts():
    task = small_task()
    stub = EchoStub(V, 8)
    doc = bn.make_docs(task, "train", n=1)[0]
    res = bn.bench_forced_steps(stub, V, task, doc[:8], B=8, steps_list=(2, 4, 8),
                                n_blocks=2, repeats=1)
    assert [r.mean_iters for r in res] == [2.0, 4.0, 8.0]
    assert [r.k_min for r in res] == [4, 2, 1]
    with pytest.raises(ValueError):
        bn.bench_forced_steps(stub, V, task, doc[:8], B=8, steps_list=(3,), repeats=1)


# -------------------------------------------------------------- prefill/fit --


def test_linear_fit_recovers_exact_line():
    xs = np.array([1.0, 2.0, 4.0, 8.0])
    fit = bn.linear_fit(xs, 3.0 * xs + 0.5)
    assert abs(fit["slope"] - 3.0) < 1e-12
    assert abs(fit["intercept"] - 0.5) < 1e-12
    assert abs(fit["r2"] - 1.0) < 1e-12


def test_linear_fit_matches_polyfit_on_noise():
    rng = np.random.default_rng(0)
    xs = rng.uniform(1, 100, 20)
    ys = 2 * xs + rng.normal(size=20)
    fit = bn.linear_fit(xs, ys)
    s, i = np.polyfit(xs, ys, 1)
    assert abs(fit["slope"] - s) < 1e-12 and abs(fit["intercept"] - i) < 1e-12
    assert 0.9 < fit["r2"] <= 1.0


def test_prefill_points_and_guards():
    cfg = bb.BackboneConfig(n_layers=1, d_model=16, vocab_size=32, elem_kind="f32")
    model = bb.init_model(cfg, seed=0)
    voc = tl.Vocab(32)
    points, fit = bn.bench_prefill(
        model, voc, lengths=(0, 64, 128, 256), B=8, repeats=2,
        pattern=np.arange(1, 9),
    )
    assert [p[0] for p in points] == [64, 128, 256]  # zero dropped
    assert all(p[1] > 0 for p in points)
    assert np.isfinite(fit["slope"]) and np.isfinite(fit["r2"])
    with pytest.raises(ValueError):
        bn.bench_prefill(model, voc, lengths=(1 << 21,), B=8)


def test_calibration_threshold_positive():
    cfg = bb.BackboneConfig(n_layers=1, d_model=16, vocab_size=32, elem_kind="f32")
    model = bb.init_model(cfg, seed=0)
    thr = bn.calibrate_commit_threshold(model, tl.Vocab(32), B=8, repeats=2)
    assert np.isfinite(thr) and thr > 0


# -------------------------------------------------------------------- csv --


def sample_results():
    return [
        bn.BenchResult("ar", 32, 0, 0.0, 0, 100, 0.5, 200.0, 0.0, 1.0),
        bn.BenchResult("diffusion", 32, 32, 0.9, 1, 96, 0.25, 384.0, 2.125, 0.96875),
    ]


def test_csv_golden_header(tmp_path):
    path = tmp_path / "b.csv"
    bn.emit_csv([], path)
    lines = path.read_text().splitlines()
    assert lines == ["mode,B,T,tau,k_min,tokens,seconds,tok_per_s,mean_iters,accuracy"]


def test_csv_round_trip(tmp_path):
    path = tmp_path / "b.csv"
    results = sample_results()
    bn.emit_csv(results, path)
    back = bn.parse_csv(path)
    assert len(back) == 2
    for a, b in zip(results, back):
        assert a.mode == b.mode and a.B == b.B and a.T == b.T and a.k_min == b.k_min
        assert a.tokens == b.tokens
        for f in ("tau", "seconds", "tok_per_s", "mean_iters", "accuracy"):
            assert abs(getattr(a, f) - getattr(b, f)) <= 1e-9


def test_csv_rejects_foreign_header(tmp_path):
    path = tmp_path / "b.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        bn.parse_csv(path)


def test_csv_column_order_stable(tmp_path):
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    bn.emit_csv(sample_results(), p1)
    bn.emit_csv(sample_results(), p2)
    assert p1.read_text() == p2.read_text()
    first_row = p1.read_text().splitlines()[1].split(",")
    assert first_row[0] == "ar" and first_row[1] == "32"


def test_timed_reports_ordered_stats():
    calls = []

    def fn():
        calls.append(1)

    med, lo, hi = bn.timed(fn, repeats=5, warmup=2)
    assert len(calls) == 7
    assert lo <= med <= hi
