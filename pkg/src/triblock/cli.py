"""Command-line entry point: corpus preparation, training, generation,
benchmarking, gradient checking, and sample inspection.

Config files are INI-style (configparser) with sections [run], [layout],
[backbone], [train], [sampler], [bench], [paths]; every key mirrors a field
of the matching config dataclass and unknown keys are rejected. Flag
overrides (--set section.key=value, --seed, --deterministic) win over the
file; the resolved winner is recorded in the run manifest written next to
every produced artifact. The TRIBLOCK_OUT env var relocates relative output
paths (samples, checkpoint, CSVs) under a single root.

Exit codes: 0 success, 1 usage/config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import datetime
import json
import os
import platform
import sys
import tempfile
from dataclasses import dataclass

import numpy as np

from . import __version__
from .backbone import BackboneConfig, init_model
from .bench import SyntheticTask, bench_ar, bench_diffusion_sweep, emit_csv, make_docs
from .layout import (
    LayoutConfig,
    LayoutError,
    Vocab,
    build_sample,
    pack_document,
    read_samples,
    render_sample,
    write_samples,
)
from .sampler import SamplerConfig, generate
from .tensor import NumericsError
from .train import (
    CheckpointError,
    TrainConfig,
    gradcheck_objective,
    load_checkpoint,
    make_batch,
    make_optimizer,
    restore_optimizer,
    save_checkpoint,
    train_loop,
)


class ConfigError(Exception):
    """Bad config file, unknown key, or invalid value. Exit code 1."""


# ------------------------------------------------------------- app config --


@dataclass
class RunSettings:
    seed: int = 0
    deterministic: bool = False  # forces f64 weights for exact replay


@dataclass
class BenchSettings:
    task: str = "periodic"
    period: int = 32
    alphabet: int = 16
    doc_len: int = 127
    n_docs: int = 64
    n_heldout: int = 16
    ar_tokens: int = 128
    n_blocks: int = 3
    repeats: int = 5
    taus: tuple = (0.3, 0.5, 0.7, 0.9)
    max_iters_grid: tuple = (8, 16, 24, 32)


@dataclass
class PathSettings:
    corpus: str = "corpus"
    samples: str = "samples.trpl"
    checkpoint: str = "model.b3dk"
    loss_csv: str = "loss.csv"
    bench_csv: str = "bench.csv"


@dataclass
class AppConfig:
    run: RunSettings
    layout: LayoutConfig
    backbone: BackboneConfig
    train: TrainConfig
    sampler: SamplerConfig
    bench: BenchSettings
    paths: PathSettings


_SECTIONS = {
    "run": RunSettings,
    "layout": LayoutConfig,
    "backbone": BackboneConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "bench": BenchSettings,
    "paths": PathSettings,
}

# Derived keys: settable only through their governing counterpart.
_BLOCKED = {
    ("layout", "seed"): "run.seed",
    ("train", "seed"): "run.seed",
    ("sampler", "seed"): "run.seed",
    ("sampler", "block_size"): "layout.block_size",
}

_OUT_KEYS = ("samples", "checkpoint", "loss_csv", "bench_csv")
ENV_OUT = "TRIBLOCK_OUT"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(section: str, key: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{section}.{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            elem = type(default[0])
            return tuple(elem(p.strip()) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r}") from None
    return raw


def _section_fields(cls) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in dataclasses.fields(cls)}


def _put(vals: dict, section: str, key: str, raw: str):
    if section not in _SECTIONS:
        raise ConfigError(f"unknown section [{section}]")
    if (section, key) in _BLOCKED:
        raise ConfigError(f"{section}.{key} is derived; set {_BLOCKED[section, key]}")
    fields = _section_fields(_SECTIONS[section])
    if key not in fields:
        raise ConfigError(f"unknown key {section}.{key}")
    vals[section][key] = _coerce(section, key, raw, fields[key])


def _read_config_file(path: str, vals: dict):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case-sensitive
    try:
        with open(path) as f:
            cp.read_file(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except configparser.Error as e:
        raise ConfigError(f"malformed config {path}: {e}") from None
    if cp.defaults():
        raise ConfigError("[DEFAULT] section is not supported")
    for section in cp.sections():
        for key, raw in cp.items(section):
            _put(vals, section, key, raw)


def _parse_set(spec: str):
    head, eq, value = spec.partition("=")
    section, dot, key = head.partition(".")
    if not eq or not dot or not section or not key:
        raise ConfigError(f"--set expects section.key=value, got {spec!r}")
    return section, key, value


def load_app(config_path, sets, seed, deterministic) -> AppConfig:
    vals: dict = {name: {} for name in _SECTIONS}
    if config_path:
        _read_config_file(config_path, vals)
    for spec in sets or ():
        section, key, value = _parse_set(spec)
        _put(vals, section, key, value)
    if seed is not None:
        vals["run"]["seed"] = seed
    if deterministic:
        vals["run"]["deterministic"] = True

    def build(name, cls, **extra):
        try:
            return cls(**{**vals[name], **extra})
        except (ValueError, LayoutError) as e:
            raise ConfigError(f"[{name}] {e}") from None

    run = build("run", RunSettings)
    layout = build("layout", LayoutConfig, seed=run.seed)
    extra = {"elem_kind": "f64"} if run.deterministic else {}
    backbone = build("backbone", BackboneConfig, **extra)
    train = build("train", TrainConfig, seed=run.seed)
    sampler = build("sampler", SamplerConfig, seed=run.seed, block_size=layout.block_size)
    bench = build("bench", BenchSettings)
    paths = build("paths", PathSettings)

    root = os.environ.get(ENV_OUT)
    if root:
        for key in _OUT_KEYS:
            val = getattr(paths, key)
            if not os.path.isabs(val):
                setattr(paths, key, os.path.join(root, val))
    return AppConfig(run, layout, backbone, train, sampler, bench, paths)


# -------------------------------------------------------------- manifests --


def _utcnow() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _atomic_write_text(path: str, text: str):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".manifest-")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def resolved_config(app: AppConfig) -> dict:
    return {name: dataclasses.asdict(getattr(app, name)) for name in _SECTIONS}


def write_manifest(artifact: str, app: AppConfig, started: str):
    man = {
        "artifact": os.path.basename(artifact),
        "tool_version": __version__,
        "seed": app.run.seed,
        "config": resolved_config(app),
        "host": {
            "node": platform.node(),
            "platform": platform.platform(),
            "python": platform.python_version(),
        },
        "started": started,
        "finished": _utcnow(),
    }
    _atomic_write_text(artifact + ".manifest.json", json.dumps(man, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------- commands --


def _load_corpus(path: str):
    """One document per file; directories are walked one level, sorted."""
    if os.path.isdir(path):
        names = sorted(
            os.path.join(path, n) for n in os.listdir(path)
            if os.path.isfile(os.path.join(path, n))
        )
        if not names:
            raise RuntimeError(f"empty corpus: no files in {path}")
        docs = []
        for name in names:
            with open(name, "rb") as f:
                docs.append(f.read())
        return docs
    with open(path, "rb") as f:
        return [f.read()]


def _print_sample_stats(samples, lcfg: LayoutConfig, vocab: Vocab, truncated: int):
    B, N = lcfg.block_size, lcfg.n_blocks
    full = content = 0
    ratio_sum = 0.0
    loss_blocks = 0
    eos_masked = 0
    for s in samples:
        for b in range(N):
            sl = slice(b * B, (b + 1) * B)
            loss, msk = s.lossable[sl], s.mask[sl]
            nl = int(loss.sum())
            if nl:
                loss_blocks += 1
                ratio_sum += int(msk.sum()) / nl
            if nl == B:
                content += 1
                full += int(msk.sum()) == B
        eos_idx = int(np.flatnonzero(s.gold == vocab.eos_id)[0])
        eos_masked += bool(s.mask[eos_idx])
    print(f"samples {len(samples)}  blocks {len(samples) * N}  (B={B}, N={N})"
          f"  truncated {truncated}")
    if content:
        print(f"full-mask fraction {full / content:.4f} over {content} content blocks")
    if loss_blocks:
        print(f"mean mask ratio {ratio_sum / loss_blocks:.4f} over {loss_blocks} lossable blocks")
    print(f"eos force-masked {eos_masked}/{len(samples)}")


def cmd_prepare(app: AppConfig, corpus_arg=None, out_arg=None) -> int:
    started = _utcnow()
    corpus = corpus_arg or app.paths.corpus
    out = out_arg or app.paths.samples
    vocab = Vocab(app.backbone.vocab_size)
    docs = _load_corpus(corpus)
    samples, truncated = [], 0
    for i, data in enumerate(docs):
        packed = pack_document(vocab.encode(data), app.layout, vocab)
        truncated += packed.truncated
        samples.append(build_sample(packed, i, app.layout, vocab))
    write_samples(out, samples, app.layout, vocab)
    _print_sample_stats(samples, app.layout, vocab, truncated)
    print(f"wrote {out}")
    write_manifest(out, app, started)
    return 0


def _eval_split(samples, tcfg: TrainConfig):
    n_eval = min(256, len(samples) // 10) if tcfg.eval_every else 0
    if n_eval == 0:
        return samples, None
    return samples[:-n_eval], samples[-n_eval:]


def cmd_train(app: AppConfig, resume: bool = False) -> int:
    started = _utcnow()
    samples, B, N, vocab = read_samples(app.paths.samples)
    lcfg, tcfg = app.layout, app.train
    if B != lcfg.block_size or N != lcfg.n_blocks or vocab.size != app.backbone.vocab_size:
        raise RuntimeError(
            f"container {app.paths.samples} has B={B} N={N} V={vocab.size}, "
            f"config says B={lcfg.block_size} N={lcfg.n_blocks} V={app.backbone.vocab_size}"
        )
    train_samples, eval_samples = _eval_split(samples, tcfg)
    if not train_samples:
        raise RuntimeError("no training samples after the eval split")

    ckpt = app.paths.checkpoint
    if resume:
        if not os.path.exists(ckpt):
            raise RuntimeError(f"missing checkpoint: {ckpt}")
        bundle = load_checkpoint(ckpt)
        if bundle.model.cfg != app.backbone:
            raise RuntimeError("checkpoint model config disagrees with [backbone] config")
        model = bundle.model
        opt = restore_optimizer(bundle, model)
        gen = np.random.default_rng(app.run.seed)
        if bundle.rng_state is not None:
            gen.bit_generator.state = bundle.rng_state
        start = bundle.step
    else:
        model = init_model(app.backbone, seed=app.run.seed)
        opt = make_optimizer(model, tcfg)
        gen = np.random.default_rng(app.run.seed)
        start = 0

    with open(app.paths.loss_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss", "ce", "cap", "top1", "lr"])

        def hook(step, r):
            writer.writerow([step, repr(r.total), repr(r.ce), repr(r.cap),
                             repr(r.masked_top1_acc), repr(r.lr)])

        res = train_loop(
            model, opt, train_samples, lcfg, vocab, tcfg, gen,
            start_step=start, eval_samples=eval_samples, log=print, step_hook=hook,
        )

    next_step = start + res.steps_run + res.skipped_batches
    save_checkpoint(ckpt, model, opt, step=next_step, rng_state=gen.bit_generator.state)
    print(f"ran {res.steps_run} steps (from {start}), checkpoint {ckpt}")
    write_manifest(ckpt, app, started)
    write_manifest(app.paths.loss_csv, app, started)
    return 0


def _require_checkpoint(path: str):
    if not os.path.exists(path):
        raise RuntimeError(f"missing checkpoint: {path}")
    return load_checkpoint(path)


def cmd_generate(app: AppConfig, prompt_text=None, prompt_file=None) -> int:
    bundle = _require_checkpoint(app.paths.checkpoint)
    model = bundle.model
    vocab = Vocab(model.cfg.vocab_size)
    if prompt_file is not None:
        with open(prompt_file, "rb") as f:
            data = f.read()
    elif prompt_text is not None:
        data = prompt_text.encode("utf-8")
    else:
        data = b""
    res = generate(model, vocab, vocab.encode(data), app.sampler)
    sys.stdout.buffer.write(vocab.decode(np.asarray(res.tokens, dtype=np.int64)))
    sys.stdout.buffer.flush()
    print(
        f"blocks {res.blocks_emitted}  iterations {res.iterations_per_block}"
        f"  stopped_by {res.stopped_by}",
        file=sys.stderr,
    )
    return 0


def cmd_bench(app: AppConfig) -> int:
    started = _utcnow()
    bundle = _require_checkpoint(app.paths.checkpoint)
    model = bundle.model
    vocab = Vocab(model.cfg.vocab_size)
    b = app.bench
    try:
        task = SyntheticTask(
            kind=b.task, period=b.period, alphabet=b.alphabet, doc_len=b.doc_len,
            n_docs=b.n_docs, n_heldout=b.n_heldout, seed=app.run.seed,
        )
    except ValueError as e:
        raise ConfigError(f"[bench] {e}") from None
    prompt = make_docs(task, "heldout", n=1)[0][: task.period]
    results = [bench_ar(model, vocab, task, prompt, n_tokens=b.ar_tokens, repeats=b.repeats)]
    results += bench_diffusion_sweep(
        model, vocab, task, prompt, B=app.sampler.block_size,
        taus=b.taus, max_iters_grid=b.max_iters_grid,
        n_blocks=b.n_blocks, repeats=b.repeats,
    )
    for r in results:
        print(f"{r.mode:9s} T={r.T:<3d} tau={r.tau:<4g} tok/s={r.tok_per_s:9.1f}"
              f"  iters={r.mean_iters:<5.2f} acc={r.accuracy:.3f}")
    emit_csv(results, app.paths.bench_csv)
    print(f"wrote {app.paths.bench_csv}")
    write_manifest(app.paths.bench_csv, app, started)
    return 0


def cmd_gradcheck(app: AppConfig, n_probe: int = 6, tol: float = 1e-4) -> int:
    # tiny f64 model; the finite-difference suite is meaningless in f32
    bcfg = BackboneConfig(n_layers=2, d_model=16, vocab_size=32, elem_kind="f64")
    lcfg = LayoutConfig(block_size=4, n_blocks=4, seed=app.run.seed)
    vocab = Vocab(bcfg.vocab_size)
    gen = np.random.default_rng(app.run.seed)
    samples = []
    for i in range(8):
        toks = gen.integers(1, vocab.pad_id, size=int(gen.integers(4, 14)))
        samples.append(build_sample(pack_document(toks, lcfg, vocab), i, lcfg, vocab))
    batch = make_batch(samples, lcfg, vocab)
    if batch.rows.size == 0:
        raise RuntimeError("gradcheck drew a batch with no supervised positions")
    model = init_model(bcfg, seed=app.run.seed)
    errs = gradcheck_objective(
        model, batch, cap_weight=app.train.cap_weight, n_probe=n_probe, seed=app.run.seed
    )
    worst = max(errs.values())
    for name in sorted(errs):
        status = "ok" if errs[name] <= tol else "FAIL"
        print(f"{name:32s} {errs[name]:.3e}  {status}")
    passed = worst <= tol
    print(f"gradcheck {'PASS' if passed else 'FAIL'}  worst {worst:.3e}  tol {tol:g}")
    return 0 if passed else 2


def cmd_inspect(app: AppConfig, index: int, samples_arg=None) -> int:
    path = samples_arg or app.paths.samples
    samples, B, N, vocab = read_samples(path)
    if not 0 <= index < len(samples):
        raise RuntimeError(f"sample index {index} out of range (container holds {len(samples)})")
    print(render_sample(samples[index], LayoutConfig(block_size=B, n_blocks=N), vocab))
    return 0


# ------------------------------------------------------------------ parser --


class _Parser(argparse.ArgumentParser):
    # usage errors are exit code 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI config file")
    common.add_argument("--seed", type=int, metavar="N", help="override run.seed")
    common.add_argument("--deterministic", action="store_true",
                        help="force f64 weights for exact replay")
    common.add_argument("--set", action="append", metavar="SEC.KEY=VAL", dest="sets",
                        help="override one config key (repeatable)")

    p = _Parser(prog="triblock", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sp = sub.add_parser("prepare", parents=[common],
                        help="pack a byte corpus into a sample container")
    sp.add_argument("corpus", nargs="?", help="file or directory (default paths.corpus)")
    sp.add_argument("out", nargs="?", help="container path (default paths.samples)")

    sp = sub.add_parser("train", parents=[common],
                        help="train on a sample container, write checkpoint + loss CSV")
    sp.add_argument("--resume", action="store_true",
                    help="continue from paths.checkpoint")

    sp = sub.add_parser("generate", parents=[common],
                        help="denoise blocks from a prompt, bytes to stdout")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--prompt", help="prompt text (utf-8)")
    g.add_argument("--prompt-file", metavar="PATH", help="raw prompt bytes from a file")

    sub.add_parser("bench", parents=[common],
                   help="decode throughput sweep on a synthetic task, write CSV")

    sp = sub.add_parser("gradcheck", parents=[common],
                        help="finite-difference gradient audit on a tiny f64 model")
    sp.add_argument("--probes", type=int, default=6, metavar="N",
                    help="coordinates probed per tensor (default 6)")

    sp = sub.add_parser("inspect", parents=[common],
                        help="render one sample's block layout as text")
    sp.add_argument("index", type=int, help="0-based sample index")
    sp.add_argument("samples", nargs="?", help="container path (default paths.samples)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help exits 0, usage errors exit 1
        return int(e.code or 0)
    try:
        app = load_app(args.config, args.sets, args.seed, args.deterministic)
        if args.command == "prepare":
            return cmd_prepare(app, args.corpus, args.out)
        if args.command == "train":
            return cmd_train(app, resume=args.resume)
        if args.command == "generate":
            return cmd_generate(app, args.prompt, args.prompt_file)
        if args.command == "bench":
            return cmd_bench(app)
        if args.command == "gradcheck":
            return cmd_gradcheck(app, n_probe=args.probes)
        if args.command == "inspect":
            return cmd_inspect(app, args.index, args.samples)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (LayoutError, CheckpointError, NumericsError, OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
