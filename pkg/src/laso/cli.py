"""``laso`` command line: gen-data, train, eval, decode, bench, export-attention.

Errors are reported as one stderr line ``error: <category>: <message>`` with a
distinct exit code per category (see ``EXIT_CODES``). Log verbosity comes from
the ``LASO_LOG_LEVEL`` environment variable (default ``WARNING``).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import ArchitectureMismatch, CheckpointFormatError, load_checkpoint, load_model
from .config import RunConfig, dump_run_config, load_run_config
from .data import DataError, Vocabulary, generate_corpus, load_corpus, save_corpus
from .inference import benchmark, bench_summary, evaluate, greedy_decode, write_bench_csv, write_eval_csv
from .model import ArBaselineModel, LasoModel, LengthError, forward
from .numerics import ConfigurationError, TooShortError
from .training import TeacherCache, TrainingError, fit, pretrain_toy_teacher

log = logging.getLogger("laso")

EXIT_CODES = {
    "missing-file": 3,
    "config": 4,
    "architecture-mismatch": 5,
    "data-format": 6,
    "checkpoint-format": 7,
    "training": 8,
    "input": 9,
}


class CliError(Exception):
    def __init__(self, category: str, msg: str):
        super().__init__(msg)
        self.category = category


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("missing-file", f"{p} does not exist")
    return p


def _run_config(args) -> RunConfig:
    if args.config is not None:
        _require(args.config)
    return load_run_config(args.config, args.profile, args.override, args.seed)


def _explicit_config(args) -> RunConfig | None:
    if args.config is None and args.profile is None and not args.override:
        return None
    return _run_config(args)


def _load(path, expect_cfg: RunConfig | None, kind: str | None = None):
    path = _require(path)
    ckpt = load_checkpoint(path)
    if kind is not None and ckpt.kind != kind:
        raise ArchitectureMismatch(f"{path} holds a {ckpt.kind!r} model, expected {kind!r}")
    expect = None
    if expect_cfg is not None:
        expect = expect_cfg.laso()
        if ckpt.kind == "ar":
            expect = replace(expect, teacher_dim=0)
    return load_model(path, expect)


def _check_corpus(corpus, model) -> None:
    cfg = model.cfg
    for u in corpus:
        if u.features.shape[1] != cfg.d_feat:
            raise ArchitectureMismatch(f"utterance {u.id} has {u.features.shape[1]} feature dims, model expects {cfg.d_feat}")
        if u.tokens and max(u.tokens) >= cfg.vocab_size:
            raise ArchitectureMismatch(f"utterance {u.id} uses token ids beyond vocab size {cfg.vocab_size}")


def _out(args, default) -> Path:
    out = Path(args.out) if args.out is not None else Path(default)
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _run_config(args)
    if args.out is not None:
        out = Path(args.out)
        train_path, test_path = out / "train.bin", out / "test.bin"
    else:
        train_path, test_path = Path(cfg.paths.train_corpus), Path(cfg.paths.test_corpus)
    train_path.parent.mkdir(parents=True, exist_ok=True)
    test_path.parent.mkdir(parents=True, exist_ok=True)
    L = cfg.model.max_len
    train = generate_corpus(cfg.synthetic(cfg.data.train_utterances), L, "train", stream=0)
    test = generate_corpus(cfg.synthetic(cfg.data.test_utterances), L, "test", stream=1)
    save_corpus(train, train_path)
    save_corpus(test, test_path)
    Vocabulary.synthetic(cfg.data.vocab_size).save(train_path.parent / "vocab.txt")
    print(f"wrote {len(train)} train utterances to {train_path} and {len(test)} test utterances to {test_path}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    corpus = load_corpus(_require(args.corpus or cfg.paths.train_corpus))
    out = _out(args, cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_run_config(cfg), encoding="utf-8")
    laso_cfg = cfg.laso()
    teacher = None
    if args.model == "ar":
        laso_cfg = replace(laso_cfg, teacher_dim=0)
        model = ArBaselineModel.init(laso_cfg, seed=cfg.seed)
    else:
        model = LasoModel.init(laso_cfg, seed=cfg.seed)
        if cfg.train.lam > 0:
            log.info("pretraining toy teacher")
            teacher = TeacherCache.build(pretrain_toy_teacher(corpus, cfg.teacher_config()), corpus)
    _check_corpus(corpus, model)
    fit(corpus, model, cfg.training(), teacher=teacher, out_dir=out, run_config=cfg.to_dict())
    print(f"wrote {out / 'final.npz'} and {out / 'loss.csv'}")
    return 0


def cmd_eval(args) -> int:
    model = _load(args.checkpoint, _explicit_config(args), "laso")
    corpus = load_corpus(_require(args.corpus))
    _check_corpus(corpus, model)
    res = evaluate(corpus, model)
    if args.out is not None:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_eval_csv(res, args.out)
    print(f"cer {res.cer!r} errors {res.total_distance} ref_tokens {res.total_ref} utterances {len(res.per_utterance)}")
    return 0


def cmd_decode(args) -> int:
    model = _load(args.checkpoint, _explicit_config(args), "laso")
    corpus = load_corpus(_require(args.corpus))
    _check_corpus(corpus, model)
    vocab = Vocabulary.synthetic(model.cfg.vocab_size)
    lines = [" ".join([u.id, *vocab.decode(greedy_decode(u.features, model).tokens)]) for u in corpus]
    text = "".join(line + "\n" for line in lines)
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    return 0


def cmd_bench(args) -> int:
    laso = _load(args.laso, None, "laso")
    ar = _load(args.ar, None, "ar")
    corpus = load_corpus(_require(args.corpus))
    if args.limit is not None:
        corpus = corpus[: args.limit]
    _check_corpus(corpus, laso)
    _check_corpus(corpus, ar)
    res = benchmark(corpus, laso, ar, beam=args.beam, repeats=args.repeats)
    out = _out(args, "bench.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bench_csv(res, out)
    print(bench_summary(res))
    return 0


def write_pgm(matrix: np.ndarray, path) -> None:
    """8-bit binary PGM, each matrix scaled so its largest entry is white."""
    top = float(matrix.max())
    scaled = matrix / top if top > 0 else matrix
    pixels = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)
    rows, cols = pixels.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes())


def cmd_export_attention(args) -> int:
    model = _load(args.checkpoint, _explicit_config(args), "laso")
    corpus = load_corpus(_require(args.corpus))
    match = [u for u in corpus if u.id == args.utterance]
    if not match:
        raise CliError("input", f"utterance {args.utterance!r} not in {args.corpus}")
    _check_corpus(match, model)
    _, diag = forward(match[0].features, model, diagnostics=True)
    out = _out(args, f"attention_{args.utterance}")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["module", "layer", "head", "rows", "cols", "csv", "pgm"])
        for (module, layer, head), scores in diag.items():
            stem = f"{module}_l{layer}_h{head}"
            np.savetxt(out / f"{stem}.csv", scores, delimiter=",", fmt="%.17g")
            write_pgm(scores, out / f"{stem}.pgm")
            w.writerow([module, layer, head, scores.shape[0], scores.shape[1], f"{stem}.csv", f"{stem}.pgm"])
    print(f"wrote {len(diag)} attention matrices to {out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--profile", help="preset: tiny, small or paper-shape")
    common.add_argument("--seed", type=int)
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="e.g. train.epochs=3 (repeatable)")
    common.add_argument("--out", help="output path")

    parser = argparse.ArgumentParser(prog="laso", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic train/test corpora")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model, writing per-epoch checkpoints")
    p.add_argument("--corpus", help="training corpus (default: paths.train_corpus)")
    p.add_argument("--model", choices=("laso", "ar"), default="laso")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="character error rate of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decode", parents=[common], help="write one hypothesis line per utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", parents=[common], help="NAR vs AR beam-search latency")
    p.add_argument("--laso", required=True)
    p.add_argument("--ar", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--limit", type=int, help="only the first N utterances")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-attention", parents=[common], help="attention matrices of one utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--utterance", required=True)
    p.set_defaults(func=cmd_export_attention)
    return parser


def _category(exc: BaseException) -> str | None:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, FileNotFoundError):
        return "missing-file"
    if isinstance(exc, ArchitectureMismatch):
        return "architecture-mismatch"
    if isinstance(exc, CheckpointFormatError):
        return "checkpoint-format"
    if isinstance(exc, ConfigurationError):
        return "config"
    if isinstance(exc, DataError):
        return "data-format"
    if isinstance(exc, TrainingError):
        return "training"
    if isinstance(exc, (TooShortError, LengthError)):
        return "input"
    return None


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LASO_LOG_LEVEL", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        category = _category(exc)
        if category is None:
            raise
        msg = " ".join(str(exc).split())
        print(f"error: {category}: {msg}", file=sys.stderr)
        return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
