import csv

import numpy as np
import pytest

from laso.checkpoint import load_model
from laso.cli import EXIT_CODES, main
from laso.data import generate_corpus, load_corpus, save_corpus
from laso.model import forward

SMALL = [
    "model.d_model=16", "model.n_heads=2", "model.d_inner=32", "model.n_enc=1", "model.n_dec=1",
    "model.max_len=10", "data.vocab_size=12", "data.d_feat=8", "data.max_tokens=6",
    "data.train_utterances=40", "data.test_utterances=6", "train.epochs=2", "train.avg_last_k=2",
    "train.warmup_steps=10",
]
FLAGS = [f"--override={o}" for o in SMALL]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", *FLAGS, "--out", str(root / "data")]) == 0
    assert main(["train", *FLAGS, "--corpus", str(root / "data/train.bin"), "--out", str(root / "laso")]) == 0
    assert main(["train", *FLAGS, "--model", "ar", "--corpus", str(root / "data/train.bin"),
                 "--out", str(root / "ar")]) == 0
    return root


def test_gen_data_outputs(run):
    assert (run / "data/vocab.txt").read_text().splitlines()[:3] == ["<eos>", "<sos>", "<unk>"]
    assert len(load_corpus(run / "data/train.bin")) == 40
    assert len(load_corpus(run / "data/test.bin")) == 6


def test_train_outputs(run):
    names = {p.name for p in (run / "laso").iterdir()}
    assert {"config.yaml", "loss.csv", "final.npz", "epoch001.npz", "epoch002.npz"} <= names
    with open(run / "laso/loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(np.isfinite(float(r["nll"])) for r in rows)


def test_eval_prints_cer_and_writes_csv(run, capsys):
    out = run / "eval.csv"
    code = main(["eval", "--checkpoint", str(run / "laso/final.npz"), "--corpus", str(run / "data/test.bin"),
                 "--out", str(out)])
    assert code == 0
    printed = float(capsys.readouterr().out.split()[1])
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert printed == sum(int(r["distance"]) for r in rows) / sum(int(r["ref_len"]) for r in rows)


def test_decode_one_line_per_utterance(run, capsys):
    assert main(["decode", "--checkpoint", str(run / "laso/final.npz"), "--corpus", str(run / "data/test.bin")]) == 0
    lines = capsys.readouterr().out.splitlines()
    ids = [u.id for u in load_corpus(run / "data/test.bin")]
    assert [line.split()[0] for line in lines] == ids


def test_decode_is_idempotent(run):
    outs = []
    for name in ("a.txt", "b.txt"):
        args = ["decode", "--checkpoint", str(run / "laso/final.npz"), "--corpus", str(run / "data/test.bin")]
        assert main([*args, "--out", str(run / name)]) == 0
        outs.append((run / name).read_bytes())
    assert outs[0] == outs[1]


def test_checkpoint_round_trip_is_bit_identical(run):
    a = load_model(run / "laso/final.npz")
    b = load_model(run / "laso/final.npz")
    u = load_corpus(run / "data/test.bin")[0]
    assert np.array_equal(forward(u.features, a)[0], forward(u.features, b)[0])


def test_export_attention(run):
    out = run / "attn"
    uid = load_corpus(run / "data/test.bin")[0].id
    args = ["export-attention", "--checkpoint", str(run / "laso/final.npz"), "--corpus", str(run / "data/test.bin"),
            "--utterance", uid, "--out", str(out)]
    assert main(args) == 0
    with open(out / "index.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * (1 + 1 + 1)  # H * (N_e + N_s + N_d)
    for r in rows:
        m = np.loadtxt(out / r["csv"], delimiter=",", ndmin=2)
        assert m.shape == (int(r["rows"]), int(r["cols"]))
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-9)
        head = (out / r["pgm"]).read_bytes()
        assert head.startswith(f"P5\n{r['cols']} {r['rows']}\n255\n".encode())


def test_bench_summary_matches_csv(run, capsys):
    out = run / "bench.csv"
    args = ["bench", "--laso", str(run / "laso/final.npz"), "--ar", str(run / "ar/final.npz"),
            "--corpus", str(run / "data/test.bin"), "--beam", "2", "--repeats", "1", "--out", str(out)]
    assert main(args) == 0
    summary = capsys.readouterr().out
    with open(out) as fh:
        rows = {r["system"]: r for r in csv.DictReader(fh)}
    apt = {k: float(r["total_processing_seconds"]) / int(r["n_utterances"]) for k, r in rows.items()}
    assert float(summary.split("speedup_apt ")[1].split()[0]) == apt["ar"] / apt["nar"]
    assert int(rows["nar"]["decoder_passes"]) == 6


# -- errors --------------------------------------------------------------------


def error_of(capsys, argv):
    code = main(argv)
    err = capsys.readouterr().err.strip()
    return code, err


def test_missing_file(capsys, tmp_path):
    code, err = error_of(capsys, ["eval", "--checkpoint", str(tmp_path / "nope.npz"), "--corpus", "x.bin"])
    assert code == EXIT_CODES["missing-file"] and err.startswith("error: missing-file:")


def test_unknown_config_key(capsys, tmp_path):
    code, err = error_of(capsys, ["gen-data", "--override", "model.depth=3", "--out", str(tmp_path)])
    assert code == EXIT_CODES["config"] and "model.depth" in err


def test_bad_profile(capsys, tmp_path):
    code, _ = error_of(capsys, ["gen-data", "--profile", "huge", "--out", str(tmp_path)])
    assert code == EXIT_CODES["config"]


def test_architecture_mismatch(run, capsys):
    args = ["eval", "--checkpoint", str(run / "laso/final.npz"), "--corpus", str(run / "data/test.bin"),
            *FLAGS, "--override", "model.d_model=32"]
    code, err = error_of(capsys, args)
    assert code == EXIT_CODES["architecture-mismatch"]


def test_wrong_model_kind(run, capsys):
    args = ["eval", "--checkpoint", str(run / "ar/final.npz"), "--corpus", str(run / "data/test.bin")]
    assert error_of(capsys, args)[0] == EXIT_CODES["architecture-mismatch"]


def test_corpus_feature_mismatch(run, capsys, tmp_path):
    from laso.data import SyntheticSpec

    save_corpus(generate_corpus(SyntheticSpec(vocab_size=12, d_feat=5, n_utterances=2, length_range=(2, 4)), 10),
                tmp_path / "c.bin")
    args = ["eval", "--checkpoint", str(run / "laso/final.npz"), "--corpus", str(tmp_path / "c.bin")]
    assert error_of(capsys, args)[0] == EXIT_CODES["architecture-mismatch"]


def test_corrupt_corpus(run, capsys, tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"nonsense")
    args = ["eval", "--checkpoint", str(run / "laso/final.npz"), "--corpus", str(tmp_path / "bad.bin")]
    assert error_of(capsys, args)[0] == EXIT_CODES["data-format"]


def test_corrupt_checkpoint(run, capsys, tmp_path):
    (tmp_path / "bad.npz").write_bytes(b"nonsense")
    args = ["eval", "--checkpoint", str(tmp_path / "bad.npz"), "--corpus", str(run / "data/test.bin")]
    assert error_of(capsys, args)[0] == EXIT_CODES["checkpoint-format"]


def test_unknown_utterance(run, capsys):
    args = ["export-attention", "--checkpoint", str(run / "laso/final.npz"), "--corpus", str(run / "data/test.bin"),
            "--utterance", "nope"]
    assert error_of(capsys, args)[0] == EXIT_CODES["input"]


def test_exit_codes_distinct():
    codes = list(EXIT_CODES.values())
    assert len(set(codes)) == len(codes) and 0 not in codes and 2 not in codes


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--model", "rnn"])
    assert exc.value.code == 2
