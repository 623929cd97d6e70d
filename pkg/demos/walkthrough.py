"""Train a small LASO model on the synthetic corpus and look at what it learned.

    python demos/walkthrough.py [epochs]

Takes a few minutes on one core with the default 15 epochs. Prints test CER,
a handful of decoded utterances, and where the first PDS head looks.
"""

import sys

import numpy as np

from laso.config import load_run_config
from laso.data import Vocabulary, generate_corpus
from laso.inference import evaluate, greedy_decode
from laso.model import LasoModel, forward
from laso.training import fit

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 15

rc = load_run_config(profile="tiny", overrides=[f"train.epochs={epochs}", "data.train_utterances=1000"])
cfg = rc.laso()
train = generate_corpus(rc.synthetic(rc.data.train_utterances), cfg.max_len, "train", stream=0)
test = generate_corpus(rc.synthetic(rc.data.test_utterances), cfg.max_len, "test", stream=1)
print(f"{len(train)} training utterances, {sum(u.n_frames for u in train)} frames")

model = LasoModel.init(cfg, seed=rc.seed)
result = fit(train, model, rc.training())
print(f"final epoch nll {result.trace[-1]['nll']:.3f}")
print(f"test CER {evaluate(test, model).cer:.3%}")

vocab = Vocabulary.synthetic(cfg.vocab_size)
for u in test[:5]:
    hyp = greedy_decode(u.features, model)
    print(f"{u.id}  ref: {' '.join(vocab.decode(u.tokens))}")
    print(f"{' ' * len(u.id)}  hyp: {' '.join(vocab.decode(hyp.tokens))}")

# Each token slot of the summarizer should attend to the frames of "its" token,
# so the argmax frame should move forward with the slot index.
u = test[0]
_, diag = forward(u.features, model, diagnostics=True)
scores = diag[("pds", 0, 0)]
peaks = scores[: len(u.tokens)].argmax(axis=1)
print(f"PDS head 0 peak frame per token slot: {peaks.tolist()}")
print(f"monotone: {bool(np.all(np.diff(peaks) >= 0))}")
