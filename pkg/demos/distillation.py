"""Distilling a toy bidirectional teacher into the LASO decoder.

    python demos/distillation.py

Pretrains the masked-token teacher on transcripts, then trains LASO with
lambda = 0.005 and reports how far its projected decoder states moved toward
the teacher's on held-out transcripts.
"""

from laso.config import load_run_config
from laso.data import batchify, generate_corpus
from laso.model import LasoModel
from laso.training import TeacherCache, TrainConfig, fit, masked_accuracy, pretrain_toy_teacher
from laso.training.losses import distill_mse

rc = load_run_config(profile="tiny", overrides=["train.lam=0.005"])
cfg = rc.laso()
train = generate_corpus(rc.synthetic(1000), cfg.max_len, "train", stream=0)
valid = generate_corpus(rc.synthetic(100), cfg.max_len, "valid", stream=2)

teacher = pretrain_toy_teacher(train, rc.teacher_config())
print(f"teacher masked-token accuracy {masked_accuracy(teacher, valid):.3f} (chance {1 / cfg.vocab_size:.3f})")
cache = TeacherCache.build(teacher, train + valid)


def mse(model):
    batch = batchify(valid, cfg.max_len, with_sos=True)
    _, hidden = model.run((batch.features, batch.lengths))
    return distill_mse(hidden, cache.batch(batch.ids), batch.valid_lens, model.teacher_proj).item()


model = LasoModel.init(cfg, seed=rc.seed)
before = mse(model)
fit(train, model, TrainConfig(epochs=8, warmup_steps=rc.train.warmup_steps, lam=0.005, avg_last_k=1), teacher=cache)
print(f"validation MSE {before:.4f} -> {mse(model):.4f}")
