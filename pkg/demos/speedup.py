"""One decoder pass against token-by-token beam search.

    python demos/speedup.py

Both models are untrained; the point is the cost law, not accuracy. The AR
decoder is made to never emit <eos>, so every utterance runs the full L - 1
steps, which is its worst case.
"""

from laso.config import load_run_config
from laso.data import EOS, generate_corpus
from laso.inference import bench_summary, benchmark
from laso.model import ArBaselineModel, LasoModel

rc = load_run_config(profile="small")
cfg = rc.laso()
test = generate_corpus(rc.synthetic(5), cfg.max_len, "test", stream=1)

laso = LasoModel.init(cfg)
for beam in (1, 4):
    ar = ArBaselineModel.init(cfg)
    ar.out_b.data[EOS] = -1e3
    res = benchmark(test, laso, ar, beam=beam, repeats=1)
    print(f"beam {beam}: {bench_summary(res)}")
    print(f"  decoder passes: nar {res.nar_decoder_passes}, ar {res.ar_decoder_passes}")
