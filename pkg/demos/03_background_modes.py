"""How the three background treatments shape scores on negative regions.

A flatter score vector on background proposals (lower max-prob, higher
entropy) is what lets a downstream detector drop them.
"""

from regionprompt import harness, synthdata, trainer

_, table, records = synthdata.gen_benchmark(seed=1)
cfg = trainer.TrainConfig()
enc = trainer.make_encoder(cfg)

print("mode           novel-top1  neg-maxprob  neg-entropy")
for mode in ("no_bg", "soft_bg", "learnable_bg"):
    res = trainer.train_all(records, cfg.replace(bg_mode=mode), enc, table)
    rep = harness.evaluate(records, res, enc, table)
    print(f"{mode:14s} {rep.top1['novel']:10.3f}  {rep.neg_max_prob:11.3f}  {rep.neg_entropy:11.3f}")
