"""Fit one prompt context per IoU group and compare against an untrained one."""

import time

from regionprompt import harness, synthdata, trainer

_, table, records = synthdata.gen_benchmark(seed=0)
cfg = trainer.TrainConfig()
enc = trainer.make_encoder(cfg)

base = harness.evaluate(records, harness.untrained_context(cfg), enc, table, cfg)
print("untrained  novel top-1 %.3f   base top-1 %.3f" % (base.top1["novel"], base.top1["base"]))

t0 = time.perf_counter()
result = trainer.train_all(records, cfg, enc, table)
print("trained %d groups in %.1fs" % (len(result.groups), time.perf_counter() - t0))
for g in result.groups:
    print("  loss %.3f -> %.3f" % (g.initial_loss, g.final_loss))

rep = harness.evaluate(records, result, enc, table)
print("trained    novel top-1 %.3f   base top-1 %.3f" % (rep.top1["novel"], rep.top1["base"]))
print("mean max-prob on background proposals: %.3f" % rep.neg_max_prob)
