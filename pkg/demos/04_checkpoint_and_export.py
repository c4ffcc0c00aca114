"""Save a run, reload it, and export class embeddings for an outside detector."""

import tempfile
from pathlib import Path

import numpy as np

from regionprompt import harness, synthdata, trainer
from regionprompt.encoder import read_class_embeddings

_, table, records = synthdata.gen_benchmark(seed=0, per_class=12, n_neg=100)
cfg = trainer.TrainConfig(epochs=2)
enc = trainer.make_encoder(cfg)
res = trainer.train_all(records, cfg, enc, table)

with tempfile.TemporaryDirectory() as tmp:
    ck = Path(tmp) / "run.ckpt"
    trainer.save_run(ck, res)
    print("checkpoint bytes:", ck.stat().st_size)
    back = trainer.load_run(ck, table)
    print("ensemble context identical after reload:", np.array_equal(back.context.vectors, res.context.vectors))

    out = Path(tmp) / "novel.txt"
    harness.export_embeddings(res.context, enc, table, table.novel_ids, out)
    ids, splits, emb = read_class_embeddings(out)
    print(len(ids), "novel embeddings, shape", emb.shape, "norms", np.round(np.linalg.norm(emb, axis=1)[:3], 6))
