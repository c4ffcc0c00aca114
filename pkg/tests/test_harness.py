import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from regionprompt import harness, synthdata, trainer
from regionprompt.encoder import read_class_embeddings
from regionprompt.errors import ConfigError, DataError
from regionprompt.losses import class_probs
from regionprompt.prompt import PromptContext

from oracles import cosine


class TestClassify:
    def test_self_match(self):
        emb = np.random.default_rng(0).normal(size=(5, 8))
        assert harness.classify_topk(emb[3], emb, list("abcde"), 1) == ["d"]

    def test_tie_breaks_by_id(self):
        emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        assert harness.classify_topk([1.0, 0.0], emb, ["z", "b", "a"], 3) == ["b", "z", "a"]

    def test_ranking_matches_probabilities(self):
        rng = np.random.default_rng(1)
        ids = [f"c{i:02d}" for i in range(12)]
        for _ in range(100):
            f, emb = rng.normal(size=16), rng.normal(size=(12, 16))
            p = class_probs(f, emb, 0.5)
            by_prob = [ids[i] for i in sorted(range(12), key=lambda i: (-p[i], ids[i]))]
            by_cos = [ids[i] for i in sorted(range(12), key=lambda i: (-cosine(f, emb[i]), ids[i]))]
            assert harness.classify_topk(f, emb, ids, 12) == by_cos == by_prob

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            harness.classify_topk([1.0], [[1.0]], ["a"], 2)

    def test_zero_region(self):
        with pytest.raises(DataError):
            harness.classify_topk([0.0, 0.0], np.eye(2), ["a", "b"], 1)


@pytest.fixture(scope="module")
def noiseless():
    return synthdata.gen_benchmark(sigma0=0.0, per_class=12, n_neg=100)


class TestEvaluate:
    def test_oracle_context_is_perfect(self, noiseless):
        world, table, records = noiseless
        cfg = trainer.TrainConfig()
        rep = harness.evaluate(records, PromptContext(world.hidden_context), trainer.make_encoder(cfg), table, cfg)
        assert rep.top1 == {"base": 1.0, "novel": 1.0}
        assert rep.top5 == {"base": 1.0, "novel": 1.0}

    def test_untrained_context_near_chance_on_linear_world(self):
        _, table, records = synthdata.gen_benchmark(bridge="linear")
        cfg = trainer.TrainConfig()
        rep = harness.evaluate(records, harness.untrained_context(cfg), trainer.make_encoder(cfg), table, cfg)
        n, p = rep.counts["novel"], 1 / 30
        assert abs(rep.top1["novel"] - p) <= 3 * math.sqrt(p * (1 - p) / n)

    def test_report_contents(self, noiseless):
        _, table, records = noiseless
        cfg = trainer.TrainConfig(epochs=1)
        enc = trainer.make_encoder(cfg)
        res = trainer.train_all(records, cfg, enc, table)
        rep = harness.evaluate(records, res, enc, table)
        assert rep.config_hash == cfg.hash_hex() and rep.seeds == (0, 0, 0)
        for s in ("base", "novel"):
            assert 0.0 <= rep.top1[s] <= rep.top5[s] <= 1.0
        assert rep.n_negatives == 100 and 0 < rep.neg_max_prob <= 1
        assert set(rep.per_class) == set(table.ids)
        lines = rep.lines()
        assert all(len(line.split("\t")) == 3 for line in lines)
        assert f"config_hash\tall\t{cfg.hash_hex()}" in lines
        assert harness.evaluate(records, res, enc, table).text() == rep.text()

    def test_missing_embedding(self, noiseless):
        _, table, records = noiseless
        from dataclasses import replace
        broken = [replace(records[0], embedding=None)] + records[1:]
        with pytest.raises(DataError):
            harness.evaluate_embeddings(broken, table.ids, table.splits, np.eye(30, 32))

    def test_rejects_unknown_model(self, noiseless):
        _, table, records = noiseless
        with pytest.raises(ConfigError):
            harness.evaluate(records, "ctx", None, table)


probs = arrays(np.float64, 6, elements=st.floats(1e-6, 1.0)).map(lambda a: a / a.sum())


class TestFusion:
    def test_raw_geometric_mean(self):
        assert abs(math.sqrt(0.9 * 0.4) - 0.6) <= 1e-12
        out = harness.fuse_scores([0.9, 0.1], [0.4, 0.6])
        raw = np.array([0.6, math.sqrt(0.06)])
        np.testing.assert_allclose(out, raw / raw.sum(), atol=1e-15)

    @given(probs)
    def test_idempotent(self, p):
        np.testing.assert_allclose(harness.fuse_scores(p, p), p, rtol=1e-12, atol=1e-15)

    @given(probs, probs)
    def test_valid_score_vector(self, a, b):
        out = harness.fuse_scores(a, b)
        assert abs(out.sum() - 1.0) <= 1e-12 and np.all(out > 0)
        if np.argmax(a) == np.argmax(b):
            assert np.argmax(out) == np.argmax(a)

    @given(probs)
    def test_uniform_partner_keeps_ranking(self, p):
        # sqrt is monotone, so order survives; gaps of an ulp may round into ties
        out = harness.fuse_scores(p, np.full(6, 1 / 6))
        for i in range(6):
            for j in range(6):
                if p[i] > p[j]:
                    assert out[i] >= out[j]
                if p[i] > p[j] * (1 + 1e-9):
                    assert out[i] > out[j]

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            harness.fuse_scores([0.5, 0.5], [1.0])


class TestExport:
    def test_round_trip_and_closure(self, noiseless, tmp_path):
        world, table, records = noiseless
        cfg = trainer.TrainConfig()
        enc = trainer.make_encoder(cfg)
        ctx = PromptContext(world.hidden_context)
        emb = harness.export_embeddings(ctx, enc, table, table.novel_ids, tmp_path / "novel.txt")
        ids, splits, back = read_class_embeddings(tmp_path / "novel.txt")
        assert len(ids) == 10 and set(splits) == {"novel"}
        assert np.array_equal(back, emb)
        harness.export_embeddings(ctx, enc, table, None, tmp_path / "all.txt")
        ids, splits, full = read_class_embeddings(tmp_path / "all.txt")
        via_file = harness.evaluate_embeddings(records, ids, splits, full)
        direct = harness.evaluate(records, ctx, enc, table, cfg)
        assert via_file.top1 == direct.top1 and via_file.neg_max_prob == direct.neg_max_prob


class TestAblation:
    def test_matrix(self):
        cells = harness.ablation_matrix(["4", "5", "7", "8"])
        assert len(cells) == 14
        assert [c[2]["neg_fraction"] for c in cells if c[0] == "4"] == [0.1, 0.3, 0.5, 1.0]
        assert [c[2]["context_length"] for c in cells if c[0] == "7"] == [4, 8, 16]
        assert [c[2]["token_position"] for c in cells if c[0] == "8"] == ["front", "middle", "end"]
        with pytest.raises(ConfigError):
            harness.ablation_matrix(["9"])

    def test_runs_every_cell(self, noiseless):
        _, table, records = noiseless
        cfg = trainer.TrainConfig(epochs=1)
        rows = harness.ablate(records, table, trainer.make_encoder(cfg), cfg, ["3", "6", "8"])
        assert [r.table for r in rows] == ["3"] * 3 + ["6"] * 3 + ["8"] * 3
        assert harness.position_separation(rows) > 1e-8
        assert all(len(r.line().split("\t")) == 6 for r in rows)
