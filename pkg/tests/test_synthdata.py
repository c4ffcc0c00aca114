import numpy as np
import pytest

from regionprompt import geometry, synthdata
from regionprompt.encoder import build_encoder, encode_class_set
from regionprompt.errors import ConfigError, DataError
from regionprompt.prompt import PromptContext

from oracles import box_iou, brute_partition


@pytest.fixture(scope="module")
def world():
    return synthdata.gen_world(seed=3)


def test_class_counts(world):
    w, table = world
    assert len(table) == 30
    assert len(table.base_ids) == 20 and len(table.novel_ids) == 10
    assert not set(table.base_ids) & set(table.novel_ids)


def test_same_seed_same_world():
    a, ta = synthdata.gen_world(seed=4)
    b, tb = synthdata.gen_world(seed=4)
    assert np.array_equal(a.directions, b.directions) and np.array_equal(ta.vectors, tb.vectors)
    assert ta.splits == tb.splits


def test_unit_tokens_and_directions(world):
    w, table = world
    np.testing.assert_allclose(np.linalg.norm(table.vectors, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(w.directions, axis=1), 1.0, atol=1e-12)


def test_context_bridge_is_realizable(world):
    w, table = world
    enc = build_encoder(0, 32, 32, 17)
    out = encode_class_set(enc, PromptContext(w.hidden_context), table, "end")
    assert np.array_equal(out, w.directions)


def test_linear_bridge():
    w, table = synthdata.gen_world(seed=3, bridge="linear")
    want = table.vectors @ w.bridge.T
    want /= np.linalg.norm(want, axis=1, keepdims=True)
    np.testing.assert_allclose(w.directions, want, atol=1e-15)
    assert w.hidden_context is None


@pytest.mark.parametrize("kw", [{"n_base": 1}, {"rho": 1.0}, {"sigma0": -0.1}, {"bridge": "cubic"}])
def test_bad_world(kw):
    with pytest.raises(ConfigError):
        synthdata.gen_world(**kw)


def test_zero_slope_noise_flat():
    w, _ = synthdata.gen_world(slope=0.0)
    assert {w.noise_scale(q) for q in (0.5, 0.7, 1.0)} == {w.sigma0}


def _mean_cos(w, cid, q, n=1000):
    recs = synthdata.gen_positives(w, cid, n, [q], seed=1)
    u = w.direction(cid)
    return np.mean([r.embedding @ u for r in recs[:n]])


def test_cleaner_at_high_iou(world):
    w, table = world
    assert _mean_cos(w, table.ids[0], 1.0) > _mean_cos(w, table.ids[0], 0.5)


def test_monotone_over_levels(world):
    w, table = world
    means = [_mean_cos(w, table.ids[1], q) for q in synthdata.DEFAULT_LEVELS]
    assert all(a < b for a, b in zip(means, means[1:]))


def test_noiseless_limit():
    w, table = synthdata.gen_world(sigma0=0.0)
    for r in synthdata.gen_positives(w, table.ids[2], 12):
        assert np.array_equal(r.embedding, w.direction(table.ids[2]))


def test_constructed_iou(world):
    w, table = world
    recs = synthdata.gen_positives(w, table.ids[0], 20, [0.75, 1.0], seed=2)
    gts = {r.image_id: r for r in recs if r.kind == geometry.GROUND_TRUTH}
    props = [r for r in recs if r.kind == geometry.REGION_PROPOSAL]
    assert props
    for p in props:
        assert abs(box_iou(p.box.as_tuple(), gts[p.image_id].box.as_tuple()) - 0.75) < 1e-6


def test_positive_levels_validated(world):
    w, table = world
    with pytest.raises(ConfigError):
        synthdata.gen_positives(w, table.ids[0], 3, [0.4])


def test_negatives(world):
    w, table = world
    pos = synthdata.gen_positives(w, table.ids[0], 30, seed=0)
    anchors = [r for r in pos if r.kind == geometry.GROUND_TRUTH]
    negs = synthdata.gen_negatives(w, 200, seed=0, anchors=anchors)
    assert len(negs) == 200
    assert np.max(np.vstack([n.embedding for n in negs]) @ w.directions.T) < w.rho
    oracle = brute_partition(
        [{"id": n.id, "image_id": n.image_id, "box": n.box.as_tuple()} for n in negs],
        [{"id": g.id, "image_id": g.image_id, "box": g.box.as_tuple(), "label": g.label}
         for g in pos if g.kind == geometry.GROUND_TRUTH],
        0.5,
    )
    assert all(not is_pos and v < 0.5 for is_pos, v, _ in oracle.values())
    assert synthdata.gen_negatives(w, 0) == []


def test_rejection_budget(world):
    w, _ = world
    # with directions +-e_i every unit vector has max cosine >= 1/sqrt(32) > 0.1
    dirs = np.vstack([np.eye(32), -np.eye(32)])
    tight = synthdata.PlantedWorld(w.bridge, dirs, tuple(f"d{i}" for i in range(64)), rho=0.1)
    with pytest.raises(DataError, match="rho"):
        synthdata.gen_negatives(tight, 5, max_attempts=2000)


def test_benchmark_regenerates_byte_identical(tmp_path):
    for name in ("a", "b"):
        _, _, recs = synthdata.gen_benchmark(n_base=4, n_novel=2, per_class=8, n_neg=30, seed=9)
        geometry.write_proposals(tmp_path / f"{name}.jsonl", recs)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    back = geometry.read_proposals(tmp_path / "a.jsonl")
    assert back == recs
    assert all(np.array_equal(a.embedding, b.embedding) for a, b in zip(recs, back))


def test_default_benchmark_shape():
    _, table, recs = synthdata.gen_benchmark()
    props, gts = geometry.split_kinds(recs)
    part = geometry.partition(props, gts, 0.5)
    assert len(part.negatives) == 1000
    assert len(part.positives) == 30 * 50
    levels = sorted({round(p.max_iou, 6) for p in part.positives})
    assert levels == [0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
