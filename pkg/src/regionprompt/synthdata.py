"""Planted-model generator for region embeddings.

Each class token ``w_c`` is sent through a hidden map to a target direction
``u_c``. Positive regions are noisy copies of ``u_c`` whose noise grows as
their IoU with the ground truth drops; background regions are random unit
vectors kept away from every target direction.

Two hidden maps are available. The default (``bridge="context"``) plants a
secret context ``V*`` and sets ``u_c = T([V*, w_c])`` with the frozen text
encoder ``T``, so some context reproduces every target exactly and a context
fitted on base classes can carry over to novel ones. ``bridge="linear"``
uses ``u_c = normalize(M w_c)`` for a random matrix ``M``; no prompt context
realizes such a map through the encoder, which makes it a useful
chance-level control.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .encoder import FrozenTextEncoder, build_encoder, encode_class_set
from .errors import ConfigError, DataError
from .geometry import GROUND_TRUTH, REGION_PROPOSAL, Box, ProposalRecord
from .prompt import ClassTokenTable, PromptContext, TokenPosition

DEFAULT_LEVELS = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
BRIDGES = ("context", "linear")


@dataclass(frozen=True)
class PlantedWorld:
    bridge: np.ndarray          # (D_e, D_w) random matrix, used by the linear bridge
    directions: np.ndarray      # (C, D_e) unit targets, table order
    class_ids: tuple
    sigma0: float = 0.1
    slope: float = 2.0
    rho: float = 0.2
    seed: int = 0
    kind: str = "context"
    hidden_context: Optional[np.ndarray] = None   # (L*, D_w) for the context bridge

    def noise_scale(self, q: float) -> float:
        return self.sigma0 * (1.0 + self.slope * (1.0 - q))

    def direction(self, class_id: str) -> np.ndarray:
        return self.directions[self.class_ids.index(class_id)]


def gen_world(n_base=20, n_novel=10, d_w=32, d_e=32, seed=0, sigma0=0.1, slope=2.0, rho=0.2,
              bridge="context", encoder: Optional[FrozenTextEncoder] = None,
              planted_length=8, planted_scale=0.6):
    """Returns ``(PlantedWorld, ClassTokenTable)``; class ids are ``c000``, ``c001``, ...

    With the context bridge the hidden context has ``planted_length`` rows of
    i.i.d. ``N(0, planted_scale^2 / D_w)`` entries and the class token sits at
    the end. ``encoder`` defaults to ``build_encoder(0, d_w, d_e)``, the
    encoder a default training config rebuilds.
    """
    if n_base < 2 or n_novel < 0:
        raise ConfigError("need at least two base classes")
    if not 0 < rho < 1:
        raise ConfigError("rho must lie in (0, 1)")
    if sigma0 < 0 or slope < 0:
        raise ConfigError("sigma0 and slope must be non-negative")
    if bridge not in BRIDGES:
        raise ConfigError(f"unknown bridge {bridge!r}; expected one of {BRIDGES}")
    rng = np.random.default_rng([seed, 0xB0])
    n = n_base + n_novel
    tokens = rng.normal(size=(n, d_w))
    tokens /= np.linalg.norm(tokens, axis=1, keepdims=True)
    matrix = rng.normal(0.0, 1.0 / np.sqrt(d_w), (d_e, d_w))
    novel = set(rng.permutation(n)[:n_novel].tolist())
    splits = ["novel" if i in novel else "base" for i in range(n)]
    ids = tuple(f"c{i:03d}" for i in range(n))
    table = ClassTokenTable(ids, tokens, splits)
    hidden = None
    if bridge == "linear":
        dirs = tokens @ matrix.T
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    else:
        if encoder is None:
            encoder = build_encoder(0, d_w, d_e, max(17, planted_length + 1))
        if (encoder.d_w, encoder.d_e) != (d_w, d_e):
            raise ConfigError("encoder dimensions do not match the world")
        if planted_length + 1 > encoder.max_len:
            raise ConfigError("planted context does not fit the encoder's max_len")
        hidden = np.random.default_rng([seed, 9]).normal(
            0.0, planted_scale / np.sqrt(d_w), (planted_length, d_w))
        dirs = encode_class_set(encoder, PromptContext(hidden), table, TokenPosition.END)
        hidden.setflags(write=False)
    for a in (tokens, matrix, dirs):
        a.setflags(write=False)
    world = PlantedWorld(matrix, dirs, ids, float(sigma0), float(slope), float(rho), int(seed),
                         bridge, hidden)
    return world, table


def slide_offset(width: float, q: float) -> float:
    """Shift along x that gives two equal ``width`` boxes an IoU of ``q``."""
    return width * (1.0 - q) / (1.0 + q)


def _random_box(rng) -> Box:
    x1, y1 = rng.uniform(0, 400, 2)
    w, h = rng.uniform(40, 200, 2)
    return Box(float(x1), float(y1), float(x1 + w), float(y1 + h))


def _slid(gt: Box, q: float, sign: float) -> Box:
    # nudged up so the realized IoU never rounds below a band edge
    q = min(q + 1e-9, 1.0)
    d = sign * slide_offset(gt.x2 - gt.x1, q)
    return Box(gt.x1 + d, gt.y1, gt.x2 + d, gt.y2)


def _noisy(world: PlantedWorld, u: np.ndarray, q: float, rng) -> np.ndarray:
    eps = rng.standard_normal(u.shape[0])
    scale = world.noise_scale(q)
    if scale == 0.0:
        return u.copy()
    f = u + scale * eps
    return f / np.linalg.norm(f)


def gen_positives(world: PlantedWorld, class_id: str, n: int, iou_levels=DEFAULT_LEVELS, seed=0,
                  split: str = "base", prefix: str | None = None):
    """``n`` positive regions of one class, cycling through ``iou_levels``.

    Level-1.0 items are ground truths, one per image; every other item is a
    region proposal slid sideways from one of those ground truths so that
    its IoU equals the level. If no level equals 1.0 a single anchor ground
    truth is emitted in addition to the ``n`` items.
    """
    levels = [float(q) for q in iou_levels]
    if not levels or any(q < 0.5 or q > 1.0 for q in levels):
        raise ConfigError("IoU levels must lie in [0.5, 1.0]")
    rng = np.random.default_rng([world.seed, 0xA1, world.class_ids.index(class_id), seed])
    u = world.direction(class_id)
    prefix = prefix or f"{class_id}-s{seed}"
    wanted = [levels[i % len(levels)] for i in range(n)]
    n_gt = sum(1 for q in wanted if q == 1.0)
    gts = []
    for g in range(max(n_gt, 1)):
        gts.append(ProposalRecord(
            id=f"{prefix}-gt{g}", image_id=f"{prefix}-img{g}", box=_random_box(rng),
            kind=GROUND_TRUTH, label=class_id, split=split,
            embedding=_noisy(world, u, 1.0, rng),
        ))
    out = list(gts)
    j = 0
    for i, q in enumerate(wanted):
        if q == 1.0:
            continue
        gt = gts[j % len(gts)]
        j += 1
        sign = 1.0 if rng.random() < 0.5 else -1.0
        out.append(ProposalRecord(
            id=f"{prefix}-p{i}", image_id=gt.image_id, box=_slid(gt.box, q, sign),
            kind=REGION_PROPOSAL, label=class_id, split=split,
            embedding=_noisy(world, u, q, rng),
        ))
    return out


def _background_embeddings(world: PlantedWorld, n: int, rng, max_attempts=1_000_000) -> np.ndarray:
    d_e = world.directions.shape[1]
    kept = []
    attempts = 0
    while len(kept) < n:
        chunk = min(max(4 * (n - len(kept)), 256), max_attempts - attempts)
        if chunk <= 0:
            raise DataError(
                f"background rejection sampling exhausted {max_attempts} attempts; "
                "increase D_e or rho"
            )
        f = rng.standard_normal((chunk, d_e))
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        ok = (f @ world.directions.T).max(axis=1) < world.rho
        kept.extend(f[ok])
        attempts += chunk
    return np.array(kept[:n]).reshape(n, d_e)


def gen_negatives(world: PlantedWorld, n: int, seed=0, anchors=None, max_attempts=1_000_000):
    """``n`` background regions, each below ``rho`` cosine to every class direction.

    With ``anchors`` (ground-truth records) each negative is placed in a
    random anchor's image at an IoU drawn from [0, 0.45); otherwise each gets
    an image of its own.
    """
    if n == 0:
        return []
    rng = np.random.default_rng([world.seed, 0xBB, seed])
    embs = _background_embeddings(world, n, rng, max_attempts)
    anchors = list(anchors or [])
    out = []
    for i in range(n):
        if anchors:
            gt = anchors[int(rng.integers(len(anchors)))]
            q = float(rng.uniform(0.0, 0.45))
            d = slide_offset(gt.box.x2 - gt.box.x1, q)
            sign = 1.0 if rng.random() < 0.5 else -1.0
            box = Box(gt.box.x1 + sign * d, gt.box.y1, gt.box.x2 + sign * d, gt.box.y2)
            image = gt.image_id
        else:
            box, image = _random_box(rng), f"bg-img{i}"
        out.append(ProposalRecord(
            id=f"bg{i}", image_id=image, box=box, kind=REGION_PROPOSAL,
            label=None, split="base", embedding=embs[i],
        ))
    return out


def gen_benchmark(n_base=20, n_novel=10, d_w=32, d_e=32, per_class=50, iou_levels=DEFAULT_LEVELS,
                  n_neg=1000, sigma0=0.1, slope=2.0, rho=0.2, seed=0, bridge="context", encoder=None):
    """World, token table and a full record list (all classes plus background)."""
    world, table = gen_world(n_base, n_novel, d_w, d_e, seed, sigma0, slope, rho, bridge, encoder)
    records = []
    for cid, split in zip(table.ids, table.splits):
        records.extend(gen_positives(world, cid, per_class, iou_levels, seed, split))
    anchors = [r for r in records if r.kind == GROUND_TRUTH and r.split == "base"]
    records.extend(gen_negatives(world, n_neg, seed, anchors))
    return world, table, records
