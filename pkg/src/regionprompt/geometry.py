"""Box arithmetic, proposal partitioning and IoU-graded context groups.

Boxes are ``(x1, y1, x2, y2)`` in image units. A proposal set is split into
positives (foreground proposals plus the ground truths themselves) and
negatives (background proposals), and the positives are then graded into
disjoint IoU bands so each band can train its own prompt context.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError

GROUND_TRUTH = "ground_truth"
REGION_PROPOSAL = "region_proposal"
KINDS = (GROUND_TRUTH, REGION_PROPOSAL)
SPLITS = ("base", "novel")


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"non-finite box coordinates {vals}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise DataError(f"box corners out of order {vals}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class ProposalRecord:
    """A ground-truth box or a region proposal, with its region embedding.

    ``max_iou`` is derived by :func:`partition`; ground truths always carry 1.0.
    """

    id: str
    image_id: str
    box: Box
    kind: str
    label: Optional[str] = None
    split: str = "base"
    max_iou: float = 0.0
    embedding: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"{self.id}: unknown kind {self.kind!r}")
        if self.split not in SPLITS:
            raise DataError(f"{self.id}: unknown split {self.split!r}")
        if self.kind == GROUND_TRUTH:
            if self.label is None:
                raise DataError(f"{self.id}: ground truth without a label")
            object.__setattr__(self, "max_iou", 1.0)
        if self.embedding is not None:
            emb = np.asarray(self.embedding, dtype=np.float64)
            if emb.ndim != 1:
                raise DataError(f"{self.id}: embedding must be a vector")
            emb.setflags(write=False)
            object.__setattr__(self, "embedding", emb)

    @property
    def is_ground_truth(self) -> bool:
        return self.kind == GROUND_TRUTH


@dataclass(frozen=True)
class ProposalPartition:
    positives: list
    negatives: list
    threshold: float


@dataclass(frozen=True)
class ContextGroup:
    lo: float
    hi: float
    members: list


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 whenever the union has zero area."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` box arrays."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def partition(
    proposals: Sequence[ProposalRecord],
    ground_truths: Sequence[ProposalRecord],
    threshold: float = 0.5,
) -> ProposalPartition:
    """Split region proposals into positives and negatives by max IoU.

    Each proposal is matched against the ground truths of its own image. A
    proposal whose best IoU reaches ``threshold`` becomes positive and takes
    the label and split of that ground truth (ties go to the lowest
    ground-truth id). All ground truths are positive as well.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"IoU threshold must lie in (0, 1), got {threshold}")
    by_image: dict[str, list[ProposalRecord]] = {}
    for gt in ground_truths:
        if not gt.is_ground_truth or gt.label is None:
            raise DataError(f"{gt.id}: expected a labelled ground truth")
        by_image.setdefault(gt.image_id, []).append(gt)
    for gts in by_image.values():
        gts.sort(key=lambda g: g.id)

    positives = list(ground_truths)
    negatives = []
    for prop in proposals:
        gts = by_image.get(prop.image_id, [])
        best, best_gt = 0.0, None
        for gt in gts:
            v = iou(prop.box, gt.box)
            if v > best:
                best, best_gt = v, gt
        if best_gt is not None and best >= threshold:
            positives.append(
                replace(prop, max_iou=best, label=best_gt.label, split=best_gt.split)
            )
        else:
            negatives.append(replace(prop, max_iou=best, label=None))
    return ProposalPartition(positives, negatives, threshold)


def _check_grading(a: float, b: float, t: float) -> int:
    if t <= 0.0 or not a < b:
        raise ConfigError(f"invalid grading ({a}:{b}:{t})")
    k = int(round((b - a) / t))
    if k < 1 or abs(k * t - (b - a)) > 1e-9:
        raise ConfigError(f"interval {t} does not divide [{a}, {b}]")
    return k


def grade_bounds(a: float, b: float, t: float) -> list[tuple[float, float]]:
    """The ``K`` IoU intervals for grading ``(a:b:t)``."""
    k = _check_grading(a, b, t)
    los = [round(a + i * t, 12) for i in range(k)]
    his = los[1:] + [b]
    return list(zip(los, his))


def grade(
    part: ProposalPartition,
    a: float,
    b: float,
    t: float,
    gt_in_all_groups: bool = False,
) -> list[ContextGroup]:
    """Bucket positives into ``K = (b - a) / t`` IoU bands.

    Bands are half-open except the last, which is closed at ``b`` so that
    ground truths (IoU 1.0) land in the top band when ``b == 1``. Positives
    below ``a`` or above ``b`` are dropped. With ``gt_in_all_groups`` every
    ground truth is additionally added to each band it does not already
    belong to.
    """
    bounds = grade_bounds(a, b, t)
    los = [lo for lo, _ in bounds]
    members: list[list[ProposalRecord]] = [[] for _ in bounds]
    for p in part.positives:
        x = p.max_iou
        if x < a or x > b:
            continue
        k = min(bisect.bisect_right(los, x) - 1, len(bounds) - 1)
        members[k].append(p)
    if gt_in_all_groups:
        gts = [p for p in part.positives if p.is_ground_truth]
        for k, group in enumerate(members):
            present = {id(p) for p in group}
            group.extend(g for g in gts if id(g) not in present)
    return [ContextGroup(lo, hi, m) for (lo, hi), m in zip(bounds, members)]


def subsample_negatives(negatives: Sequence, fraction: float, seed: int) -> list:
    """Keep ``floor(fraction * len(negatives))`` records, chosen without replacement.

    The selection keeps input order, so ``fraction=1`` returns the input list.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"negative fraction must lie in (0, 1], got {fraction}")
    n = len(negatives)
    k = int(math.floor(fraction * n + 1e-12))
    if k == 0:
        return []
    if k == n:
        return list(negatives)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return [negatives[i] for i in idx]


# -- line-delimited proposal files ------------------------------------------

_FIELDS = {"id", "image_id", "box", "kind", "label", "split", "embedding"}


def record_to_dict(rec: ProposalRecord) -> dict:
    return {
        "id": rec.id,
        "image_id": rec.image_id,
        "box": [float(v) for v in rec.box.as_tuple()],
        "kind": rec.kind,
        "label": rec.label,
        "split": rec.split,
        "embedding": None if rec.embedding is None else [float(v) for v in rec.embedding],
    }


def record_from_dict(d: dict) -> ProposalRecord:
    extra = set(d) - _FIELDS
    if extra:
        raise DataError(f"unknown fields {sorted(extra)}")
    missing = _FIELDS - set(d)
    if missing:
        raise DataError(f"missing fields {sorted(missing)}")
    box = d["box"]
    if not isinstance(box, list) or len(box) != 4:
        raise DataError(f"{d['id']}: box must hold 4 numbers")
    emb = d["embedding"]
    return ProposalRecord(
        id=str(d["id"]),
        image_id=str(d["image_id"]),
        box=Box(*(float(v) for v in box)),
        kind=d["kind"],
        label=None if d["label"] is None else str(d["label"]),
        split=d["split"],
        embedding=None if emb is None else np.array(emb, dtype=np.float64),
    )


def write_proposals(path, records: Iterable[ProposalRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec)))
            fh.write("\n")


def read_proposals(path) -> list[ProposalRecord]:
    """Parse a proposal file; every embedding must share one dimension."""
    out = []
    dim = None
    seen = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = record_from_dict(json.loads(line))
        except (ValueError, TypeError, KeyError, AttributeError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        if rec.id in seen:
            raise DataError(f"{path}:{lineno}: duplicate id {rec.id}")
        seen.add(rec.id)
        if rec.embedding is not None:
            if dim is None:
                dim = rec.embedding.shape[0]
            elif rec.embedding.shape[0] != dim:
                raise DataError(f"{path}:{lineno}: embedding dimension mismatch")
        out.append(rec)
    return out


def split_kinds(records: Iterable[ProposalRecord]):
    """Separate a record stream into (region proposals, ground truths)."""
    props, gts = [], []
    for r in records:
        (gts if r.is_ground_truth else props).append(r)
    return props, gts
