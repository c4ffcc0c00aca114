"""Proposal classification accuracy, score fusion, embedding export and ablations.

Evaluation follows a plain protocol: every positive proposal (ground truths
included) is ranked against the class embeddings of all classes, base and
novel together, and top-1 / top-5 hits are counted per split. Background
proposals never count towards accuracy; they feed two diagnostics computed
from base-class scores (mean max probability and mean entropy).
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import geometry
from .encoder import FrozenTextEncoder, encode_class_set, write_class_embeddings
from .errors import ConfigError, DataError
from .losses import class_probs, cosine_matrix, score_entropy
from .prompt import ClassTokenTable, PromptContext, init_context
from .trainer import TrainConfig, TrainResult, class_embeddings, train_all

log = logging.getLogger(__name__)

SPLITS = ("base", "novel")


def classify_topk(f, embeddings, class_ids: Sequence[str], k: int = 1, tau: float = 0.01) -> list:
    """Class ids ranked by cosine similarity, ties broken by ascending id.

    Ranking by cosine equals ranking by the tempered softmax because the
    softmax is monotone in each logit; ``tau`` is only validated here.
    """
    if not tau > 0:
        raise ConfigError("temperature must be positive")
    ids = list(class_ids)
    if not 1 <= k <= len(ids):
        raise ConfigError(f"k={k} outside [1, {len(ids)}]")
    cos = cosine_matrix(f, embeddings)[0]
    order = sorted(range(len(ids)), key=lambda i: (-cos[i], ids[i]))
    return [ids[i] for i in order[:k]]


def _rank_matrix(cos: np.ndarray, ids: Sequence[str], k: int) -> np.ndarray:
    # lexsort: last key is primary; ids sorted ascending break cosine ties
    id_rank = np.argsort(np.argsort(np.array(ids, dtype=object)))
    out = np.empty((cos.shape[0], k), dtype=np.int64)
    for r in range(cos.shape[0]):
        out[r] = np.lexsort((id_rank, -cos[r]))[:k]
    return out


@dataclass
class EvalReport:
    top1: dict
    top5: dict
    counts: dict
    per_class: dict
    neg_max_prob: float
    neg_entropy: float
    n_negatives: int
    config_hash: str = ""
    seeds: tuple = ()

    def lines(self) -> list[str]:
        """One ``metric<TAB>split<TAB>value`` line per number."""
        out = []
        for split in SPLITS:
            if self.counts.get(split):
                out.append(f"top1\t{split}\t{self.top1[split]:.6f}")
                out.append(f"top5\t{split}\t{self.top5[split]:.6f}")
                out.append(f"count\t{split}\t{self.counts[split]}")
        for cid in sorted(self.per_class):
            out.append(f"class_top1\t{cid}\t{self.per_class[cid]:.6f}")
        if self.n_negatives:
            out.append(f"neg_max_prob\tbackground\t{self.neg_max_prob:.6f}")
            out.append(f"neg_entropy\tbackground\t{self.neg_entropy:.6f}")
        out.append(f"count\tbackground\t{self.n_negatives}")
        out.append(f"config_hash\tall\t{self.config_hash}")
        out.append(f"seeds\tall\t{','.join(str(s) for s in self.seeds)}")
        return out

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"


def evaluate_embeddings(
    records,
    class_ids: Sequence[str],
    splits: Sequence[str],
    embeddings,
    tau: float = 0.01,
    iou_threshold: float = 0.5,
    config_hash: str = "",
    seeds: tuple = (),
) -> EvalReport:
    """Score a record list against fixed class embeddings (table order)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    ids = list(class_ids)
    if emb.shape[0] != len(ids):
        raise DataError("one embedding per class id required")
    missing = [r.id for r in records if r.embedding is None]
    if missing:
        raise DataError(f"records without embeddings: {', '.join(missing[:10])}")
    props, gts = geometry.split_kinds(records)
    part = geometry.partition(props, gts, iou_threshold)
    index = {c: i for i, c in enumerate(ids)}
    k = min(5, len(ids))

    top1, top5, counts, per_class = {}, {}, {}, {}
    hits_by_class: dict = {}
    for split in SPLITS:
        pos = [p for p in part.positives if p.split == split]
        counts[split] = len(pos)
        if not pos:
            top1[split] = top5[split] = 0.0
            continue
        unknown = sorted({p.label for p in pos} - set(index))
        if unknown:
            raise DataError(f"labels missing from the class set: {unknown[:10]}")
        f = np.vstack([p.embedding for p in pos])
        ranks = _rank_matrix(cosine_matrix(f, emb), ids, k)
        y = np.array([index[p.label] for p in pos])
        hit1 = ranks[:, 0] == y
        hit5 = np.any(ranks == y[:, None], axis=1)
        top1[split] = float(hit1.mean())
        top5[split] = float(hit5.mean())
        for p, h in zip(pos, hit1):
            hits_by_class.setdefault(p.label, []).append(bool(h))
    for cid, hits in hits_by_class.items():
        per_class[cid] = float(np.mean(hits))

    base = [i for i, s in enumerate(splits) if s == "base"]
    neg_max = neg_ent = 0.0
    if part.negatives and base:
        nf = np.vstack([n.embedding for n in part.negatives])
        p = class_probs(nf, emb[base], tau)
        neg_max = float(p.max(axis=1).mean())
        neg_ent = float(score_entropy(p).mean())
    return EvalReport(top1, top5, counts, per_class, neg_max, neg_ent, len(part.negatives),
                      config_hash, tuple(seeds))


def evaluate(records, model, encoder: FrozenTextEncoder, table: ClassTokenTable,
             config: Optional[TrainConfig] = None) -> EvalReport:
    """Evaluate a trained run or a bare context on base and novel classes.

    ``model`` is a :class:`TrainResult` (its ensemble level is honoured) or a
    :class:`PromptContext` used with ``config``'s token position.
    """
    if isinstance(model, TrainResult):
        config = config or model.config
        emb = class_embeddings(model, encoder, table, table.ids)
    elif isinstance(model, PromptContext):
        config = config or TrainConfig()
        emb = encode_class_set(encoder, model, table, config.token_position, table.ids)
    else:
        raise ConfigError(f"cannot evaluate a {type(model).__name__}")
    seeds = (config.init_seed, config.data_seed, config.encoder_seed)
    return evaluate_embeddings(records, table.ids, table.splits, emb, config.tau,
                               config.iou_threshold, config.hash_hex(), seeds)


def untrained_context(config: TrainConfig) -> PromptContext:
    """The context a run starts from in its first group, before any step."""
    return init_context(config.context_length, config.d_w, config.sigma_init, [config.init_seed, 0])


def fuse_scores(p_text, p_image) -> np.ndarray:
    """Elementwise geometric mean of two score vectors, renormalized to sum 1."""
    a = np.asarray(p_text, dtype=np.float64)
    b = np.asarray(p_image, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"score vectors differ in shape: {a.shape} vs {b.shape}")
    if np.any(a < 0) or np.any(b < 0):
        raise DataError("scores must be non-negative")
    g = np.sqrt(a * b)
    total = g.sum(axis=-1, keepdims=True)
    if np.any(total == 0):
        raise DataError("score vectors share no support")
    return g / total


def export_embeddings(context: PromptContext, encoder: FrozenTextEncoder, table: ClassTokenTable,
                      subset=None, path=None, pos="end") -> np.ndarray:
    """Encode ``subset`` (default all classes) and write a ``D_e`` table to ``path``."""
    ids = table.ids if subset is None else list(subset)
    emb = encode_class_set(encoder, context, table, pos, ids)
    if path is not None:
        write_class_embeddings(path, ids, [table.split_of(c) for c in ids], emb)
    return emb


# -- ablation sweeps ------------------------------------------------------------------

@dataclass
class AblationRow:
    table: str
    setting: str
    overrides: dict
    top1_base: float
    top1_novel: float
    top5_novel: float
    neg_max_prob: float
    seconds: float
    embeddings: np.ndarray = field(repr=False, default=None)

    def line(self) -> str:
        return (f"{self.table}\t{self.setting}\t{self.top1_base:.4f}\t{self.top1_novel:.4f}"
                f"\t{self.top5_novel:.4f}\t{self.neg_max_prob:.4f}")


ABLATION_HEADER = "table\tsetting\ttop1_base\ttop1_novel\ttop5_novel\tneg_max_prob"


def ablation_matrix(tables: Sequence[str] = ("3", "4", "5", "6", "7", "8")) -> list:
    """``(table, setting, overrides)`` cells of each configuration sweep."""
    cells = {
        "3": [(m, {"bg_mode": m}) for m in ("no_bg", "soft_bg", "learnable_bg")],
        "4": [(f"neg_fraction={f}", {"neg_fraction": f}) for f in (0.1, 0.3, 0.5, 1.0)],
        "5": [
            ("GT", {"use_gt": True, "use_fg": False, "use_bg": False}),
            ("GT+FG", {"use_gt": True, "use_fg": True, "use_bg": False}),
            ("GT+BG", {"use_gt": True, "use_fg": False, "use_bg": True}),
            ("GT+FG+BG", {"use_gt": True, "use_fg": True, "use_bg": True}),
        ],
        "6": [
            ("single (0.5:1.0:0.5)", {"grade_t": 0.5}),
            ("ensemble (0.5:1.0:0.1) context", {"grade_t": 0.1, "ensemble_level": "context"}),
            ("ensemble (0.5:1.0:0.1) embedding", {"grade_t": 0.1, "ensemble_level": "embedding"}),
        ],
        "7": [(f"L={n}", {"context_length": n}) for n in (4, 8, 16)],
        "8": [(p, {"token_position": p}) for p in ("front", "middle", "end")],
    }
    out = []
    for t in tables:
        if t not in cells:
            raise ConfigError(f"no ablation sweep for table {t!r}; choose from {sorted(cells)}")
        out.extend((t, name, ov) for name, ov in cells[t])
    return out


def ablate(records, table: ClassTokenTable, encoder: FrozenTextEncoder, config: TrainConfig,
           tables: Sequence[str] = ("3", "4", "5", "6", "7", "8")) -> list:
    """Train and evaluate every cell of the requested sweeps; one row per cell."""
    rows = []
    for tab, name, overrides in ablation_matrix(tables):
        cfg = dataclasses.replace(config, **overrides)
        if cfg.context_length + 1 > cfg.max_len:
            cfg = dataclasses.replace(cfg, max_len=cfg.context_length + 1)
        cfg.validate()
        enc = encoder
        if cfg.max_len > encoder.max_len:
            enc = FrozenTextEncoder(encoder.seed, encoder.d_w, encoder.d_e, cfg.max_len)
        t0 = time.perf_counter()
        result = train_all(records, cfg, enc, table)
        emb = class_embeddings(result, enc, table, table.ids)
        rep = evaluate_embeddings(records, table.ids, table.splits, emb, cfg.tau, cfg.iou_threshold)
        rows.append(AblationRow(tab, name, overrides, rep.top1["base"], rep.top1["novel"],
                                rep.top5["novel"], rep.neg_max_prob, time.perf_counter() - t0, emb))
        log.info("ablation %s %s: %s", tab, name, rows[-1].line())
    return rows


def position_separation(rows: Sequence[AblationRow]) -> float:
    """Smallest pairwise Frobenius distance between the position cells' embeddings."""
    embs = [r.embeddings for r in rows if r.table == "8"]
    if len(embs) < 2:
        raise DataError("position sweep needs at least two cells")
    return min(float(np.linalg.norm(a - b)) for i, a in enumerate(embs) for b in embs[i + 1:])
