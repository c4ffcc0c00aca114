"""Per-group context training with plain SGD and cosine annealing.

Only the shared context vectors (and, in ``learnable_bg`` mode, the
background context) are optimized. The encoder and the class tokens stay
frozen; gradients flow loss -> class embeddings -> encoder backward pass ->
assembled prompts -> context rows.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import geometry
from .encoder import FrozenTextEncoder, build_encoder
from .errors import ConfigError, DataError
from .losses import BG_MODES, LEARNABLE_BG, NO_BG, SOFT_BG, objective_grad
from .prompt import (
    BackgroundContext,
    Checkpoint,
    ClassTokenTable,
    PromptContext,
    TokenPosition,
    assemble_many,
    context_grad,
    ensemble,
    init_context,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

ENSEMBLE_LEVELS = ("context", "embedding")


@dataclass
class TrainConfig:
    context_length: int = 8
    d_w: int = 32
    d_e: int = 32
    max_len: int = 17
    sigma_init: float = 0.02
    lr: float = 0.002
    epochs: int = 6
    batch_size: int = 64
    tau: float = 0.01
    bg_mode: str = SOFT_BG
    neg_fraction: float = 0.1
    token_position: str = "end"
    iou_threshold: float = 0.5
    grade_a: float = 0.5
    grade_b: float = 1.0
    grade_t: float = 0.1
    gt_in_all_groups: bool = False
    ensemble_level: str = "context"
    use_gt: bool = True
    use_fg: bool = True
    use_bg: bool = True
    init_seed: int = 0
    data_seed: int = 0
    encoder_seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.context_length < 1 or self.d_w < 1 or self.d_e < 1:
            raise ConfigError("context_length, d_w and d_e must be >= 1")
        if self.context_length + 1 > self.max_len:
            raise ConfigError(f"max_len {self.max_len} cannot hold {self.context_length} + 1 tokens")
        if not self.sigma_init > 0:
            raise ConfigError("sigma_init must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ConfigError("tau must be positive")
        if self.bg_mode not in BG_MODES:
            raise ConfigError(f"bg_mode must be one of {BG_MODES}")
        if not 0 < self.neg_fraction <= 1:
            raise ConfigError("neg_fraction must lie in (0, 1]")
        if self.token_position not in {p.value for p in TokenPosition}:
            raise ConfigError(f"unknown token_position {self.token_position!r}")
        if self.ensemble_level not in ENSEMBLE_LEVELS:
            raise ConfigError(f"ensemble_level must be one of {ENSEMBLE_LEVELS}")
        if not 0 < self.iou_threshold < 1:
            raise ConfigError("iou_threshold must lie in (0, 1)")
        geometry.grade_bounds(self.grade_a, self.grade_b, self.grade_t)
        return self

    # -- flat key=value text -------------------------------------------------

    def canonical_text(self) -> str:
        items = sorted(dataclasses.asdict(self).items())
        return "".join(f"{k}={_fmt(v)}\n" for k, v in items)

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).digest()

    def hash_hex(self) -> str:
        return self.digest().hex()

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_text(cls, text: str, overrides: Sequence[str] = ()) -> "TrainConfig":
        values = parse_key_values(text.splitlines())
        values.update(parse_key_values(overrides))
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, types[key], raw)
        return cls(**kwargs).validate()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key, typ, raw):
    if not isinstance(raw, str):
        return raw
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_key_values(lines) -> dict:
    out = {}
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides: Sequence[str] = ()) -> TrainConfig:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    return TrainConfig.from_text(text, overrides)


def make_encoder(config: TrainConfig) -> FrozenTextEncoder:
    return build_encoder(config.encoder_seed, config.d_w, config.d_e, config.max_len)


# -- learning-rate schedule -----------------------------------------------------

def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from ``lr0`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# -- gradient of one batch --------------------------------------------------------

@dataclass
class Batch:
    """Region embeddings of one mini-batch; labels index the base class list."""

    pos_f: np.ndarray
    pos_labels: np.ndarray
    neg_f: np.ndarray

    @classmethod
    def from_records(cls, positives, negatives, base_ids, d_e) -> "Batch":
        index = {c: i for i, c in enumerate(base_ids)}
        pos_f = _stack_embeddings(positives, d_e)
        labels = []
        for p in positives:
            if p.label not in index:
                raise DataError(f"{p.id}: label {p.label!r} is not a base class")
            labels.append(index[p.label])
        return cls(pos_f, np.array(labels, dtype=np.int64), _stack_embeddings(negatives, d_e))

    def duplicated(self) -> "Batch":
        return Batch(
            np.vstack([self.pos_f, self.pos_f]),
            np.concatenate([self.pos_labels, self.pos_labels]),
            np.vstack([self.neg_f, self.neg_f]),
        )


def _stack_embeddings(records, d_e) -> np.ndarray:
    missing = [r.id for r in records if r.embedding is None]
    if missing:
        raise DataError(f"records without embeddings: {', '.join(missing[:10])}")
    if not records:
        return np.zeros((0, d_e))
    out = np.vstack([r.embedding for r in records])
    if out.shape[1] != d_e:
        raise DataError(f"embedding dimension {out.shape[1]} != D_e={d_e}")
    return out


def _finite(name, x):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {name}")


def grad(
    mode: str,
    batch: Batch,
    context: PromptContext,
    encoder: FrozenTextEncoder,
    base_tokens: np.ndarray,
    tau: float,
    pos=TokenPosition.END,
    bg: Optional[BackgroundContext] = None,
):
    """Batch loss and its gradient w.r.t. the trainable contexts.

    Returns ``(loss, d_context, d_bg)`` where ``d_bg`` is ``None`` unless
    ``mode == "learnable_bg"``.
    """
    if mode == LEARNABLE_BG and bg is None:
        raise ConfigError("learnable_bg mode needs a background context")
    seqs = assemble_many(context, base_tokens, pos)
    t, vjp = encoder.encode_with_vjp(seqs)
    _finite("class embeddings", t)
    t_bg = bg_vjp = None
    if mode == LEARNABLE_BG:
        t_bg, bg_vjp = encoder.encode_with_vjp(bg.vectors[None])
        t_bg = t_bg[0]
        _finite("background embedding", t_bg)
    loss, d_t, d_tbg = objective_grad(
        batch.pos_f, batch.pos_labels, batch.neg_f, t, mode, tau, t_bg
    )
    _finite("batch loss", loss)
    _finite("class-embedding gradient", d_t)
    d_ctx = context_grad(vjp(d_t), context.length, pos)
    _finite("context gradient", d_ctx)
    d_bg = None
    if mode == LEARNABLE_BG:
        d_bg = bg_vjp(d_tbg[None])[0]
        _finite("background gradient", d_bg)
    return loss, d_ctx, d_bg


# -- training loops ---------------------------------------------------------------

@dataclass
class GroupResult:
    lo: float
    hi: float
    context: PromptContext
    bg: Optional[BackgroundContext]
    initial_loss: float
    final_loss: float
    steps: int
    n_pos: int
    n_neg: int


@dataclass
class TrainResult:
    config: TrainConfig
    groups: list
    context: PromptContext
    bg: Optional[BackgroundContext] = None
    base_ids: list = field(default_factory=list)


def _batches(n_pos, n_neg, batch_size, rng):
    """Shuffle both pools and split each into the same number of chunks."""
    n_batches = max(1, math.ceil((n_pos + n_neg) / batch_size))
    pos_idx = np.array_split(rng.permutation(n_pos), n_batches)
    neg_idx = np.array_split(rng.permutation(n_neg), n_batches)
    return list(zip(pos_idx, neg_idx))


def train_group(
    group: geometry.ContextGroup,
    negatives: Sequence[geometry.ProposalRecord],
    config: TrainConfig,
    encoder: FrozenTextEncoder,
    table: ClassTokenTable,
    group_index: int = 0,
) -> GroupResult:
    """Fit one context (plus background context if configured) on one IoU band."""
    if not group.members:
        raise DataError(f"context group [{group.lo}, {group.hi}] has no positives")
    base_ids = table.base_ids
    tokens = table.tokens(base_ids)
    pos = TokenPosition(config.token_position)
    mode = config.bg_mode
    negs = [] if mode == NO_BG else list(negatives)
    full = Batch.from_records(group.members, negs, base_ids, config.d_e)

    init_seed = [config.init_seed, group_index]
    ctx = PromptContext(init_context(config.context_length, config.d_w, config.sigma_init, init_seed).vectors)
    bg = None
    if mode == LEARNABLE_BG:
        bg_seed = [config.init_seed, group_index, 1]
        bg = BackgroundContext(init_context(config.context_length, config.d_w, config.sigma_init, bg_seed).vectors)

    initial, _, _ = grad(mode, full, ctx, encoder, tokens, config.tau, pos, bg)
    rng = np.random.default_rng([config.data_seed, group_index, 2])
    n_pos, n_neg = full.pos_f.shape[0], full.neg_f.shape[0]
    per_epoch = max(1, math.ceil((n_pos + n_neg) / config.batch_size))
    total = config.epochs * per_epoch
    step = 0
    for epoch in range(config.epochs):
        for pi, ni in _batches(n_pos, n_neg, config.batch_size, rng):
            batch = Batch(full.pos_f[pi], full.pos_labels[pi], full.neg_f[ni])
            _, d_ctx, d_bg = grad(mode, batch, ctx, encoder, tokens, config.tau, pos, bg)
            lr = cosine_lr(step, total, config.lr)
            ctx.vectors = ctx.vectors - lr * d_ctx
            if bg is not None:
                bg.vectors = bg.vectors - lr * d_bg
            step += 1
    final, _, _ = grad(mode, full, ctx, encoder, tokens, config.tau, pos, bg)
    log.info("group [%.2f, %.2f]: loss %.4f -> %.4f over %d steps", group.lo, group.hi, initial, final, step)
    return GroupResult(group.lo, group.hi, ctx, bg, initial, final, step, n_pos, n_neg)


def select_training_data(records, config: TrainConfig):
    """Partition a record list and apply the data-source toggles.

    Only base-class positives are kept for training. Returns
    ``(partition, negatives)`` where ``negatives`` is the subsampled shared
    pool.
    """
    props, gts = geometry.split_kinds(records)
    part = geometry.partition(props, gts, config.iou_threshold)
    positives = []
    for p in part.positives:
        if p.split != "base":
            continue
        if p.is_ground_truth and not config.use_gt:
            continue
        if not p.is_ground_truth and not config.use_fg:
            continue
        positives.append(p)
    part = geometry.ProposalPartition(positives, part.negatives, part.threshold)
    negatives = []
    if config.use_bg and config.bg_mode != NO_BG:
        negatives = geometry.subsample_negatives(part.negatives, config.neg_fraction, config.data_seed)
    return part, negatives


def train_all(records, config: TrainConfig, encoder: FrozenTextEncoder, table: ClassTokenTable) -> TrainResult:
    """Grade positives into IoU bands, train each band, and ensemble the results."""
    config.validate()
    part, negatives = select_training_data(records, config)
    groups = geometry.grade(part, config.grade_a, config.grade_b, config.grade_t, config.gt_in_all_groups)
    results = []
    for k, group in enumerate(groups):
        if not group.members:
            log.warning("skipping empty group [%.2f, %.2f]", group.lo, group.hi)
            continue
        results.append(train_group(group, negatives, config, encoder, table, k))
    if not results:
        raise DataError("every context group is empty")
    ctx = ensemble([r.context for r in results])
    bg = None
    if config.bg_mode == LEARNABLE_BG:
        bg = BackgroundContext(ensemble([r.bg for r in results]).vectors)
    return TrainResult(config, results, ctx, bg, table.base_ids)


def class_embeddings(result: TrainResult, encoder, table, ids=None) -> np.ndarray:
    """Class embeddings of a trained run, honouring its ensemble level."""
    from .encoder import encode_class_set

    pos = result.config.token_position
    if result.config.ensemble_level == "context" or len(result.groups) == 1:
        return encode_class_set(encoder, result.context, table, pos, ids)
    embs = [encode_class_set(encoder, g.context, table, pos, ids) for g in result.groups]
    mean = ensemble([PromptContext(e) for e in embs]).vectors
    return mean / np.linalg.norm(mean, axis=-1, keepdims=True)


# -- finite-difference verification --------------------------------------------------

@dataclass
class GradientReport:
    """Analytic vs central-difference gradients per parameter block.

    ``max_rel_error`` is ``max|analytic - numeric| / max(|analytic|, |numeric|)``
    taken over each block, the worst block reported.
    """

    mode: str
    analytic: dict
    numeric: dict
    max_rel_error: float


def _rel_error(a, n) -> float:
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-12)
    return float(np.max(np.abs(a - n)) / scale)


def _numeric_grad(fn, x, h):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = fn()
        x[i] = old - h
        down = fn()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def gradcheck_instance(config: TrainConfig, mode: str, seed, n_classes=5, n_pos=6, n_neg=6, h=1e-5):
    """Compare :func:`grad` to central differences on one random small instance."""
    rng = np.random.default_rng(seed)
    encoder = make_encoder(config)
    tokens = rng.normal(size=(n_classes, config.d_w))
    tokens /= np.linalg.norm(tokens, axis=1, keepdims=True)
    ctx = PromptContext(rng.normal(0, 1 / np.sqrt(config.d_w), (config.context_length, config.d_w)))
    bg = None
    if mode == LEARNABLE_BG:
        bg = BackgroundContext(rng.normal(0, 1 / np.sqrt(config.d_w), (config.context_length, config.d_w)))
    batch = Batch(
        rng.normal(size=(n_pos, config.d_e)),
        rng.integers(0, n_classes, n_pos),
        rng.normal(size=(n_neg, config.d_e)),
    )
    pos = TokenPosition(config.token_position)

    def loss():
        return grad(mode, batch, ctx, encoder, tokens, config.tau, pos, bg)[0]

    _, d_ctx, d_bg = grad(mode, batch, ctx, encoder, tokens, config.tau, pos, bg)
    analytic = {"context": d_ctx}
    numeric = {"context": _numeric_grad(loss, ctx.vectors, h)}
    if bg is not None:
        analytic["background"] = d_bg
        numeric["background"] = _numeric_grad(loss, bg.vectors, h)
    err = max(_rel_error(analytic[k], numeric[k]) for k in analytic)
    return GradientReport(mode, analytic, numeric, err)


def gradcheck(config: Optional[TrainConfig] = None, seed: int = 0, instances: int = 20, modes=BG_MODES):
    """Run :func:`gradcheck_instance` over ``instances`` seeds for every mode.

    Returns ``{mode: [GradientReport, ...]}``.
    """
    config = (config or TrainConfig()).validate()
    return {
        mode: [gradcheck_instance(config, mode, [seed, i, BG_MODES.index(mode)]) for i in range(instances)]
        for mode in modes
    }


# -- checkpoint conversion ------------------------------------------------------------

def to_checkpoint(result: TrainResult) -> Checkpoint:
    cfg = result.config
    gs = result.groups
    bg_contexts = bg_context = None
    if result.bg is not None:
        bg_contexts = np.stack([g.bg.vectors for g in gs])
        bg_context = result.bg.vectors
    return Checkpoint(
        config_text=cfg.canonical_text(),
        seeds=(cfg.init_seed, cfg.data_seed, cfg.encoder_seed),
        bounds=np.array([[g.lo, g.hi] for g in gs], dtype=np.float64),
        contexts=np.stack([g.context.vectors for g in gs]),
        context=result.context.vectors,
        d_e=cfg.d_e,
        losses=np.array([[g.initial_loss, g.final_loss] for g in gs], dtype=np.float64),
        counts=np.array([[g.steps, g.n_pos, g.n_neg] for g in gs], dtype=np.int64),
        bg_contexts=bg_contexts,
        bg_context=bg_context,
    )


def from_checkpoint(ck: Checkpoint, table: Optional[ClassTokenTable] = None) -> TrainResult:
    """Rebuild a :class:`TrainResult` (config included) from a checkpoint."""
    cfg = TrainConfig.from_text(ck.config_text)
    groups = []
    for i in range(ck.contexts.shape[0]):
        bg = None if ck.bg_contexts is None else BackgroundContext(ck.bg_contexts[i].copy())
        steps, n_pos, n_neg = (int(x) for x in ck.counts[i])
        groups.append(GroupResult(
            float(ck.bounds[i, 0]), float(ck.bounds[i, 1]), PromptContext(ck.contexts[i].copy()), bg,
            float(ck.losses[i, 0]), float(ck.losses[i, 1]), steps, n_pos, n_neg,
        ))
    bg = None if ck.bg_context is None else BackgroundContext(ck.bg_context.copy())
    base_ids = table.base_ids if table is not None else []
    return TrainResult(cfg, groups, PromptContext(ck.context.copy()), bg, base_ids)


def save_run(path, result: TrainResult) -> None:
    Path(path).write_bytes(save_checkpoint(to_checkpoint(result)))


def load_run(path, table: Optional[ClassTokenTable] = None) -> TrainResult:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    return from_checkpoint(load_checkpoint(data), table)
