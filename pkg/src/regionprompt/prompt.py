"""Learnable prompt contexts, class-token tables and prompt assembly."""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import CheckpointError, ConfigError, DataError


class TokenPosition(str, enum.Enum):
    FRONT = "front"
    MIDDLE = "middle"
    END = "end"


def _as_position(pos) -> TokenPosition:
    try:
        return TokenPosition(pos)
    except ValueError:
        raise ConfigError(f"unknown token position {pos!r}") from None


@dataclass
class PromptContext:
    """The ``L`` shared context vectors, stored as an ``(L, D_w)`` array."""

    vectors: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ConfigError(f"context must be a non-empty (L, D_w) array, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DataError("context holds non-finite entries")
        self.vectors = v

    @property
    def length(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def copy(self) -> "PromptContext":
        return PromptContext(self.vectors.copy(), self.trainable)


class BackgroundContext(PromptContext):
    """Context vectors of the class-token-free background prompt."""


class ClassTokenTable:
    """Fixed class-token vectors keyed by class id, each tagged base or novel."""

    def __init__(self, ids: Sequence[str], vectors, splits: Sequence[str]):
        vectors = np.array(vectors, dtype=np.float64)
        if vectors.ndim != 2 or len(ids) != vectors.shape[0] or len(splits) != len(ids):
            raise DataError("token table ids, vectors and splits disagree in length")
        if len(set(ids)) != len(ids):
            raise DataError("duplicate class ids in token table")
        bad = set(splits) - {"base", "novel"}
        if bad:
            raise DataError(f"unknown splits {sorted(bad)}")
        vectors.setflags(write=False)
        self.ids = list(ids)
        self.vectors = vectors
        self.splits = list(splits)
        self._index = {c: i for i, c in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def base_ids(self) -> list[str]:
        return [c for c, s in zip(self.ids, self.splits) if s == "base"]

    @property
    def novel_ids(self) -> list[str]:
        return [c for c, s in zip(self.ids, self.splits) if s == "novel"]

    def index(self, class_id: str) -> int:
        try:
            return self._index[class_id]
        except KeyError:
            raise DataError(f"unknown class id {class_id!r}") from None

    def split_of(self, class_id: str) -> str:
        return self.splits[self.index(class_id)]

    def token(self, class_id: str) -> np.ndarray:
        return self.vectors[self.index(class_id)]

    def tokens(self, class_ids: Iterable[str]) -> np.ndarray:
        idx = [self.index(c) for c in class_ids]
        return self.vectors[idx].reshape(len(idx), self.dim)

    def __len__(self):
        return len(self.ids)


def init_context(length: int, dim: int, sigma: float = 0.02, seed: int = 0) -> PromptContext:
    """Draw ``length * dim`` i.i.d. ``N(0, sigma^2)`` entries from a seeded generator."""
    if length < 1 or dim < 1:
        raise ConfigError("context length and dimension must be >= 1")
    if not sigma > 0.0:
        raise ConfigError(f"init std must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    return PromptContext(rng.normal(0.0, sigma, size=(length, dim)))


def class_token_slot(length: int, pos) -> int:
    """Index of the class token inside an assembled prompt of ``length + 1`` vectors."""
    pos = _as_position(pos)
    if pos is TokenPosition.FRONT:
        return 0
    if pos is TokenPosition.MIDDLE:
        return length // 2
    return length


def assemble(context: PromptContext, token: np.ndarray, pos=TokenPosition.END) -> np.ndarray:
    """Insert the class token into the context; returns an ``(L + 1, D_w)`` array."""
    token = np.asarray(token, dtype=np.float64)
    if token.shape != (context.dim,):
        raise DataError(f"class token shape {token.shape} does not match D_w={context.dim}")
    slot = class_token_slot(context.length, pos)
    v = context.vectors
    return np.concatenate([v[:slot], token[None, :], v[slot:]], axis=0)


def assemble_many(context: PromptContext, tokens: np.ndarray, pos=TokenPosition.END) -> np.ndarray:
    """Batched :func:`assemble` over an ``(C, D_w)`` token array -> ``(C, L + 1, D_w)``."""
    tokens = np.asarray(tokens, dtype=np.float64).reshape(-1, context.dim)
    slot = class_token_slot(context.length, pos)
    c = tokens.shape[0]
    v = np.broadcast_to(context.vectors, (c,) + context.vectors.shape)
    return np.concatenate([v[:, :slot], tokens[:, None, :], v[:, slot:]], axis=1)


def context_grad(seq_grad: np.ndarray, length: int, pos=TokenPosition.END) -> np.ndarray:
    """Collect gradients on assembled prompts back onto the shared context.

    ``seq_grad`` has shape ``(C, L + 1, D_w)``; class-token rows are dropped
    because tokens are fixed.
    """
    slot = class_token_slot(length, pos)
    g = seq_grad.sum(axis=0)
    return np.concatenate([g[:slot], g[slot + 1:]], axis=0)


def assemble_bg(bg: BackgroundContext) -> np.ndarray:
    return bg.vectors.copy()


def ensemble(contexts: Sequence[PromptContext]) -> PromptContext:
    """Elementwise mean of ``K`` contexts sharing ``L`` and ``D_w``.

    Summation runs in a fixed input order; a single context is returned as a
    bit-identical copy.
    """
    if len(contexts) == 0:
        raise ConfigError("cannot ensemble an empty list of contexts")
    shape = contexts[0].vectors.shape
    if any(c.vectors.shape != shape for c in contexts):
        raise ConfigError("contexts to ensemble must share L and D_w")
    if len(contexts) == 1:
        return contexts[0].copy()
    stacked = np.stack([c.vectors for c in contexts])
    # sorting along K makes the float sum independent of input order; the
    # shifted mean is exact when all inputs coincide
    stacked = np.sort(stacked, axis=0)
    ref = stacked[0]
    total = np.zeros_like(ref)
    for k in range(1, stacked.shape[0]):
        total += stacked[k] - ref
    return PromptContext(ref + total / len(contexts))


# -- vector table files ---------------------------------------------------

def write_vector_table(path, ids, splits, vectors, header: str = "D_w") -> None:
    """``<header> <dim>`` line, then ``<id> <split> <reals>`` per class."""
    vectors = np.asarray(vectors, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{header} {vectors.shape[1]}\n")
        for cid, split, row in zip(ids, splits, vectors):
            fh.write(" ".join([cid, split] + [repr(float(x)) for x in row]))
            fh.write("\n")


def read_vector_table(path, header: str | None = None):
    """Inverse of :func:`write_vector_table`; returns ``(ids, splits, vectors)``."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty table")
    head = lines[0].split()
    if len(head) != 2 or head[0] not in ("D_w", "D_e") or (header and head[0] != header):
        raise DataError(f"{path}: bad header {lines[0]!r}")
    dim = int(head[1])
    ids, splits, rows = [], [], []
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split()
        if len(parts) != dim + 2:
            raise DataError(f"{path}:{lineno}: expected {dim} values")
        ids.append(parts[0])
        splits.append(parts[1])
        try:
            rows.append([float(x) for x in parts[2:]])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return ids, splits, np.array(rows, dtype=np.float64).reshape(len(rows), dim)


def write_token_table(path, table: ClassTokenTable) -> None:
    write_vector_table(path, table.ids, table.splits, table.vectors, header="D_w")


def read_token_table(path) -> ClassTokenTable:
    ids, splits, vecs = read_vector_table(path, header="D_w")
    return ClassTokenTable(ids, vecs, splits)


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"DPRO"
CHECKPOINT_VERSION = 1
_HEAD = struct.Struct("<4sIIIIII")      # magic, version, L, D_w, D_e, K, flags
_SEEDS = struct.Struct("<qqq")
_GROUP = struct.Struct("<III")          # steps, n_pos, n_neg


@dataclass
class Checkpoint:
    """Everything needed to replay or evaluate one training run.

    ``config_text`` is the canonical key=value text of the run's config; its
    SHA-256 digest is stored alongside and re-checked on load.
    """

    config_text: str
    seeds: tuple                      # (init, data, encoder)
    bounds: np.ndarray                # (K, 2) IoU band per trained group
    contexts: np.ndarray              # (K, L, D_w)
    context: np.ndarray               # (L, D_w) ensemble
    d_e: int
    losses: np.ndarray                # (K, 2) initial and final loss
    counts: np.ndarray                # (K, 3) steps, positives, negatives
    bg_contexts: Optional[np.ndarray] = None
    bg_context: Optional[np.ndarray] = None

    @property
    def config_hash(self) -> bytes:
        return hashlib.sha256(self.config_text.encode("utf-8")).digest()


def save_checkpoint(ck: Checkpoint) -> bytes:
    k, length, d_w = np.shape(ck.contexts)
    has_bg = ck.bg_contexts is not None
    text = ck.config_text.encode("utf-8")
    parts = [
        _HEAD.pack(MAGIC, CHECKPOINT_VERSION, length, d_w, ck.d_e, k, int(has_bg)),
        _SEEDS.pack(*(int(s) for s in ck.seeds)),
        ck.config_hash,
        struct.pack("<I", len(text)),
        text,
    ]
    for row in np.asarray(ck.counts, dtype=np.int64).reshape(k, 3):
        parts.append(_GROUP.pack(*(int(x) for x in row)))
    arrays = [ck.bounds, ck.losses, ck.contexts, ck.context]
    if has_bg:
        arrays += [ck.bg_contexts, ck.bg_context]
    for a in arrays:
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"checkpoint truncated: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}"
            )
        out = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return out

    def floats(self, *shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def load_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic, version, length, d_w, d_e, k, flags = _HEAD.unpack(r.take(_HEAD.size))
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    seeds = _SEEDS.unpack(r.take(_SEEDS.size))
    digest = r.take(32)
    (n_text,) = struct.unpack("<I", r.take(4))
    try:
        text = r.take(n_text).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"config text is not UTF-8: {exc}") from None
    if hashlib.sha256(text.encode("utf-8")).digest() != digest:
        raise CheckpointError("config hash does not match the stored config text")
    counts = np.array([_GROUP.unpack(r.take(_GROUP.size)) for _ in range(k)], dtype=np.int64).reshape(k, 3)
    bounds = r.floats(k, 2)
    losses = r.floats(k, 2)
    contexts = r.floats(k, length, d_w)
    context = r.floats(length, d_w)
    bg_contexts = bg_context = None
    if flags & 1:
        bg_contexts = r.floats(k, length, d_w)
        bg_context = r.floats(length, d_w)
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after checkpoint payload")
    return Checkpoint(text, seeds, bounds, contexts, context, d_e, losses, counts, bg_contexts, bg_context)
