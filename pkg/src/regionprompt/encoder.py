"""A small frozen text encoder with a hand-written backward pass.

The encoder maps a sequence of ``n`` token vectors of width ``D_w`` to a unit
vector of width ``D_e``::

    h0 = x + pos[:n]
    h1 = h0 + softmax(h0 Wq (h0 Wk)^T / sqrt(D_w)) (h0 Wv) Wo
    h2 = h1 + tanh(h1 W1) W2
    y  = mean_n(h2) Wp
    t  = y / |y|

All weights are drawn once from a seeded generator and never change. Every
stage is smooth, so the map can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .prompt import (
    BackgroundContext,
    ClassTokenTable,
    PromptContext,
    TokenPosition,
    assemble_many,
    read_vector_table,
    write_vector_table,
)


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class _Cache:
    h0: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    h1: np.ndarray
    u: np.ndarray
    y: np.ndarray
    t: np.ndarray


class FrozenTextEncoder:
    """Seeded stand-in for a pretrained text encoder.

    Weight scheme (all Gaussian, zero mean, drawn in this order): positional
    table std ``0.1/sqrt(D_w)``; ``Wq, Wk, Wv, Wo, W1`` std ``1/sqrt(D_w)``;
    ``W2`` std ``1/sqrt(D_ff)``; ``Wp`` std ``1/sqrt(D_w)``; ``D_ff = 2 D_w``.
    The small positional scale keeps the class-independent part of the
    pooled output from swamping the class signal.
    """

    def __init__(self, seed: int = 0, d_w: int = 32, d_e: int = 32, max_len: int = 17):
        if min(d_w, d_e, max_len) < 1:
            raise ConfigError("encoder dimensions must be >= 1")
        self.seed = int(seed)
        self.d_w = int(d_w)
        self.d_e = int(d_e)
        self.max_len = int(max_len)
        self.d_ff = 2 * self.d_w
        rng = np.random.default_rng([self.seed, 0x7E47])
        s = 1.0 / np.sqrt(self.d_w)
        self.pos = _freeze(rng.normal(0.0, 0.1 * s, (self.max_len, self.d_w)))
        self.wq = _freeze(rng.normal(0.0, s, (self.d_w, self.d_w)))
        self.wk = _freeze(rng.normal(0.0, s, (self.d_w, self.d_w)))
        self.wv = _freeze(rng.normal(0.0, s, (self.d_w, self.d_w)))
        self.wo = _freeze(rng.normal(0.0, s, (self.d_w, self.d_w)))
        self.w1 = _freeze(rng.normal(0.0, s, (self.d_w, self.d_ff)))
        self.w2 = _freeze(rng.normal(0.0, 1.0 / np.sqrt(self.d_ff), (self.d_ff, self.d_w)))
        self.wp = _freeze(rng.normal(0.0, s, (self.d_w, self.d_e)))

    def parameters(self) -> dict:
        return {
            "pos": self.pos, "wq": self.wq, "wk": self.wk, "wv": self.wv,
            "wo": self.wo, "w1": self.w1, "w2": self.w2, "wp": self.wp,
        }

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[2] != self.d_w:
            raise DataError(f"expected (..., n, {self.d_w}) input, got {x.shape}")
        if x.shape[1] < 1 or x.shape[1] > self.max_len:
            raise DataError(f"sequence length {x.shape[1]} outside [1, {self.max_len}]")
        return x

    def _forward(self, x: np.ndarray) -> _Cache:
        n = x.shape[1]
        h0 = x + self.pos[:n]
        q, k, v = h0 @ self.wq, h0 @ self.wk, h0 @ self.wv
        s = q @ k.transpose(0, 2, 1) / np.sqrt(self.d_w)
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        attn = e / e.sum(axis=-1, keepdims=True)
        h1 = h0 + (attn @ v) @ self.wo
        u = np.tanh(h1 @ self.w1)
        h2 = h1 + u @ self.w2
        y = h2.mean(axis=1) @ self.wp
        t = y / np.linalg.norm(y, axis=-1, keepdims=True)
        return _Cache(h0, q, k, v, attn, h1, u, y, t)

    def encode_batch(self, x) -> np.ndarray:
        """Encode ``(B, n, D_w)`` sequences into ``(B, D_e)`` unit vectors."""
        return self._forward(self._check(x)).t

    def encode(self, seq) -> np.ndarray:
        """Encode one ``(n, D_w)`` sequence into a unit ``D_e`` vector."""
        seq = np.asarray(seq, dtype=np.float64)
        if seq.ndim != 2:
            raise DataError(f"expected an (n, {self.d_w}) sequence, got {seq.shape}")
        return self.encode_batch(seq[None])[0]

    def encode_with_vjp(self, x):
        """Forward pass plus a closure mapping ``dL/dt`` to ``dL/dx``."""
        x = self._check(x)
        c = self._forward(x)
        return c.t, lambda g: self._backward(c, np.asarray(g, dtype=np.float64))

    def _backward(self, c: _Cache, g: np.ndarray) -> np.ndarray:
        n = c.h0.shape[1]
        ynorm = np.linalg.norm(c.y, axis=-1, keepdims=True)
        dy = (g - c.t * np.sum(c.t * g, axis=-1, keepdims=True)) / ynorm
        dm = dy @ self.wp.T
        dh2 = np.repeat(dm[:, None, :] / n, n, axis=1)
        dg1 = (dh2 @ self.w2.T) * (1.0 - c.u * c.u)
        dh1 = dh2 + dg1 @ self.w1.T
        dz = dh1 @ self.wo.T
        dattn = dz @ c.v.transpose(0, 2, 1)
        dv = c.attn.transpose(0, 2, 1) @ dz
        ds = c.attn * (dattn - np.sum(dattn * c.attn, axis=-1, keepdims=True))
        ds /= np.sqrt(self.d_w)
        dq = ds @ c.k
        dk = ds.transpose(0, 2, 1) @ c.q
        dh0 = dh1 + dq @ self.wq.T + dk @ self.wk.T + dv @ self.wv.T
        return dh0


def build_encoder(seed: int = 0, d_w: int = 32, d_e: int = 32, max_len: int = 17) -> FrozenTextEncoder:
    return FrozenTextEncoder(seed, d_w, d_e, max_len)


def encode_class_set(
    encoder: FrozenTextEncoder,
    context: PromptContext,
    table: ClassTokenTable,
    pos=TokenPosition.END,
    subset=None,
) -> np.ndarray:
    """Class embeddings ``(len(subset), D_e)`` in the requested id order."""
    ids = table.ids if subset is None else list(subset)
    if not ids:
        return np.zeros((0, encoder.d_e))
    seqs = assemble_many(context, table.tokens(ids), pos)
    return encoder.encode_batch(seqs)


def encode_background(encoder: FrozenTextEncoder, bg: BackgroundContext) -> np.ndarray:
    return encoder.encode(bg.vectors)


def write_class_embeddings(path, ids, splits, embeddings) -> None:
    write_vector_table(path, ids, splits, embeddings, header="D_e")


def read_class_embeddings(path):
    """Read an external class-embedding table; returns ``(ids, splits, vectors)``."""
    return read_vector_table(path, header="D_e")
