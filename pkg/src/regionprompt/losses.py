"""Cosine-softmax region classification objectives.

Scores are ``softmax(cos(f, t_c) / tau)`` over a class set. Three negative
terms are supported: the soft background loss (pull every class probability
towards ``1/|C|``), a learnable background embedding competing with the
classes, or no negative term at all.

:func:`objective_grad` returns a batch objective together with its gradient
with respect to the class embeddings (and the background embedding), which
the trainer feeds into the encoder's backward pass.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DataError

EPS = 1e-12
_NEG_LOG_EPS = -math.log(EPS)
# cosines reported by class_probs are rounded to multiples of 2**-32; see class_probs
COS_GRID = 2.0 ** 32

SOFT_BG = "soft_bg"
LEARNABLE_BG = "learnable_bg"
NO_BG = "no_bg"
BG_MODES = (SOFT_BG, LEARNABLE_BG, NO_BG)


def _unit_rows(f, what="region embedding") -> np.ndarray:
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    norms = np.linalg.norm(f, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DataError(f"zero-norm {what}: cosine similarity undefined")
    return f / norms


def cosine_matrix(f, emb) -> np.ndarray:
    """``(n, C)`` cosine similarities between region rows and embedding rows."""
    return _unit_rows(f) @ _unit_rows(emb, "class embedding").T


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def class_probs(f, embeddings, tau: float = 0.01) -> np.ndarray:
    """Temperature-scaled cosine softmax of one region (or rows of regions).

    Cosines are snapped to a 2**-32 grid before the softmax. Rescaling ``f``
    by a non-power-of-two factor perturbs its float direction by about one
    ulp; the snap absorbs that, so ``class_probs(a * f) == class_probs(f)``
    holds bit for bit. The snap moves a cosine by at most 1.2e-10. The
    training objective (:func:`objective_grad`) does not snap, keeping it
    smooth for finite-difference checks.
    """
    single = np.ndim(f) == 1
    e = np.exp(_shifted_logits(f, embeddings, tau))
    p = e / e.sum(axis=-1, keepdims=True)
    return p[0] if single else p


def _shifted_logits(f, embeddings, tau):
    """Snapped ``cos / tau`` with each row's maximum subtracted."""
    _check_tau(tau)
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if emb.shape[0] == 0:
        raise DataError("empty class set")
    cos = np.round(cosine_matrix(f, emb) * COS_GRID) / COS_GRID
    z = cos / tau
    return z - z.max(axis=-1, keepdims=True)


def _check_tau(tau):
    if not (tau > 0.0 and math.isfinite(tau)):
        raise ConfigError(f"temperature must be positive and finite, got {tau}")


def _label_index(label, class_ids) -> int:
    if class_ids is None:
        return int(label)
    try:
        return list(class_ids).index(label)
    except ValueError:
        raise DataError(f"label {label!r} is not a base class") from None


def positive_loss(f, label, embeddings, tau: float = 0.01, class_ids=None) -> float:
    """Cross-entropy ``-log p_c`` of a positive region; ``label`` is an index
    into ``embeddings`` unless ``class_ids`` is given."""
    c = _label_index(label, class_ids)
    p = class_probs(f, embeddings, tau)
    if not 0 <= c < p.shape[-1]:
        raise DataError(f"label index {c} out of range")
    return float(-math.log(max(p[c], EPS)))


def soft_bg_loss(f, embeddings, tau: float = 0.01) -> float:
    """Mean over base classes of ``-log p_c``; minimal (``ln |C|``) at uniform scores.

    Evaluated as ``lse(z) - mean(z)`` on max-shifted logits, which gives
    exactly ``log(|C|)`` when all scores tie. Rows where some ``p_c`` falls
    below the clamp fall back to the clamped per-class form.
    """
    z = _shifted_logits(f, embeddings, tau)[0]
    if z.shape[0] < 2:
        raise DataError("soft background loss needs at least two base classes")
    lse = math.log(float(np.sum(np.exp(z))))
    nll = lse - z
    if np.all(nll < _NEG_LOG_EPS):
        return float(lse - np.mean(z))
    return float(np.mean(np.minimum(nll, _NEG_LOG_EPS)))


def learnable_bg_prob(f, embeddings, t_bg, tau: float = 0.01) -> float:
    emb = np.vstack([np.atleast_2d(embeddings), np.atleast_2d(t_bg)])
    return float(class_probs(f, emb, tau)[-1])


def learnable_bg_loss(p_bg: float) -> float:
    return float(-math.log(max(p_bg, EPS)))


def group_loss(
    pos_f,
    pos_labels,
    neg_f,
    embeddings,
    mode: str = SOFT_BG,
    tau: float = 0.01,
    t_bg=None,
) -> float:
    """Mean negative term plus mean positive term over one context group.

    ``pos_labels`` index rows of ``embeddings``. In ``no_bg`` mode the
    negatives are ignored.
    """
    pos_f = np.atleast_2d(np.asarray(pos_f, dtype=np.float64))
    if pos_f.shape[0] == 0 or pos_f.size == 0:
        raise DataError("context group has no positives")
    loss, _, _ = objective_grad(pos_f, pos_labels, neg_f, embeddings, mode, tau, t_bg)
    return loss


def _pos_terms(logits, labels):
    """Clamped ``-log p_label`` per row and ``d/dlogits`` of their sum."""
    logp = _log_softmax(logits)
    rows = np.arange(logits.shape[0])
    nll = -logp[rows, labels]
    active = nll < _NEG_LOG_EPS
    g = np.exp(logp)
    g[rows, labels] -= 1.0
    g[~active] = 0.0
    return np.minimum(nll, _NEG_LOG_EPS), g


def objective_grad(
    pos_f,
    pos_labels,
    neg_f,
    embeddings,
    mode: str = SOFT_BG,
    tau: float = 0.01,
    t_bg=None,
):
    """Batch objective and its gradient w.r.t. class and background embeddings.

    Returns ``(loss, d_embeddings, d_t_bg)``; ``d_t_bg`` is ``None`` unless
    ``mode == "learnable_bg"``. Empty positive or negative sets simply drop
    their term. Embedding rows are assumed unit-norm.
    """
    if mode not in BG_MODES:
        raise ConfigError(f"unknown background mode {mode!r}")
    _check_tau(tau)
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    n_cls = emb.shape[0]
    d_emb = np.zeros_like(emb)
    d_bg = None
    loss = 0.0

    pos_f = np.asarray(pos_f, dtype=np.float64).reshape(-1, emb.shape[1])
    if pos_f.shape[0]:
        labels = np.asarray(pos_labels, dtype=np.int64)
        fh = _unit_rows(pos_f)
        terms, g = _pos_terms(fh @ emb.T / tau, labels)
        loss += _ordered_mean(terms)
        d_emb += (g / (tau * pos_f.shape[0])).T @ fh

    neg_f = np.asarray(neg_f if neg_f is not None else [], dtype=np.float64)
    neg_f = neg_f.reshape(-1, emb.shape[1])
    if mode != NO_BG and neg_f.shape[0]:
        fh = _unit_rows(neg_f)
        m = neg_f.shape[0]
        if mode == SOFT_BG:
            if n_cls < 2:
                raise DataError("soft background loss needs at least two base classes")
            logp = _log_softmax(fh @ emb.T / tau)
            nll = -logp
            active = nll < _NEG_LOG_EPS
            loss += _ordered_mean(np.mean(np.minimum(nll, _NEG_LOG_EPS), axis=1))
            # d/dz_j of (1/C) sum_c active_c * (lse - z_c)
            p = np.exp(logp)
            g = p * active.sum(axis=1, keepdims=True) / n_cls - active / n_cls
            d_emb += (g / (tau * m)).T @ fh
        else:
            if t_bg is None:
                raise ConfigError("learnable_bg mode needs a background embedding")
            t_bg = np.asarray(t_bg, dtype=np.float64)
            full = np.vstack([emb, t_bg[None]])
            terms, g = _pos_terms(fh @ full.T / tau, np.full(m, n_cls))
            loss += _ordered_mean(terms)
            d_full = (g / (tau * m)).T @ fh
            d_emb += d_full[:n_cls]
            d_bg = d_full[n_cls]
    if mode == LEARNABLE_BG and d_bg is None:
        d_bg = np.zeros(emb.shape[1])
    return float(loss), d_emb, d_bg


def _ordered_mean(x: np.ndarray) -> float:
    # sequential summation in input order for bit-reproducibility
    total = 0.0
    for v in x.tolist():
        total += v
    return total / len(x)


def score_entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -np.sum(p * np.log(np.maximum(p, EPS)), axis=-1)
