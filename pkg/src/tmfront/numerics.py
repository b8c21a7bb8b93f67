"""Dense float64 arithmetic plus the attention and normalization primitives.

Tensors are plain ``numpy.ndarray`` objects in float64, row-major. Every public
function checks shapes explicitly; the only implicit broadcast is the affine
pair in :func:`layer_norm`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

# Additive mask value for disallowed attention positions.
MASK_SENTINEL = -1e9
# cosines this close to +-1 are rounding noise on parallel vectors
COSINE_SNAP = 8 * np.finfo(np.float64).eps


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class FullyMaskedRowError(ValueError):
    """Raised when every position of an attention row is masked out."""

    def __init__(self, msg: str = "fully masked attention row"):
        super().__init__(msg)


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def _check_mask(x: np.ndarray, mask) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = as_tensor(mask)
    if mask.shape != x.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match input {x.shape}")
    # Anything at or below half the sentinel counts as masked.
    masked = mask <= MASK_SENTINEL / 2
    if np.any(np.all(masked, axis=-1)):
        raise FullyMaskedRowError()
    return mask


def softmax(x, mask=None) -> np.ndarray:
    """Last-axis softmax with an optional additive mask.

    The row maximum is subtracted before exponentiation, so logits of any
    magnitude are safe.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax needs a non-empty last axis, got {x.shape}")
    mask = _check_mask(x, mask)
    z = x if mask is None else x + mask
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(x) -> np.ndarray:
    x = as_tensor(x)
    z = x - np.max(x, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if d < 1 or gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {d}"
        )
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gamma + beta


def gelu(x) -> np.ndarray:
    # tanh approximation
    x = as_tensor(x)
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def cosine_similarity(u, v) -> float:
    u = as_tensor(u)
    v = as_tensor(v)
    if u.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_similarity needs equal 1-D vectors, got {u.shape}, {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("zero-norm token")
    return float(_snap_cosine(np.dot(u, v) / (nu * nv)))


def _snap_cosine(c):
    """Clip to [-1, 1] and round near-parallel values to exactly +-1.

    Without this, a token and its exact (or power-of-two scaled) duplicate
    score 1 - k*ulp with k varying by pair, and tie-breaking turns into noise.
    """
    c = np.clip(c, -1.0, 1.0)
    return np.where(np.abs(c) >= 1.0 - COSINE_SNAP, np.sign(c), c)


def cosine_similarity_matrix(tokens) -> np.ndarray:
    """All-pairs cosine similarity of the rows of an L x D matrix."""
    t = as_tensor(tokens)
    if t.ndim != 2:
        raise ShapeError(f"expected an L x D matrix, got {t.shape}")
    norms = np.linalg.norm(t, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm token")
    unit = t / norms[:, None]
    sim = np.triu(unit @ unit.T)
    # mirror so sim[i, j] == sim[j, i] bit-exactly; exact ties matter downstream
    sim = sim + np.triu(sim, 1).T
    return _snap_cosine(sim)


def scaled_dot_attention(q, k, v, mask=None) -> np.ndarray:
    """softmax(q k^T / sqrt(D) + mask) v for a single head."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError(f"attention expects 2-D operands, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key/value length mismatch: {k.shape} vs {v.shape}")
    scores = matmul(q, k.T) / math.sqrt(q.shape[1])
    return matmul(softmax(scores, mask), v)


def softmax_jvp(x, d) -> np.ndarray:
    """Jacobian-vector product of the last-axis softmax: p * (d - <p, d>)."""
    p = softmax(x)
    d = as_tensor(d)
    return p * (d - np.sum(p * d, axis=-1, keepdims=True))


def scaled_dot_attention_jvp(q, k, v, dq, dk, dv, mask=None) -> np.ndarray:
    """Forward-mode derivative of :func:`scaled_dot_attention` along (dq, dk, dv)."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    dq, dk, dv = as_tensor(dq), as_tensor(dk), as_tensor(dv)
    scale = 1.0 / math.sqrt(q.shape[1])
    p = softmax(q @ k.T * scale, mask)
    ds = (dq @ k.T + q @ dk.T) * scale
    dp = p * (ds - np.sum(p * ds, axis=-1, keepdims=True))
    return dp @ v + p @ dv


def directional_derivative_check(
    f: Callable[[np.ndarray], float],
    x,
    direction,
    h: float,
    analytic: Callable[[np.ndarray, np.ndarray], float],
) -> tuple[float, float]:
    """Return ``(analytic, numeric)`` directional derivatives of ``f`` at ``x``.

    ``analytic(x, direction)`` supplies the closed form; the numeric value is
    the central difference (f(x + h d) - f(x - h d)) / 2h.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    x = as_tensor(x)
    d = as_tensor(direction)
    if x.shape != d.shape:
        raise ShapeError(f"direction shape {d.shape} does not match point {x.shape}")
    fp = float(f(x + h * d))
    fm = float(f(x - h * d))
    if not (math.isfinite(fp) and math.isfinite(fm)):
        raise ValueError("non-finite function value in derivative check")
    numeric = (fp - fm) / (2.0 * h)
    return float(analytic(x, d)), numeric


@dataclass(frozen=True)
class AttentionWeights:
    """Projection weights for multi-head attention (all width-preserving)."""

    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    n_heads: int = 1

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def identity(cls, d: int, n_heads: int = 1, q_scale: float = 1.0) -> "AttentionWeights":
        eye = np.eye(d)
        zero = np.zeros(d)
        return cls(q_scale * eye, zero, eye, zero, eye, zero, eye, zero, n_heads)

    @classmethod
    def value_identity(cls, d: int, n_heads: int = 1) -> "AttentionWeights":
        """Zero query/key projections (uniform logits), identity value/output."""
        eye = np.eye(d)
        zero = np.zeros(d)
        z = np.zeros((d, d))
        return cls(z, zero, z, zero, eye, zero, eye, zero, n_heads)


def multi_head_attention(q_in, kv_in, w: AttentionWeights, mask=None, v_in=None) -> np.ndarray:
    """Multi-head attention from ``q_in`` (Lq x D) onto ``kv_in`` (Lk x D).

    ``v_in`` overrides the value source when it differs from the key source.
    ``mask`` is an additive Lq x Lk tensor shared by all heads.
    """
    q_in = as_tensor(q_in)
    kv_in = as_tensor(kv_in)
    v_in = kv_in if v_in is None else as_tensor(v_in)
    d = w.d_model
    if q_in.shape[-1] != d or kv_in.shape[-1] != d or v_in.shape != kv_in.shape:
        raise ShapeError(
            f"attention inputs {q_in.shape}, {kv_in.shape}, {v_in.shape} vs width {d}"
        )
    if d % w.n_heads:
        raise ShapeError(f"width {d} not divisible by {w.n_heads} heads")
    lq, lk = q_in.shape[0], kv_in.shape[0]
    hd = d // w.n_heads
    q = (matmul(q_in, w.wq) + w.bq).reshape(lq, w.n_heads, hd).transpose(1, 0, 2)
    k = (matmul(kv_in, w.wk) + w.bk).reshape(lk, w.n_heads, hd).transpose(1, 0, 2)
    v = (matmul(v_in, w.wv) + w.bv).reshape(lk, w.n_heads, hd).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(hd)
    if mask is not None:
        mask = as_tensor(mask)
        if mask.shape != (lq, lk):
            raise ShapeError(f"mask shape {mask.shape} != ({lq}, {lk})")
        mask = np.broadcast_to(mask, scores.shape)
    ctx = softmax(scores, mask) @ v
    ctx = ctx.transpose(1, 0, 2).reshape(lq, d)
    return matmul(ctx, w.wo) + w.bo


def derivative_probes(seed: int = 0, h: float = 1e-5, n: int = 5) -> list[tuple[str, float, float]]:
    """Scalar probes of softmax and attention: ``(name, analytic, numeric)`` triples."""
    rng = np.random.default_rng(seed)
    out = []
    for t in range(n):
        x = rng.normal(size=8)
        d = rng.normal(size=8)
        w = rng.normal(size=8)
        out.append((
            f"softmax[{t}]",
            *directional_derivative_check(
                lambda z, w=w: float(w @ softmax(z)), x, d, h,
                lambda z, dz, w=w: float(w @ softmax_jvp(z, dz)),
            ),
        ))
    for t in range(n):
        q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
        dq, dk, dv = rng.normal(size=q.shape), rng.normal(size=k.shape), rng.normal(size=v.shape)
        w = rng.normal(size=(3, 3))
        packed = np.concatenate([q.ravel(), k.ravel(), v.ravel()])
        dpacked = np.concatenate([dq.ravel(), dk.ravel(), dv.ravel()])

        def unpack(z):
            return z[:12].reshape(3, 4), z[12:32].reshape(5, 4), z[32:].reshape(5, 3)

        def probe(z, w=w):
            return float(np.sum(w * scaled_dot_attention(*unpack(z))))

        def jvp(z, dz, w=w):
            return float(np.sum(w * scaled_dot_attention_jvp(*unpack(z), *unpack(dz))))

        out.append((f"attention[{t}]", *directional_derivative_check(probe, packed, dpacked, h, jvp)))
    return out


def relative_gap(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)
