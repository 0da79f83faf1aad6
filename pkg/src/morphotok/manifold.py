"""Token embeddings on the unit sphere S^(d-1).

Coherence of an embedding ``e`` against context vectors ``u_j`` is the
attention-weighted mean cosine ``C = sum_j a_j <e, u_j>`` with
``a = softmax(<e, u_j> / tau)``. Updates move along great circles
(exponential map) and pass through the residual gate
``W1 tanh(W2 e + b) + theta e`` before renormalization.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    DegenerateMidpoint,
    DimensionMismatch,
    EmptyContext,
    LengthMismatch,
    NonTangentInput,
)

NORM_TOL = 1e-9
TANGENT_TOL = 1e-9
_ZERO_STEP = 1e-12
# Vectors already this close to unit norm are left bit-identical by normalize().
_RENORM_SKIP = 4 * np.finfo(float).eps


@dataclass(frozen=True)
class CoherenceConfig:
    window: int = 3
    temperature: float = 0.5

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def normalize(v: np.ndarray) -> np.ndarray:
    """Scale rows to unit length; rows already unit length are returned untouched."""
    v = np.asarray(v, dtype=float)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    keep = np.abs(norms - 1.0) <= _RENORM_SKIP
    return np.where(keep, v, v / np.where(norms == 0, 1.0, norms))


def _form_seed(token_form: str, seed: int, nonce: int) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(token_form.encode("utf-8"))
    h.update(int(seed).to_bytes(8, "little", signed=False))
    h.update(nonce.to_bytes(4, "little"))
    return int.from_bytes(h.digest(), "little")


@lru_cache(maxsize=1 << 16)
def _init_cached(token_form: str, seed: int, d: int) -> bytes:
    nonce = 0
    while True:
        v = np.random.default_rng(_form_seed(token_form, seed, nonce)).standard_normal(d)
        n = np.linalg.norm(v)
        if n > 0:
            return (v / n).tobytes()
        nonce += 1


def init_embedding(token_form: str, seed: int = 0, d: int = 32) -> np.ndarray:
    """Deterministic unit vector for ``token_form``; identical across runs and platforms."""
    if d < 2:
        raise ValueError("dimension must be >= 2")
    return np.frombuffer(_init_cached(token_form, int(seed), int(d)), dtype=float).copy()


def _softmax(x, axis=-1, mask=None):
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    z = np.exp(x - m)
    if mask is not None:
        z = np.where(mask, z, 0.0)
    return z / np.sum(z, axis=axis, keepdims=True)


def _check_context(e, context):
    e = np.asarray(e, dtype=float)
    ctx = np.asarray(context, dtype=float)
    if ctx.size == 0:
        raise EmptyContext("coherence needs at least one context vector")
    ctx = ctx.reshape(-1, ctx.shape[-1])
    if ctx.shape[1] != e.shape[0]:
        raise DimensionMismatch(f"context dim {ctx.shape[1]} != embedding dim {e.shape[0]}")
    return e, ctx


def coherence(e, context, cfg: CoherenceConfig = CoherenceConfig()) -> float:
    e, ctx = _check_context(e, context)
    s = ctx @ e
    a = _softmax(s / cfg.temperature)
    return float(a @ s)


def coherence_gradient(e, context, cfg: CoherenceConfig = CoherenceConfig()) -> np.ndarray:
    """Euclidean gradient of :func:`coherence` with respect to ``e``."""
    e, ctx = _check_context(e, context)
    s = ctx @ e
    a = _softmax(s / cfg.temperature)
    c = a @ s
    mean = a @ ctx
    # d/de sum a_j s_j = sum a_j u_j + (1/tau) sum a_j (s_j - C) u_j
    return mean + ((a * (s - c)) @ ctx) / cfg.temperature


def batch_coherence(e, ctx, mask, temperature):
    """Vectorized coherence and gradient.

    ``e``: (n, d); ``ctx``: (n, k, d); ``mask``: (n, k) with at least one True
    per row. Returns (C (n,), grad (n, d)).
    """
    s = np.einsum("nkd,nd->nk", ctx, e)
    a = _softmax(s / temperature, mask=mask)
    c = np.sum(a * s, axis=1)
    w = a + a * (s - c[:, None]) / temperature
    grad = np.einsum("nk,nkd->nd", w, ctx)
    return c, grad


def riemannian_project(e, g) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    g = np.asarray(g, dtype=float)
    return g - np.sum(g * e, axis=-1, keepdims=True) * e


def geodesic_step(e, tangent, alpha: float) -> np.ndarray:
    """Exponential map: walk ``alpha * |tangent|`` radians along the great circle."""
    e = np.asarray(e, dtype=float)
    tangent = np.asarray(tangent, dtype=float)
    norm = float(np.linalg.norm(tangent))
    if norm < _ZERO_STEP:
        return e.copy()
    if abs(float(tangent @ e)) > TANGENT_TOL * max(1.0, norm):
        raise NonTangentInput("tangent vector is not orthogonal to the base point")
    s = alpha * norm
    return np.cos(s) * e + np.sin(s) * (tangent / norm)


def batch_geodesic_step(E, T, alpha):
    """Row-wise :func:`geodesic_step` without the tangency check."""
    norms = np.linalg.norm(T, axis=1)
    moving = norms >= _ZERO_STEP
    out = E.copy()
    if np.any(moving):
        s = alpha * norms[moving]
        out[moving] = (np.cos(s)[:, None] * E[moving]
                       + np.sin(s)[:, None] * (T[moving] / norms[moving, None]))
    return out


def sphere_midpoint(vectors) -> np.ndarray:
    v = np.asarray(vectors, dtype=float)
    m = v.sum(axis=0)
    n = np.linalg.norm(m)
    if n < 1e-12:
        raise DegenerateMidpoint("constituents cancel; midpoint undefined")
    return normalize(m / n)


@dataclass
class GateParams:
    W1: np.ndarray
    W2: np.ndarray
    b: np.ndarray
    theta: float = 0.9

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=float)
        self.W2 = np.asarray(self.W2, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        d = self.b.shape[0]
        if self.W1.shape != (d, d) or self.W2.shape != (d, d):
            raise DimensionMismatch("gate matrices must be d x d with d = len(b)")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if not (np.all(np.isfinite(self.W1)) and np.all(np.isfinite(self.W2))
                and np.all(np.isfinite(self.b))):
            raise ValueError("gate parameters must be finite")

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    @classmethod
    def identity(cls, d: int, theta: float = 1.0) -> "GateParams":
        """W1 = 0: the gate reduces to ``theta * e``."""
        return cls(np.zeros((d, d)), np.eye(d), np.zeros(d), theta)

    @classmethod
    def random(cls, d: int, seed: int, theta: float = 0.9, scale: float = 0.1) -> "GateParams":
        rng = np.random.default_rng(seed)
        W1 = rng.standard_normal((d, d)) * (scale / np.sqrt(d))
        W2 = rng.standard_normal((d, d)) / np.sqrt(d)
        b = rng.standard_normal(d) * scale
        return cls(W1, W2, b, theta)

    def to_json(self) -> dict:
        return {"W1": self.W1.tolist(), "W2": self.W2.tolist(), "b": self.b.tolist(),
                "theta": self.theta}

    @classmethod
    def from_json(cls, obj: Mapping) -> "GateParams":
        return cls(np.array(obj["W1"]), np.array(obj["W2"]), np.array(obj["b"]),
                   float(obj["theta"]))


def residual_gate(e, p: GateParams) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    if e.shape[-1] != p.dim:
        raise DimensionMismatch(f"embedding dim {e.shape[-1]} != gate dim {p.dim}")
    return np.tanh(e @ p.W2.T + p.b) @ p.W1.T + p.theta * e


def alignment_loss(displacements, coherence_grads, lam: float = 1.0) -> float:
    """Mean squared mismatch ``|delta_e - lam * grad|^2`` over tokens."""
    D = np.asarray(displacements, dtype=float)
    G = np.asarray(coherence_grads, dtype=float)
    if D.shape != G.shape:
        raise LengthMismatch("displacements and gradients must align")
    if D.shape[0] == 0:
        raise LengthMismatch("need at least one token")
    return float(np.mean(np.sum((D - lam * G) ** 2, axis=-1)))


class EmbeddingTable:
    """Token form -> unit vector, stored as rows of a dense matrix."""

    def __init__(self, dim: int, forms: Sequence[str] = (), vectors=None):
        self.dim = int(dim)
        self.forms: list[str] = list(forms)
        self.index = {f: i for i, f in enumerate(self.forms)}
        if vectors is None:
            vectors = np.zeros((len(self.forms), self.dim))
        self.vectors = np.asarray(vectors, dtype=float).reshape(len(self.forms), self.dim)

    def __len__(self) -> int:
        return len(self.forms)

    def __contains__(self, form) -> bool:
        return form in self.index

    def __getitem__(self, form: str) -> np.ndarray:
        return self.vectors[self.index[form]]

    def get(self, form: str, default=None):
        i = self.index.get(form)
        return default if i is None else self.vectors[i]

    def add(self, form: str, vector) -> int:
        if form in self.index:
            raise KeyError(f"form {form!r} already present")
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (self.dim,):
            raise DimensionMismatch("vector dimension mismatch")
        self.index[form] = len(self.forms)
        self.forms.append(form)
        self.vectors = np.vstack([self.vectors, vector[None, :]])
        return self.index[form]

    def extend(self, forms: Sequence[str], vectors) -> None:
        vectors = np.asarray(vectors, dtype=float).reshape(len(forms), self.dim)
        for f in forms:
            if f in self.index:
                raise KeyError(f"form {f!r} already present")
            self.index[f] = len(self.forms)
            self.forms.append(f)
        self.vectors = np.vstack([self.vectors, vectors])

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.dim, self.forms, self.vectors.copy())

    def restrict(self, keep: Iterable[str]) -> "EmbeddingTable":
        keep = set(keep)
        forms = [f for f in self.forms if f in keep]
        idx = [self.index[f] for f in forms]
        return EmbeddingTable(self.dim, forms, self.vectors[idx])

    def check_unit(self, tol: float = NORM_TOL) -> bool:
        if not len(self):
            return True
        return bool(np.all(np.abs(np.linalg.norm(self.vectors, axis=1) - 1.0) <= tol))

    def equals(self, other: "EmbeddingTable") -> bool:
        return (self.dim == other.dim and self.forms == other.forms
                and np.array_equal(self.vectors, other.vectors))

    def to_json(self) -> dict:
        return {"dim": self.dim,
                "entries": {f: self.vectors[i].tolist() for i, f in enumerate(self.forms)}}

    @classmethod
    def from_json(cls, obj: Mapping) -> "EmbeddingTable":
        entries = obj["entries"]
        forms = list(entries)
        return cls(int(obj["dim"]), forms,
                   np.array([entries[f] for f in forms], dtype=float).reshape(len(forms), int(obj["dim"])))
