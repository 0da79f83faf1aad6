"""Iterative restructuring of token boundaries and embeddings.

Each step, for every sequence:

1. alignment scores: coherence of each token with its +-w token window;
2. merge probabilities (adjacent cosine) and split probabilities (entropy);
3. boundary scores move by ``gamma * (delta_i + P(i) - 1/2)`` where
   ``delta_i`` is the local coherence gain of having a boundary at ``i``;
4. scores are thresholded at 1/2 into the new segmentation;
5. embeddings take a geodesic step along ``lam * grad C`` (averaged per form),
   pass the residual gate, and are renormalized.

All heavy lifting is vectorized over the flattened token stream of the whole
corpus; per-sequence entry points slice the same machinery.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .boundary import (
    BoundaryModel,
    SegConstraints,
    Segmentation,
    logistic,
    optimal_segmentation,
)
from .errors import DegenerateMidpoint
from .manifold import (
    CoherenceConfig,
    EmbeddingTable,
    GateParams,
    batch_coherence,
    batch_geodesic_step,
    init_embedding,
    normalize,
    residual_gate,
    riemannian_project,
)

_CHUNK = 4096


@dataclass(frozen=True)
class HyperParams:
    lam: float = 1.0
    alpha: float = 0.1
    gamma: float = 0.3
    theta: float = 0.9
    temperature: float = 0.5
    window: int = 3
    merge_slope: float = 4.0
    merge_center: float = 0.5
    split_slope: float = 2.0
    split_center: Optional[float] = None  # None: the boundary model's center
    iterations: int = 20
    seed: int = 0
    descent: bool = True
    alpha_decay: bool = False
    dim: int = 32
    gate: str = "random"  # "random" | "identity"
    gate_scale: float = 0.1

    def __post_init__(self):
        checks = [
            (self.lam >= 0, "lam must be >= 0"),
            (self.alpha > 0, "alpha must be > 0"),
            (self.gamma >= 0, "gamma must be >= 0"),
            (0.0 <= self.theta <= 1.0, "theta must lie in [0, 1]"),
            (self.temperature > 0, "temperature must be > 0"),
            (self.window >= 1, "window must be >= 1"),
            (self.merge_slope > 0, "merge_slope must be > 0"),
            (-1.0 <= self.merge_center <= 1.0, "merge_center must lie in [-1, 1]"),
            (self.split_slope > 0, "split_slope must be > 0"),
            (self.iterations >= 0, "iterations must be >= 0"),
            (0 <= self.seed < 2**64, "seed must be an unsigned 64-bit integer"),
            (self.dim >= 2, "dim must be >= 2"),
            (self.gate in ("random", "identity"), "gate must be 'random' or 'identity'"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @property
    def coherence_cfg(self) -> CoherenceConfig:
        return CoherenceConfig(self.window, self.temperature)

    def step_size(self, t: int) -> float:
        a = self.alpha / math.sqrt(t + 1) if self.alpha_decay else self.alpha
        return a if self.descent else -a


def derive_seed(seed: int, stream: str) -> int:
    """Independent 64-bit seed for a named random stream."""
    h = hashlib.blake2b(f"{stream}:{seed}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass
class StepTrace:
    iteration: int
    token_stability: float
    mean_coherence: float
    alignment_loss: float
    embedding_divergence: float
    grad_mean: float
    grad_var: float
    duration_ms: float
    boundary_variance: float = 0.0

    CSV_COLUMNS = ("iter", "stability", "coherence", "align_loss", "emb_divergence",
                   "grad_mean", "grad_var", "ms")

    def csv_row(self) -> list:
        return [self.iteration, self.token_stability, self.mean_coherence, self.alignment_loss,
                self.embedding_divergence, self.grad_mean, self.grad_var, self.duration_ms]

    def deterministic_fields(self) -> tuple:
        return tuple(self.csv_row()[:-1]) + (self.boundary_variance,)


@dataclass
class MorphoState:
    sequences: list[str]
    scores: list[np.ndarray]
    segmentations: list[Segmentation]
    table: EmbeddingTable
    gate: GateParams
    model: BoundaryModel
    constraints: SegConstraints = field(default_factory=SegConstraints)
    t: int = 0
    # Per-sequence constants derived from the boundary model.
    probs: list[np.ndarray] = field(default_factory=list)
    entropies: list[np.ndarray] = field(default_factory=list)

    def copy(self) -> "MorphoState":
        return replace(self,
                       scores=[s.copy() for s in self.scores],
                       segmentations=list(self.segmentations),
                       table=self.table.copy())

    def tokens(self, k: int) -> list[str]:
        return self.segmentations[k].tokens(self.sequences[k])


# ---------------------------------------------------------------------------
# Flattened token layout


class Layout:
    """Flattened view of all tokens of a state (or of a subset of sequences)."""

    def __init__(self, state: MorphoState, seq_ids: Optional[Sequence[int]] = None):
        self.seq_ids = list(range(len(state.sequences))) if seq_ids is None else list(seq_ids)
        forms: list[str] = []
        starts: list[int] = []
        ends: list[int] = []
        owner: list[int] = []
        first: list[int] = []
        for k in self.seq_ids:
            seq = state.sequences[k]
            first.append(len(forms))
            for a, b in state.segmentations[k].spans():
                forms.append(seq[a:b])
                starts.append(a)
                ends.append(b)
                owner.append(k)
        first.append(len(forms))
        self.forms = forms
        self.starts = np.array(starts, dtype=np.int64)
        self.ends = np.array(ends, dtype=np.int64)
        self.owner = np.array(owner, dtype=np.int64)
        self.first = np.array(first, dtype=np.int64)  # token offset per listed sequence
        counts = np.diff(self.first)
        self.seq_first = np.repeat(self.first[:-1], counts)
        self.seq_last = np.repeat(self.first[1:] - 1, counts)

    def __len__(self) -> int:
        return len(self.forms)

    def ids(self, table: EmbeddingTable) -> np.ndarray:
        return np.array([table.index[f] for f in self.forms], dtype=np.int64)


def ensure_forms(state: MorphoState, forms, seed: int) -> None:
    missing = sorted({f for f in forms if f not in state.table})
    if missing:
        state.table.extend(missing, [init_embedding(f, seed, state.table.dim) for f in missing])


def _context_index(layout: Layout, w: int):
    """(T, 2w) neighbour indices and validity mask; isolated tokens see themselves."""
    T = len(layout)
    k = np.arange(T)
    offsets = np.concatenate([np.arange(-w, 0), np.arange(1, w + 1)])
    idx = k[:, None] + offsets[None, :]
    mask = (idx >= layout.seq_first[:, None]) & (idx <= layout.seq_last[:, None])
    lonely = ~mask.any(axis=1)
    idx = np.clip(idx, 0, max(T - 1, 0))
    if np.any(lonely):
        idx[lonely, 0] = k[lonely]
        mask[lonely, 0] = True
    return idx, mask


def _token_coherence(E_tok: np.ndarray, layout: Layout, cfg: CoherenceConfig):
    if len(layout) == 0:
        return np.zeros(0), np.zeros((0, E_tok.shape[1]))
    idx, mask = _context_index(layout, cfg.window)
    out_c = np.empty(len(layout))
    out_g = np.empty_like(E_tok)
    for lo in range(0, len(layout), _CHUNK):
        hi = min(lo + _CHUNK, len(layout))
        c, g = batch_coherence(E_tok[lo:hi], E_tok[idx[lo:hi]], mask[lo:hi], cfg.temperature)
        out_c[lo:hi] = c
        out_g[lo:hi] = g
    return out_c, out_g


# ---------------------------------------------------------------------------
# Step components


def alignment_scores(state: MorphoState, sequence_index: int, hp: HyperParams = HyperParams()) -> np.ndarray:
    layout = Layout(state, [sequence_index])
    ensure_forms(state, layout.forms, derive_seed(hp.seed, "embed"))
    E = state.table.vectors[layout.ids(state.table)]
    return _token_coherence(E, layout, hp.coherence_cfg)[0]


def _split_probs(state: MorphoState, k: int, hp: HyperParams) -> np.ndarray:
    center = state.model.center if hp.split_center is None else hp.split_center
    if hp.split_center is None and hp.split_slope == state.model.slope:
        return state.probs[k]
    return np.asarray(logistic(hp.split_slope * (state.entropies[k] - center)))


def merge_split_probabilities(state: MorphoState, sequence_index: int, hp: HyperParams = HyperParams()):
    """(merge prob per adjacent token pair, {intra-token position: split prob})."""
    k = sequence_index
    layout = Layout(state, [k])
    ensure_forms(state, layout.forms, derive_seed(hp.seed, "embed"))
    E = state.table.vectors[layout.ids(state.table)]
    cos = np.sum(E[:-1] * E[1:], axis=1)
    p_merge = np.asarray(logistic(hp.merge_slope * (cos - hp.merge_center)))
    ps = _split_probs(state, k, hp)
    bset = set(state.segmentations[k].boundaries)
    p_split = {i: float(ps[i - 1]) for i in range(1, len(state.sequences[k])) if i not in bset}
    return p_merge, p_split


class _Provisional:
    """Embeddings for hypothesised forms, appended after the table rows."""

    def __init__(self, table: EmbeddingTable, seed: int):
        self.table = table
        self.seed = seed
        self.rows: list[np.ndarray] = []
        self.by_form: dict[str, int] = {}
        self.by_pair: dict[tuple[int, int], int] = {}

    def fragment(self, form: str) -> int:
        i = self.table.index.get(form)
        if i is not None:
            return i
        j = self.by_form.get(form)
        if j is None:
            j = self.by_form[form] = len(self.table) + len(self.rows)
            self.rows.append(init_embedding(form, self.seed, self.table.dim))
        return j

    def merge(self, form: str, a: int, b: int, E: np.ndarray) -> int:
        i = self.table.index.get(form)
        if i is not None:
            return i
        j = self.by_pair.get((a, b))
        if j is None:
            j = self.by_pair[(a, b)] = len(self.table) + len(self.rows)
            self.rows.append(midpoint_or_init(form, E[a], E[b], self.seed))
        return j

    def matrix(self) -> np.ndarray:
        if not self.rows:
            return self.table.vectors
        return np.vstack([self.table.vectors, np.array(self.rows)])


def midpoint_or_init(form: str, u: np.ndarray, v: np.ndarray, seed: int) -> np.ndarray:
    m = u + v
    n = np.linalg.norm(m)
    if n < 1e-12:
        # Antipodal constituents have no midpoint.
        return init_embedding(form, seed, u.shape[0])
    return m / n


def _window_mean(values: np.ndarray, layout: Layout, lo_tok: np.ndarray, hi_tok: np.ndarray) -> np.ndarray:
    """Mean of per-token values over token index ranges [lo, hi] clipped to each sequence."""
    cs = np.concatenate([[0.0], np.cumsum(values)])
    return (cs[hi_tok + 1] - cs[lo_tok]) / (hi_tok - lo_tok + 1)


def _local_coherence(E_ext, local_ids, valid, core_lo, core_hi, cfg: CoherenceConfig):
    """Mean coherence of the core slots [core_lo, core_hi] of each local token row."""
    w = cfg.window
    n, width = local_ids.shape
    out = np.empty(n)
    core = np.arange(core_lo, core_hi + 1)
    offs = np.concatenate([np.arange(-w, 0), np.arange(1, w + 1)])
    nb = core[:, None] + offs[None, :]  # (ncore, 2w)
    nb_ok = (nb >= 0) & (nb < width)
    nb = np.clip(nb, 0, width - 1)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        X = E_ext[local_ids[lo:hi]]  # (m, width, d)
        v = valid[lo:hi]
        Xc = X[:, core]  # (m, ncore, d)
        Xn = X[:, nb]  # (m, ncore, 2w, d)
        s = np.einsum("mcd,mckd->mck", Xc, Xn)
        mask = v[:, nb] & nb_ok[None] & v[:, core][:, :, None]
        lonely = ~mask.any(axis=2) & v[:, core]
        # Tokens without neighbours are self-coherent.
        s = np.where(lonely[:, :, None] & (np.arange(2 * w) == 0)[None, None, :], 1.0, s)
        mask = mask | (lonely[:, :, None] & (np.arange(2 * w) == 0)[None, None, :])
        z = np.where(mask, s / cfg.temperature, -np.inf)
        zmax = np.max(z, axis=2, keepdims=True)
        zmax = np.where(np.isfinite(zmax), zmax, 0.0)
        a = np.where(mask, np.exp(z - zmax), 0.0)
        denom = a.sum(axis=2)
        c = np.where(denom > 0, np.sum(a * s, axis=2) / np.where(denom > 0, denom, 1.0), 0.0)
        cv = v[:, core]
        out[lo:hi] = np.sum(np.where(cv, c, 0.0), axis=1) / np.maximum(cv.sum(axis=1), 1)
    return out


def coherence_deltas(state: MorphoState, hp: HyperParams, seq_ids: Optional[Sequence[int]] = None,
                     layout: Optional[Layout] = None, tok_coh: Optional[np.ndarray] = None):
    """Local coherence gain of a boundary at each interior position.

    Returns a list (aligned with ``seq_ids``) of arrays over interior
    positions: C_loc(boundary on) - C_loc(boundary off).
    """
    w = hp.window
    seed = derive_seed(hp.seed, "embed")
    if layout is None:
        layout = Layout(state, seq_ids)
        ensure_forms(state, layout.forms, seed)
    ids = layout.ids(state.table)
    E = state.table.vectors
    if tok_coh is None:
        tok_coh = _token_coherence(E[ids], layout, hp.coherence_cfg)[0]
    prov = _Provisional(state.table, seed)

    # Per interior position: owning token index, whether it is a boundary,
    # and the ids of the hypothesised replacement tokens.
    pos_tok, pos_is_b, alt_a, alt_b, alt_m = [], [], [], [], []
    for j, k in enumerate(layout.seq_ids):
        seq = state.sequences[k]
        t0, t1 = layout.first[j], layout.first[j + 1]
        for t in range(t0, t1):
            a, b = int(layout.starts[t]), int(layout.ends[t])
            for i in range(a + 1, b):
                # Inside token t: the alternative splits it.
                pos_tok.append(t)
                pos_is_b.append(False)
                alt_a.append(prov.fragment(seq[a:i]))
                alt_b.append(prov.fragment(seq[i:b]))
                alt_m.append(-1)
            if t + 1 < t1:
                # Boundary between t and t+1: the alternative merges them.
                pos_tok.append(t)
                pos_is_b.append(True)
                alt_a.append(-1)
                alt_b.append(-1)
                c = int(layout.ends[t + 1])
                alt_m.append(prov.merge(seq[a:c], int(ids[t]), int(ids[t + 1]), E))
    if not pos_tok:
        return [np.zeros(0) for _ in layout.seq_ids]
    pos_tok = np.array(pos_tok)
    is_b = np.array(pos_is_b)
    E_ext = prov.matrix()
    pad = E_ext.shape[0]
    E_ext = np.vstack([E_ext, np.zeros((1, E_ext.shape[1]))])

    first = layout.seq_first[pos_tok]
    last = layout.seq_last[pos_tok]
    # Current-hypothesis local mean is a window mean of the token scores.
    lo_cur = np.where(is_b, np.maximum(pos_tok - w, first), np.maximum(pos_tok - w, first))
    hi_cur = np.where(is_b, np.minimum(pos_tok + 1 + w, last), np.minimum(pos_tok + w, last))
    c_cur = _window_mean(tok_coh, layout, lo_cur, hi_cur)

    # Alternative hypothesis rows: [2w left | middle (1 or 2) | 2w right].
    left_off = np.arange(-2 * w, 0)
    c_alt = np.empty(len(pos_tok))
    for is_boundary in (True, False):
        sel = np.nonzero(is_b == is_boundary)[0]
        if sel.size == 0:
            continue
        t = pos_tok[sel]
        f, l = first[sel], last[sel]
        left = t[:, None] + left_off[None, :]
        right_start = t + (2 if is_boundary else 1)
        right = right_start[:, None] + np.arange(2 * w)[None, :]
        lv = left >= f[:, None]
        rv = right <= l[:, None]
        left_ids = np.where(lv, ids[np.clip(left, 0, len(ids) - 1)], pad)
        right_ids = np.where(rv, ids[np.clip(right, 0, len(ids) - 1)], pad)
        if is_boundary:
            mid = np.array(alt_m)[sel][:, None]
            core_lo, core_hi = w, 2 * w + w
        else:
            mid = np.stack([np.array(alt_a)[sel], np.array(alt_b)[sel]], axis=1)
            core_lo, core_hi = w, 2 * w + 1 + w
        local = np.concatenate([left_ids, mid, right_ids], axis=1)
        valid = np.concatenate([lv, np.ones_like(mid, dtype=bool), rv], axis=1)
        c_alt[sel] = _local_coherence(E_ext, local, valid, core_lo, core_hi, hp.coherence_cfg)

    delta = np.where(is_b, c_cur - c_alt, c_alt - c_cur)
    # Scatter back to interior positions (1..L-1) in order.
    out = []
    m = 0
    for k in layout.seq_ids:
        n = len(state.sequences[k]) - 1
        # Positions were enumerated left to right, so each sequence is a contiguous block.
        out.append(delta[m:m + n])
        m += n
    return out


def update_boundary_scores(state: MorphoState, sequence_index: int, hp: HyperParams = HyperParams()) -> np.ndarray:
    k = sequence_index
    if hp.gamma == 0:
        return state.scores[k].copy()
    delta = coherence_deltas(state, hp, [k])[0]
    return _score_update(state.scores[k], delta, _drive_probs(state, k, hp), hp.gamma)


def _drive_probs(state: MorphoState, k: int, hp: HyperParams) -> np.ndarray:
    """Entropy drive: boundary probability, with the split law inside tokens."""
    p = state.probs[k]
    ps = _split_probs(state, k, hp)
    if ps is p:
        return p
    inside = state.segmentations[k].indicator() == 0
    return np.where(inside, ps, p)


def _score_update(b, delta, p, gamma):
    return np.clip(b + gamma * (delta + p - 0.5), 0.0, 1.0)


def forced_cuts(boundaries: Sequence[int], length: int, max_token_len: int) -> list[int]:
    """Extra cuts that break runs longer than ``max_token_len``."""
    extra = []
    cuts = [0, *boundaries, length]
    for a, b in zip(cuts[:-1], cuts[1:]):
        p = a + max_token_len
        while p < b:
            extra.append(p)
            p += max_token_len
    return extra


def apply_threshold(scores, max_token_len: int = 8) -> Segmentation:
    scores = np.asarray(scores, dtype=float)
    length = scores.shape[0] + 1
    b = [i + 1 for i in np.nonzero(scores >= 0.5)[0].tolist()]
    b = sorted(set(b) | set(forced_cuts(b, length, max_token_len)))
    return Segmentation(length, tuple(b))


def _threshold_in_place(scores: np.ndarray, max_token_len: int) -> Segmentation:
    """Threshold and lift forced cuts to 1/2 so the scores keep implying the segmentation."""
    length = scores.shape[0] + 1
    b = [i + 1 for i in np.nonzero(scores >= 0.5)[0].tolist()]
    extra = forced_cuts(b, length, max_token_len)
    for p in extra:
        scores[p - 1] = 0.5
    return Segmentation(length, tuple(sorted(set(b) | set(extra))))


def _new_form_vectors(state: MorphoState, old_segs, seed: int) -> None:
    """Embed forms first seen this iteration: merge midpoint or hash init."""
    for k, seq in enumerate(state.sequences):
        old = old_segs[k]
        new = state.segmentations[k]
        if old is new:
            continue
        old_spans = old.spans()
        old_starts = {a: j for j, (a, _) in enumerate(old_spans)}
        old_ends = {b: j for j, (_, b) in enumerate(old_spans)}
        for a, b in new.spans():
            form = seq[a:b]
            if form in state.table:
                continue
            ja, jb = old_starts.get(a), old_ends.get(b)
            vec = None
            if ja is not None and jb is not None and jb > ja:
                parts = [state.table.get(seq[x:y]) for x, y in old_spans[ja:jb + 1]]
                if all(p is not None for p in parts):
                    m = np.sum(parts, axis=0)
                    n = np.linalg.norm(m)
                    if n >= 1e-12:
                        vec = m / n
            if vec is None:
                vec = init_embedding(form, seed, state.table.dim)
            state.table.add(form, vec)


def update_embeddings(state: MorphoState, hp: HyperParams = HyperParams(), layout: Optional[Layout] = None,
                      stats: Optional[dict] = None) -> EmbeddingTable:
    """New embedding table after one geodesic + gate update of every live form."""
    seed = derive_seed(hp.seed, "embed")
    if layout is None:
        layout = Layout(state)
        ensure_forms(state, layout.forms, seed)
    table = state.table
    ids = layout.ids(table)
    E = table.vectors
    live, inv = np.unique(ids, return_inverse=True)
    if hp.lam == 0:
        drive = np.zeros((live.size, table.dim))
    else:
        _, grad = _token_coherence(E[ids], layout, hp.coherence_cfg)
        # Canonical accumulation order: tokens in corpus order per form.
        drive = np.zeros((live.size, table.dim))
        np.add.at(drive, inv, grad)
        drive *= hp.lam / np.bincount(inv, minlength=live.size)[:, None]
    base = E[live]
    tangent = riemannian_project(base, drive)
    alpha = hp.step_size(state.t)
    stepped = batch_geodesic_step(base, tangent, alpha)
    gated = normalize(residual_gate(stepped, state.gate))
    if stats is not None:
        arc = np.abs(alpha) * np.linalg.norm(tangent, axis=1)
        stats["grad_mean"] = float(arc.mean()) if arc.size else 0.0
        stats["grad_var"] = float(arc.var()) if arc.size else 0.0
        disp = gated - base
        stats["align_loss"] = float(np.mean(np.sum((disp - tangent) ** 2, axis=1))) if arc.size else 0.0
    order = np.sort(live)
    new = EmbeddingTable(table.dim, [table.forms[i] for i in order], gated[np.searchsorted(live, order)])
    return new


# ---------------------------------------------------------------------------
# Orchestration


def boundary_variance(state: MorphoState) -> float:
    """Mean Bernoulli variance b(1-b) of the relaxed boundary indicators."""
    num = sum(float(np.sum(s * (1 - s))) for s in state.scores)
    den = sum(s.size for s in state.scores)
    return num / den if den else 0.0


def pooled_stability(old: Sequence[Segmentation], new: Sequence[Segmentation]) -> float:
    inter = total = 0
    for a, b in zip(old, new):
        sa, sb = set(a.boundaries), set(b.boundaries)
        inter += len(sa & sb)
        total += len(sa) + len(sb)
    return 0.0 if total == 0 else 1.0 - 2.0 * inter / total


def _mean_divergence(old: EmbeddingTable, new: EmbeddingTable) -> float:
    shared = [f for f in new.forms if f in old.index]
    if not shared:
        return 1.0
    A = old.vectors[[old.index[f] for f in shared]]
    B = new.vectors[[new.index[f] for f in shared]]
    cos = np.clip(np.sum(A * B, axis=1), -1.0, 1.0)
    return float(np.mean(np.arccos(cos)) / np.pi)


def morphogenesis_step(state: MorphoState, hp: HyperParams, freeze_segmentation: bool = False,
                       freeze_embeddings: bool = False) -> tuple[MorphoState, StepTrace]:
    t0 = time.perf_counter()
    seed = derive_seed(hp.seed, "embed")
    new = state.copy()
    old_segs = list(state.segmentations)
    old_table = state.table

    if not freeze_segmentation and hp.gamma != 0:
        layout = Layout(new)
        ensure_forms(new, layout.forms, seed)
        deltas = coherence_deltas(new, hp, layout=layout)
        for k in range(len(new.sequences)):
            new.scores[k] = _score_update(new.scores[k], deltas[k], _drive_probs(new, k, hp), hp.gamma)
            seg = _threshold_in_place(new.scores[k], new.constraints.max_token_len)
            new.segmentations[k] = old_segs[k] if seg == old_segs[k] else seg
        _new_form_vectors(new, old_segs, seed)

    stats = {"grad_mean": 0.0, "grad_var": 0.0, "align_loss": 0.0}
    layout = Layout(new)
    ensure_forms(new, layout.forms, seed)
    if not freeze_embeddings:
        new.table = update_embeddings(new, hp, layout, stats)
    else:
        live = set(layout.forms)
        if len(live) != len(new.table):
            new.table = new.table.restrict(live)
    coh = _token_coherence(new.table.vectors[layout.ids(new.table)], layout, hp.coherence_cfg)[0]
    new.t = state.t + 1
    trace = StepTrace(
        iteration=new.t,
        token_stability=pooled_stability(old_segs, new.segmentations),
        mean_coherence=float(coh.mean()) if coh.size else 0.0,
        alignment_loss=stats["align_loss"],
        embedding_divergence=_mean_divergence(old_table, new.table),
        grad_mean=stats["grad_mean"],
        grad_var=stats["grad_var"],
        duration_ms=(time.perf_counter() - t0) * 1000.0,
        boundary_variance=boundary_variance(new),
    )
    return new, trace


def init_state(corpus, model: BoundaryModel, hp: HyperParams = HyperParams(),
               constraints: SegConstraints = SegConstraints()) -> MorphoState:
    """Likelihood-optimal initial segmentation, with scores nudged so thresholding reproduces it."""
    sequences = list(getattr(corpus, "sequences", corpus))
    probs, ents, scores, segs = [], [], [], []
    below = np.nextafter(0.5, 0.0)
    for seq in sequences:
        p = model.probabilities(seq)
        h = np.array([model.mean_entropy(seq, i) for i in range(1, len(seq))], dtype=float)
        seg = optimal_segmentation(p, seq, constraints)
        on = seg.indicator().astype(bool)
        b = p.copy()
        b[on & (b < 0.5)] = 0.5
        b[~on & (b >= 0.5)] = below
        probs.append(p)
        ents.append(h)
        scores.append(b)
        segs.append(seg)
    gate = (GateParams.random(hp.dim, derive_seed(hp.seed, "gate"), hp.theta, hp.gate_scale)
            if hp.gate == "random" else GateParams.identity(hp.dim, hp.theta))
    state = MorphoState(sequences, scores, segs, EmbeddingTable(hp.dim), gate, model,
                        constraints, 0, probs, ents)
    forms = [f for k in range(len(sequences)) for f in state.tokens(k)]
    ensure_forms(state, dict.fromkeys(forms), derive_seed(hp.seed, "embed"))
    state.table = state.table.restrict(forms)
    return state


def run(corpus, model: BoundaryModel, hp: HyperParams = HyperParams(),
        constraints: SegConstraints = SegConstraints(), freeze_segmentation: bool = False,
        freeze_embeddings: bool = False, state: Optional[MorphoState] = None,
        keep_history: bool = False):
    """Run ``hp.iterations`` steps; returns (final state, traces[, history])."""
    if state is None:
        state = init_state(corpus, model, hp, constraints)
    traces = []
    history = [state] if keep_history else None
    for _ in range(hp.iterations):
        state, tr = morphogenesis_step(state, hp, freeze_segmentation, freeze_embeddings)
        traces.append(tr)
        if keep_history:
            history.append(state)
    if keep_history:
        return state, traces, history
    return state, traces
