"""Similarity scoring and selection.

Prompted images and texts go through an embedding backend into an N x M
cosine-similarity matrix; this module owns everything after that point:
ensembling, spatial-relation reweighting, negative-score subtraction, the
argmax selectors, and an exact Hungarian assignment for bipartite matching.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from enum import Enum
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .imagecore import Box


@runtime_checkable
class ScorerBackend(Protocol):
    """Embedding source; vectors must be unit length (within 1e-3)."""

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        ...

    def embed_text(self, text: str) -> np.ndarray:
        ...


@dataclass(frozen=True)
class CaptionSet:
    """Texts to score against, with an optional template prefix."""

    texts: tuple[str, ...]
    template: str = ""

    def __post_init__(self):
        if not self.texts:
            raise ValueError("caption set needs at least one text")
        if any(not t.strip() for t in self.texts):
            raise ValueError("caption texts must be non-empty after trimming")

    def rendered(self) -> list[str]:
        return [self.template + t for t in self.texts]


@dataclass
class NegativeSet:
    """Negative captions and their N x Q similarity scores."""

    texts: list[str]
    scores: np.ndarray  # (N, Q)


def _image_key(img: np.ndarray) -> str:
    meta = f"{img.shape}/{img.dtype}".encode()
    return hashlib.sha256(meta + img.tobytes()).hexdigest()


def similarity_matrix(backend: ScorerBackend, images: Sequence[np.ndarray],
                      captions: CaptionSet) -> np.ndarray:
    """Cosine similarities S[n, m] = <embed(image_n), embed(template + text_m)>.

    Embeddings are computed once per distinct image / rendered text.
    """
    if not images:
        raise ValueError("need at least one image")
    image_vecs: dict[str, np.ndarray] = {}
    rows = []
    for n, img in enumerate(images):
        key = _image_key(img)
        if key not in image_vecs:
            try:
                image_vecs[key] = np.asarray(backend.embed_image(img), dtype=np.float64)
            except Exception as exc:
                raise RuntimeError(f"image embedding failed at index {n}: {exc}") from exc
        rows.append(image_vecs[key])
    text_vecs: dict[str, np.ndarray] = {}
    cols = []
    for m, text in enumerate(captions.rendered()):
        if text not in text_vecs:
            try:
                text_vecs[text] = np.asarray(backend.embed_text(text), dtype=np.float64)
            except Exception as exc:
                raise RuntimeError(f"text embedding failed at index {m}: {exc}") from exc
        cols.append(text_vecs[text])
    return np.stack(rows) @ np.stack(cols).T


def ensemble_scores(matrices: Sequence[np.ndarray], mode: str = "mean") -> np.ndarray:
    """Combine per-prompt score matrices: elementwise mean, optionally after a
    per-text softmax over proposals."""
    if not matrices:
        raise ValueError("need at least one score matrix")
    shape = matrices[0].shape
    if any(m.shape != shape for m in matrices):
        raise ValueError(f"score matrices disagree on shape: {[m.shape for m in matrices]}")
    if mode == "mean":
        stack = np.stack(matrices)
    elif mode == "softmax_mean":
        stack = np.stack([_softmax_over_rows(m) for m in matrices])
    else:
        raise ValueError(f"unknown ensemble mode {mode!r}")
    return stack.mean(axis=0)


def _softmax_over_rows(matrix: np.ndarray) -> np.ndarray:
    shifted = matrix - matrix.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# caption parsing and spatial relations
# ---------------------------------------------------------------------------

class Relation(Enum):
    LEFT = "left"
    RIGHT = "right"
    ABOVE = "above"
    BELOW = "below"
    BIGGER = "bigger"
    SMALLER = "smaller"
    INSIDE = "inside"
    NONE = "none"


@dataclass(frozen=True)
class ParsedCaption:
    head: str
    relation: Relation = Relation.NONE
    anchor: str | None = None
    absolute: bool = False


# Ordered keyword table; the first table entry found in the caption wins.
# Each row: (phrase, relation, needs_anchor). Phrases match on word boundaries.
_KEYWORDS: tuple[tuple[str, Relation, bool], ...] = (
    ("left of", Relation.LEFT, True),
    ("on the left", Relation.LEFT, False),
    ("right of", Relation.RIGHT, True),
    ("on the right", Relation.RIGHT, False),
    ("above", Relation.ABOVE, True),
    ("over", Relation.ABOVE, True),
    ("on top of", Relation.ABOVE, True),
    ("below", Relation.BELOW, True),
    ("under", Relation.BELOW, True),
    ("beneath", Relation.BELOW, True),
    ("bigger than", Relation.BIGGER, True),
    ("larger than", Relation.BIGGER, True),
    ("smaller than", Relation.SMALLER, True),
    ("inside", Relation.INSIDE, True),
    ("in front of", Relation.NONE, False),
    ("behind", Relation.NONE, False),
)


def parse_caption(caption: str) -> ParsedCaption:
    """Keyword-table relation resolver (deliberately simple, not a parser).

    Splits a caption into a head phrase, a spatial relation, and an optional
    anchor phrase. An anchored keyword with nothing after it degrades to the
    absolute form of the relation.
    """
    text = caption.strip()
    if not text:
        raise ValueError("caption must be non-empty")
    lowered = text.lower()
    for phrase, relation, needs_anchor in _KEYWORDS:
        match = re.search(rf"\b{re.escape(phrase)}\b", lowered)
        if match is None:
            continue
        if relation is Relation.NONE:
            return ParsedCaption(head=text, relation=Relation.NONE)
        head = text[:match.start()].strip() or text
        tail = text[match.end():].strip()
        if needs_anchor and tail:
            return ParsedCaption(head=head, relation=relation, anchor=tail, absolute=False)
        return ParsedCaption(head=head, relation=relation, anchor=None, absolute=True)
    return ParsedCaption(head=text, relation=Relation.NONE)


def relation_score(kind: Relation, box_a: Box, other: Box | tuple[int, int],
                   median_area: float | None = None) -> int:
    """Binary geometric predicate between a candidate box and an anchor.

    ``other`` is an anchor box for the anchored form, or the image (H, W)
    for the absolute form; absolute bigger/smaller compare against the
    median proposal area passed by the caller.
    """
    if isinstance(other, Box):
        b = other
        if kind is Relation.LEFT:
            return int(box_a.cx < b.cx)
        if kind is Relation.RIGHT:
            return int(box_a.cx > b.cx)
        if kind is Relation.ABOVE:
            return int(box_a.cy < b.cy)
        if kind is Relation.BELOW:
            return int(box_a.cy > b.cy)
        if kind is Relation.BIGGER:
            return int(box_a.area > b.area)
        if kind is Relation.SMALLER:
            return int(box_a.area < b.area)
        if kind is Relation.INSIDE:
            margin = 0.05 * math.hypot(b.w, b.h)
            return int(box_a.x >= b.x - margin and box_a.y >= b.y - margin
                       and box_a.x + box_a.w <= b.x + b.w + margin
                       and box_a.y + box_a.h <= b.y + b.h + margin)
        return 0
    height, width = other
    if kind is Relation.LEFT:
        return int(box_a.cx < width / 2)
    if kind is Relation.RIGHT:
        return int(box_a.cx > width / 2)
    if kind is Relation.ABOVE:
        return int(box_a.cy < height / 2)
    if kind is Relation.BELOW:
        return int(box_a.cy > height / 2)
    if kind is Relation.BIGGER:
        return int(median_area is not None and box_a.area > median_area)
    if kind is Relation.SMALLER:
        return int(median_area is not None and box_a.area < median_area)
    if kind is Relation.INSIDE:
        margin = 0.05 * math.hypot(width, height)
        return int(box_a.x >= margin and box_a.y >= margin
                   and box_a.x + box_a.w <= width - margin
                   and box_a.y + box_a.h <= height - margin)
    return 0


def apply_relations(scores: np.ndarray, boxes: Sequence[Box],
                    parsed: Sequence[ParsedCaption], head_scores: np.ndarray,
                    anchor_scores: np.ndarray, image_size: tuple[int, int],
                    agg: str = "max") -> np.ndarray:
    """Reweight each text's proposal scores by its parsed spatial relation.

    For an absolute relation the head score is gated by the candidate's own
    geometry; for an anchored relation it is weighted by the best (``max``)
    or total (``sum``) anchor evidence over the other proposals. Texts with
    no relation, and texts whose relation no proposal pair satisfies, keep
    their head scores untouched.
    """
    if agg not in ("max", "sum"):
        raise ValueError(f"relation aggregation must be 'max' or 'sum', got {agg!r}")
    n, m = scores.shape
    if len(parsed) != m or head_scores.shape != (n, m) or anchor_scores.shape != (n, m):
        raise ValueError("parsed captions and score blocks must all agree with S's shape")
    out = scores.astype(np.float64).copy()
    median_area = float(np.median([b.area for b in boxes])) if boxes else None
    for col, cap in enumerate(parsed):
        if cap.relation is Relation.NONE:
            continue
        head = head_scores[:, col]
        if cap.absolute:
            gates = np.array([relation_score(cap.relation, b, image_size, median_area)
                              for b in boxes], dtype=np.float64)
            if not gates.any():
                out[:, col] = head
                continue
            out[:, col] = head * gates
            continue
        if n < 2:
            out[:, col] = head
            continue
        rel = np.array([[relation_score(cap.relation, boxes[i], boxes[j]) if i != j else 0
                         for j in range(n)] for i in range(n)], dtype=np.float64)
        if not rel.any():
            out[:, col] = head
            continue
        anchor = anchor_scores[:, col]
        weighted = rel * anchor[None, :]
        if agg == "max":
            np.fill_diagonal(weighted, -np.inf)  # the max runs over the other proposals only
            support = weighted.max(axis=1)
        else:
            support = weighted.sum(axis=1)
        out[:, col] = head * support
    return out


def subtract_negatives(scores: np.ndarray, neg: NegativeSet) -> np.ndarray:
    """Penalize each proposal by its mean similarity to the negative captions."""
    s = np.asarray(scores, dtype=np.float64)
    q = neg.scores.shape[1] if neg.scores.ndim == 2 else 0
    if q == 0:
        return s.copy()
    if neg.scores.shape[0] != s.shape[0]:
        raise ValueError(
            f"negative scores have {neg.scores.shape[0]} rows, expected {s.shape[0]}")
    return s - neg.scores.mean(axis=1, keepdims=True)


def select_region(scores: np.ndarray) -> list[int]:
    """Per text, the best proposal index (lowest index on ties)."""
    return [int(i) for i in np.argmax(scores, axis=0)]


def select_labels(scores: np.ndarray) -> list[int]:
    """Per proposal, the best text index (lowest index on ties)."""
    return [int(i) for i in np.argmax(scores, axis=1)]


# ---------------------------------------------------------------------------
# Hungarian assignment
# ---------------------------------------------------------------------------

def _solve_rect_min(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Min-cost matching of every row to a distinct column, for n <= m.

    O(n^2 m) potentials method. Returns (col assigned to each row, row
    potentials u, col potentials v); the potentials certify optimality via
    nonnegative reduced costs.
    """
    n, m = cost.shape
    assert n <= m
    INF = float("inf")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=int)  # match[j]: row (1-based) on column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            candidates = np.where(used[1:], INF, np.minimum(minv[1:], reduced))
            improved = reduced < minv[1:]
            way[1:][improved & ~used[1:]] = j0
            minv[1:] = np.minimum(minv[1:], reduced)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][~used[1:]] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            match[j0] = match[way[j0]]
            j0 = way[j0]
    rows_to_cols = np.zeros(n, dtype=int)
    for j in range(1, m + 1):
        if match[j]:
            rows_to_cols[match[j] - 1] = j - 1
    return rows_to_cols, u[1:], v[1:]


def _oriented_solution(sim: np.ndarray) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Solve with the smaller side as rows; returns (pairs, reduced costs)."""
    n, m = sim.shape
    if n <= m:
        rows_to_cols, u, v = _solve_rect_min(-sim)
        pairs = [(r, int(c)) for r, c in enumerate(rows_to_cols)]
        reduced = -sim - u[:, None] - v[None, :]
    else:
        cols_to_rows, u, v = _solve_rect_min(-sim.T)
        pairs = sorted((int(r), c) for c, r in enumerate(cols_to_rows))
        reduced = (-sim.T - u[:, None] - v[None, :]).T
    return pairs, reduced


def _best_pairs(sim: np.ndarray) -> list[tuple[int, int]]:
    """One maximum-similarity assignment of exactly min(N, M) pairs."""
    return _oriented_solution(sim)[0]


def _total(sim: np.ndarray, pairs: Sequence[tuple[int, int]]) -> float:
    return math.fsum(float(sim[r, c]) for r, c in pairs)


def hungarian_assign(scores: np.ndarray) -> list[tuple[int, int]]:
    """Maximum-total-similarity bipartite assignment.

    Returns exactly min(N, M) (proposal, text) pairs sorted by proposal
    index. Ties between equally good assignments resolve to the
    lexicographically smallest pair list, built by fixing rows in order and
    keeping only choices that preserve the optimal total.
    """
    sim = np.asarray(scores, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] < 1 or sim.shape[1] < 1:
        raise ValueError(f"score matrix must be 2-D and non-empty, got shape {sim.shape}")
    n, m = sim.shape
    want = min(n, m)
    pairs, reduced = _oriented_solution(sim)
    best = _total(sim, pairs)

    # Complementary slackness: an edge can appear in an optimal assignment
    # only if its reduced cost is zero, so everything else is pruned before
    # the (exact, solver-backed) tie-breaking tests below.
    slack = 1e-9 * max(1.0, float(np.abs(sim).max()))
    viable = reduced <= slack

    fixed: list[tuple[int, int]] = []
    live_rows = list(range(n))
    live_cols = list(range(m))
    for row in range(n):
        if len(fixed) == want:
            break
        remaining_rows = [r for r in live_rows if r > row]
        chosen: int | None = None
        for col in live_cols:
            if not viable[row, col]:
                continue
            sub_cols = [c for c in live_cols if c != col]
            need = want - len(fixed) - 1
            if need > min(len(remaining_rows), len(sub_cols)):
                continue
            candidate = fixed + [(row, col)]
            if need > 0:
                sub = sim[np.ix_(remaining_rows, sub_cols)]
                candidate += [(remaining_rows[r], sub_cols[c]) for r, c in _best_pairs(sub)]
            if _total(sim, candidate) == best:
                chosen = col
                break
        if chosen is None:
            # leaving this row unmatched must still reach the optimum
            live_rows.remove(row)
            continue
        fixed.append((row, chosen))
        live_rows.remove(row)
        live_cols.remove(chosen)
    if len(fixed) < want:
        # float noise in the potentials can strand the exact-equality scan;
        # the pair-count contract still holds, ties just go unrefined
        return sorted(_best_pairs(sim))
    return fixed
