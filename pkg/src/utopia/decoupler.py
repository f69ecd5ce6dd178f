"""Correlation mining, influence scoring, and the dominant/recessive mask split.

Features that move together are paired; inside each pair the member the
surrogate leans on harder goes to the dominant channel (pushed up the loss)
and its partner to the recessive channel (pushed down the loss).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .models import SurrogateModel, encode, input_gradient
from .tabular import STD_FLOOR, Dataset


@dataclass(frozen=True, eq=False)
class MaskPair:
    phi: np.ndarray   # dominant channel, ascent
    psi: np.ndarray   # recessive channel, descent

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=bool)
        psi = np.asarray(self.psi, dtype=bool)
        if phi.shape != psi.shape:
            raise ValueError("mask shapes differ")
        if np.any(phi & psi):
            raise ValueError("masks overlap")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "psi", psi)

    @classmethod
    def empty(cls, d: int) -> "MaskPair":
        return cls(np.zeros(d, bool), np.zeros(d, bool))

    def equals(self, other: "MaskPair") -> bool:
        return np.array_equal(self.phi, other.phi) and np.array_equal(self.psi, other.psi)


def correlation_matrix(x: np.ndarray) -> np.ndarray:
    """Pearson correlation of the columns of ``x``.

    Columns are standardised with the floored population std, so a constant
    column correlates 0 with everything else. The diagonal is set to 1 and
    entries are clipped into [-1, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("correlation_matrix needs at least 2 rows")
    z = x - x.mean(axis=0)
    z = z / np.maximum(z.std(axis=0), STD_FLOOR)
    r = z.T @ z / x.shape[0]
    r = np.clip(0.5 * (r + r.T), -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    return r


def redundant_pairs(r: np.ndarray, tau: float = 0.5) -> list[tuple[int, int]]:
    """All ``(i, j)`` with ``i < j`` and ``|r_ij| > tau``, lexicographic."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    i, j = np.nonzero(np.triu(np.abs(r) > tau, k=1))
    return [(int(a), int(b)) for a, b in zip(i, j)]


def influence_scores(model: SurrogateModel, data: Dataset) -> np.ndarray:
    """Mean absolute standardised-input gradient of the per-row loss."""
    xnum, sels = encode(model, data)
    g = input_gradient(model, xnum, sels, data.labels).numeric
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite input gradient while scoring influence")
    return np.abs(g).mean(axis=0)


def build_masks(pairs, scores, d: int | None = None) -> MaskPair:
    """Split pair members into the two channels.

    Inside a pair the higher score is dominant (ties: the lower index). A
    feature claimed by both channels goes dominant when its score is at least
    the lower median of all pair members' scores, otherwise recessive. The
    lower median is an actual score, so uniform rescaling cannot change any
    comparison.
    """
    scores = np.asarray(scores, dtype=np.float64)
    d = len(scores) if d is None else d
    up = np.zeros(d, bool)
    down = np.zeros(d, bool)
    for i, j in pairs:
        hi, lo = (i, j) if scores[i] >= scores[j] else (j, i)
        up[hi] = True
        down[lo] = True
    both = up & down
    if both.any():
        members = np.sort(scores[up | down])
        med = members[(len(members) - 1) // 2]
        to_phi = both & (scores >= med)
        down[to_phi] = False
        up[both & ~to_phi] = False
    return MaskPair(up, down)


def random_masks(pairs, d: int, seed: int = 0) -> MaskPair:
    """Ablation control: pair members split into two halves at random."""
    members = sorted({k for p in pairs for k in p})
    phi = np.zeros(d, bool)
    psi = np.zeros(d, bool)
    if members:
        rng = np.random.default_rng(seed)
        side = rng.permutation(len(members)) % 2
        for k, s in zip(members, side):
            (phi if s == 0 else psi)[k] = True
    return MaskPair(phi, psi)


@dataclass(frozen=True, eq=False)
class Decoupling:
    correlation: np.ndarray
    pairs: list
    scores: np.ndarray
    masks: MaskPair
    tau: float

    def report(self, names=None) -> dict:
        names = names or [f"x{k}" for k in range(len(self.scores))]
        return {
            "tau": self.tau,
            "features": list(names),
            "correlation": [[float(v) for v in row] for row in self.correlation],
            "pairs": [[names[i], names[j], float(self.correlation[i, j])] for i, j in self.pairs],
            "influence": {n: float(s) for n, s in zip(names, self.scores)},
            "phi": [n for n, m in zip(names, self.masks.phi) if m],
            "psi": [n for n, m in zip(names, self.masks.psi) if m],
        }

    def write_report(self, path, names=None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.report(names), fh, indent=2)
            fh.write("\n")


def decouple(model: SurrogateModel, data: Dataset, tau: float = 0.5) -> Decoupling:
    """Correlation, pairs, influence and masks in one pass over ``data``."""
    r = correlation_matrix(model.scaler.transform(data.numeric))
    pairs = redundant_pairs(r, tau)
    scores = influence_scores(model, data)
    return Decoupling(r, pairs, scores, build_masks(pairs, scores), tau)
