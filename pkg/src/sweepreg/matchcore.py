"""Descriptor matching: sink-augmented similarity, dual-softmax, and the
soft-assignment negative-log-likelihood training loss.

Row indices are flattened 2D (frame) cells, columns flattened 3D (volume)
cells; the extra last row/column is the learned sink for unmatchable cells.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Tensor
from .featnet import DescriptorGrid
from .geometry import SINK

SINK_POLICIES = ("outside_only", "full_sink")


@dataclass
class GroundTruthCorrespondence:
    """Target for one frame cell: its world point, the mapped MR point, and
    the nearest MR cell (SINK when the point leaves the volume grid)."""

    us_cell: int
    us_point_mm: np.ndarray
    mr_point_mm: np.ndarray
    mr_cell: int


@dataclass
class SimilarityMatrix:
    """(n_us + 1, n_mr + 1) scores: descriptor dot products plus sink row/column."""

    values: Tensor
    alpha: Tensor
    n_us: int
    n_mr: int
    mr_grid_dims: tuple[int, ...] = ()


@dataclass
class AssignmentMatrix:
    """Dual-softmax assignment probabilities over the sink-augmented scores.

    ``log_values`` is the numerically safe representation the loss consumes;
    ``values`` is its elementwise exp (both stay on the autodiff graph).
    """

    values: Tensor
    log_values: Tensor
    n_us: int
    n_mr: int
    temperature: float = 1.0


@dataclass
class Match:
    us_cell: int
    mr_cell: int
    confidence: float


@dataclass
class MatchSet:
    entries: list[Match]
    threshold: float
    mutual: bool

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "matchset", "threshold": self.threshold,
                             "mutual": self.mutual, "n": len(self.entries)},
                            sort_keys=True)]
        for m in self.entries:
            lines.append(json.dumps({"us_cell": m.us_cell, "mr_cell": m.mr_cell,
                                     "confidence": m.confidence}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "MatchSet":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty match-set document")
        head = json.loads(lines[0])
        if head.get("type") != "matchset":
            raise ValueError("missing matchset header line")
        entries = [Match(int(d["us_cell"]), int(d["mr_cell"]), float(d["confidence"]))
                   for d in map(json.loads, lines[1:])]
        if len(entries) != int(head["n"]):
            raise ValueError(f"header claims {head['n']} entries, found {len(entries)}")
        return cls(entries, float(head["threshold"]), bool(head["mutual"]))


@dataclass
class MatchWeights:
    """Soft target weights over the augmented assignment matrix."""

    weights: np.ndarray
    beta: float
    sink_policy: str

    @property
    def normalization(self) -> float:
        return float(self.weights.sum())


def similarity(us_grid: DescriptorGrid, mr_grid: DescriptorGrid,
               alpha: Tensor) -> SimilarityMatrix:
    """Dot-product scores between all frame and volume cells, sink-augmented."""
    if us_grid.dimensionality != 2 or mr_grid.dimensionality != 3:
        raise ValueError("similarity expects a 2D frame grid and a 3D volume grid")
    if us_grid.descriptor_dim != mr_grid.descriptor_dim:
        raise ValueError(f"descriptor dims differ: {us_grid.descriptor_dim} vs "
                         f"{mr_grid.descriptor_dim}")
    real = engine.matmul(us_grid.descriptors, engine.transpose(mr_grid.descriptors))
    full = engine.with_sink(real, alpha)
    return SimilarityMatrix(values=full, alpha=alpha, n_us=us_grid.n_cells,
                            n_mr=mr_grid.n_cells, mr_grid_dims=mr_grid.grid_dims)


def dual_softmax(sim: SimilarityMatrix, temperature: float = 1.0) -> AssignmentMatrix:
    """Elementwise product of row-wise and column-wise softmax over the full
    augmented matrix, so the sink score competes with real cells.

    Computed as exp(log_softmax + log_softmax) to keep the loss finite even
    when individual probabilities underflow float32.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    scaled = engine.scale(sim.values, 1.0 / temperature)
    log_rows = engine.log_softmax(scaled, axis=1)
    log_cols = engine.log_softmax(scaled, axis=0)
    log_vals = engine.add(log_rows, log_cols)
    return AssignmentMatrix(values=engine.exp(log_vals), log_values=log_vals,
                            n_us=sim.n_us, n_mr=sim.n_mr, temperature=temperature)


def ground_truth_weights(corrs: list[GroundTruthCorrespondence], beta: float,
                         sink_policy: str, n_us: int,
                         mr_grid_dims: tuple[int, ...]) -> MatchWeights:
    """Soft targets w(i, j) = exp(-beta * ||j - m(i)||) in 3D cell units.

    Policies for the sink row/column:
      * "outside_only": weight 1 only at (i, sink) for cells mapped outside
        the volume grid; the sink row stays zero.
      * "full_sink": weight 1 on every sink row/column entry.
    """
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if sink_policy not in SINK_POLICIES:
        raise ValueError(f"unknown sink policy {sink_policy!r}, expected {SINK_POLICIES}")
    if not corrs:
        raise ValueError("no ground-truth correspondences given")
    n_mr = int(np.prod(mr_grid_dims))
    w = np.zeros((n_us + 1, n_mr + 1), dtype=np.float64)
    cell_idx = np.stack(np.unravel_index(np.arange(n_mr), mr_grid_dims), axis=1).astype(np.float64)
    for c in corrs:
        if not 0 <= c.us_cell < n_us:
            raise ValueError(f"us_cell {c.us_cell} out of range [0, {n_us})")
        if c.mr_cell == SINK:
            if sink_policy == "outside_only":
                w[c.us_cell, n_mr] = 1.0
            continue
        if not 0 <= c.mr_cell < n_mr:
            raise ValueError(f"mr_cell {c.mr_cell} out of range [0, {n_mr})")
        target = cell_idx[c.mr_cell]
        dist = np.linalg.norm(cell_idx - target, axis=1)
        w[c.us_cell, :n_mr] = np.exp(-beta * dist)
    if sink_policy == "full_sink":
        w[n_us, :] = 1.0
        w[:, n_mr] = 1.0
    return MatchWeights(weights=w, beta=float(beta), sink_policy=sink_policy)


def matching_loss(assignment: AssignmentMatrix, weights: MatchWeights) -> Tensor:
    """Weighted negative log likelihood of the assignment under soft targets:
    -sum(w * log A) / sum(w), evaluated from the log-space assignment."""
    if weights.weights.shape != assignment.values.shape:
        raise ValueError(f"weight shape {weights.weights.shape} != assignment "
                         f"shape {assignment.values.shape}")
    return engine.scale(engine.weighted_mean(assignment.log_values, weights.weights), -1.0)


def extract_matches(assignment: AssignmentMatrix, threshold: float = 0.2,
                    require_mutual: bool = True) -> MatchSet:
    """Row-wise best real cell above threshold, optionally mutual-best.

    Entries are sorted by descending confidence (ties by cell indices).
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    a = np.asarray(assignment.values.data)
    real = a[:assignment.n_us, :assignment.n_mr]
    if real.size == 0:
        return MatchSet([], threshold, require_mutual)
    best_j = real.argmax(axis=1)
    best_i = real.argmax(axis=0)
    entries = []
    for i in range(real.shape[0]):
        j = int(best_j[i])
        conf = float(real[i, j])
        if conf < threshold:
            continue
        if require_mutual and int(best_i[j]) != i:
            continue
        entries.append(Match(i, j, conf))
    entries.sort(key=lambda m: (-m.confidence, m.us_cell, m.mr_cell))
    return MatchSet(entries, threshold, require_mutual)
