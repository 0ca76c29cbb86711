"""Dominance with confidence, efficient decision sets and frontiers (maximisation)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .conformal import BoundResult
from .errors import DomainError, SchemaError


@dataclass(frozen=True)
class BoundPoint:
    decision: int
    bounds: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        if any(math.isnan(b) for b in self.bounds):
            raise DomainError("bounds may not be NaN")


def strictly_dominates(a: BoundPoint, b: BoundPoint) -> bool:
    """``a`` is nowhere below ``b`` and strictly above it in at least one coordinate."""
    if len(a.bounds) != len(b.bounds):
        raise SchemaError(f"cannot compare {len(a.bounds)}- and {len(b.bounds)}-dimensional bounds")
    return all(x >= y for x, y in zip(a.bounds, b.bounds)) and any(x > y for x, y in zip(a.bounds, b.bounds))


def dominance_matrix(B: np.ndarray) -> np.ndarray:
    """``D[i, j]`` is true iff row ``i`` strictly dominates row ``j``."""
    ge = np.all(B[:, None, :] >= B[None, :, :], axis=2)
    gt = np.any(B[:, None, :] > B[None, :, :], axis=2)
    return ge & gt


@dataclass(frozen=True)
class FrontierReport:
    efficient: tuple[int, ...]
    dominated: dict[int, int]  # dominated decision -> one efficient dominator
    frontier: tuple[BoundPoint, ...]
    points: tuple[BoundPoint, ...] = field(repr=False)
    z: tuple[float, ...] | None = None
    alpha: float | None = None
    clamped: dict[int, tuple[bool, ...]] = field(default_factory=dict, repr=False)
    decision_labels: tuple | None = None

    def to_dict(self) -> dict:
        def num(v):
            return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")

        label = (lambda x: x) if self.decision_labels is None else (lambda x: self.decision_labels[x])
        return {
            "z": None if self.z is None else list(self.z),
            "alpha": self.alpha,
            "efficient": list(self.efficient),
            "dominated": [{"decision": x, "witness": w} for x, w in sorted(self.dominated.items())],
            "frontier": [{"decision": p.decision, "bounds": [num(b) for b in p.bounds]} for p in self.frontier],
            "points": [
                {
                    "decision": p.decision,
                    "label": label(p.decision),
                    "bounds": [num(b) for b in p.bounds],
                    "efficient": p.decision in self.efficient,
                    "clamped": list(self.clamped.get(p.decision, ())),
                }
                for p in self.points
            ],
        }

    def csv_rows(self) -> tuple[list[str], list[list]]:
        """Plot-ready table: one row per decision."""
        m = len(self.points[0].bounds)
        header = ["decision", *[f"bound_{k + 1}" for k in range(m)], "efficient", "clamped"]
        rows = []
        for p in sorted(self.points, key=lambda p: p.decision):
            clamp = self.clamped.get(p.decision, (False,) * m)
            rows.append([p.decision, *[repr(b) for b in p.bounds], int(p.decision in self.efficient), int(any(clamp))])
        return header, rows


def efficient_set(points: Sequence[BoundPoint]) -> FrontierReport:
    points = tuple(points)
    if not points:
        raise DomainError("efficient set of an empty point list")
    m = len(points[0].bounds)
    if any(len(p.bounds) != m for p in points):
        raise SchemaError("all bound vectors must have the same length")
    B = np.array([p.bounds for p in points], dtype=float).reshape(len(points), m)
    D = dominance_matrix(B)
    is_eff = ~D.any(axis=0)
    efficient = tuple(sorted(points[i].decision for i in np.flatnonzero(is_eff)))
    dominated = {}
    for j in np.flatnonzero(~is_eff):
        # an efficient dominator always exists: the order is strict and finite
        i = next(i for i in np.flatnonzero(D[:, j]) if is_eff[i])
        dominated[points[j].decision] = points[i].decision
    frontier = tuple(sorted((points[i] for i in np.flatnonzero(is_eff)), key=lambda p: (p.bounds[0], p.decision)))
    return FrontierReport(efficient=efficient, dominated=dominated, frontier=frontier, points=points)


def frontier_report(bounds: Sequence[BoundResult], z=None, alpha: float | None = None, decision_labels=None) -> FrontierReport:
    rep = efficient_set([BoundPoint(b.decision, b.bound_vector) for b in bounds])
    return FrontierReport(
        efficient=rep.efficient,
        dominated=rep.dominated,
        frontier=rep.frontier,
        points=rep.points,
        z=None if z is None else tuple(float(v) for v in np.atleast_1d(z)),
        alpha=alpha,
        clamped={b.decision: tuple(b.clamped) for b in bounds},
        decision_labels=None if decision_labels is None else tuple(decision_labels),
    )
