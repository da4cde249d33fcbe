"""Proximal operators shared by the iterative and unfolded solvers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ThresholdPolicy:
    """How the shrinkage level lambda is chosen for an operand matrix.

    kind "fixed": lambda = value, ignoring the operand.
    kind "inf_norm_scaled": lambda = value * max over radius-rows of the
    absolute row sum, divided by the number of angle columns.  The raw
    maximum absolute row sum exceeds every entry and would zero the whole
    matrix, hence the per-column normalization and the scale knob.
    """

    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in ("fixed", "inf_norm_scaled"):
            raise ValueError(f"unknown threshold policy kind {self.kind!r}")
        if self.value < 0:
            raise ValueError("threshold policy value must be nonnegative")

    @classmethod
    def fixed(cls, lam: float) -> "ThresholdPolicy":
        return cls("fixed", float(lam))

    @classmethod
    def inf_norm_scaled(cls, c: float = 0.1) -> "ThresholdPolicy":
        return cls("inf_norm_scaled", float(c))


def soft_threshold(a: np.ndarray, lam: float) -> np.ndarray:
    """sign(a) * max(|a| - lam, 0), elementwise."""
    if lam < 0:
        raise ValueError("threshold must be nonnegative")
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("soft_threshold requires finite input")
    return np.sign(a) * np.maximum(np.abs(a) - lam, 0.0)


def resolve_threshold(policy: ThresholdPolicy, operand: np.ndarray) -> float:
    """Shrinkage level for an operand matrix under the given policy."""
    if policy.kind == "fixed":
        return policy.value
    operand = np.asarray(operand, dtype=float)
    if operand.ndim != 2:
        raise ValueError("inf_norm_scaled expects a 2-D operand")
    row_sums = np.abs(operand).sum(axis=1)
    return policy.value * float(row_sums.max()) / operand.shape[1]
