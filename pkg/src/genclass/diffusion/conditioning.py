"""Class-conditioning matrices.

A class label is encoded as its one-hot vector, replicated vertically
over R rows and zero-padded horizontally to D columns.  Mixed conditions
(for conditioning-mixup) are convex combinations of two such patterns.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class ConditioningMatrix:
    matrix: torch.Tensor  # shape (R, D), float32
    class_index: int | None  # None for mixed conditions

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.matrix.shape)


def class_condition(
    class_index: int, num_classes: int, rows: int = 8, cols: int | None = None
) -> ConditioningMatrix:
    """One-hot pattern for a pure class, replicated to (rows, cols)."""
    if not 0 <= class_index < num_classes:
        raise ValueError(f"class index {class_index} outside [0, {num_classes})")
    if cols is None:
        cols = max(num_classes, 8)
    if cols < num_classes:
        raise ValueError(f"cols={cols} cannot hold {num_classes} classes")
    m = torch.zeros(rows, cols, dtype=torch.float32)
    m[:, class_index] = 1.0
    return ConditioningMatrix(matrix=m, class_index=class_index)


def mix_conditions(
    a: ConditioningMatrix, b: ConditioningMatrix, lam: float
) -> ConditioningMatrix:
    """Convex combination lam * a + (1 - lam) * b."""
    if a.shape != b.shape:
        raise ValueError(f"conditioning shapes differ: {a.shape} vs {b.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mix weight {lam} outside [0, 1]")
    mixed = lam * a.matrix + (1.0 - lam) * b.matrix
    index = a.class_index if a.class_index == b.class_index else None
    return ConditioningMatrix(matrix=mixed, class_index=index)


def stack_conditions(conditions: list[ConditioningMatrix]) -> torch.Tensor:
    """Stack into a (B, R, D) batch tensor."""
    return torch.stack([c.matrix for c in conditions], dim=0)
