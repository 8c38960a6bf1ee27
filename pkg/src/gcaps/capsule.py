"""Capsule primitives: squash, prediction transform, coupling softmax,
agreement update, and the two training losses.

Conventions used throughout:
  u      lower-capsule outputs        [batch, num_lower, dim_lower]
  W      prediction transforms        [num_lower, num_upper, dim_upper, dim_lower]
  u_hat  prediction vectors           [batch, num_lower, num_upper, dim_upper]
  b, c   routing logits / couplings   [batch, num_lower, num_upper]
  v      upper-capsule outputs        [batch, num_upper, dim_upper]

Type groups are contiguous lower-index ranges [t*caps_per_type,
(t+1)*caps_per_type): the primary layer flattens as (type, row, col).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor, as_tensor, softmax_along

MARGIN_UPPER = 0.9        # m+: target length for the present class
MARGIN_LOWER = 0.1        # m-: allowed length for absent classes
ABSENT_WEIGHT = 0.5       # down-weight on absent-class terms
RECON_WEIGHT = 0.0005     # reconstruction share of the total loss


class AxisMode(enum.Enum):
    """Which index the coupling softmax normalizes over."""

    UPPER_PER_LOWER = "upper_per_lower"   # rows over upper capsules sum to 1
    LOWER_PER_UPPER = "lower_per_upper"   # columns over lower capsules sum to 1


@dataclass(frozen=True)
class CapsLayerSpec:
    """Dimensions of one routed capsule layer."""

    num_lower: int
    num_upper: int
    dim_lower: int
    dim_upper: int
    num_types: int
    caps_per_type: int

    def __post_init__(self):
        for name in ("num_lower", "num_upper", "dim_lower", "dim_upper",
                     "num_types", "caps_per_type"):
            if getattr(self, name) < 1:
                raise ValueError(f"CapsLayerSpec.{name} must be positive")
        if self.num_types * self.caps_per_type != self.num_lower:
            raise ValueError(
                f"num_types*caps_per_type = {self.num_types * self.caps_per_type}"
                f" does not equal num_lower = {self.num_lower}")

    @classmethod
    def reference(cls) -> "CapsLayerSpec":
        """The full-size layer: 32 types of 36 eight-dim capsules into 10x16."""
        return cls(num_lower=1152, num_upper=10, dim_lower=8, dim_upper=16,
                   num_types=32, caps_per_type=36)

    def type_partition(self) -> tuple[tuple[int, int], ...]:
        """Contiguous (start, stop) lower-index ranges, one per type."""
        step = self.caps_per_type
        return tuple((t * step, (t + 1) * step) for t in range(self.num_types))


@dataclass(frozen=True)
class PredictionTensor:
    """Prediction vectors u_hat[b, i, j, :] of lower i for upper j."""

    u_hat: Tensor

    def __post_init__(self):
        if self.u_hat.ndim != 4:
            raise ShapeError(f"prediction tensor must be 4-d, got {self.u_hat.shape}")


@dataclass(frozen=True)
class LogitMatrix:
    """Routing logits b[b, i, j]; zero at the start of routing."""

    b: Tensor

    def __post_init__(self):
        if self.b.ndim != 3:
            raise ShapeError(f"logit matrix must be 3-d, got {self.b.shape}")


@dataclass(frozen=True)
class CouplingMatrix:
    """Normalized couplings c[b, i, j] plus the axis they normalize over."""

    c: Tensor
    axis_mode: AxisMode

    def __post_init__(self):
        if self.c.ndim != 3:
            raise ShapeError(f"coupling matrix must be 3-d, got {self.c.shape}")


def _partition_or_error(partition, num_lower: int) -> tuple[tuple[int, int], ...]:
    """Require contiguous groups covering [0, num_lower) exactly."""
    groups = tuple((int(a), int(z)) for a, z in partition)
    cursor = 0
    for a, z in groups:
        if a != cursor or z <= a:
            raise ValueError(
                f"type partition must cover [0, {num_lower}) contiguously;"
                f" got group ({a}, {z}) at position {cursor}")
        cursor = z
    if cursor != num_lower:
        raise ValueError(
            f"type partition covers [0, {cursor}), expected [0, {num_lower})")
    return groups


def squash(s, axis: int = -1) -> Tensor:
    """Shrink vectors along ``axis`` to length n^2/(1+n^2) < 1, keeping direction.

    The norm in the denominator carries a 1e-9-scale guard so the zero vector
    maps to zero with finite gradients (the bare formula is 0/0 there).
    """
    s = as_tensor(s)
    if not np.isfinite(s.data).all():
        raise NonFiniteError("squash requires finite input")
    n2 = (s * s).sum(axis=axis, keepdims=True)
    # sqrt(n2 + 1e-18) ~= norm + guard; smooth at 0, exact 0.5 scale at norm 1.
    norm = (n2 + 1e-18).sqrt()
    return s * (n2 / ((1.0 + n2) * norm))


def predict(u, weights) -> PredictionTensor:
    """Apply per-pair transforms: u_hat[b,i,j] = W[i,j] @ u[b,i]."""
    u_t, w_t = as_tensor(u), as_tensor(weights)
    if u_t.ndim != 3 or w_t.ndim != 4:
        raise ShapeError(f"predict expects u [b,n,k] and W [n,j,d,k],"
                         f" got {u_t.shape} and {w_t.shape}")
    if u_t.shape[1] != w_t.shape[0] or u_t.shape[2] != w_t.shape[3]:
        raise ShapeError(f"predict shape mismatch: u {u_t.shape} vs W {w_t.shape}")
    out = np.einsum("njdk,bnk->bnjd", w_t.data, u_t.data, optimize=True)

    def backward(g):
        if w_t.requires_grad:
            w_t._accumulate(np.einsum("bnjd,bnk->njdk", g, u_t.data, optimize=True))
        if u_t.requires_grad:
            u_t._accumulate(np.einsum("njdk,bnjd->bnk", w_t.data, g, optimize=True))

    return PredictionTensor(Tensor._node(out, (u_t, w_t), backward, "predict"))


def coupling_from_logits(logits, axis_mode: AxisMode,
                         type_partition=None) -> CouplingMatrix:
    """Softmax the routing logits along the configured normalization axis.

    UPPER_PER_LOWER normalizes over upper capsules for each lower capsule;
    a type partition changes nothing there (each row is its own group).
    LOWER_PER_UPPER normalizes over lower capsules per upper capsule, across
    the whole layer or within each type group when a partition is given.
    """
    b = logits.b if isinstance(logits, LogitMatrix) else as_tensor(logits)
    if b.ndim != 3:
        raise ShapeError(f"routing logits must be 3-d, got {b.shape}")
    if axis_mode is AxisMode.UPPER_PER_LOWER:
        c = softmax_along(b, axis=2)
    elif type_partition is None:
        c = softmax_along(b, axis=1)
    else:
        groups = _partition_or_error(type_partition, b.shape[1])
        sizes = {z - a for a, z in groups}
        if len(sizes) == 1:
            # Equal groups: reshape so the group axis is its own dimension.
            size = sizes.pop()
            batch, n, j = b.shape
            folded = b.reshape(batch, n // size, size, j)
            c = softmax_along(folded, axis=2).reshape(batch, n, j)
        else:
            c = _segment_softmax_lower(b, groups)
    return CouplingMatrix(c=c, axis_mode=axis_mode)


def _segment_softmax_lower(b: Tensor, groups) -> Tensor:
    """Softmax over axis 1 run independently per contiguous (start, stop)."""
    if not np.isfinite(b.data).all():
        raise NonFiniteError("softmax requires finite input")
    out = np.empty_like(b.data)
    for a, z in groups:
        seg = b.data[:, a:z, :]
        e = np.exp(seg - seg.max(axis=1, keepdims=True))
        out[:, a:z, :] = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        db = np.empty_like(g)
        for a, z in groups:
            y = out[:, a:z, :]
            gs = g[:, a:z, :]
            db[:, a:z, :] = y * (gs - (gs * y).sum(axis=1, keepdims=True))
        b._accumulate(db)

    return Tensor._node(out, (b,), backward, "segment_softmax")


def weighted_sum(coupling, predictions, index_subset=None) -> Tensor:
    """s[b,j] = sum_i c[b,i,j] * u_hat[b,i,j], optionally over one index range.

    ``index_subset`` is a (start, stop) range of lower indices; gradients for
    the excluded range are zero.
    """
    c_t = coupling.c if isinstance(coupling, CouplingMatrix) else as_tensor(coupling)
    u_t = predictions.u_hat if isinstance(predictions, PredictionTensor) \
        else as_tensor(predictions)
    if c_t.ndim != 3 or u_t.ndim != 4 or c_t.shape != u_t.shape[:3]:
        raise ShapeError(f"weighted_sum shape mismatch: c {c_t.shape}"
                         f" vs u_hat {u_t.shape}")
    n = c_t.shape[1]
    if index_subset is None:
        lo, hi = 0, n
    else:
        lo, hi = int(index_subset[0]), int(index_subset[1])
        if not (0 <= lo < hi <= n):
            raise ShapeError(f"index subset ({lo}, {hi}) outside [0, {n})")
    region = (slice(None), slice(lo, hi))
    cd, ud = c_t.data[region], u_t.data[region]
    out = np.einsum("bnj,bnjd->bjd", cd, ud, optimize=True)

    def backward(g):
        if c_t.requires_grad:
            c_t._accumulate_at(region, np.einsum("bjd,bnjd->bnj", g, ud, optimize=True))
        if u_t.requires_grad:
            u_t._accumulate_at(region, np.einsum("bjd,bnj->bnjd", g, cd, optimize=True))

    return Tensor._node(out, (c_t, u_t), backward, "weighted_sum")


def agreement_update(logits, predictions, v) -> LogitMatrix:
    """b'[b,i,j] = b[b,i,j] + <u_hat[b,i,j], v[b,j]> for every lower capsule."""
    b_t = logits.b if isinstance(logits, LogitMatrix) else as_tensor(logits)
    u_t = predictions.u_hat if isinstance(predictions, PredictionTensor) \
        else as_tensor(predictions)
    v_t = as_tensor(v)
    if b_t.ndim != 3 or u_t.shape[:3] != b_t.shape or v_t.ndim != 3 \
            or v_t.shape[0] != u_t.shape[0] or v_t.shape[1] != u_t.shape[2] \
            or v_t.shape[2] != u_t.shape[3]:
        raise ShapeError(f"agreement_update shape mismatch: b {b_t.shape},"
                         f" u_hat {u_t.shape}, v {v_t.shape}")
    out = b_t.data + np.einsum("bnjd,bjd->bnj", u_t.data, v_t.data, optimize=True)

    def backward(g):
        b_t._accumulate(g)
        if u_t.requires_grad:
            u_t._accumulate(np.einsum("bnj,bjd->bnjd", g, v_t.data, optimize=True))
        if v_t.requires_grad:
            v_t._accumulate(np.einsum("bnj,bnjd->bjd", g, u_t.data, optimize=True))

    return LogitMatrix(Tensor._node(out, (b_t, u_t, v_t), backward, "agreement"))


def margin_loss(lengths, labels) -> Tensor:
    """Per-class hinge on capsule lengths, summed over classes, batch mean.

    Present classes are pushed above MARGIN_UPPER, absent ones below
    MARGIN_LOWER with weight ABSENT_WEIGHT; both hinges are squared.
    """
    lengths_t = as_tensor(lengths)
    labels_t = as_tensor(labels)
    if lengths_t.shape != labels_t.shape or lengths_t.ndim != 2:
        raise ShapeError(f"margin_loss expects matching 2-d shapes,"
                         f" got {lengths_t.shape} and {labels_t.shape}")
    _require_one_hot(labels_t.data)
    present = (MARGIN_UPPER - lengths_t).relu()
    absent = (lengths_t - MARGIN_LOWER).relu()
    per_class = labels_t * present * present \
        + ABSENT_WEIGHT * (1.0 - labels_t) * absent * absent
    return per_class.sum(axis=1).mean()


def _require_one_hot(labels: np.ndarray) -> None:
    if not (np.isin(labels, (0.0, 1.0)).all()
            and np.array_equal(labels.sum(axis=1), np.ones(labels.shape[0]))):
        raise ValueError("labels must be one-hot rows")


def reconstruction_loss(decoded, target) -> Tensor:
    """Sum of squared pixel errors per image, averaged over the batch."""
    d_t, t_t = as_tensor(decoded), as_tensor(target)
    if d_t.shape != t_t.shape or d_t.ndim != 2:
        raise ShapeError(f"reconstruction_loss expects matching 2-d shapes,"
                         f" got {d_t.shape} and {t_t.shape}")
    diff = d_t - t_t
    return (diff * diff).sum(axis=1).mean()
