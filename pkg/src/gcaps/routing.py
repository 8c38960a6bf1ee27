"""Dynamic routing-by-agreement in four configurations.

A RoutingConfig is the cross product of two choices:

  softmax_axis   UPPER_PER_LOWER (couplings of one lower capsule sum to 1
                 across upper capsules) or LOWER_PER_UPPER (couplings into
                 one upper capsule sum to 1 across lower capsules);
  grouping       UNGROUPED (one routing pool) or BY_TYPE (each capsule type
                 is pooled separately and the per-type outputs are combined
                 by an outer squash).

The four combinations give initial couplings of 1/num_upper, 1/num_lower,
1/num_upper, and 1/caps_per_type respectively; the configured iteration
count unrolls into the differentiable graph, so gradients flow through
every coupling update.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .capsule import (
    AxisMode,
    CapsLayerSpec,
    PredictionTensor,
    agreement_update,
    coupling_from_logits,
    squash,
    weighted_sum,
)
from .tensor import ShapeError, Tensor, as_tensor


class Grouping(enum.Enum):
    UNGROUPED = "ungrouped"
    BY_TYPE = "by_type"


# name -> (softmax_axis, grouping); short labels follow the curve-label
# convention used in the experiment reports: b / bc / o / oc.
_VARIANTS = {
    "alg1": (AxisMode.UPPER_PER_LOWER, Grouping.UNGROUPED, "b"),
    "alg2": (AxisMode.LOWER_PER_UPPER, Grouping.UNGROUPED, "bc"),
    "alg3": (AxisMode.UPPER_PER_LOWER, Grouping.BY_TYPE, "o"),
    "alg4": (AxisMode.LOWER_PER_UPPER, Grouping.BY_TYPE, "oc"),
}


@dataclass(frozen=True)
class RoutingConfig:
    """One point in the routing design space, plus the iteration budget."""

    softmax_axis: AxisMode
    grouping: Grouping
    iterations: int = 3

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")

    @classmethod
    def from_name(cls, name: str, iterations: int = 3) -> "RoutingConfig":
        key = name.strip().lower()
        if key not in _VARIANTS:
            raise ValueError(f"unknown routing variant {name!r};"
                             f" expected one of {sorted(_VARIANTS)}")
        axis, grouping, _ = _VARIANTS[key]
        return cls(softmax_axis=axis, grouping=grouping, iterations=iterations)

    @property
    def algorithm_number(self) -> int:
        grouped = self.grouping is Grouping.BY_TYPE
        if self.softmax_axis is AxisMode.UPPER_PER_LOWER:
            return 3 if grouped else 1
        return 4 if grouped else 2

    @property
    def name(self) -> str:
        return f"alg{self.algorithm_number}"

    @property
    def label(self) -> str:
        return _VARIANTS[self.name][2]


def initial_coupling(spec: CapsLayerSpec, config: RoutingConfig) -> float:
    """The uniform coupling value at zero logits: 1/(normalization-group size)."""
    if config.softmax_axis is AxisMode.UPPER_PER_LOWER:
        return 1.0 / spec.num_upper
    if config.grouping is Grouping.BY_TYPE:
        return 1.0 / spec.caps_per_type
    return 1.0 / spec.num_lower


@dataclass(frozen=True)
class TraceStep:
    """Value snapshots (plain arrays) from one routing iteration."""

    iteration: int
    b: np.ndarray             # logits the iteration's couplings came from
    c: np.ndarray             # couplings used this iteration
    v: np.ndarray             # combined output after this iteration's squash
    per_type_v: np.ndarray | None   # [batch, num_types, num_upper, dim_upper]


@dataclass
class RoutingTrace:
    """All iterations of one routing call, for coupling-dynamics analysis."""

    spec: CapsLayerSpec
    config: RoutingConfig
    c0: float
    steps: list[TraceStep] = field(default_factory=list)

    def coupling_deltas(self) -> list[np.ndarray]:
        """|c_t - c_{t-1}| for t = 1..r-1 (empty when r = 1)."""
        return [np.abs(b.c - a.c) for a, b in zip(self.steps, self.steps[1:])]

    def final_mean_dc(self) -> float:
        """Mean |dc| between the last two iterations; 0 for single-iteration runs."""
        deltas = self.coupling_deltas()
        return float(deltas[-1].mean()) if deltas else 0.0


@dataclass(frozen=True)
class RateOfChangeRow:
    iteration: int
    mean_dc: float
    max_dc: float
    rel_dc: float   # mean_dc / c0
    c0: float


def route(u_hat, spec: CapsLayerSpec, config: RoutingConfig,
          capture_trace: bool = False):
    """Run routing-by-agreement; returns (v, trace, per_type_caps).

    ``v`` is the final combined output [batch, num_upper, dim_upper];
    ``trace`` is a RoutingTrace or None per ``capture_trace``;
    ``per_type_caps`` holds the final iteration's per-type outputs
    [batch, num_types, num_upper, dim_upper] as a constant tensor in
    BY_TYPE mode and is None otherwise.

    Every iteration recomputes couplings from the logits, forms the
    weighted vote sum, squashes, and adds the prediction/output agreement
    back onto the logits (for all lower capsules, against the combined
    output in grouped mode).
    """
    u_t = u_hat.u_hat if isinstance(u_hat, PredictionTensor) else as_tensor(u_hat)
    if u_t.ndim != 4:
        raise ShapeError(f"u_hat must be 4-d, got {u_t.shape}")
    batch, n, j, d = u_t.shape
    if (n, j, d) != (spec.num_lower, spec.num_upper, spec.dim_upper):
        raise ShapeError(
            f"u_hat shape {u_t.shape} does not match layer spec"
            f" ({spec.num_lower}, {spec.num_upper}, {spec.dim_upper})")
    wrapped = PredictionTensor(u_t)
    grouped = config.grouping is Grouping.BY_TYPE
    partition = spec.type_partition() if grouped else None

    trace = RoutingTrace(spec=spec, config=config,
                         c0=initial_coupling(spec, config)) if capture_trace else None
    b_t = Tensor(np.zeros((batch, n, j)))
    v = None
    per_type = None
    for it in range(config.iterations):
        coupling = coupling_from_logits(b_t, config.softmax_axis, partition)
        if grouped:
            group_vs = [squash(weighted_sum(coupling, wrapped, index_subset=g))
                        for g in partition]
            total = group_vs[0]
            for vm in group_vs[1:]:
                total = total + vm
            v = squash(total)
            per_type = Tensor(np.stack([vm.data for vm in group_vs], axis=1))
        else:
            v = squash(weighted_sum(coupling, wrapped))
        if trace is not None:
            trace.steps.append(TraceStep(
                iteration=it, b=b_t.data.copy(), c=coupling.c.data.copy(),
                v=v.data.copy(),
                per_type_v=per_type.data.copy() if grouped else None))
        b_t = agreement_update(b_t, wrapped, v).b
    return v, trace, per_type


def route_reference(u_hat, spec: CapsLayerSpec, config: RoutingConfig) -> Tensor:
    """Same contract as route, as explicit nested loops over every index.

    Deliberately unvectorized; restricted to small layers so tests stay fast.
    """
    u_arr = (u_hat.u_hat if isinstance(u_hat, PredictionTensor)
             else as_tensor(u_hat)).data
    batch, n, j, d = u_arr.shape
    if n > 64:
        raise ValueError(f"route_reference handles num_lower <= 64, got {n}")
    if (n, j, d) != (spec.num_lower, spec.num_upper, spec.dim_upper):
        raise ShapeError(
            f"u_hat shape {u_arr.shape} does not match layer spec"
            f" ({spec.num_lower}, {spec.num_upper}, {spec.dim_upper})")
    grouped = config.grouping is Grouping.BY_TYPE
    partition = spec.type_partition() if grouped else ((0, n),)
    out = np.zeros((batch, j, d))
    for bi in range(batch):
        u = u_arr[bi]
        b_mat = [[0.0] * j for _ in range(n)]
        v = [[0.0] * d for _ in range(j)]
        for _ in range(config.iterations):
            c = _couplings_scalar(b_mat, config.softmax_axis,
                                  partition if grouped else None, n, j)
            if grouped:
                combined = [[0.0] * d for _ in range(j)]
                for a, z in partition:
                    for jj in range(j):
                        s = [sum(c[i][jj] * u[i, jj, di] for i in range(a, z))
                             for di in range(d)]
                        vm = _squash_scalar(s)
                        for di in range(d):
                            combined[jj][di] += vm[di]
                v = [_squash_scalar(combined[jj]) for jj in range(j)]
            else:
                v = []
                for jj in range(j):
                    s = [sum(c[i][jj] * u[i, jj, di] for i in range(n))
                         for di in range(d)]
                    v.append(_squash_scalar(s))
            for i in range(n):
                for jj in range(j):
                    b_mat[i][jj] += sum(u[i, jj, di] * v[jj][di]
                                        for di in range(d))
        out[bi] = np.array(v)
    return Tensor(out)


def _squash_scalar(s: list[float]) -> list[float]:
    n2 = sum(x * x for x in s)
    norm = math.sqrt(n2 + 1e-18)
    scale = n2 / ((1.0 + n2) * norm)
    return [x * scale for x in s]


def _couplings_scalar(b_mat, axis_mode: AxisMode, partition, n: int, j: int):
    c = [[0.0] * j for _ in range(n)]
    if axis_mode is AxisMode.UPPER_PER_LOWER:
        for i in range(n):
            top = max(b_mat[i])
            e = [math.exp(x - top) for x in b_mat[i]]
            z = sum(e)
            for jj in range(j):
                c[i][jj] = e[jj] / z
    else:
        groups = partition if partition is not None else ((0, n),)
        for a, z_end in groups:
            for jj in range(j):
                col = [b_mat[i][jj] for i in range(a, z_end)]
                top = max(col)
                e = [math.exp(x - top) for x in col]
                z = sum(e)
                for k, i in enumerate(range(a, z_end)):
                    c[i][jj] = e[k] / z
    return c


def rate_of_change_report(trace: RoutingTrace) -> list[RateOfChangeRow]:
    """Per-iteration coupling-change statistics from a captured trace."""
    if len(trace.steps) < 2:
        raise ValueError("rate_of_change_report needs a trace with >= 2 iterations")
    rows = []
    for t, delta in enumerate(trace.coupling_deltas(), start=1):
        mean_dc = float(delta.mean())
        rows.append(RateOfChangeRow(
            iteration=t, mean_dc=mean_dc, max_dc=float(delta.max()),
            rel_dc=mean_dc / trace.c0, c0=trace.c0))
    return rows
