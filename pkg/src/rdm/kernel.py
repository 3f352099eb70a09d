"""RBF kernels on scalar risks, squared MMD and distributional variance.

The kernel is ``k(x, y) = exp(-(x - y)**2 / (2 * sigma))``: the bandwidth
divides the squared distance directly (it is not squared).  With several
bandwidths the kernel is the arithmetic mean of the per-bandwidth kernels.

Feature maps and mean embeddings are never materialised; everything goes
through kernel sums over samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_BANDWIDTHS = (0.0001, 0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)


@dataclass(frozen=True)
class KernelSpec:
    bandwidths: tuple[float, ...] = DEFAULT_BANDWIDTHS
    estimator: str = "biased-v"

    def __post_init__(self):
        object.__setattr__(self, "bandwidths", tuple(float(s) for s in self.bandwidths))
        if not self.bandwidths:
            raise ValueError("KernelSpec needs at least one bandwidth")
        if any(not s > 0 for s in self.bandwidths):
            raise ValueError(f"bandwidths must be positive, got {self.bandwidths}")
        if self.estimator != "biased-v":
            raise ValueError(f"unsupported estimator {self.estimator!r}")


@dataclass
class RiskVector:
    """Per-sample risks of one domain's batch.

    ``logits`` and ``labels`` are kept when available because some penalties
    (IRM) need more than the scalar risks.
    """

    domain_id: int
    risks: Tensor
    logits: Tensor | None = None
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.risks.shape[0]

    def mean(self) -> Tensor:
        return self.risks.mean()


@dataclass
class PooledRisks:
    risks: Tensor
    domain_ids: list[int]
    bounds: list[tuple[int, int]] = field(default_factory=list)

    def block(self, e: int) -> Tensor:
        lo, hi = self.bounds[e]
        return self.risks[lo:hi]


class _CallCounter:
    def __init__(self):
        self.mmd2 = 0

    def reset(self) -> None:
        self.mmd2 = 0


#: Incremented once per :func:`mmd2` evaluation.
calls = _CallCounter()


def rbf(x: float, y: float, sigma: float) -> float:
    if not sigma > 0:
        raise ValueError(f"bandwidth must be positive, got {sigma}")
    return math.exp(-((x - y) ** 2) / (2.0 * sigma))


def multi_rbf(x: float, y: float, spec: KernelSpec = KernelSpec()) -> float:
    return sum(rbf(x, y, s) for s in spec.bandwidths) / len(spec.bandwidths)


def _as_risks(x) -> Tensor:
    if isinstance(x, RiskVector):
        return x.risks
    if isinstance(x, PooledRisks):
        return x.risks
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64).reshape(-1))


def _gram_mean(x: Tensor, y: Tensor, spec: KernelSpec) -> Tensor:
    """mean_{i,j} k(x_i, y_j) with k averaged over the bandwidths."""
    diff = ad.sub(ad.reshape(x, (-1, 1)), ad.reshape(y, (1, -1)))
    sq = ad.square(diff)
    total = None
    for s in spec.bandwidths:
        term = ad.exp(sq * (-1.0 / (2.0 * s))).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(spec.bandwidths))


def mmd2(x, y, spec: KernelSpec = KernelSpec()) -> Tensor:
    """Biased (V-statistic) squared MMD between two scalar samples.

    Differentiable with respect to either sample.  The value can dip below
    zero by rounding only; use :func:`mmd2_value` for a clamped float.
    """
    x, y = _as_risks(x), _as_risks(y)
    if x.data.size == 0 or y.data.size == 0:
        raise ValueError("mmd2 needs two nonempty samples")
    calls.mmd2 += 1
    return _gram_mean(x, x, spec) - 2.0 * _gram_mean(x, y, spec) + _gram_mean(y, y, spec)


def mmd2_value(x, y, spec: KernelSpec = KernelSpec()) -> float:
    return max(mmd2(x, y, spec).item(), 0.0)


def pool(risks: Sequence) -> PooledRisks:
    """Concatenate domain samples; equal sizes make this the uniform mixture."""
    tensors = [_as_risks(r) for r in risks]
    ids = [r.domain_id if isinstance(r, RiskVector) else e for e, r in enumerate(risks)]
    bounds, lo = [], 0
    for t in tensors:
        bounds.append((lo, lo + t.shape[0]))
        lo += t.shape[0]
    return PooledRisks(ad.concat(tensors), ids, bounds)


def distributional_variance(risks: Sequence, spec: KernelSpec = KernelSpec()) -> Tensor:
    """(1/m) sum_e MMD^2(T_e, T) with T the pooled sample of all m domains."""
    if len(risks) < 2:
        raise ValueError(f"distributional variance needs m >= 2 domains, got {len(risks)}")
    pooled = pool(risks).risks
    terms = [mmd2(r, pooled, spec) for r in risks]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def worst_case_index(mean_risks: Sequence[float]) -> int:
    """Index of the largest mean risk; ties go to the lowest index."""
    values = np.asarray(mean_risks, dtype=np.float64)
    if values.size == 0:
        raise ValueError("worst_case_index: empty list")
    if np.isnan(values).any():
        raise ValueError("worst_case_index: NaN in mean risks")
    return int(np.argmax(values))
