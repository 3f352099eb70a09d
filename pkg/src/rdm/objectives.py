"""Training objectives over per-domain risk vectors.

Every loss here is an autodiff scalar built from the domains' ``RiskVector``
objects, so one ``Tape.backward`` call gives parameter gradients for any of
them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kernel import KernelSpec, RiskVector, distributional_variance, mmd2, pool, worst_case_index

KINDS = ("erm", "rdm-full", "rdm-worst", "rdm-moments", "vrex", "groupdro", "irm")
PENALISED = frozenset(KINDS) - {"erm"}


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = "erm"
    lam: float = 1.0
    beta: float = 0.0
    eta: float = 0.01
    kernel: KernelSpec = field(default_factory=KernelSpec)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        if self.lam < 0 or self.beta < 0:
            raise ValueError("lambda and beta must be nonnegative")
        if self.kind == "groupdro" and not self.eta > 0:
            raise ValueError("GroupDRO step size eta must be positive")


@dataclass
class ObjectiveResult:
    loss: Tensor
    penalty: float
    worst: int | None = None


def _check(risks: Sequence[RiskVector], min_domains: int = 1) -> None:
    if len(risks) < min_domains:
        raise ValueError(f"need at least {min_domains} domains, got {len(risks)}")
    for r in risks:
        if len(r) == 0:
            raise ValueError(f"domain {r.domain_id} has an empty batch")


def _variance(x: Tensor) -> Tensor:
    return ad.square(x - x.mean()).mean()


def _mean_risks(risks: Sequence[RiskVector]) -> list[Tensor]:
    return [r.risks.mean() for r in risks]


def _average(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def erm_loss(risks: Sequence[RiskVector]) -> Tensor:
    """Mean over domains of each domain's mean risk."""
    _check(risks)
    return _average(_mean_risks(risks))


def worst_domain(risks: Sequence[RiskVector]) -> int:
    return worst_case_index([r.risks.data.mean() for r in risks])


def rdm_full_penalty(risks, cfg: ObjectiveConfig) -> Tensor:
    _check(risks, 2)
    return distributional_variance(risks, cfg.kernel)


def rdm_full_loss(risks, cfg: ObjectiveConfig) -> Tensor:
    return erm_loss(risks) + cfg.lam * rdm_full_penalty(risks, cfg)


def rdm_worst_terms(risks, cfg: ObjectiveConfig):
    """(MMD^2(T_w, T), variance regulariser, w) for the current batch."""
    _check(risks, 2)
    w = worst_domain(risks)
    pooled = pool(risks).risks
    penalty = mmd2(risks[w].risks, pooled, cfg.kernel)
    var_reg = _variance(risks[w].risks) + _variance(pooled)
    return penalty, var_reg, w


def rdm_worst_loss(risks, cfg: ObjectiveConfig) -> Tensor:
    penalty, var_reg, _ = rdm_worst_terms(risks, cfg)
    return erm_loss(risks) + cfg.lam * penalty + cfg.beta * var_reg


def rdm_moments_penalty(risks, cfg: ObjectiveConfig | None = None) -> tuple[Tensor, int]:
    """Squared gaps in mean and population variance between T_w and pooled T."""
    _check(risks, 2)
    if any(len(r) < 2 for r in risks):
        raise ValueError("moment matching needs at least 2 samples per domain")
    w = worst_domain(risks)
    tw, pooled = risks[w].risks, pool(risks).risks
    gap = ad.square(tw.mean() - pooled.mean()) + ad.square(_variance(tw) - _variance(pooled))
    return gap, w


def rdm_moments_loss(risks, cfg: ObjectiveConfig) -> Tensor:
    penalty, _ = rdm_moments_penalty(risks, cfg)
    return erm_loss(risks) + cfg.lam * penalty


def vrex_penalty(risks) -> Tensor:
    _check(risks, 2)
    means = ad.concat([ad.reshape(m, (1,)) for m in _mean_risks(risks)])
    return _variance(means)


def vrex_loss(risks, lam: float) -> Tensor:
    return erm_loss(risks) + lam * vrex_penalty(risks)


def groupdro_loss(risks, q, eta: float) -> tuple[Tensor, np.ndarray]:
    """Exponentiated-gradient reweighting; returns (loss, updated q)."""
    _check(risks)
    means = _mean_risks(risks)
    q = np.asarray(q, dtype=np.float64) * np.exp(eta * np.array([m.item() for m in means]))
    q = q / q.sum()
    stacked = ad.concat([ad.reshape(m, (1,)) for m in means])
    return ad.sum_(ad.mul(stacked, q)), q


def irm_penalty(risks) -> Tensor:
    """Sum over domains of (d mean-risk / d s)^2 at logit scale s = 1.

    For softmax cross-entropy ``d l / d s = sum_k (p_k - y_k) z_k`` at s = 1,
    so the penalty is an ordinary first-order expression in the logits.
    """
    _check(risks)
    total = None
    for r in risks:
        if r.logits is None or r.labels is None:
            raise ValueError("irm_penalty needs logits and labels on each RiskVector")
        p = ad.softmax(r.logits)
        onehot = np.eye(r.logits.shape[1])[r.labels]
        dlds = ad.sum_(ad.mul(ad.sub(p, onehot), r.logits), axis=1).mean()
        term = ad.square(dlds)
        total = term if total is None else total + term
    return total


def compute_objective(risks: Sequence[RiskVector], cfg: ObjectiveConfig,
                      state: dict | None = None) -> ObjectiveResult:
    """Dispatch on ``cfg.kind``.  ``state`` carries GroupDRO's ``q``."""
    kind = cfg.kind
    if kind == "erm":
        return ObjectiveResult(erm_loss(risks), 0.0)
    if kind == "rdm-full":
        penalty = rdm_full_penalty(risks, cfg)
        return ObjectiveResult(erm_loss(risks) + cfg.lam * penalty, penalty.item())
    if kind == "rdm-worst":
        penalty, var_reg, w = rdm_worst_terms(risks, cfg)
        loss = erm_loss(risks) + cfg.lam * penalty + cfg.beta * var_reg
        return ObjectiveResult(loss, penalty.item(), w)
    if kind == "rdm-moments":
        penalty, w = rdm_moments_penalty(risks, cfg)
        return ObjectiveResult(erm_loss(risks) + cfg.lam * penalty, penalty.item(), w)
    if kind == "vrex":
        penalty = vrex_penalty(risks)
        return ObjectiveResult(erm_loss(risks) + cfg.lam * penalty, penalty.item(), worst_domain(risks))
    if kind == "irm":
        penalty = irm_penalty(risks)
        return ObjectiveResult(erm_loss(risks) + cfg.lam * penalty, penalty.item())
    if kind == "groupdro":
        state = {} if state is None else state
        q = state.get("q")
        if q is None:
            q = np.full(len(risks), 1.0 / len(risks))
        loss, state["q"] = groupdro_loss(risks, q, cfg.eta)
        return ObjectiveResult(loss, 0.0, worst_domain(risks))
    raise ValueError(f"unknown objective kind {kind!r}")
