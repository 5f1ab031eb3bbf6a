"""Discrete 2-Wasserstein distance and the importance-concentration loss.

The distance between two discrete distributions on the line is computed
exactly through the CDF-inverse (quantile) coupling, which is the optimal
transport plan for any convex ground cost in one dimension. The loss
compares the normalized neuron-importance vector, viewed as a distribution
over neuron index positions mapped to [0, 1], against a percentile-style
target that concentrates mass on the highest-importance neurons. Its
gradient is the envelope subgradient: the optimal coupling is held fixed
while the marginal weights move, which equals the true gradient wherever the
coupling is locally constant and is finite everywhere.

Pure functions throughout; safe for concurrent use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_float_array
from .errors import ContractError

WEIGHT_SUM_TOL = 1e-9


def _unit_grid(d: int) -> np.ndarray:
    """Neuron index positions normalized to [0, 1]."""
    if d == 1:
        return np.zeros(1)
    return np.arange(d, dtype=np.float64) / (d - 1)


@dataclass(frozen=True)
class DiscreteDistribution:
    """Weighted atoms on the real line, sorted ascending."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = as_float_array(self.points, "points")
        w = as_float_array(self.weights, "weights")
        if pts.shape != w.shape:
            raise ContractError("points and weights must have matching shapes")
        if pts.size == 0:
            raise ContractError("distribution must have at least one atom")
        if np.any(np.diff(pts) < 0):
            raise ContractError("points must be sorted ascending")
        if np.any(w < -1e-12):
            raise ContractError("weights must be non-negative")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ContractError(f"weights must sum to 1 (got {w.sum()!r})")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", np.clip(w, 0.0, None))

    @staticmethod
    def on_unit_grid(weights) -> "DiscreteDistribution":
        w = as_float_array(weights, "weights")
        return DiscreteDistribution(points=_unit_grid(w.size), weights=w)


@dataclass(frozen=True)
class TargetDistribution:
    """Concentration target: uniform mass on the top importance neurons.

    ``support`` holds the indices of the ceil(rho * d) highest-importance
    neurons (ties broken toward the lowest index); each carries mass
    1/|support| so the weights form a valid distribution. ``threshold`` is
    the smallest importance value in the support, so the support equals
    {j : importance_j >= threshold} up to the tie rule.
    """

    weights: np.ndarray = field(repr=False)
    support: np.ndarray
    threshold: float

    @property
    def size(self) -> int:
        return int(self.support.size)


def _quantile_cost_and_grad(aw, ap, bw, bp):
    """Squared transport cost of the quantile coupling plus d(cost)/d(aw).

    Sweeps the merged cumulative weights of both distributions; each segment
    between consecutive breakpoints pairs one source atom with one target
    atom. With the segment structure held fixed the cost is linear in the
    breakpoints, so the derivative with respect to each source cumulative
    weight is the cost-density drop across its breakpoint; the chain rule
    back to the weights is a suffix sum.
    """
    n, m = len(aw), len(bw)
    cu = np.cumsum(aw)
    cv = np.cumsum(bw)
    i = j = 0
    q_prev = 0.0
    cost2 = 0.0
    g_cu = np.zeros(n)
    open_src = -1  # source index whose cumsum closed the previous segment
    while i < n and j < m:
        c = (ap[i] - bp[j]) ** 2
        if open_src >= 0:
            g_cu[open_src] -= c
            open_src = -1
        qi = cu[i]
        qj = cv[j]
        q_next = qi if qi <= qj else qj
        if q_next > q_prev:
            cost2 += (q_next - q_prev) * c
        if qi <= qj:
            g_cu[i] += c
            open_src = i
            i += 1
            if qj <= qi:  # exact tie: consume the target atom as well
                j += 1
            q_prev = q_next
        else:
            j += 1
            q_prev = q_next
    grad_aw = np.cumsum(g_cu[::-1])[::-1]
    return cost2, grad_aw


def w2_discrete(mu: DiscreteDistribution, nu: DiscreteDistribution) -> float:
    """Exact 2-Wasserstein distance between two discrete distributions.

    One-dimensional supports admit the closed-form quantile coupling; the
    returned value is the square root of the optimal quadratic cost.
    """
    cost2, _ = _quantile_cost_and_grad(mu.weights, mu.points, nu.weights, nu.points)
    return math.sqrt(max(cost2, 0.0))


def target_distribution(importance, rho: float) -> TargetDistribution:
    """Uniform target over the top ceil(rho * d) neurons by importance.

    Equivalent to thresholding strictly above the (1 - rho) * 100 linear
    percentile when importance values are distinct; ties are broken toward
    the lowest index, and rho = 1 yields the uniform distribution over all
    neurons.
    """
    if not 0.0 < rho <= 1.0:
        raise ContractError(f"rho must lie in (0, 1], got {rho!r}")
    a = as_float_array(importance, "importance")
    d = a.size
    if d == 0:
        raise ContractError("importance vector must be non-empty")
    k = int(math.ceil(rho * d))
    order = np.lexsort((np.arange(d), -a))
    support = np.sort(order[:k])
    weights = np.zeros(d)
    weights[support] = 1.0 / k
    return TargetDistribution(weights=weights, support=support, threshold=float(a[order[k - 1]]))


@dataclass(frozen=True)
class WassersteinLossResult:
    """Loss value, gradient w.r.t. the raw importance vector, and a flag
    marking the degenerate all-zero-importance case (uniform source used)."""

    value: float
    grad: np.ndarray = field(repr=False)
    used_uniform_source: bool = False


def wasserstein_loss(importance, rho: float, value_space: bool = False) -> WassersteinLossResult:
    """Transport distance from normalized importance to its top-rho target.

    The importance vector is normalized to a probability distribution over
    index positions in [0, 1] (so the loss is invariant to positive
    rescaling); the target carries uniform mass on the top ceil(rho * d)
    neurons. The gradient holds the optimal coupling fixed (envelope
    subgradient) and accounts for the normalization, so it is finite
    everywhere including the degenerate cases.

    ``value_space=True`` places atoms at the importance values themselves
    instead of index positions; the gradient then also treats the positions
    as fixed and is only the weight-marginal envelope term.
    """
    a = as_float_array(importance, "importance")
    if np.any(a < 0):
        raise ContractError("importance must be non-negative")
    d = a.size
    total = a.sum()
    degenerate = not total > 0
    w = np.full(d, 1.0 / d) if degenerate else a / total
    target = target_distribution(a, rho)

    if value_space:
        order = np.argsort(a, kind="stable")
        pts = a[order]
        cost2, g_sorted = _quantile_cost_and_grad(w[order], pts, target.weights[order], pts)
        grad_w = np.empty(d)
        grad_w[order] = g_sorted
    else:
        pts = _unit_grid(d)
        cost2, grad_w = _quantile_cost_and_grad(w, pts, target.weights, pts)

    value = math.sqrt(max(cost2, 0.0))
    if degenerate or value < 1e-15:
        grad = np.zeros(d)
    else:
        dv = grad_w / (2.0 * value)
        grad = (dv - float(np.dot(w, dv))) / total
    return WassersteinLossResult(value=value, grad=grad, used_uniform_source=degenerate)
