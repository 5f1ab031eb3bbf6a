"""Unbiased and smooth neuron statistics under input perturbation.

For a reference input and m perturbed samples, the layer-level unbiased
metric is the mean l1 norm of the pre-activation deviation and the smooth
metric is the mean squared l2 norm. Per neuron, the unbiased contribution
is the absolute mean deviation (the empirical bias) and the smooth
contribution is the population variance plus squared bias, so that the
per-neuron smooth values sum exactly to the layer smooth metric. The
importance score is the dimensionless ratio smooth / (unbiased^2 + eps)
normalized by the layer width; high scores mark variance-dominated,
unstable neurons.

``UsnStats`` is a streaming accumulator over deviation moments so batches
can be merged exactly (count-weighted parallel mean/variance update); this
is what the training loop accumulates between prune events.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from ._validation import as_float_array
from .errors import ContractError

DEFAULT_EPS_USN = 1e-8


def _deviations(net, x0, samples, ordinal) -> np.ndarray:
    """Pre-activation deviations f^i(x_k) - f^i(x0), shape (m, d_i).

    The reference input rides in the same batched forward as the samples so
    identical inputs yield exactly zero deviation (batched reductions can
    differ from single-image ones in the last bits).
    """
    net._check_ordinal(ordinal)
    x0_b, single = net._coerce_input(x0)
    if not single and x0_b.shape[0] != 1:
        raise ContractError("x0 must be a single image")
    samples_b, _ = net._coerce_input(samples)
    stacked = net.forward(torch.cat([x0_b, samples_b], dim=0)).pre_activation(ordinal)
    return (stacked[1:] - stacked[0]).numpy()


def layer_metrics(net, x0, samples, i: int) -> tuple:
    """Layer-level (unbiased, smooth) metrics from m perturbed samples.

    Direct summation of the defining formulas; the decomposed per-neuron
    route in ``neuron_contributions`` must agree with the smooth value to
    high precision, which the tests enforce.
    """
    dev = _deviations(net, x0, samples, i)
    if dev.shape[0] < 1:
        raise ContractError("sample set must be non-empty")
    unbiased = float(np.abs(dev).sum(axis=1).mean())
    smooth = float((dev ** 2).sum(axis=1).mean())
    return unbiased, smooth


def neuron_contributions(net, x0, samples, i: int) -> tuple:
    """Per-neuron (unbiased, smooth) contributions.

    unbiased_j = |mean_k dev_j|, smooth_j = var_k dev_j + (mean_k dev_j)^2
    with the population (1/m) variance convention, making the sum over j of
    smooth_j exactly the layer smooth metric.
    """
    dev = _deviations(net, x0, samples, i)
    if dev.shape[0] < 2:
        raise ContractError("need at least 2 samples for variance estimates")
    mean = dev.mean(axis=0)
    var = dev.var(axis=0)  # population convention
    return np.abs(mean), var + mean ** 2


def importance(per_neuron_unbiased, per_neuron_smooth, eps_usn: float = DEFAULT_EPS_USN,
               d_i: int | None = None) -> np.ndarray:
    """Importance score per neuron: smooth / ((unbiased^2 + eps) * d_i).

    Dimensionless (scale-invariant as eps -> 0) and finite for eps > 0;
    eps = 0 is tolerated for plug-in checks but divides by zero on neurons
    with zero bias. ``d_i`` defaults to the vector length.
    """
    if eps_usn < 0:
        raise ContractError(f"eps_usn must be >= 0, got {eps_usn}")
    unb = as_float_array(per_neuron_unbiased, "per_neuron_unbiased")
    smo = as_float_array(per_neuron_smooth, "per_neuron_smooth")
    if unb.shape != smo.shape:
        raise ContractError("per-neuron arrays must have matching shapes")
    d = unb.size if d_i is None else int(d_i)
    if d < 1:
        raise ContractError(f"d_i must be >= 1, got {d_i}")
    return smo / ((unb ** 2 + eps_usn) * d)


def channel_importance(importance_vec, channel_map) -> np.ndarray:
    """Mean importance per channel.

    ``channel_map`` must partition the neuron indices; the mean (not max)
    aggregation keeps channel scores robust to single-neuron outliers.
    """
    imp = as_float_array(importance_vec, "importance")
    idx = [np.asarray(g, dtype=int) for g in channel_map]
    flat = np.concatenate(idx) if idx else np.array([], dtype=int)
    if sorted(flat.tolist()) != list(range(imp.size)):
        raise ContractError("channel_map must partition the neuron indices")
    return np.array([imp[g].mean() for g in idx])


@dataclass
class UsnStats:
    """Streaming per-layer deviation statistics.

    Stores raw moments (per-neuron deviation mean, centered second moment,
    and summed absolute deviations) so that accumulation across batches is
    exact; the metric views are derived properties.
    """

    layer: int
    count: int
    sum_abs: np.ndarray = field(repr=False)
    dev_mean: np.ndarray = field(repr=False)
    dev_m2: np.ndarray = field(repr=False)

    @staticmethod
    def zeros(layer: int, width: int) -> "UsnStats":
        return UsnStats(layer=layer, count=0, sum_abs=np.zeros(width),
                        dev_mean=np.zeros(width), dev_m2=np.zeros(width))

    @staticmethod
    def from_deviations(layer: int, dev: np.ndarray) -> "UsnStats":
        dev = np.atleast_2d(np.asarray(dev, dtype=np.float64))
        mean = dev.mean(axis=0)
        return UsnStats(layer=layer, count=dev.shape[0],
                        sum_abs=np.abs(dev).sum(axis=0), dev_mean=mean,
                        dev_m2=((dev - mean) ** 2).sum(axis=0))

    @property
    def width(self) -> int:
        return self.dev_mean.size

    @property
    def sample_count(self) -> int:
        return self.count

    @property
    def unbiased(self) -> float:
        """Layer unbiased metric: mean l1 deviation."""
        return float(self.sum_abs.sum() / self.count) if self.count else 0.0

    @property
    def smooth(self) -> float:
        """Layer smooth metric: mean squared l2 deviation."""
        return float(self.per_neuron_smooth.sum()) if self.count else 0.0

    @property
    def per_neuron_unbiased(self) -> np.ndarray:
        return np.abs(self.dev_mean)

    @property
    def per_neuron_smooth(self) -> np.ndarray:
        if not self.count:
            return np.zeros(self.width)
        return self.dev_m2 / self.count + self.dev_mean ** 2

    @property
    def per_neuron_mean_abs(self) -> np.ndarray:
        """Mean absolute deviation per neuron (upper-bounds the bias)."""
        return self.sum_abs / self.count if self.count else np.zeros(self.width)

    def importance_scores(self, eps_usn: float = DEFAULT_EPS_USN) -> np.ndarray:
        if not self.count:
            return np.zeros(self.width)
        return importance(self.per_neuron_unbiased, self.per_neuron_smooth, eps_usn, self.width)


def collect_stats(net, x0, samples, ordinals) -> dict:
    """UsnStats for each requested layer from one sample batch."""
    return {i: UsnStats.from_deviations(i, _deviations(net, x0, samples, i)) for i in ordinals}


def accumulate(running: UsnStats, batch: UsnStats) -> UsnStats:
    """Count-weighted exact merge of two statistics over the same layer.

    Uses the parallel mean/variance update, so merging any split of a sample
    set reproduces the one-shot computation and is order-insensitive up to
    floating point. Merging with a zero-count accumulator is the identity.
    """
    if running.layer != batch.layer:
        raise ContractError(f"layer mismatch: {running.layer} vs {batch.layer}")
    if running.width != batch.width:
        raise ContractError(f"width mismatch: {running.width} vs {batch.width}")
    na, nb = running.count, batch.count
    if na == 0:
        return UsnStats(batch.layer, nb, batch.sum_abs.copy(),
                        batch.dev_mean.copy(), batch.dev_m2.copy())
    if nb == 0:
        return UsnStats(running.layer, na, running.sum_abs.copy(),
                        running.dev_mean.copy(), running.dev_m2.copy())
    n = na + nb
    delta = batch.dev_mean - running.dev_mean
    mean = running.dev_mean + delta * (nb / n)
    m2 = running.dev_m2 + batch.dev_m2 + delta ** 2 * (na * nb / n)
    return UsnStats(running.layer, n, running.sum_abs + batch.sum_abs, mean, m2)


def write_stats_csv(path, stats: dict, eps_usn: float = DEFAULT_EPS_USN) -> None:
    """Per-neuron dump: layer, neuron, unbiased, smooth, importance."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "neuron", "unbiased", "smooth", "importance"])
        for layer in sorted(stats):
            st = stats[layer]
            unb = st.per_neuron_unbiased
            smo = st.per_neuron_smooth
            imp = st.importance_scores(eps_usn)
            for j in range(st.width):
                writer.writerow([layer, j, repr(unb[j]), repr(smo[j]), repr(imp[j])])
