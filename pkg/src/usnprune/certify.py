"""Robustness certificates for semantically perturbed keypoint networks.

Three complementary methods:

* ``certify_grid`` partitions the scalar perturbation parameter into cells
  and bounds the output deviation on each cell by the observed deviation at
  the cell center plus the input-to-output Lipschitz constant times the
  cell's input-radius bound. A Holds verdict is sound; the method never
  reports Violated, and it is complete in the limit of many cells.
* ``certify_probabilistic`` estimates per-neuron bias and variance at every
  intermediate layer from uniform samples and applies the Chebyshev plus
  union-bound argument: if every neuron passes the bias threshold
  delta / (2 C_i sqrt(d_i)) and the variance threshold
  alpha delta^2 / (4 C_i^2 d_i^2 (L - i)), the certification goal holds with
  confidence 1 - alpha. The per-neuron budget alpha / (d_i (L - i)) follows
  the printed allocation and is conservative; reports flag this.
* ``falsify`` searches sampled parameters and interval endpoints for a
  witness whose output deviation exceeds the criterion, producing the only
  Violated verdicts.

``campaign`` runs a certification sweep over networks, perturbation specs,
and test images and emits the CSV/JSON reports the tables are built from.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from ._validation import check_positive, check_probability, spawn_rng
from .errors import ContractError
from .network import Network, lipschitz_to_output, layer_spectral_norms
from .perturbation import PerturbationSpec, cell_radius_bound, grid, sample, sample_params

HOLDS = "holds"
VIOLATED = "violated"
UNKNOWN = "unknown"

_BATCH = 4096  # chunk size for large falsification batches


@dataclass(frozen=True)
class KeypointCriterion:
    """Certification goal: every keypoint moves less than ``delta`` output
    pixels, i.e. the output deviation under the q-norm stays below delta."""

    delta: float = 1.0
    q_norm: float = math.inf
    num_keypoints: Optional[int] = None

    def __post_init__(self):
        check_positive(self.delta, "delta")
        if self.q_norm < 2:
            raise ContractError("q_norm must be >= 2 for the Lipschitz bounds to apply")

    def to_dict(self) -> dict:
        return {"delta": self.delta, "q_norm": self.q_norm, "num_keypoints": self.num_keypoints}


@dataclass
class CertificateResult:
    verdict: str
    method: str
    margin: float
    confidence: Optional[float] = None
    wall_time: float = 0.0
    detail: dict = field(default_factory=dict)

    @property
    def holds(self) -> bool:
        return self.verdict == HOLDS


def _qnorm(dev: torch.Tensor, q: float) -> torch.Tensor:
    """Row-wise q-norm of a (n, d) deviation matrix."""
    if math.isinf(q):
        return dev.abs().amax(dim=-1)
    return torch.linalg.vector_norm(dev, ord=q, dim=-1)


def certify_grid(net: Network, x0, spec: PerturbationSpec, criterion: KeypointCriterion,
                 n_cells: int, *, lipschitz_const: Optional[float] = None) -> CertificateResult:
    """Deterministic certificate from a parameter-grid sweep.

    Per cell: ||f(h(s)) - f(x0)||_q <= ||f(center) - f(x0)||_q +
    C_0 * input_radius_bound, using that the q-norm is dominated by the
    l2 norm for q >= 2. Holds if every cell's bound stays within delta;
    otherwise Unknown (never Violated).
    """
    t0 = time.perf_counter()
    c0 = lipschitz_to_output(net, 0) if lipschitz_const is None else lipschitz_const
    cells = grid(spec, x0, n_cells)
    out0 = net.outputs(x0)
    centers = torch.stack([c.center_image for c in cells])
    devs = _qnorm(net.outputs(centers) - out0, criterion.q_norm)
    bounds = devs.numpy() + c0 * np.array([c.input_radius_bound for c in cells])
    worst = int(np.argmax(bounds))
    margin = criterion.delta - float(bounds[worst])
    verdict = HOLDS if margin >= 0 else UNKNOWN
    return CertificateResult(
        verdict=verdict, method="grid-lipschitz", margin=margin,
        wall_time=time.perf_counter() - t0,
        detail={"n_cells": n_cells, "lipschitz_input": c0,
                "worst_cell_center": cells[worst].s_center,
                "worst_bound": float(bounds[worst]),
                "worst_observed": float(devs[worst])})


def _layer_moments(net: Network, x0, samples_t: torch.Tensor) -> dict:
    """Per-layer (bias, variance) arrays of the pre-activation deviations.

    The reference image rides in the same batched forward as the samples so
    a zero-radius perturbation yields exactly zero moments.
    """
    x0_b, _ = net._coerce_input(x0)
    samples_b, _ = net._coerce_input(samples_t)
    stacked = net.forward(torch.cat([x0_b, samples_b], dim=0))
    moments = {}
    for i in range(1, net.num_linear):
        pre = stacked.pre_activation(i)
        dev = (pre[1:] - pre[0]).numpy()
        mean = dev.mean(axis=0)
        moments[i] = (np.abs(mean), dev.var(axis=0))
    return moments


def probabilistic_thresholds(net: Network, i: int, criterion: KeypointCriterion, alpha: float,
                             *, lipschitz_const: Optional[float] = None) -> tuple:
    """(bias, variance) thresholds for layer i at miss probability alpha."""
    L = net.num_linear
    c_i = lipschitz_to_output(net, i) if lipschitz_const is None else lipschitz_const
    d_i = net.width(i)
    bias_thr = criterion.delta / (2.0 * c_i * math.sqrt(d_i))
    var_thr = alpha * criterion.delta ** 2 / (4.0 * c_i ** 2 * d_i ** 2 * (L - i))
    return bias_thr, var_thr


def certify_probabilistic(net: Network, x0, spec: PerturbationSpec, criterion: KeypointCriterion,
                          alpha: float = 0.01, m: int = 256, rng=None, *,
                          spectral_norms: Optional[list] = None) -> CertificateResult:
    """Confidence-(1 - alpha) certificate from per-neuron moment bounds.

    Estimates each intermediate neuron's bias and variance from m uniform
    samples; Holds iff every neuron at every layer i <= L-1 passes both
    thresholds. Otherwise Unknown, reporting the tightest failing neuron.
    """
    check_probability(alpha, "alpha", open_interval=True)
    if m < 2:
        raise ContractError("need m >= 2 samples for variance estimates")
    if net.num_linear < 2:
        raise ContractError("probabilistic certification needs at least one intermediate layer")
    t0 = time.perf_counter()
    rng = rng if rng is not None else np.random.default_rng(0)
    if spectral_norms is None:
        spectral_norms = layer_spectral_norms(net)
    samples_t = sample(spec, x0, m, rng)
    moments = _layer_moments(net, x0, samples_t)
    worst = None  # (relative margin, layer, neuron, kind, value, threshold)
    for i, (bias, var) in moments.items():
        c_i = lipschitz_to_output(net, i, spectral_norms=spectral_norms)
        bias_thr, var_thr = probabilistic_thresholds(net, i, criterion, alpha, lipschitz_const=c_i)
        for kind, values, thr in (("bias", bias, bias_thr), ("variance", var, var_thr)):
            j = int(np.argmax(values))
            rel = (thr - float(values[j])) / thr
            if worst is None or rel < worst[0]:
                worst = (rel, i, j, kind, float(values[j]), thr)
    rel_margin, layer_i, neuron_j, kind, value, thr = worst
    verdict = HOLDS if rel_margin >= 0 else UNKNOWN
    return CertificateResult(
        verdict=verdict, method="probabilistic", margin=rel_margin,
        confidence=1.0 - alpha, wall_time=time.perf_counter() - t0,
        detail={"m": m, "alpha": alpha, "binding_layer": layer_i, "binding_neuron": neuron_j,
                "binding_bound": kind, "measured": value, "threshold": thr,
                "union_bound_allocation": "alpha/(d_i*(L-i)) per neuron (conservative)"})


def usn_necessary_bounds(net: Network, i: int, criterion: KeypointCriterion, alpha: float,
                         *, lipschitz_const: Optional[float] = None) -> tuple:
    """Upper bounds the layer metrics must satisfy when every neuron passes
    the per-neuron thresholds: unbiased <= delta sqrt(d_i) / (2 C_i) and
    smooth <= (delta^2 / (4 C_i^2)) (alpha / (d_i (L - i)) + 1). Useful as a
    diagnostic: a measured layer metric above its bound implies some neuron
    fails the corresponding per-neuron threshold on the same samples."""
    L = net.num_linear
    if not 1 <= i <= L - 1:
        raise ContractError(f"layer index must satisfy 1 <= i <= {L - 1}, got {i}")
    check_probability(alpha, "alpha")
    c_i = lipschitz_to_output(net, i) if lipschitz_const is None else lipschitz_const
    d_i = net.width(i)
    unbiased_bound = criterion.delta * math.sqrt(d_i) / (2.0 * c_i)
    smooth_bound = (criterion.delta ** 2 / (4.0 * c_i ** 2)) * (alpha / (d_i * (L - i)) + 1.0)
    return unbiased_bound, smooth_bound


def falsify(net: Network, x0, spec: PerturbationSpec, criterion: KeypointCriterion,
            m: int, rng=None) -> CertificateResult:
    """Sampling falsifier: Violated with a witness parameter if any sampled
    or interval-endpoint perturbation moves the output beyond delta,
    otherwise Unknown."""
    if m < 1:
        raise ContractError("need m >= 1 falsification samples")
    t0 = time.perf_counter()
    rng = rng if rng is not None else np.random.default_rng(0)
    params = np.concatenate([
        np.array([spec.s0 - spec.epsilon, spec.s0, spec.s0 + spec.epsilon]),
        sample_params(spec, m, rng),
    ])
    out0 = net.outputs(x0)
    worst_dev = -1.0
    worst_s = float(spec.s0)
    x0_img = torch.as_tensor(np.asarray(x0, dtype=np.float64)) if not isinstance(x0, torch.Tensor) else x0
    for start in range(0, params.size, _BATCH):
        chunk = params[start:start + _BATCH]
        s = torch.as_tensor(chunk).reshape((-1,) + (1,) * x0_img.ndim)
        if spec.kind == "brightness":
            imgs = (x0_img.unsqueeze(0) + s)
        else:
            imgs = (x0_img.unsqueeze(0) * s)
        imgs = imgs.clamp(*spec.clip_range)
        devs = _qnorm(net.outputs(imgs) - out0, criterion.q_norm).numpy()
        k = int(np.argmax(devs))
        if devs[k] > worst_dev:
            worst_dev = float(devs[k])
            worst_s = float(chunk[k])
    margin = criterion.delta - worst_dev if math.isfinite(criterion.delta) else math.inf
    verdict = VIOLATED if worst_dev > criterion.delta else UNKNOWN
    return CertificateResult(
        verdict=verdict, method="sampling-falsify", margin=margin,
        wall_time=time.perf_counter() - t0,
        detail={"witness_s": worst_s, "worst_deviation": worst_dev,
                "n_evaluated": int(params.size)})


# ----- campaign --------------------------------------------------------------


@dataclass
class CampaignReport:
    rows: list
    summary: dict
    criterion: KeypointCriterion

    def accuracy(self, net_name: str, spec_label: str) -> float:
        return self.summary[net_name][spec_label]["verification_accuracy"]


def _auto_cells(net: Network, x0, spec: PerturbationSpec, criterion: KeypointCriterion,
                c0: float, max_cells: int) -> int:
    """Cell count such that the Lipschitz slack per cell is about delta/4."""
    r_full = cell_radius_bound(spec, torch.as_tensor(np.asarray(x0, dtype=np.float64)), spec.epsilon)
    if r_full == 0.0:
        return 1
    n = int(math.ceil(4.0 * c0 * r_full / criterion.delta))
    return max(16, min(n, max_cells))


def campaign(nets: dict, images, keypoints, specs, criterion: KeypointCriterion, *,
             n_cells="auto", max_cells: int = 4096, falsify_samples: int = 512,
             seed: int = 0, jobs: int = 1) -> CampaignReport:
    """Certify every (network, spec, image) triple and aggregate metrics.

    ``nets`` maps name -> Network; ``images`` is (n, C, H, W)-shaped (or
    coercible); ``keypoints`` optionally holds labels in output units,
    shape (n, 2K), enabling the correctly-predicted-and-verified keypoint
    count. Per triple the grid certificate runs first; Unknown outcomes are
    handed to the falsifier to find witnesses. Verification accuracy is
    #Holds / #images. Deterministic given ``seed``; distinct images may be
    certified concurrently (``jobs``) and merged order-independently.
    """
    images_np = np.asarray(images, dtype=np.float64)
    n_images = images_np.shape[0]
    if n_images < 1:
        raise ContractError("campaign needs a non-empty test set")
    labels = None if keypoints is None else np.asarray(keypoints, dtype=np.float64).reshape(n_images, -1)

    lipschitz = {name: lipschitz_to_output(net, 0) for name, net in nets.items()}

    def run_one(task):
        net_name, spec, idx = task
        net = nets[net_name]
        x0 = images_np[idx]
        cells = n_cells if isinstance(n_cells, int) else _auto_cells(
            net, x0, spec, criterion, lipschitz[net_name], max_cells)
        t0 = time.perf_counter()
        res = certify_grid(net, x0, spec, criterion, cells, lipschitz_const=lipschitz[net_name])
        if res.verdict == UNKNOWN:
            rng = spawn_rng(seed, "campaign-falsify", net_name, spec.label, idx)
            fal = falsify(net, x0, spec, criterion, falsify_samples, rng)
            if fal.verdict == VIOLATED:
                res = fal
        elapsed = time.perf_counter() - t0
        correct = 0
        if labels is not None and res.verdict == HOLDS:
            pred = net.outputs(x0).numpy().reshape(-1, 2)
            ref = labels[idx].reshape(-1, 2)
            correct = int((np.abs(pred - ref).max(axis=1) <= criterion.delta).sum())
        return {"image_id": idx, "net": net_name, "spec": spec.label,
                "verdict": res.verdict, "method": res.method,
                "margin": res.margin, "wall_time": elapsed,
                "correct_keypoints": correct}

    tasks = [(name, spec, idx) for name in nets for spec in specs for idx in range(n_images)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run_one, tasks))
    else:
        rows = [run_one(t) for t in tasks]

    summary = {}
    for name in nets:
        summary[name] = {}
        for spec in specs:
            sub = [r for r in rows if r["net"] == name and r["spec"] == spec.label]
            holds = sum(1 for r in sub if r["verdict"] == HOLDS)
            summary[name][spec.label] = {
                "verification_accuracy": holds / len(sub),
                "mean_wall_time": float(np.mean([r["wall_time"] for r in sub])),
                "mean_correct_keypoints": float(np.mean([r["correct_keypoints"] for r in sub])),
                "counts": {v: sum(1 for r in sub if r["verdict"] == v)
                           for v in (HOLDS, VIOLATED, UNKNOWN)},
            }
    return CampaignReport(rows=rows, summary=summary, criterion=criterion)


CAMPAIGN_FIELDS = ["image_id", "net", "spec", "verdict", "method", "margin",
                   "wall_time", "correct_keypoints"]


def write_campaign_csv(report: CampaignReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CAMPAIGN_FIELDS)
        writer.writeheader()
        for row in report.rows:
            writer.writerow(row)


def write_campaign_summary(report: CampaignReport, path, extra: Optional[dict] = None) -> None:
    payload = {
        "criterion": report.criterion.to_dict(),
        "results": report.summary,
        "notes": {"probabilistic_allocation": "alpha/(d_i*(L-i)) per neuron (conservative)"},
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
