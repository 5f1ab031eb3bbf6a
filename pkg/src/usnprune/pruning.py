"""Progressive stability-guided training and channel pruning.

One training run owns its network exclusively. Each batch draws perturbed
copies of its images, computes the per-layer unbiased/smooth metrics and
channel importance in-graph, and descends the combined loss

    task + sum_over_prune_layers(lu * unbiased + ls * smooth + lw * transport)

At every pruning epoch the channel importance accumulated since the last
prune event selects the channels to keep (top scores, exact counts from the
staircase schedule), masks are updated cumulatively, and the accumulators
reset. The best checkpoint is the lowest validation task loss among epochs
whose structure has reached the final pruning ratio.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from ._validation import check_positive, spawn_rng
from .errors import ContractError, NumericError
from .network import Network
from .perturbation import PerturbationSpec
from .usn import DEFAULT_EPS_USN, UsnStats, accumulate, channel_importance
from .wasserstein import wasserstein_loss


@dataclass(frozen=True)
class PruningSchedule:
    """Staircase schedule: zero before t_start, then rho_final/n_steps per
    floor((t - t_start)/t_interval) increment, clamped at rho_final after
    t_end."""

    rho_final: float
    n_steps: int
    t_start: int
    t_end: int
    t_interval: int = 1

    def __post_init__(self):
        if not 0.0 <= self.rho_final <= 1.0:
            raise ContractError(f"rho_final must lie in [0, 1], got {self.rho_final}")
        if self.n_steps < 1:
            raise ContractError("n_steps must be >= 1")
        if self.t_start > self.t_end:
            raise ContractError("t_start must not exceed t_end")
        if self.t_interval < 1:
            raise ContractError("t_interval must be >= 1")

    def to_dict(self) -> dict:
        return {"rho_final": self.rho_final, "n_steps": self.n_steps,
                "t_start": self.t_start, "t_end": self.t_end, "t_interval": self.t_interval}

    @staticmethod
    def from_dict(d: dict) -> "PruningSchedule":
        return PruningSchedule(rho_final=float(d["rho_final"]), n_steps=int(d["n_steps"]),
                               t_start=int(d["t_start"]), t_end=int(d["t_end"]),
                               t_interval=int(d.get("t_interval", 1)))


def rho_at(t: int, schedule: PruningSchedule) -> float:
    """Pruning ratio in effect at epoch t (exact floor arithmetic)."""
    if t < 0:
        raise ContractError(f"epoch must be >= 0, got {t}")
    if t < schedule.t_start:
        return 0.0
    if t > schedule.t_end:
        return schedule.rho_final
    steps = (t - schedule.t_start) // schedule.t_interval
    value = (schedule.rho_final / schedule.n_steps) * steps
    return min(max(value, 0.0), schedule.rho_final)


def is_prune_epoch(t: int, schedule: PruningSchedule) -> bool:
    return schedule.t_start <= t <= schedule.t_end and (t - schedule.t_start) % schedule.t_interval == 0


@dataclass(frozen=True)
class LossWeights:
    """Weights of the stability terms and the set of layers they act on."""

    lambda_u: float = 1.0
    lambda_s: float = 1.0
    lambda_w: float = 10.0
    prune_layers: tuple = ()

    def __post_init__(self):
        if min(self.lambda_u, self.lambda_s, self.lambda_w) < 0:
            raise ContractError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return {"lambda_u": self.lambda_u, "lambda_s": self.lambda_s,
                "lambda_w": self.lambda_w, "prune_layers": list(self.prune_layers)}


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs besides the data."""

    layers: tuple
    input_shape: tuple
    epochs: int
    schedule: PruningSchedule
    weights: LossWeights
    perturbations: tuple = ()
    batch_size: int = 64
    learning_rate: float = 0.01
    m_samples: int = 4
    seed: int = 0
    eps_usn: float = DEFAULT_EPS_USN
    optimizer: str = "adam"
    weight_decay: float = 0.0  # keeps spectral products certifiable when > 0
    prune_rule: str = "usn"  # "usn" | "random" | "none"
    # composite task loss: coordinate MSE plus heatmap supervision, the
    # usual recipe for soft-argmax keypoint heads (pure coordinate MSE
    # stalls on the near-uniform initial softmax)
    heatmap_loss_weight: float = 0.0
    heatmap_target_sigma: float = 0.9

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        check_positive(self.learning_rate, "learning_rate")
        if self.perturbations and self.m_samples < 2:
            raise ContractError("m_samples must be >= 2 for variance statistics")
        if self.prune_rule not in ("usn", "random", "none"):
            raise ContractError(f"unknown prune_rule {self.prune_rule!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")


class _TransportLoss(torch.autograd.Function):
    """Bridges the numpy transport loss into the autograd graph; backward
    uses the envelope gradient with the optimal coupling held fixed."""

    @staticmethod
    def forward(ctx, importance_t, rho):
        res = wasserstein_loss(importance_t.detach().numpy(), rho)
        ctx.save_for_backward(torch.as_tensor(res.grad))
        return importance_t.new_tensor(res.value)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out * grad, None


def transport_loss(importance_t: torch.Tensor, rho: float) -> torch.Tensor:
    return _TransportLoss.apply(importance_t, rho)


@dataclass
class LayerUsnTerms:
    """Graph-carrying per-layer loss inputs for one batch."""

    unbiased: torch.Tensor
    smooth: torch.Tensor
    channel_importance: torch.Tensor


def usn_layer_terms(pre_clean: torch.Tensor, pre_pert: torch.Tensor, channel_map,
                    eps_usn: float = DEFAULT_EPS_USN) -> LayerUsnTerms:
    """Batch USN terms from pre-activations.

    ``pre_clean`` is (B, d), ``pre_pert`` is (B, m, d) holding the same
    images' perturbed forwards. Layer metrics average the per-sample norms
    over images and samples; the per-neuron bias averages each image's
    |mean-over-samples deviation| over the batch before entering the
    importance ratio.
    """
    if pre_pert.ndim != 3 or pre_clean.ndim != 2:
        raise ContractError("pre_clean must be (B, d) and pre_pert (B, m, d)")
    dev = pre_pert - pre_clean.unsqueeze(1)
    d = dev.shape[-1]
    unbiased = dev.abs().sum(dim=2).mean()
    smooth = (dev ** 2).sum(dim=2).mean()
    bias = dev.mean(dim=1).abs().mean(dim=0)
    per_neuron_smooth = (dev ** 2).mean(dim=(0, 1))
    imp = per_neuron_smooth / ((bias ** 2 + eps_usn) * d)
    groups = [torch.as_tensor(np.asarray(g, dtype=np.int64)) for g in channel_map]
    ch = torch.stack([imp[g].mean() for g in groups])
    return LayerUsnTerms(unbiased=unbiased, smooth=smooth, channel_importance=ch)


def batch_terms(net: Network, x_clean, x_pert, prune_layers, eps_usn: float = DEFAULT_EPS_USN):
    """Forward the clean batch and its perturbed copies and assemble the
    per-layer terms. ``x_pert`` is (B, m, C, H, W). Returns (terms, clean
    trace, perturbed trace); the traces keep the graph for the total loss."""
    trace_c = net.forward(x_clean, with_grad=True)
    b = trace_c.output.shape[0]
    m = x_pert.shape[1]
    trace_p = net.forward(x_pert.reshape((b * m,) + tuple(x_pert.shape[2:])), with_grad=True)
    terms = {}
    for i in prune_layers:
        pc = trace_c.pre_activation(i)
        pp = trace_p.pre_activation(i).reshape(b, m, -1)
        terms[i] = usn_layer_terms(pc, pp, net.channel_map(i), eps_usn)
    return terms, trace_c, trace_p


def total_loss(task_loss: torch.Tensor, layer_terms: Mapping[int, LayerUsnTerms],
               weights: LossWeights, rho: float) -> torch.Tensor:
    """Combined objective; gradients flow through every term, including the
    perturbation-sample forward passes behind the layer terms.

    ``rho`` is the final target pruning ratio used by the concentration
    target; the transport term is skipped when rho == 0 (nothing to
    concentrate toward) or lambda_w == 0.
    """
    total = task_loss
    for i in weights.prune_layers:
        if i not in layer_terms:
            raise ContractError(f"missing USN terms for prune layer {i}")
        terms = layer_terms[i]
        if weights.lambda_u:
            total = total + weights.lambda_u * terms.unbiased
        if weights.lambda_s:
            total = total + weights.lambda_s * terms.smooth
        if weights.lambda_w and rho > 0:
            total = total + weights.lambda_w * transport_loss(terms.channel_importance, rho)
    return total


# ----- pruning steps ---------------------------------------------------------


def select_keep(scores, alive, rho_current: float) -> np.ndarray:
    """Keep-mask holding the ceil((1 - rho) * n) highest-scoring channels.

    Selection happens among currently-alive channels (masks are cumulative:
    a pruned channel never returns); ties keep the lower index. The implied
    threshold is the k-th largest kept score, so keep == {score >= tau}.
    """
    scores = np.asarray(scores, dtype=np.float64)
    alive = np.asarray(alive, dtype=bool)
    n = scores.size
    if not 0.0 <= rho_current <= 1.0:
        raise ContractError(f"rho_current must lie in [0, 1], got {rho_current}")
    k = int(math.ceil((1.0 - rho_current) * n))
    if k < 1:
        raise ContractError("pruning ratio would keep zero channels")
    alive_idx = np.flatnonzero(alive)
    if k > alive_idx.size:
        k = alive_idx.size  # earlier steps already pruned below this count
    sub = scores[alive_idx]
    order = np.lexsort((np.arange(sub.size), -sub))
    chosen = alive_idx[order[:k]]
    keep = np.zeros(n, dtype=bool)
    keep[chosen] = True
    return keep


def prune_step(net: Network, importance: Mapping[int, np.ndarray], rho_current: float):
    """Apply one importance-driven prune step; returns (new net, masks).

    ``importance`` maps prunable layer ordinals to per-channel scores
    accumulated since the last prune event. The caller resets its
    accumulators afterward.
    """
    new = net.clone()
    for ordinal in sorted(importance):
        scores = np.asarray(importance[ordinal], dtype=np.float64)
        n = net.channel_count(ordinal)
        if scores.shape != (n,):
            raise ContractError(f"importance for layer {ordinal} must have length {n}")
        keep = select_keep(scores, net.masks[ordinal].numpy(), rho_current)
        new.set_mask_(ordinal, keep)
    return new, {k: m.numpy().copy() for k, m in new.masks.items()}


def _random_keep(alive: np.ndarray, rho: float, rng) -> np.ndarray:
    """Uniformly random keep-mask at the same count the guided rule uses."""
    if not 0.0 <= rho <= 1.0:
        raise ContractError(f"rho must lie in [0, 1], got {rho}")
    k = int(math.ceil((1.0 - rho) * alive.size))
    if k < 1:
        raise ContractError("pruning ratio would keep zero channels")
    alive_idx = np.flatnonzero(alive)
    chosen = rng.choice(alive_idx, size=min(k, alive_idx.size), replace=False)
    keep = np.zeros(alive.size, dtype=bool)
    keep[chosen] = True
    return keep


def random_prune_baseline(net: Network, rho: float, rng, layers: Optional[Sequence[int]] = None) -> Network:
    """Random pruning at the exact counts the guided rule would use."""
    new = net.clone()
    for ordinal in (layers if layers is not None else net.prunable_ordinals):
        new.set_mask_(ordinal, _random_keep(net.masks[ordinal].numpy(), rho, rng))
    return new


# ----- training loop ---------------------------------------------------------


@dataclass
class TrainResult:
    network: Network
    best_epoch: int
    best_val: float
    log: list
    diverged: bool
    config: TrainConfig

    @property
    def kept_channels(self) -> dict:
        return {k: int(m.sum()) for k, m in self.network.masks.items()}


def _target_scale(net: Network):
    """Row/col factors mapping image-pixel keypoints to head-grid units."""
    if not net.has_head:
        return 1.0, 1.0
    head = net.layers[-1]
    _, h, w = net.input_shape
    return (head.height - 1) / max(h - 1, 1), (head.width - 1) / max(w - 1, 1)


def scale_keypoints_to_output(net: Network, keypoints: np.ndarray) -> np.ndarray:
    """(n, K, 2) image-unit keypoints -> (n, 2K) targets in output units."""
    kp = np.asarray(keypoints, dtype=np.float64)
    sr, sc = _target_scale(net)
    scaled = kp * np.array([sr, sc])
    return scaled.reshape(kp.shape[0], -1)


def _perturb_batch(xb: torch.Tensor, spec: PerturbationSpec, m: int, rng) -> torch.Tensor:
    """(B, C, H, W) -> (B, m, C, H, W) with per-image uniform parameters."""
    b = xb.shape[0]
    s = rng.uniform(spec.s0 - spec.epsilon, spec.s0 + spec.epsilon, size=(b, m))
    s_t = torch.as_tensor(s).reshape(b, m, 1, 1, 1)
    base = xb.unsqueeze(1)
    out = base + s_t if spec.kind == "brightness" else base * s_t
    return out.clamp(*spec.clip_range)


def _snapshot(net: Network):
    return ([w.detach().clone() for w in net.weights],
            [b.detach().clone() for b in net.biases],
            {k: m.clone() for k, m in net.masks.items()})


def _restore(net: Network, snap) -> Network:
    weights, biases, masks = snap
    return Network(net.layers, net.input_shape, weights=weights, biases=biases,
                   masks={k: v.numpy() for k, v in masks.items()},
                   head_lipschitz=net.head_lipschitz)


def _task_loss(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return ((output - target) ** 2).mean()


def heatmap_targets(targets_2k: torch.Tensor, hh: int, ww: int, sigma: float) -> torch.Tensor:
    """Normalized Gaussian maps centered on (row, col) targets in grid units;
    (n, 2K) -> (n, K, hh, ww)."""
    kp = targets_2k.reshape(targets_2k.shape[0], -1, 2)
    rows = torch.arange(hh, dtype=kp.dtype).reshape(1, 1, hh, 1)
    cols = torch.arange(ww, dtype=kp.dtype).reshape(1, 1, 1, ww)
    r = kp[..., 0].reshape(kp.shape[0], kp.shape[1], 1, 1)
    c = kp[..., 1].reshape(kp.shape[0], kp.shape[1], 1, 1)
    g = torch.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2.0 * sigma ** 2))
    return g / g.sum(dim=(2, 3), keepdim=True)


def _composite_task_loss(net: Network, trace, yb: torch.Tensor, tmaps_b, config) -> torch.Tensor:
    """Coordinate MSE, plus scaled MSE between the head's spatial softmax
    and the Gaussian target maps when heatmap supervision is enabled."""
    loss = _task_loss(trace.output, yb)
    if tmaps_b is None:
        return loss
    head = net.layers[-1]
    n = yb.shape[0]
    logits = trace.pre_activation(net.num_linear).reshape(n, head.num_keypoints, -1)
    p = torch.softmax(logits / head.temperature, dim=-1).reshape(tmaps_b.shape)
    aux = ((p - tmaps_b) ** 2).mean() * (head.height * head.width)
    return loss + config.heatmap_loss_weight * aux


def _batch_loss(net, xb, yb, tmaps_b, config, weights, prune_layers, perturb_rng,
                batch_counter, running, sums):
    """One batch of the combined objective plus side effects: accumulates
    the running deviation statistics and the per-epoch log sums."""
    if config.perturbations:
        spec = config.perturbations[batch_counter % len(config.perturbations)]
        x_pert = _perturb_batch(xb, spec, config.m_samples, perturb_rng)
        terms, trace_c, trace_p = batch_terms(net, xb, x_pert, prune_layers, config.eps_usn)
        task = _composite_task_loss(net, trace_c, yb, tmaps_b, config)
        total = total_loss(task, terms, weights, config.schedule.rho_final)
        with torch.no_grad():
            for i in prune_layers:
                dev = (trace_p.pre_activation(i).reshape(xb.shape[0], config.m_samples, -1)
                       - trace_c.pre_activation(i).unsqueeze(1))
                batch_stats = UsnStats.from_deviations(i, dev.reshape(-1, net.width(i)).numpy())
                running[i] = accumulate(running[i], batch_stats)
            sums["unbiased"] += sum(float(terms[i].unbiased.detach()) for i in prune_layers)
            sums["smooth"] += sum(float(terms[i].smooth.detach()) for i in prune_layers)
            if config.schedule.rho_final > 0:
                # logged even when lambda_w == 0 so ablation arms stay comparable
                sums["wloss"] += sum(
                    wasserstein_loss(terms[i].channel_importance.detach().numpy(),
                                     config.schedule.rho_final).value
                    for i in prune_layers)
    else:
        trace_c = net.forward(xb, with_grad=True)
        task = _composite_task_loss(net, trace_c, yb, tmaps_b, config)
        total = total_loss(task, {}, replace(weights, prune_layers=()), 0.0)
    return total, task


def train(config: TrainConfig, dataset) -> TrainResult:
    """Run the full progressive training-and-pruning loop.

    ``dataset`` must expose train_images/train_keypoints and
    val_images/val_keypoints (image-unit keypoints of shape (n, K, 2)).
    Deterministic given config.seed: identical configs produce bit-identical
    logs and checkpoints. Divergence (non-finite loss) aborts the loop and
    returns the last finite checkpoint, flagged.
    """
    init_rng = spawn_rng(config.seed, "init")
    shuffle_rng = spawn_rng(config.seed, "shuffle")
    perturb_rng = spawn_rng(config.seed, "perturb")
    prune_rng = spawn_rng(config.seed, "prune")

    net = Network(config.layers, config.input_shape, rng=init_rng)
    prune_layers = tuple(config.weights.prune_layers) or net.prunable_ordinals
    weights = replace(config.weights, prune_layers=prune_layers)
    for i in prune_layers:
        if i not in net.prunable_ordinals:
            raise ContractError(f"layer {i} is not prunable (prunable: {net.prunable_ordinals})")

    if config.optimizer == "adam":
        opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate,
                               weight_decay=config.weight_decay)
    else:
        opt = torch.optim.SGD(net.parameters(), lr=config.learning_rate,
                              weight_decay=config.weight_decay)

    x_train = net._coerce_input(np.asarray(dataset.train_images, dtype=np.float64))[0]
    x_val = net._coerce_input(np.asarray(dataset.val_images, dtype=np.float64))[0]
    y_train = torch.as_tensor(scale_keypoints_to_output(net, dataset.train_keypoints))
    y_val = torch.as_tensor(scale_keypoints_to_output(net, dataset.val_keypoints))
    n_train = x_train.shape[0]
    tmaps_train = tmaps_val = None
    if config.heatmap_loss_weight > 0 and net.has_head:
        head = net.layers[-1]
        tmaps_train = heatmap_targets(y_train, head.height, head.width,
                                      config.heatmap_target_sigma)
        tmaps_val = heatmap_targets(y_val, head.height, head.width,
                                    config.heatmap_target_sigma)

    running = {i: UsnStats.zeros(i, net.width(i)) for i in prune_layers}
    final_keep = {i: int(math.ceil((1.0 - config.schedule.rho_final) * net.channel_count(i)))
                  for i in prune_layers}

    log = []
    best_val = math.inf
    best_epoch = -1
    best_snap = None
    last_finite = _snapshot(net)
    diverged = False
    batch_counter = 0

    for t in range(1, config.epochs + 1):
        rho_cur = rho_at(t, config.schedule) if config.prune_rule != "none" else 0.0
        perm = shuffle_rng.permutation(n_train)
        sums = {"task": 0.0, "total": 0.0, "unbiased": 0.0, "smooth": 0.0, "wloss": 0.0}
        n_batches = 0
        for start in range(0, n_train, config.batch_size):
            idx = perm[start:start + config.batch_size]
            xb = x_train[idx]
            yb = y_train[idx]
            opt.zero_grad()
            tb = None if tmaps_train is None else tmaps_train[idx]
            try:
                total, task = _batch_loss(net, xb, yb, tb, config, weights, prune_layers,
                                          perturb_rng, batch_counter, running, sums)
            except NumericError:
                diverged = True
                break
            if not torch.isfinite(total):
                diverged = True
                break
            total.backward()
            opt.step()
            net.apply_masks_()
            sums["task"] += float(task.detach())
            sums["total"] += float(total.detach())
            n_batches += 1
            batch_counter += 1
        if diverged:
            break

        if config.prune_rule != "none" and is_prune_epoch(t, config.schedule):
            for i in prune_layers:
                if config.prune_rule == "usn":
                    scores = channel_importance(running[i].importance_scores(config.eps_usn),
                                                net.channel_map(i))
                    keep = select_keep(scores, net.masks[i].numpy(), rho_cur)
                else:
                    keep = _random_keep(net.masks[i].numpy(), rho_cur, prune_rng)
                net.set_mask_(i, keep)
            running = {i: UsnStats.zeros(i, net.width(i)) for i in prune_layers}

        with torch.no_grad():
            val_trace = net.forward(x_val)
            val = float(_composite_task_loss(net, val_trace, y_val, tmaps_val, config).detach())
        if not math.isfinite(val):
            diverged = True
            break

        last_finite = _snapshot(net)
        structure_final = config.prune_rule == "none" or all(
            int(net.masks[i].sum()) <= final_keep[i] for i in prune_layers)
        if structure_final and val < best_val:
            best_val = val
            best_epoch = t
            best_snap = _snapshot(net)

        row = {"epoch": t, "rho": rho_cur, "train_task": sums["task"] / max(n_batches, 1),
               "val_task": val, "train_total": sums["total"] / max(n_batches, 1),
               "usn_unbiased": sums["unbiased"] / max(n_batches, 1),
               "usn_smooth": sums["smooth"] / max(n_batches, 1),
               "w_loss": sums["wloss"] / max(n_batches, 1),
               "kept_channels": ";".join(str(int(net.masks[i].sum())) for i in prune_layers)}
        log.append(row)

    if best_snap is None:  # diverged (or ended) before any eligible epoch
        best_snap = last_finite
        best_epoch = len(log)
        best_val = math.nan
    return TrainResult(network=_restore(net, best_snap), best_epoch=best_epoch,
                       best_val=best_val, log=log, diverged=diverged, config=config)


LOG_FIELDS = ["epoch", "rho", "train_task", "val_task", "train_total",
              "usn_unbiased", "usn_smooth", "w_loss", "kept_channels"]


def write_training_log(path, log: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in log:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
