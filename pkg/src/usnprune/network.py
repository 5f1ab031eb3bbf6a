"""Minimal feedforward networks for keypoint regression.

A network is an ordered list of layer descriptions: dense and conv2d layers
carrying weights, parameter-free ReLU activations, and an optional final
soft-argmax head that converts stacked heatmaps into keypoint coordinates.
Forward passes record every pre-activation (the linear-layer outputs before
the nonlinearity), which is what the stability metrics and certificates
consume. Channel masks implement soft structured pruning: a masked channel
contributes exactly zero to the forward pass and receives exactly zero
gradients; physical removal of masked channels is an export-time step
(``compact``).

Linear layers are indexed by 1-based ordinals 1..L throughout the public
API, matching the math convention used by the Lipschitz products. Everything
runs in float64 on CPU.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ._validation import DTYPE, as_tensor, check_positive
from .errors import ConfigurationError, ContractError, NumericError

CHECKPOINT_VERSION = 1

_KINDS = ("dense", "conv2d", "relu", "soft_argmax")


@dataclass(frozen=True)
class LayerSpec:
    """Description of a single layer; fields are kind-specific.

    dense: in_dim, out_dim. conv2d: in_channels, out_channels, kernel_size,
    stride, padding. relu: no fields. soft_argmax: num_keypoints, height,
    width, temperature (spatial softmax sharpness); it may only appear as
    the final layer.
    """

    kind: str
    in_dim: int = 0
    out_dim: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    num_keypoints: int = 0
    height: int = 0
    width: int = 0
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and (self.in_dim < 1 or self.out_dim < 1):
            raise ConfigurationError("dense layer needs positive in_dim/out_dim")
        if self.kind == "conv2d":
            if min(self.in_channels, self.out_channels, self.kernel_size, self.stride) < 1 or self.padding < 0:
                raise ConfigurationError("conv2d layer needs positive channels/kernel/stride and padding >= 0")
        if self.kind == "soft_argmax":
            if min(self.num_keypoints, self.height, self.width) < 1:
                raise ConfigurationError("soft_argmax layer needs positive keypoints and spatial dims")
            if not self.temperature > 0:
                raise ConfigurationError("soft_argmax temperature must be positive")

    @property
    def is_linear(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "dense":
            d.update(in_dim=self.in_dim, out_dim=self.out_dim)
        elif self.kind == "conv2d":
            d.update(in_channels=self.in_channels, out_channels=self.out_channels,
                     kernel_size=self.kernel_size, stride=self.stride, padding=self.padding)
        elif self.kind == "soft_argmax":
            d.update(num_keypoints=self.num_keypoints, height=self.height,
                     width=self.width, temperature=self.temperature)
        return d

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        return LayerSpec(**d)


def soft_argmax(heatmaps, temperature: float) -> torch.Tensor:
    """Spatial-softmax expectation of pixel coordinates.

    Input (K, H, W) or (N, K, H, W); output (2K,) / (N, 2K) with per-keypoint
    (row, col) pairs. Each coordinate is the probability-weighted mean of
    the grid coordinates under softmax(z / temperature), hence lies in
    [0, H-1] x [0, W-1] and is differentiable in the heatmap values.
    """
    check_positive(temperature, "temperature")
    hm = as_tensor(heatmaps, "heatmaps")
    single = hm.ndim == 3
    if single:
        hm = hm.unsqueeze(0)
    if hm.ndim != 4:
        raise ContractError(f"heatmaps must be (K,H,W) or (N,K,H,W), got {tuple(hm.shape)}")
    n, k, h, w = hm.shape
    p = torch.softmax(hm.reshape(n, k, h * w) / temperature, dim=-1).reshape(n, k, h, w)
    rows = torch.arange(h, dtype=DTYPE)
    cols = torch.arange(w, dtype=DTYPE)
    r = (p.sum(dim=3) * rows).sum(dim=2)
    c = (p.sum(dim=2) * cols).sum(dim=2)
    out = torch.stack([r, c], dim=-1).reshape(n, 2 * k)
    return out[0] if single else out


@dataclass
class ForwardTrace:
    """Everything a forward pass produced: the input, the flattened
    pre-activation vector of every linear layer (index 0 holds layer 1),
    and the network output."""

    input: torch.Tensor = field(repr=False)
    pre_activations: list = field(repr=False)
    output: torch.Tensor = field(repr=False)
    single: bool = False
    with_grad: bool = False
    net: "Network" = field(default=None, repr=False)

    def pre_activation(self, ordinal: int) -> torch.Tensor:
        """Flattened pre-activation of linear layer ``ordinal`` (1-based)."""
        if not 1 <= ordinal <= len(self.pre_activations):
            raise ContractError(f"layer ordinal {ordinal} out of range 1..{len(self.pre_activations)}")
        return self.pre_activations[ordinal - 1]


def _propagate_shapes(layers: Sequence[LayerSpec], input_shape):
    """Validate layer compatibility and return the shape after each layer.

    Shapes are ("tensor", (C, H, W)) or ("vector", d); dense layers flatten
    tensor inputs channel-major, matching torch's flatten order.
    """
    shape = ("tensor", tuple(input_shape))
    shapes = []
    for pos, spec in enumerate(layers):
        last = pos == len(layers) - 1
        if spec.kind == "dense":
            d_in = shape[1] if shape[0] == "vector" else int(np.prod(shape[1]))
            if d_in != spec.in_dim:
                raise ConfigurationError(f"layer {pos}: dense expects in_dim {spec.in_dim}, input has {d_in}")
            shape = ("vector", spec.out_dim)
        elif spec.kind == "conv2d":
            if shape[0] != "tensor":
                raise ConfigurationError(f"layer {pos}: conv2d needs a spatial input")
            c, h, w = shape[1]
            if c != spec.in_channels:
                raise ConfigurationError(f"layer {pos}: conv2d expects {spec.in_channels} channels, input has {c}")
            h2 = (h + 2 * spec.padding - spec.kernel_size) // spec.stride + 1
            w2 = (w + 2 * spec.padding - spec.kernel_size) // spec.stride + 1
            if h2 < 1 or w2 < 1:
                raise ConfigurationError(f"layer {pos}: conv2d output would be empty ({h2}x{w2})")
            shape = ("tensor", (spec.out_channels, h2, w2))
        elif spec.kind == "relu":
            pass
        elif spec.kind == "soft_argmax":
            if not last:
                raise ConfigurationError("soft_argmax may only appear as the final layer")
            need = spec.num_keypoints * spec.height * spec.width
            have = shape[1] if shape[0] == "vector" else int(np.prod(shape[1]))
            if have != need:
                raise ConfigurationError(f"soft_argmax expects {need} inputs, got {have}")
            shape = ("vector", 2 * spec.num_keypoints)
        shapes.append(shape)
    return shapes


class Network:
    """Feedforward network with channel masks.

    Parameters are torch float64 tensors with ``requires_grad=True``. All
    linear layers except the last are prunable and carry a boolean
    keep-mask over output channels (conv) or output units (dense).
    ``head_lipschitz`` optionally overrides the conservative default
    (H + W) / temperature used for the soft-argmax head in Lipschitz
    products.
    """

    def __init__(self, layers: Sequence[LayerSpec], input_shape, *, weights=None,
                 biases=None, masks=None, rng=None, head_lipschitz: Optional[float] = None):
        self.layers = list(layers)
        if not any(s.is_linear for s in self.layers):
            raise ConfigurationError("network needs at least one linear layer")
        self.input_shape = tuple(int(v) for v in input_shape)
        if len(self.input_shape) != 3:
            raise ConfigurationError("input_shape must be (C, H, W)")
        self.shapes = _propagate_shapes(self.layers, self.input_shape)
        self.head_lipschitz = head_lipschitz
        self._linear_positions = [pos for pos, s in enumerate(self.layers) if s.is_linear]
        self.weights: list = []
        self.biases: list = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for ordinal, pos in enumerate(self._linear_positions, start=1):
            spec = self.layers[pos]
            if weights is not None:
                w = as_tensor(weights[ordinal - 1], f"W{ordinal}").clone()
                b = as_tensor(biases[ordinal - 1], f"b{ordinal}").clone()
            else:
                w, b = self._init_layer(spec, rng)
            self._check_param_shape(spec, w, b, ordinal)
            w.requires_grad_(True)
            b.requires_grad_(True)
            self.weights.append(w)
            self.biases.append(b)
        self.masks = {}
        for ordinal in self.prunable_ordinals:
            n = self.channel_count(ordinal)
            if masks is not None and ordinal in masks:
                m = torch.as_tensor(np.asarray(masks[ordinal], dtype=bool))
                if m.shape != (n,):
                    raise ConfigurationError(f"mask for layer {ordinal} must have shape ({n},)")
            else:
                m = torch.ones(n, dtype=torch.bool)
            self.masks[ordinal] = m
        self._zero_masked_weights()

    # ----- structure ------------------------------------------------------

    @property
    def num_linear(self) -> int:
        return len(self._linear_positions)

    @property
    def prunable_ordinals(self) -> tuple:
        return tuple(range(1, self.num_linear))

    @property
    def has_head(self) -> bool:
        return self.layers[-1].kind == "soft_argmax"

    @property
    def output_dim(self) -> int:
        return self.shapes[-1][1]

    def linear_spec(self, ordinal: int) -> LayerSpec:
        self._check_ordinal(ordinal)
        return self.layers[self._linear_positions[ordinal - 1]]

    def out_structure(self, ordinal: int):
        """Shape after linear layer ``ordinal``: ("tensor", (C,H,W)) or ("vector", d)."""
        self._check_ordinal(ordinal)
        return self.shapes[self._linear_positions[ordinal - 1]]

    def width(self, ordinal: int) -> int:
        """Flattened pre-activation size d_i of linear layer ``ordinal``."""
        kind, s = self.out_structure(ordinal)
        return int(np.prod(s)) if kind == "tensor" else int(s)

    def channel_count(self, ordinal: int) -> int:
        kind, s = self.out_structure(ordinal)
        return int(s[0]) if kind == "tensor" else int(s)

    def channel_map(self, ordinal: int) -> list:
        """Partition of the flattened neuron indices of layer ``ordinal``
        into its output channels (singleton groups for dense layers)."""
        kind, s = self.out_structure(ordinal)
        if kind == "vector":
            return [np.array([j]) for j in range(int(s))]
        c, h, w = s
        block = h * w
        return [np.arange(ch * block, (ch + 1) * block) for ch in range(c)]

    def in_structure(self, ordinal: int):
        """Shape entering linear layer ``ordinal``."""
        self._check_ordinal(ordinal)
        pos = self._linear_positions[ordinal - 1]
        return ("tensor", self.input_shape) if pos == 0 else self.shapes[pos - 1]

    def parameter_items(self):
        for ordinal in range(1, self.num_linear + 1):
            yield f"W{ordinal}", self.weights[ordinal - 1]
            yield f"b{ordinal}", self.biases[ordinal - 1]

    def parameters(self) -> list:
        return [t for _, t in self.parameter_items()]

    def _check_ordinal(self, ordinal: int):
        if not 1 <= ordinal <= self.num_linear:
            raise ContractError(f"linear layer ordinal {ordinal} out of range 1..{self.num_linear}")

    @staticmethod
    def _init_layer(spec: LayerSpec, rng):
        if spec.kind == "dense":
            fan_in = spec.in_dim
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(spec.out_dim, spec.in_dim))
            b = np.zeros(spec.out_dim)
        else:
            fan_in = spec.in_channels * spec.kernel_size ** 2
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in),
                           size=(spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size))
            b = np.zeros(spec.out_channels)
        return torch.as_tensor(w), torch.as_tensor(b)

    @staticmethod
    def _check_param_shape(spec: LayerSpec, w: torch.Tensor, b: torch.Tensor, ordinal: int):
        if spec.kind == "dense":
            ok = w.shape == (spec.out_dim, spec.in_dim) and b.shape == (spec.out_dim,)
        else:
            ok = (w.shape == (spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size)
                  and b.shape == (spec.out_channels,))
        if not ok:
            raise ConfigurationError(f"parameters of linear layer {ordinal} do not match its spec")

    # ----- forward --------------------------------------------------------

    def _coerce_input(self, x):
        """Normalize to a (N, C, H, W) batch plus a single-image flag.

        Single forms: (C,H,W), (H,W) when C == 1, or a flat vector of the
        input size. 2-D arrays whose rows have the input size are batches of
        flattened images.
        """
        t = as_tensor(x, "input")
        c, h, w = self.input_shape
        if t.ndim == 4 and t.shape[1:] == (c, h, w):
            return t, False
        if t.ndim == 3:
            if t.shape == (c, h, w):
                return t.unsqueeze(0), True
            if c == 1 and t.shape[1:] == (h, w):
                return t.unsqueeze(1), False
        if t.ndim == 2:
            if c == 1 and t.shape == (h, w) and h != 1:
                return t.reshape(1, 1, h, w), True
            if t.shape[1] == c * h * w:
                # rows are flattened images; h == 1 inputs always land here
                return t.reshape(-1, c, h, w), False
            if c == 1 and t.shape == (h, w):
                return t.reshape(1, 1, h, w), True
        if t.ndim == 1 and t.numel() == c * h * w:
            return t.reshape(1, c, h, w), True
        raise ContractError(f"input shape {tuple(t.shape)} does not match network input {self.input_shape}")

    def forward(self, x, *, with_grad: bool = False) -> ForwardTrace:
        """Run the network, recording every linear pre-activation.

        Accepts a single image or a batch. ``with_grad=True`` keeps the
        autograd graph so ``backward`` can consume the trace.
        """
        xb, single = self._coerce_input(x)
        ctx = torch.enable_grad() if with_grad else torch.no_grad()
        with ctx:
            h = xb
            pre = []
            ordinal = 0
            for pos, spec in enumerate(self.layers):
                if spec.kind == "dense":
                    ordinal += 1
                    h = h.reshape(h.shape[0], -1)
                    z = h @ self.weights[ordinal - 1].T + self.biases[ordinal - 1]
                    if ordinal in self.masks:
                        z = z * self.masks[ordinal].to(DTYPE)
                    pre.append(z)
                    h = z
                elif spec.kind == "conv2d":
                    ordinal += 1
                    z = F.conv2d(h, self.weights[ordinal - 1], self.biases[ordinal - 1],
                                 stride=spec.stride, padding=spec.padding)
                    if ordinal in self.masks:
                        z = z * self.masks[ordinal].to(DTYPE).reshape(1, -1, 1, 1)
                    pre.append(z.reshape(z.shape[0], -1))
                    h = z
                elif spec.kind == "relu":
                    h = torch.relu(h)
                else:
                    hm = h.reshape(h.shape[0], spec.num_keypoints, spec.height, spec.width)
                    h = soft_argmax(hm, spec.temperature)
            output = h.reshape(h.shape[0], -1)
        if single:
            return ForwardTrace(input=xb[0], pre_activations=[p[0] for p in pre],
                                output=output[0], single=True, with_grad=with_grad, net=self)
        return ForwardTrace(input=xb, pre_activations=pre, output=output,
                            single=False, with_grad=with_grad, net=self)

    def outputs(self, x) -> torch.Tensor:
        """Network output only (no trace kept); always gradient-free."""
        return self.forward(x).output

    # ----- masking / structural editing ------------------------------------

    def _zero_masked_weights(self):
        with torch.no_grad():
            for ordinal, mask in self.masks.items():
                dead = ~mask
                if not bool(dead.any()):
                    continue
                w = self.weights[ordinal - 1]
                b = self.biases[ordinal - 1]
                w[dead] = 0.0
                b[dead] = 0.0
                self._zero_incoming(ordinal, dead)

    def _zero_incoming(self, ordinal: int, dead: torch.Tensor):
        """Zero the next linear layer's weights reading the dead channels."""
        if ordinal >= self.num_linear:
            return
        nxt = self.weights[ordinal]
        kind, s = self.out_structure(ordinal)
        nxt_spec = self.linear_spec(ordinal + 1)
        with torch.no_grad():
            if nxt_spec.kind == "conv2d":
                nxt[:, dead] = 0.0
            elif kind == "tensor":
                block = s[1] * s[2]
                dead_idx = torch.nonzero(dead).flatten()
                for ch in dead_idx.tolist():
                    nxt[:, ch * block:(ch + 1) * block] = 0.0
            else:
                nxt[:, dead] = 0.0

    def apply_masks_(self):
        """Re-zero everything the masks say is dead (in place).

        Needed after optimizer steps: momentum-style updates would otherwise
        resurrect pruned weights.
        """
        self._zero_masked_weights()

    def set_mask_(self, ordinal: int, keep) -> None:
        """In-place cumulative mask update; used by the training loop so the
        optimizer keeps its state. ``prune_channels`` is the pure variant."""
        keep_t = self._validate_keep(ordinal, keep)
        self.masks[ordinal] = self.masks[ordinal] & keep_t
        self._zero_masked_weights()

    def _validate_keep(self, ordinal: int, keep) -> torch.Tensor:
        if ordinal not in self.masks:
            raise ContractError(f"layer {ordinal} is not prunable (prunable: {self.prunable_ordinals})")
        keep_a = np.asarray(keep, dtype=bool)
        n = self.channel_count(ordinal)
        if keep_a.shape != (n,):
            raise ContractError(f"keep vector must have length {n}, got shape {keep_a.shape}")
        if not keep_a.any():
            raise ContractError("keep vector must retain at least one channel")
        keep_t = torch.as_tensor(keep_a)
        if not bool((self.masks[ordinal] & keep_t).any()):
            raise ContractError("keep vector would remove every remaining channel")
        return keep_t

    def clone(self) -> "Network":
        return Network(self.layers, self.input_shape,
                       weights=[w.detach() for w in self.weights],
                       biases=[b.detach() for b in self.biases],
                       masks={k: v.numpy() for k, v in self.masks.items()},
                       head_lipschitz=self.head_lipschitz)


def forward(net: Network, x, *, with_grad: bool = False) -> ForwardTrace:
    """Functional alias for ``Network.forward``."""
    return net.forward(x, with_grad=with_grad)


def backward(net: Network, trace: ForwardTrace, output_gradient) -> dict:
    """Parameter gradients of <output_gradient, output> via reverse mode.

    The trace must come from ``forward(..., with_grad=True)`` on the same
    network. Gradients of masked channels are exactly zero because the mask
    multiplies the pre-activation inside the graph.
    """
    if trace.net is not net:
        raise ContractError("trace was produced by a different network")
    if not trace.with_grad or trace.output.grad_fn is None:
        raise ContractError("stale trace: rerun forward with with_grad=True")
    g = as_tensor(output_gradient, "output_gradient")
    if g.shape != trace.output.shape:
        raise ContractError(f"output_gradient shape {tuple(g.shape)} does not match output {tuple(trace.output.shape)}")
    params = net.parameters()
    grads = torch.autograd.grad(trace.output, params, grad_outputs=g,
                                retain_graph=True, allow_unused=True)
    out = {}
    for (name, p), grad in zip(net.parameter_items(), grads):
        out[name] = torch.zeros_like(p) if grad is None else grad
    return out


# ----- linear operators and spectral norms ---------------------------------


class DenseOperator:
    """Explicit-matrix linear operator."""

    def __init__(self, matrix):
        self.matrix = as_tensor(matrix, "matrix")
        if self.matrix.ndim != 2:
            raise ContractError("dense operator needs a 2-D matrix")
        self.out_size, self.in_size = self.matrix.shape

    def apply(self, v):
        return self.matrix @ v

    def apply_transpose(self, u):
        return self.matrix.T @ u


class ConvOperator:
    """The exact linear map of a conv2d layer (stride and padding included),
    acting on flattened vectors; the transpose is the matching
    conv_transpose2d with output padding chosen to restore the input shape."""

    def __init__(self, weight, stride, padding, in_shape):
        self.weight = as_tensor(weight, "weight")
        self.stride = int(stride)
        self.padding = int(padding)
        self.in_shape = tuple(in_shape)
        c, h, w = self.in_shape
        k = self.weight.shape[-1]
        self.out_shape = (self.weight.shape[0],
                          (h + 2 * self.padding - k) // self.stride + 1,
                          (w + 2 * self.padding - k) // self.stride + 1)
        self._out_pad = (h - ((self.out_shape[1] - 1) * self.stride - 2 * self.padding + k),
                         w - ((self.out_shape[2] - 1) * self.stride - 2 * self.padding + k))
        self.in_size = int(np.prod(self.in_shape))
        self.out_size = int(np.prod(self.out_shape))

    def apply(self, v):
        x = v.reshape((1,) + self.in_shape)
        y = F.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        return y.reshape(-1)

    def apply_transpose(self, u):
        y = u.reshape((1,) + self.out_shape)
        x = F.conv_transpose2d(y, self.weight, stride=self.stride, padding=self.padding,
                               output_padding=self._out_pad)
        return x.reshape(-1)


def operator_for(net: Network, ordinal: int):
    """Linear-operator view of linear layer ``ordinal`` with masks applied.

    The view is detached from autograd: spectral estimation never needs the
    graph and must not extend it.
    """
    net._check_ordinal(ordinal)
    spec = net.linear_spec(ordinal)
    w = net.weights[ordinal - 1].detach()
    if ordinal in net.masks:
        m = net.masks[ordinal].to(DTYPE)
        w = w * (m.reshape(-1, 1) if spec.kind == "dense" else m.reshape(-1, 1, 1, 1))
    if spec.kind == "dense":
        return DenseOperator(w)
    kind, s = net.in_structure(ordinal)
    return ConvOperator(w, spec.stride, spec.padding, s)


def spectral_norm(op, tol: float = 1e-8, max_iter: int = 10000, seed: int = 0) -> float:
    """Largest singular value of a linear operator by power iteration.

    ``op`` must expose ``apply``/``apply_transpose`` and ``in_size`` (raw
    2-D matrices are wrapped automatically). Iterates v <- A^T A v with a
    seeded random start until the norm estimate is stable to ``tol``
    relative; raises NumericError with the iterate count if the cap is hit.
    """
    if not hasattr(op, "apply"):
        op = DenseOperator(op)
    check_positive(tol, "tol")
    rng = np.random.default_rng(seed)
    v = torch.as_tensor(rng.standard_normal(op.in_size))
    vn = torch.linalg.vector_norm(v)
    if float(vn) == 0.0:
        return 0.0
    v = v / vn
    sigma_prev = -1.0
    with torch.no_grad():
        for it in range(1, max_iter + 1):
            u = op.apply(v)
            sigma = float(torch.linalg.vector_norm(u))
            if sigma == 0.0:
                return 0.0
            w = op.apply_transpose(u / sigma)
            wn = float(torch.linalg.vector_norm(w))
            if wn == 0.0:
                return sigma
            v = w / wn
            if abs(sigma - sigma_prev) <= tol * max(sigma, 1e-300):
                return sigma
            sigma_prev = sigma
    raise NumericError(f"power iteration did not converge to tol={tol} within {max_iter} iterations")


def head_lipschitz_constant(net: Network) -> float:
    """Conservative Lipschitz constant of the soft-argmax head.

    The Jacobian of each keypoint's coordinates is bounded rowwise by
    (max grid coordinate)/temperature, giving (H + W)/temperature for the
    stacked (row, col) pair; keypoints are block-diagonal so the bound holds
    for the full head. Overridable via ``net.head_lipschitz``.
    """
    if not net.has_head:
        return 1.0
    if net.head_lipschitz is not None:
        return float(net.head_lipschitz)
    spec = net.layers[-1]
    return (spec.height + spec.width) / spec.temperature


def layer_spectral_norms(net: Network, tol: float = 1e-8, max_iter: int = 10000) -> list:
    """Spectral norms of all linear layers, passed to Lipschitz products."""
    return [spectral_norm(operator_for(net, k), tol=tol, max_iter=max_iter)
            for k in range(1, net.num_linear + 1)]


def lipschitz_to_output(net: Network, i: int, *, include_anchor_norm: bool = False,
                        spectral_norms: Optional[list] = None,
                        tol: float = 1e-8, max_iter: int = 10000) -> float:
    """Bound C_i on output deviation per unit l2 deviation at layer i.

    C_i is the product of the spectral norms of all linear layers after i
    times the Lipschitz constants of the activations in between (ReLU
    contributes 1, the soft-argmax head its conservative constant). i = 0
    gives the input-to-output constant used by the grid certificate.
    ``include_anchor_norm`` additionally multiplies by ||W^i||_2, which
    reproduces a looser published form of the constant and is unsound when
    that norm is below one; it is off by default.
    """
    L = net.num_linear
    if not 0 <= i <= L - 1:
        raise ContractError(f"layer index must satisfy 0 <= i <= {L - 1}, got {i}")
    if spectral_norms is None:
        needed = range(i, L + 1) if include_anchor_norm and i >= 1 else range(i + 1, L + 1)
        sigmas = {k: spectral_norm(operator_for(net, k), tol=tol, max_iter=max_iter) for k in needed}
    else:
        sigmas = {k: spectral_norms[k - 1] for k in range(1, L + 1)}
    c = 1.0
    for k in range(i + 1, L + 1):
        c *= sigmas[k]
    c *= head_lipschitz_constant(net)
    if include_anchor_norm and i >= 1:
        c *= sigmas[i]
    return c


# ----- pruning and compaction ----------------------------------------------


def prune_channels(net: Network, ordinal: int, keep) -> Network:
    """New network with the given channels of layer ``ordinal`` masked out.

    Masked channels' outgoing weights and the next layer's corresponding
    incoming weights are zeroed; masks combine cumulatively, so pruning
    twice with the same keep vector equals pruning once.
    """
    net._validate_keep(ordinal, keep)
    new = net.clone()
    new.set_mask_(ordinal, keep)
    return new


def compact(net: Network) -> Network:
    """Physically remove masked channels; outputs are unchanged.

    Returns a smaller network with all-true masks. Dense layers following a
    conv layer drop the weight-column blocks of removed channels.
    """
    kept = {k: torch.nonzero(m).flatten() for k, m in net.masks.items()}
    new_layers = []
    new_weights = []
    new_biases = []
    ordinal = 0
    for pos, spec in enumerate(net.layers):
        if not spec.is_linear:
            new_layers.append(spec)
            continue
        ordinal += 1
        w = net.weights[ordinal - 1].detach().clone()
        b = net.biases[ordinal - 1].detach().clone()
        # drop columns for channels removed in the previous linear layer
        if ordinal - 1 in kept:
            prev_kept = kept[ordinal - 1]
            prev_kind, prev_s = net.out_structure(ordinal - 1)
            if spec.kind == "conv2d":
                w = w[:, prev_kept]
            elif prev_kind == "tensor":
                block = prev_s[1] * prev_s[2]
                cols = torch.cat([torch.arange(c * block, (c + 1) * block) for c in prev_kept.tolist()])
                w = w[:, cols]
            else:
                w = w[:, prev_kept]
        # drop rows for channels removed in this layer
        if ordinal in kept:
            rows = kept[ordinal]
            w = w[rows]
            b = b[rows]
            n_out = int(rows.numel())
        else:
            n_out = net.channel_count(ordinal)
        if spec.kind == "dense":
            new_layers.append(LayerSpec("dense", in_dim=w.shape[1], out_dim=n_out))
        else:
            new_layers.append(LayerSpec("conv2d", in_channels=w.shape[1], out_channels=n_out,
                                        kernel_size=spec.kernel_size, stride=spec.stride,
                                        padding=spec.padding))
        new_weights.append(w)
        new_biases.append(b)
    return Network(new_layers, net.input_shape, weights=new_weights, biases=new_biases,
                   head_lipschitz=net.head_lipschitz)


def cnn_small(input_shape=(1, 32, 32), num_keypoints: int = 8, heatmap_shape=(12, 12),
              conv_channels=(6, 12, 12, 12), conv_strides=(2, 2, 1, 1),
              kernel_size: int = 3, temperature: float = 1.0) -> list:
    """Desk-scale default architecture: a stack of strided conv+ReLU blocks,
    one dense layer producing stacked heatmaps, and a soft-argmax head."""
    c, h, w = input_shape
    pad = kernel_size // 2
    layers = []
    in_c = c
    for ch, st in zip(conv_channels, conv_strides):
        layers.append(LayerSpec("conv2d", in_channels=in_c, out_channels=ch,
                                kernel_size=kernel_size, stride=st, padding=pad))
        layers.append(LayerSpec("relu"))
        in_c = ch
        h = (h + 2 * pad - kernel_size) // st + 1
        w = (w + 2 * pad - kernel_size) // st + 1
    hh, ww = heatmap_shape
    layers.append(LayerSpec("dense", in_dim=in_c * h * w, out_dim=num_keypoints * hh * ww))
    layers.append(LayerSpec("soft_argmax", num_keypoints=num_keypoints,
                            height=hh, width=ww, temperature=temperature))
    return layers


# ----- persistence ----------------------------------------------------------


def save_network(net: Network, path, meta: Optional[dict] = None) -> None:
    """Write a versioned checkpoint: layer specs, row-major weight arrays,
    masks, and caller metadata (RNG seed lineage, config echo, ...)."""
    arrays = {}
    for name, p in net.parameter_items():
        arrays[name] = np.ascontiguousarray(p.detach().numpy())
    for ordinal, m in net.masks.items():
        arrays[f"mask{ordinal}"] = m.numpy()
    header = {
        "version": CHECKPOINT_VERSION,
        "input_shape": list(net.input_shape),
        "layers": [s.to_dict() for s in net.layers],
        "head_lipschitz": net.head_lipschitz,
        "meta": meta or {},
    }
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_network(path):
    """Load a checkpoint written by ``save_network``; returns (net, meta)."""
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {header.get('version')!r}")
        layers = [LayerSpec.from_dict(d) for d in header["layers"]]
        n_linear = sum(1 for s in layers if s.is_linear)
        weights = [data[f"W{k}"] for k in range(1, n_linear + 1)]
        biases = [data[f"b{k}"] for k in range(1, n_linear + 1)]
        masks = {k: data[f"mask{k}"] for k in range(1, n_linear) if f"mask{k}" in data}
    net = Network(layers, header["input_shape"], weights=weights, biases=biases,
                  masks=masks, head_lipschitz=header["head_lipschitz"])
    return net, header["meta"]
