"""Semantic image perturbations with a one-dimensional parameter.

Two transform families are supported: additive brightness shifts around
s0 = 0 and multiplicative contrast scalings around s0 = 1, both followed by
clipping to the pixel range. The module also provides uniform sampling from
the perturbation set and a deterministic partition of the parameter interval
into cells, each with a sound bound on the induced input deviation. Because
clipping is 1-Lipschitz, bounds computed before the clip remain valid after
it.

All functions are pure; concurrent use is safe given independent RNG streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ._validation import as_tensor, check_nonnegative
from .errors import ContractError

KINDS = ("brightness", "contrast")


@dataclass(frozen=True)
class PerturbationSpec:
    """A bounded set of images reachable by one scalar transform parameter.

    ``epsilon`` is the radius in parameter space around the identity
    parameter (0 for brightness, 1 for contrast); ``p_norm`` is the norm on
    parameter space, irrelevant for the one-dimensional parameter but kept
    for serialization fidelity.
    """

    kind: str
    epsilon: float
    p_norm: float = math.inf
    clip_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown perturbation kind {self.kind!r}; expected one of {KINDS}")
        check_nonnegative(self.epsilon, "epsilon")
        lo, hi = self.clip_range
        if not lo < hi:
            raise ContractError(f"clip_range must be increasing, got {self.clip_range}")

    @property
    def s0(self) -> float:
        """Identity parameter: the transform at s0 leaves the image unchanged."""
        return 0.0 if self.kind == "brightness" else 1.0

    @property
    def label(self) -> str:
        return f"{self.kind}:{self.epsilon:g}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "epsilon": self.epsilon, "p_norm": self.p_norm}

    @staticmethod
    def from_dict(d: dict) -> "PerturbationSpec":
        return PerturbationSpec(kind=d["kind"], epsilon=float(d["epsilon"]),
                                p_norm=float(d.get("p_norm", math.inf)))


@dataclass(frozen=True)
class GridCell:
    """One cell of the parameter partition.

    ``input_radius_bound`` bounds ||h(s) - h(s_center)||_2 over the cell; it
    is computed before clipping, which only shrinks distances.
    """

    s_center: float
    half_width: float
    center_image: torch.Tensor = field(repr=False)
    input_radius_bound: float


def apply(spec: PerturbationSpec, x0, s: float) -> torch.Tensor:
    """Transform ``x0`` by parameter ``s`` and clip to the pixel range.

    ``s`` must lie within the spec's radius of the identity parameter.
    """
    if abs(s - spec.s0) > spec.epsilon + 1e-12:
        raise ContractError(f"parameter {s} outside radius {spec.epsilon} around {spec.s0}")
    x0 = as_tensor(x0, "x0")
    if spec.kind == "brightness":
        out = x0 + s
    else:
        out = x0 * s
    lo, hi = spec.clip_range
    return out.clamp(lo, hi)


def sample_params(spec: PerturbationSpec, m: int, rng: np.random.Generator) -> np.ndarray:
    """Draw m parameters i.i.d. uniform on [s0 - eps, s0 + eps]."""
    if m < 1:
        raise ContractError(f"sample count must be >= 1, got {m}")
    return rng.uniform(spec.s0 - spec.epsilon, spec.s0 + spec.epsilon, size=m)


def sample(spec: PerturbationSpec, x0, m: int, rng: np.random.Generator) -> torch.Tensor:
    """Draw m images uniformly from the perturbation set of ``x0``.

    Returns a tensor of shape (m, *x0.shape). Reproducible given the rng
    state.
    """
    x0 = as_tensor(x0, "x0")
    params = sample_params(spec, m, rng)
    lo, hi = spec.clip_range
    s = torch.as_tensor(params).reshape((m,) + (1,) * x0.ndim)
    if spec.kind == "brightness":
        out = x0.unsqueeze(0) + s
    else:
        out = x0.unsqueeze(0) * s
    return out.clamp(lo, hi)


def cell_radius_bound(spec: PerturbationSpec, x0: torch.Tensor, half_width: float) -> float:
    """Sound bound on max_{|s - c| <= half_width} ||h(s) - h(c)||_2.

    Brightness moves every pixel by the same amount, so the pre-clip
    deviation is exactly |s - c| * sqrt(#pixels); contrast scales the image,
    giving |s - c| * ||x0||_2.
    """
    if spec.kind == "brightness":
        return half_width * math.sqrt(x0.numel())
    return half_width * float(torch.linalg.vector_norm(x0))


def grid(spec: PerturbationSpec, x0, n_cells: int) -> list[GridCell]:
    """Partition the parameter interval into n_cells equal cells.

    Each cell carries its center image and a sound per-cell input-deviation
    bound. Halving the cell width halves every bound.
    """
    if n_cells < 1:
        raise ContractError(f"n_cells must be >= 1, got {n_cells}")
    x0 = as_tensor(x0, "x0")
    half = spec.epsilon / n_cells
    bound = cell_radius_bound(spec, x0, half)
    cells = []
    for k in range(n_cells):
        center = spec.s0 - spec.epsilon + (2 * k + 1) * half
        cells.append(GridCell(s_center=center, half_width=half,
                              center_image=apply(spec, x0, center),
                              input_radius_bound=bound))
    return cells
