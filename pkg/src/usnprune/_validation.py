"""Input validation helpers.

Small conversion/checking utilities so the public entry points accept numpy
arrays, torch tensors, or nested lists interchangeably and fail with clear
messages instead of deep stack traces.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch

from .errors import ContractError, NumericError

DTYPE = torch.float64


def as_tensor(x, name="input"):
    """Convert to a float64 torch tensor, rejecting non-finite values."""
    if isinstance(x, torch.Tensor):
        t = x.to(DTYPE)
    else:
        t = torch.as_tensor(np.asarray(x, dtype=np.float64))
    if not torch.isfinite(t).all():
        raise NumericError(f"{name} contains non-finite values")
    return t


def as_image(x, input_shape, name="image"):
    """Coerce a single image to shape ``input_shape`` = (C, H, W).

    Accepts (C, H, W), (H, W) for single-channel networks, or a flat vector
    of the right length.
    """
    t = as_tensor(x, name)
    c, h, w = input_shape
    if t.shape == (c, h, w):
        return t
    if c == 1 and t.shape == (h, w):
        return t.reshape(1, h, w)
    if t.ndim == 1 and t.numel() == c * h * w:
        return t.reshape(c, h, w)
    raise ContractError(f"{name} shape {tuple(t.shape)} does not match network input {input_shape}")


def as_image_batch(x, input_shape, name="images"):
    """Coerce a batch to (N, C, H, W); a single image becomes a batch of one."""
    t = as_tensor(x, name)
    c, h, w = input_shape
    if t.ndim == 4 and t.shape[1:] == (c, h, w):
        return t
    if c == 1 and t.ndim == 3 and t.shape[1:] == (h, w):
        return t.reshape(-1, 1, h, w)
    if t.ndim == 2 and t.shape[1] == c * h * w:
        return t.reshape(-1, c, h, w)
    if t.shape == (c, h, w) or (c == 1 and t.shape == (h, w)):
        return as_image(t, input_shape, name).unsqueeze(0)
    raise ContractError(f"{name} shape {tuple(t.shape)} does not match network input {input_shape}")


def as_float_array(x, name="array", ndim=1):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != ndim:
        raise ContractError(f"{name} must be {ndim}-dimensional, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise NumericError(f"{name} contains non-finite values")
    return a


def check_positive(value, name):
    if not value > 0:
        raise ContractError(f"{name} must be positive, got {value!r}")
    return value


def check_nonnegative(value, name):
    if value < 0:
        raise ContractError(f"{name} must be non-negative, got {value!r}")
    return value


def check_probability(value, name, open_interval=False):
    lo_ok = value > 0 if open_interval else value >= 0
    hi_ok = value < 1 if open_interval else value <= 1
    if not (lo_ok and hi_ok):
        bounds = "(0, 1)" if open_interval else "[0, 1]"
        raise ContractError(f"{name} must lie in {bounds}, got {value!r}")
    return value


def spawn_rng(seed, *labels):
    """Derive an independent numpy Generator from a seed and string labels.

    Used everywhere a reproducible, collision-free stream is needed; labels
    keep streams for different purposes (init, shuffling, sampling, ...)
    independent of each other. crc32 rather than hash(): the latter is
    salted per process and would break cross-process reproducibility.
    """
    entropy = [zlib.crc32(str(lbl).encode("utf-8")) for lbl in labels]
    return np.random.default_rng(np.random.SeedSequence([int(seed) % (2**63)] + entropy))
