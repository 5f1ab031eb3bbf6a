"""Synthetic keypoint scenes and dataset persistence.

Each scene is a grayscale image containing K additive Gaussian blobs on a
mild linear background gradient; keypoint labels are the blob centers in
image pixel units (row, col). Blobs have per-index sizes and amplitudes so
keypoint identities are learnable, and centers keep a minimum separation.
Generation is fully deterministic given the seed; dataset files carry
content checksums so reproducibility is verifiable.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from ._validation import spawn_rng
from .errors import ContractError

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class SceneParams:
    """Blob k is identifiable by construction: size grows with k and the
    sign alternates (bright/dark spots), so keypoint identities are
    learnable by a small network."""

    image_size: tuple = (32, 32)
    num_keypoints: int = 8
    margin: int = 4
    min_separation: float = 6.0
    blob_sigma_base: float = 1.3
    blob_sigma_step: float = 0.3
    blob_amplitude_base: float = 0.3
    blob_amplitude_step: float = 0.05
    blob_amplitude_jitter: float = 0.05
    background_level: float = 0.5
    background_gradient: float = 0.12
    # explicit per-keypoint overrides; None falls back to the ladders above
    blob_sigmas: tuple = None
    blob_amplitudes: tuple = None

    def __post_init__(self):
        h, w = self.image_size
        if self.num_keypoints < 1:
            raise ContractError("num_keypoints must be >= 1")
        if 2 * self.margin >= min(h, w):
            raise ContractError(f"margin {self.margin} leaves no interior in a {h}x{w} image")
        interior = (h - 2 * self.margin) * (w - 2 * self.margin)
        if self.num_keypoints * max(self.min_separation, 1.0) ** 2 > interior:
            raise ContractError("too many keypoints for the image interior")
        for name in ("blob_sigmas", "blob_amplitudes"):
            v = getattr(self, name)
            if v is not None:
                if len(v) != self.num_keypoints:
                    raise ContractError(f"{name} must have one entry per keypoint")
                object.__setattr__(self, name, tuple(float(x) for x in v))

    def to_dict(self) -> dict:
        return {"image_size": list(self.image_size), "num_keypoints": self.num_keypoints,
                "margin": self.margin, "min_separation": self.min_separation,
                "blob_sigma_base": self.blob_sigma_base, "blob_sigma_step": self.blob_sigma_step,
                "blob_amplitude_base": self.blob_amplitude_base,
                "blob_amplitude_step": self.blob_amplitude_step,
                "blob_amplitude_jitter": self.blob_amplitude_jitter,
                "background_level": self.background_level,
                "background_gradient": self.background_gradient,
                "blob_sigmas": list(self.blob_sigmas) if self.blob_sigmas else None,
                "blob_amplitudes": list(self.blob_amplitudes) if self.blob_amplitudes else None}

    @staticmethod
    def from_dict(d: dict) -> "SceneParams":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        for name in ("blob_sigmas", "blob_amplitudes"):
            if d.get(name) is not None:
                d[name] = tuple(d[name])
        return SceneParams(**d)


def _place_centers(params: SceneParams, rng) -> np.ndarray:
    """Rejection-sample keypoint centers with minimum separation; gives up
    on the separation constraint after a cap so generation always ends."""
    h, w = params.image_size
    lo, hi_r, hi_c = params.margin, h - 1 - params.margin, w - 1 - params.margin
    centers = []
    tries = 0
    while len(centers) < params.num_keypoints:
        cand = np.array([rng.uniform(lo, hi_r), rng.uniform(lo, hi_c)])
        tries += 1
        if tries > 200 * params.num_keypoints or all(
                np.linalg.norm(cand - c) >= params.min_separation for c in centers):
            centers.append(cand)
    return np.array(centers)


def render_scene(params: SceneParams, rng) -> tuple:
    """One (image, keypoints) pair; image in [0, 1], keypoints (K, 2)."""
    h, w = params.image_size
    rows = np.arange(h).reshape(-1, 1)
    cols = np.arange(w).reshape(1, -1)
    gx, gy = rng.uniform(-params.background_gradient, params.background_gradient, size=2)
    img = params.background_level + gx * (cols / max(w - 1, 1)) + gy * (rows / max(h - 1, 1))
    centers = _place_centers(params, rng)
    for k, (cr, cc) in enumerate(centers):
        if params.blob_sigmas is not None:
            sigma = params.blob_sigmas[k]
        else:
            sigma = params.blob_sigma_base + params.blob_sigma_step * k
        if params.blob_amplitudes is not None:
            amp = params.blob_amplitudes[k]
        else:
            amp = params.blob_amplitude_base + params.blob_amplitude_step * k
            if k % 2:
                amp = -amp
        amp = amp + np.sign(amp) * rng.uniform(-1, 1) * params.blob_amplitude_jitter
        img = img + amp * np.exp(-((rows - cr) ** 2 + (cols - cc) ** 2) / (2 * sigma ** 2))
    return np.clip(img, 0.0, 1.0), centers


@dataclass
class KeypointDataset:
    """Train/val/test splits plus the generation provenance."""

    train_images: np.ndarray = field(repr=False)
    train_keypoints: np.ndarray = field(repr=False)
    val_images: np.ndarray = field(repr=False)
    val_keypoints: np.ndarray = field(repr=False)
    test_images: np.ndarray = field(repr=False)
    test_keypoints: np.ndarray = field(repr=False)
    params: SceneParams = field(default_factory=SceneParams)
    seed: int = 0

    @property
    def image_shape(self) -> tuple:
        return (1,) + tuple(self.params.image_size)

    def split(self, name: str) -> tuple:
        return getattr(self, f"{name}_images"), getattr(self, f"{name}_keypoints")


def generate_dataset(n_train: int, n_val: int, n_test: int,
                     params: SceneParams | None = None, seed: int = 0) -> KeypointDataset:
    """Render disjoint train/val/test splits, byte-identical under seed.

    Every scene derives its own RNG stream from (seed, split, index), so
    split contents are independent of the other splits' sizes.
    """
    if min(n_train, n_val, n_test) < 1:
        raise ContractError("all split sizes must be >= 1")
    params = params or SceneParams()
    arrays = {}
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        images = np.empty((count,) + tuple(params.image_size))
        kps = np.empty((count, params.num_keypoints, 2))
        for idx in range(count):
            rng = spawn_rng(seed, "scene", split, idx)
            images[idx], kps[idx] = render_scene(params, rng)
        arrays[f"{split}_images"] = images
        arrays[f"{split}_keypoints"] = kps
    return KeypointDataset(params=params, seed=seed, **arrays)


def _checksum(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def save_dataset(ds: KeypointDataset, out_dir) -> dict:
    """Write splits as .npy files plus a manifest with content checksums."""
    os.makedirs(out_dir, exist_ok=True)
    checksums = {}
    for split in ("train", "val", "test"):
        for part in ("images", "keypoints"):
            name = f"{split}_{part}"
            arr = getattr(ds, name)
            np.save(os.path.join(out_dir, f"{name}.npy"), arr)
            checksums[name] = _checksum(arr)
    manifest = {"params": ds.params.to_dict(), "seed": ds.seed, "checksums": checksums,
                "sizes": {s: int(getattr(ds, f"{s}_images").shape[0]) for s in ("train", "val", "test")}}
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_dataset(in_dir) -> KeypointDataset:
    with open(os.path.join(in_dir, MANIFEST_NAME)) as fh:
        manifest = json.load(fh)
    arrays = {}
    for split in ("train", "val", "test"):
        for part in ("images", "keypoints"):
            name = f"{split}_{part}"
            arr = np.load(os.path.join(in_dir, f"{name}.npy"))
            if _checksum(arr) != manifest["checksums"][name]:
                raise ContractError(f"dataset file {name}.npy does not match its manifest checksum")
            arrays[name] = arr
    return KeypointDataset(params=SceneParams.from_dict(manifest["params"]),
                           seed=manifest["seed"], **arrays)
