"""Patch extraction and stochastic augmentation of (image, label) pairs.

Every function takes an explicit ``numpy.random.Generator`` and transforms the
image and the label map with the same spatial mapping. Images are resampled
with trilinear interpolation and labels with nearest neighbor, so label maps
never acquire values outside ``{0, 1, 2, 4}``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation


@dataclass
class AugmentationConfig:
    patch_size: tuple[int, int, int] = (32, 32, 32)
    rotation_range: tuple[float, float] = (0.0, 30.0)
    gain_range: tuple[float, float] = (0.8, 1.2)
    gamma_range: tuple[float, float] = (0.8, 1.2)
    elastic_sigma: float = 5.0
    elastic_spacing: int = 32
    probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        self.rotation_range = tuple(float(r) for r in self.rotation_range)
        self.gain_range = tuple(float(r) for r in self.gain_range)
        self.gamma_range = tuple(float(r) for r in self.gamma_range)
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {self.probability}")
        for name in ("rotation_range", "gain_range", "gamma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {(lo, hi)}")
        if self.elastic_spacing < 1 or self.elastic_sigma < 0:
            raise ValueError("elastic spacing must be >= 1 and sigma >= 0")
        if any(p < 1 for p in self.patch_size):
            raise ValueError(f"invalid patch size {self.patch_size}")


def worker_rng(seed: int, subject_index: int, epoch: int) -> np.random.Generator:
    """Independent stream for one subject in one epoch."""
    return np.random.default_rng([seed, subject_index, epoch])


def extract_patch(v: np.ndarray, m: np.ndarray, size: Sequence[int],
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Cut the same randomly placed window out of every channel and the label map."""
    spatial = v.shape[1:]
    if any(p > s for p, s in zip(size, spatial)):
        raise ValueError(f"patch {tuple(size)} larger than volume {spatial}")
    corner = [int(rng.integers(0, s - p + 1)) for s, p in zip(spatial, size)]
    sl = tuple(slice(c, c + p) for c, p in zip(corner, size))
    return v[(slice(None),) + sl], m[sl]


def random_flip(v: np.ndarray, m: np.ndarray, rng: np.random.Generator,
                axes: Sequence[bool] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Flip each spatial axis independently with probability 0.5.

    ``axes`` fixes the per-axis mask instead of drawing it.
    """
    if axes is None:
        axes = rng.random(3) < 0.5
    for ax, flip in enumerate(axes):
        if flip:
            v = np.flip(v, axis=ax + 1)
            m = np.flip(m, axis=ax)
    return np.ascontiguousarray(v), np.ascontiguousarray(m)


def _warp_affine(v, m, matrix, offset):
    out_v = np.stack([
        ndimage.affine_transform(c, matrix, offset=offset, order=1, mode="constant", cval=0.0)
        for c in v
    ]).astype(v.dtype, copy=False)
    out_m = ndimage.affine_transform(m, matrix, offset=offset, order=0, mode="constant", cval=0)
    return out_v, out_m


def rotation_matrix(axis: Sequence[float], angle_deg: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    rot = Rotation.from_rotvec(axis * np.deg2rad(angle_deg)).as_matrix()
    # snap round-off so quarter turns keep edge voxels inside the grid
    return np.round(rot, 12)


def random_rotate(v: np.ndarray, m: np.ndarray, rng: np.random.Generator,
                  angle_range: tuple[float, float] = (0.0, 30.0),
                  angle: float | None = None,
                  axis: Sequence[float] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Rotate about the volume center by an angle from ``angle_range`` (degrees).

    The rotation axis is uniform on the unit sphere unless ``axis`` is given.
    Voxels that map from outside the volume become 0 in both image and label.
    """
    if angle is None:
        angle = rng.uniform(*angle_range)
    if axis is None:
        axis = rng.normal(size=3)
        while np.linalg.norm(axis) < 1e-8:
            axis = rng.normal(size=3)
    rot = rotation_matrix(axis, angle)
    center = (np.asarray(m.shape) - 1) / 2.0
    # affine_transform maps output coordinates to input coordinates
    inv = rot.T
    offset = center - inv @ center
    return _warp_affine(v, m, inv, offset)


def gamma_transform(v: np.ndarray, rng: np.random.Generator,
                    gain_range: tuple[float, float] = (0.8, 1.2),
                    gamma_range: tuple[float, float] = (0.8, 1.2),
                    gain: float | None = None, gamma: float | None = None) -> np.ndarray:
    """Power-law intensity transform ``g * t**gamma`` on each channel rescaled to [0, 1].

    The rescaling uses the min/max of the brain voxels (nonzero in any
    channel) and is undone afterwards; background stays 0. Channels whose
    brain intensities are constant are returned unchanged.
    """
    if gain is None:
        gain = rng.uniform(*gain_range)
    if gamma is None:
        gamma = rng.uniform(*gamma_range)
    mask = np.any(v != 0, axis=0)
    out = v.copy()
    if not mask.any():
        return out
    for c in range(v.shape[0]):
        vals = v[c][mask].astype(np.float64)
        lo, hi = vals.min(), vals.max()
        if hi == lo:
            continue
        t = (vals - lo) / (hi - lo)
        out[c][mask] = lo + gain * np.power(t, gamma) * (hi - lo)
    return out


def control_grid_shape(shape: Sequence[int], spacing: int) -> tuple[int, ...]:
    # control points at 0, spacing, 2*spacing, ... until the last voxel is covered
    return tuple(int(np.ceil(max(n - 1, 1) / spacing)) + 1 for n in shape)


def dense_displacement(control: np.ndarray, shape: Sequence[int], spacing: int) -> np.ndarray:
    """Trilinear upsampling of a ``(3, *grid)`` control displacement field to ``(3, *shape)``."""
    coords = np.meshgrid(*[np.arange(n, dtype=np.float64) / spacing for n in shape], indexing="ij")
    return np.stack([ndimage.map_coordinates(c, coords, order=1, mode="nearest") for c in control])


def elastic_deform(v: np.ndarray, m: np.ndarray, rng: np.random.Generator,
                   sigma: float = 5.0, spacing: int = 32,
                   control: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Elastic warp driven by Gaussian displacements on a square control grid.

    A spacing at least as large as the volume leaves one control cell, so the
    deformation degenerates to a smooth near-affine warp; that is allowed.
    ``control`` supplies the ``(3, *grid)`` displacements instead of drawing them.
    """
    shape = m.shape
    if control is None:
        control = rng.normal(0.0, sigma, size=(3,) + control_grid_shape(shape, spacing))
    disp = dense_displacement(np.asarray(control, dtype=np.float64), shape, spacing)
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    coords = np.stack([g + d for g, d in zip(grid, disp)])
    out_v = np.stack([
        ndimage.map_coordinates(c, coords, order=1, mode="constant", cval=0.0) for c in v
    ]).astype(v.dtype, copy=False)
    out_m = ndimage.map_coordinates(m, coords, order=0, mode="constant", cval=0)
    return out_v, out_m


AUGMENTATIONS = ("flip", "rotate", "elastic", "gamma")


def augment(v: np.ndarray, m: np.ndarray, cfg: AugmentationConfig,
            rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Apply a random nonempty subset of the augmentations with probability ``cfg.probability``.

    The chosen subset is drawn uniformly among the 15 nonempty subsets and
    always runs in the order flip, rotate, elastic, gamma.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if rng.random() >= cfg.probability:
        return v, m
    subset = int(rng.integers(1, 2 ** len(AUGMENTATIONS)))
    chosen = {name for i, name in enumerate(AUGMENTATIONS) if subset >> i & 1}
    if "flip" in chosen:
        v, m = random_flip(v, m, rng)
    if "rotate" in chosen:
        v, m = random_rotate(v, m, rng, cfg.rotation_range)
    if "elastic" in chosen:
        v, m = elastic_deform(v, m, rng, cfg.elastic_sigma, cfg.elastic_spacing)
    if "gamma" in chosen:
        v = gamma_transform(v, rng, cfg.gain_range, cfg.gamma_range)
    return v, m
