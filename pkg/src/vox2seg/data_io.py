"""Volume I/O, intensity normalization, label encoding, cropping and phantom synthesis.

Arrays are channel-first: a multi-modal volume has shape ``(C, X, Y, Z)`` with
channels ordered ``(T1, T1Gd, T2, FLAIR)``; a label map has shape ``(X, Y, Z)``
with values in ``{0, 1, 2, 4}``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import nibabel as nib
import numpy as np

CHANNELS = ("t1", "t1ce", "t2", "flair")
LABELS = (0, 1, 2, 4)
NUM_CLASSES = len(LABELS)

# lookup from label value to channel index; -1 marks invalid values
_LABEL_TO_CHANNEL = np.full(256, -1, dtype=np.int64)
for _ch, _lab in enumerate(LABELS):
    _LABEL_TO_CHANNEL[_lab] = _ch


@dataclass
class Subject:
    """One subject: normalized image, label map and the affine of the source grid."""

    id: str
    image: np.ndarray
    label: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))


# ----------------------------------------------------------------------------
# file I/O
# ----------------------------------------------------------------------------


def _channel_files(directory: Path) -> list[Path]:
    files = []
    for name in CHANNELS:
        hits = sorted(directory.glob(f"*_{name}.nii*"))
        if not hits:
            raise FileNotFoundError(f"no '{name}' volume in {directory}")
        files.append(hits[0])
    return files


def load_volume(path: str | os.PathLike | Sequence[str | os.PathLike]) -> np.ndarray:
    """Load a 4-channel volume as a float32 array of shape ``(4, X, Y, Z)``.

    ``path`` may be a subject directory holding ``*_t1``, ``*_t1ce``, ``*_t2``
    and ``*_flair`` NIfTI files, an explicit sequence of four files in channel
    order, or a single 4D NIfTI file with the channel axis last.
    """
    if isinstance(path, (list, tuple)):
        files = [Path(p) for p in path]
    else:
        p = Path(path)
        if p.is_dir():
            files = _channel_files(p)
        elif p.is_file():
            data = np.asarray(nib.load(str(p)).dataobj, dtype=np.float32)
            if data.ndim != 4 or data.shape[-1] != len(CHANNELS):
                raise ValueError(
                    f"channel count mismatch: expected a 4D volume with {len(CHANNELS)} "
                    f"channels last, got shape {data.shape}"
                )
            return np.ascontiguousarray(np.moveaxis(data, -1, 0))
        else:
            raise FileNotFoundError(f"no such file or directory: {p}")

    if len(files) != len(CHANNELS):
        raise ValueError(f"channel count mismatch: expected {len(CHANNELS)} files, got {len(files)}")
    arrays = []
    for f in files:
        if not f.exists():
            raise FileNotFoundError(f"no such file: {f}")
        arr = np.asarray(nib.load(str(f)).dataobj, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"expected a 3D volume in {f}, got shape {arr.shape}")
        arrays.append(arr)
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch across channels: {[a.shape for a in arrays]}")
    return np.stack(arrays)


def load_affine(path: str | os.PathLike) -> np.ndarray:
    p = Path(path)
    if p.is_dir():
        p = _channel_files(p)[0]
    return np.asarray(nib.load(str(p)).affine)


def load_label_map(path: str | os.PathLike) -> np.ndarray:
    p = Path(path)
    if p.is_dir():
        hits = sorted(p.glob("*_seg.nii*"))
        if not hits:
            raise FileNotFoundError(f"no segmentation volume in {p}")
        p = hits[0]
    m = np.asarray(nib.load(str(p)).dataobj)
    m = np.rint(m).astype(np.uint8)
    check_labels(m)
    return m


def save_nifti(path: str | os.PathLike, data: np.ndarray, affine: np.ndarray | None = None) -> None:
    """Write ``data`` as NIfTI; output is byte-identical for identical input."""
    img = nib.Nifti1Image(data, np.eye(4) if affine is None else affine)
    # nibabel writes gzip with mtime=0, so repeated writes are reproducible
    nib.save(img, str(path))


def save_label_map(path: str | os.PathLike, m: np.ndarray, affine: np.ndarray | None = None) -> None:
    check_labels(m)
    save_nifti(path, m.astype(np.uint8), affine)


def save_volume(directory: str | os.PathLike, subject_id: str, v: np.ndarray,
                affine: np.ndarray | None = None) -> None:
    directory = Path(directory)
    for name, channel in zip(CHANNELS, v):
        save_nifti(directory / f"{subject_id}_{name}.nii.gz", channel.astype(np.float32), affine)


# ----------------------------------------------------------------------------
# intensity normalization and label encoding
# ----------------------------------------------------------------------------


def brain_mask(v: np.ndarray) -> np.ndarray:
    """Voxels that are nonzero in at least one channel."""
    return np.any(v != 0, axis=0)


def normalize(v: np.ndarray) -> np.ndarray:
    """Z-score each channel over the brain mask; background stays exactly 0.

    The brain mask is the set of voxels nonzero in any channel, so the
    statistics of a channel are those of its nonzero population whenever all
    channels share the same support (as co-registered, skull-stripped scans do).
    """
    v = np.asarray(v)
    if not np.all(np.isfinite(v)):
        raise ValueError("volume contains non-finite values")
    mask = brain_mask(v)
    if mask.sum() < 2:
        raise ValueError("degenerate statistics: fewer than 2 nonzero voxels")
    out = np.zeros(v.shape, dtype=np.float32)
    for c in range(v.shape[0]):
        vals = v[c][mask].astype(np.float64)
        std = vals.std()
        if std == 0:
            raise ValueError(f"degenerate statistics: channel {c} has zero variance")
        out[c][mask] = (vals - vals.mean()) / std
    return out


def check_labels(m: np.ndarray) -> None:
    bad = np.setdiff1d(np.unique(m), LABELS)
    if bad.size:
        raise ValueError(f"label values outside {{0, 1, 2, 4}}: {bad.tolist()}")


def to_categorical(m: np.ndarray) -> np.ndarray:
    """One-hot encode a label map to ``(4, X, Y, Z)`` float32."""
    m = np.asarray(m)
    check_labels(m)
    idx = _LABEL_TO_CHANNEL[m.astype(np.int64)]
    return (idx[None] == np.arange(NUM_CLASSES).reshape(-1, 1, 1, 1)).astype(np.float32)


def from_categorical(s: np.ndarray) -> np.ndarray:
    """Per-voxel argmax mapped back to label values; ties go to the lowest channel."""
    return np.asarray(LABELS, dtype=np.uint8)[np.argmax(s, axis=0)]


# ----------------------------------------------------------------------------
# cropping and padding
# ----------------------------------------------------------------------------


def crop_offsets(source: Sequence[int], target: Sequence[int]) -> tuple[int, ...]:
    """Low-side offsets of a centered crop; an odd margin trims one more voxel from the high side."""
    if any(t > s for s, t in zip(source, target)):
        raise ValueError(f"crop target {tuple(target)} larger than source {tuple(source)}")
    return tuple((s - t) // 2 for s, t in zip(source, target))


def center_crop(a: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """Centered crop over the last three axes (works for label maps and volumes)."""
    spatial = a.shape[-3:]
    off = crop_offsets(spatial, target)
    sl = tuple(slice(o, o + t) for o, t in zip(off, target))
    return a[(Ellipsis,) + sl]


def center_pad(a: np.ndarray, target: Sequence[int], value: float = 0) -> np.ndarray:
    """Centered zero padding over the last three axes; inverse of :func:`center_crop`."""
    spatial = a.shape[-3:]
    off = crop_offsets(target, spatial)
    widths = [(0, 0)] * (a.ndim - 3) + [(o, t - s - o) for o, s, t in zip(off, spatial, target)]
    return np.pad(a, widths, constant_values=value)


# ----------------------------------------------------------------------------
# phantoms
# ----------------------------------------------------------------------------

# rows: healthy brain, ED, NCR/NET, ET; columns: T1, T1Gd, T2, FLAIR.
# every column repeats at least one value, so no single channel separates all regions.
DEFAULT_CONTRAST = (
    (1.0, 1.0, 1.0, 1.0),
    (0.7, 1.0, 2.0, 2.0),
    (0.5, 0.5, 2.0, 1.5),
    (0.7, 2.0, 1.5, 1.5),
)


@dataclass
class PhantomSpec:
    """Geometry and contrast of a synthetic tumor phantom.

    Radii are fractions of the grid size. The edema ellipsoid radius is a
    fraction of the smallest axis; the core and enhancing radii are ratios to
    their enclosing ellipsoid, which keeps the three regions nested.
    """

    size: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    contrast: tuple[tuple[float, ...], ...] = DEFAULT_CONTRAST
    noise_std: float = 0.08
    brain_radius: tuple[float, float] = (0.40, 0.46)
    edema_radius: tuple[float, float] = (0.26, 0.34)
    core_ratio: tuple[float, float] = (0.55, 0.75)
    enhancing_ratio: tuple[float, float] = (0.55, 0.70)
    axis_jitter: tuple[float, float] = (0.9, 1.1)
    center_spread: float = 0.8
    no_et_fraction: float = 0.07
    scale: float = 100.0


def _ellipsoid(shape: Sequence[int], center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    if np.any(radii <= 0):
        return np.zeros(shape, dtype=bool)
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return r2 <= 1.0


def generate_phantom(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render a raw (unnormalized) 4-channel phantom and its label map.

    Returns ``(volume, labels)``; the volume is strictly positive inside an
    ellipsoidal brain and exactly zero outside it.
    """
    rng = np.random.default_rng(spec.seed)
    shape = np.asarray(spec.size)
    center = (shape - 1) / 2.0

    brain_r = rng.uniform(*spec.brain_radius, size=3) * shape
    jitter = rng.uniform(*spec.axis_jitter, size=3)
    edema_r = rng.uniform(*spec.edema_radius) * shape.min() * jitter
    core_r = edema_r * rng.uniform(*spec.core_ratio)
    et_r = core_r * rng.uniform(*spec.enhancing_ratio)
    if rng.random() < spec.no_et_fraction:
        et_r = np.zeros(3)

    slack = brain_r - edema_r
    if np.any(slack <= 0) or np.any(brain_r > shape / 2.0):
        raise ValueError("phantom geometry does not fit in the grid")
    tumor_center = center + rng.uniform(-1, 1, size=3) * slack * spec.center_spread

    brain = _ellipsoid(spec.size, center, brain_r)
    ed = _ellipsoid(spec.size, tumor_center, edema_r) & brain
    core = _ellipsoid(spec.size, tumor_center, core_r) & ed
    et = _ellipsoid(spec.size, tumor_center, et_r) & core

    labels = np.zeros(spec.size, dtype=np.uint8)
    labels[ed] = 2
    labels[core] = 1
    labels[et] = 4

    region = np.zeros(spec.size, dtype=np.int64)  # 0 healthy, 1 ED, 2 NCR, 3 ET
    region[ed] = 1
    region[core] = 2
    region[et] = 3
    contrast = np.asarray(spec.contrast, dtype=np.float64)
    gains = rng.uniform(0.7, 1.3, size=len(CHANNELS))

    volume = np.zeros((len(CHANNELS),) + tuple(spec.size), dtype=np.float32)
    for c in range(len(CHANNELS)):
        noise = rng.normal(0.0, spec.noise_std, size=spec.size)
        chan = (contrast[region, c] + noise) * spec.scale * gains[c]
        chan = np.maximum(chan, 1.0)  # brain voxels stay nonzero
        volume[c][brain] = chan[brain]
    return volume, labels


def subject_seeds(seed: int, n: int) -> list[int]:
    """Independent per-subject seeds derived from a dataset seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


def write_phantom_dataset(out_dir: str | os.PathLike, n_subjects: int, size: Sequence[int],
                          seed: int, spec: PhantomSpec | None = None) -> list[str]:
    """Write ``n_subjects`` phantoms as BraTS-style subject directories plus ``manifest.txt``."""
    if n_subjects <= 0:
        raise ValueError("empty dataset requested")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory not writable: {out}")
    base = spec or PhantomSpec()
    ids = []
    lines = ["# subject_id seed"]
    for i, s in enumerate(subject_seeds(seed, n_subjects)):
        sid = f"phantom_{i:03d}"
        spec_i = PhantomSpec(**{**base.__dict__, "size": tuple(int(x) for x in size), "seed": s})
        volume, labels = generate_phantom(spec_i)
        sdir = out / sid
        sdir.mkdir(exist_ok=True)
        save_volume(sdir, sid, volume)
        save_label_map(sdir / f"{sid}_seg.nii.gz", labels)
        ids.append(sid)
        lines.append(f"{sid} {s}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return ids


def list_subjects(data_dir: str | os.PathLike) -> list[Path]:
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"no such dataset directory: {root}")
    subjects = sorted(p for p in root.iterdir() if p.is_dir())
    if not subjects:
        raise ValueError(f"no subject directories in {root}")
    return subjects


def load_subject(directory: str | os.PathLike, with_label: bool = True) -> Subject:
    d = Path(directory)
    image = normalize(load_volume(d))
    label = load_label_map(d) if with_label else np.zeros(image.shape[1:], dtype=np.uint8)
    if label.shape != image.shape[1:]:
        raise ValueError(f"shape mismatch between image {image.shape[1:]} and label {label.shape}")
    return Subject(d.name, image, label, load_affine(d))


def load_dataset(data_dir: str | os.PathLike, with_label: bool = True) -> list[Subject]:
    return [load_subject(d, with_label) for d in list_subjects(data_dir)]


def phantom_subjects(n: int, size: Sequence[int] = (32, 32, 32), seed: int = 0,
                     spec: PhantomSpec | None = None) -> list[Subject]:
    """In-memory equivalent of :func:`write_phantom_dataset` followed by :func:`load_dataset`."""
    base = spec or PhantomSpec()
    out = []
    for i, s in enumerate(subject_seeds(seed, n)):
        spec_i = PhantomSpec(**{**base.__dict__, "size": tuple(int(x) for x in size), "seed": s})
        volume, labels = generate_phantom(spec_i)
        out.append(Subject(f"phantom_{i:03d}", normalize(volume), labels))
    return out
