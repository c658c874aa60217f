"""Label-map clean-up: the global enhancing-tumor threshold and per-cluster removal."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .data_io import LABELS

_RANK = {6: 1, 18: 2, 26: 3}


def relabel_small_et(m: np.ndarray, th: int = 1000) -> np.ndarray:
    """Turn all enhancing tumor (4) into NCR/NET (1) when fewer than ``th`` voxels are labeled 4."""
    et = m == 4
    if et.sum() >= th:
        return m.copy()
    out = m.copy()
    out[et] = 1
    return out


def remove_small_clusters(m: np.ndarray, label: int, min_volume: int, replacement: int = 0,
                          connectivity: int = 26) -> np.ndarray:
    """Relabel connected components of ``label`` smaller than ``min_volume`` voxels to ``replacement``."""
    if label not in LABELS or replacement not in LABELS:
        raise ValueError(f"label and replacement must be in {LABELS}")
    if connectivity not in _RANK:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    out = m.copy()
    if min_volume <= 0:
        return out
    structure = ndimage.generate_binary_structure(3, _RANK[connectivity])
    components, n = ndimage.label(m == label, structure=structure)
    if n == 0:
        return out
    sizes = np.bincount(components.ravel())
    small = np.flatnonzero(sizes < min_volume)
    small = small[small > 0]
    out[np.isin(components, small)] = replacement
    return out
