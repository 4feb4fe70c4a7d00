"""Volume containers shared across the pipeline.

Arrays are indexed ``[x, y, z]``; the third axis is the slice axis (the short
one in the usual 256x256x32 acquisitions).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BACKGROUND, LV, LA, MYO = 0, 1, 2, 3
CLASS_NAMES = {BACKGROUND: "background", LV: "LV", LA: "LA", MYO: "MYO"}
STRUCTURES = ("LV", "LA", "MYO")
STRUCTURE_IDS = {"LV": LV, "LA": LA, "MYO": MYO}
NUM_CLASSES = 4

# physical field of view used to derive spacing from a grid size
DEFAULT_FOV_MM = (96.0, 96.0, 64.0)


def spacing_for(dims, fov_mm=DEFAULT_FOV_MM) -> tuple[float, float, float]:
    return tuple(float(f) / int(n) for f, n in zip(fov_mm, dims))


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"Volume must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple:
        return self.data.shape


@dataclass
class LabelVolume:
    classes: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.classes)
        if arr.ndim != 3:
            raise ValueError(f"LabelVolume must be 3-D, got shape {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() >= NUM_CLASSES):
            raise ValueError(f"class ids must lie in 0..{NUM_CLASSES - 1}")
        self.classes = np.ascontiguousarray(arr, dtype=np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple:
        return self.classes.shape

    def counts(self) -> dict[int, int]:
        return {c: int(n) for c, n in enumerate(np.bincount(self.classes.ravel(), minlength=NUM_CLASSES))}

    def as_intensity(self) -> np.ndarray:
        """Grey-level encoding fed to the generator: ids 0..3 -> 0, 1/3, 2/3, 1."""
        return (self.classes.astype(np.float32) / np.float32(NUM_CLASSES - 1))


def as_label_array(x) -> np.ndarray:
    return x.classes if isinstance(x, LabelVolume) else np.asarray(x)


def as_volume_array(x) -> np.ndarray:
    return x.data if isinstance(x, Volume) else np.asarray(x, dtype=np.float32)
