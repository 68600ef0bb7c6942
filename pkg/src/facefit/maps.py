"""Dense per-pixel maps (normals, uv, depth, masks)."""
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch


@dataclass
class MapImage:
    data: np.ndarray    # (H, W, C) float32
    valid: np.ndarray   # (H, W) bool

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.data.shape[:2]:
            raise DimensionMismatch(f"valid mask {self.valid.shape} does not match data {self.data.shape[:2]}")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape[:2]

    @classmethod
    def from_mask(cls, valid):
        valid = np.asarray(valid, dtype=bool)
        return cls(valid.astype(np.float32)[:, :, None], valid)

    def same_as(self, other):
        """Equal validity and bit-identical data on valid pixels."""
        if self.data.shape != other.data.shape or not np.array_equal(self.valid, other.valid):
            return False
        a = self.data[self.valid].view(np.uint32)
        b = other.data[other.valid].view(np.uint32)
        return bool(np.array_equal(a, b))


def require_same_size(*maps):
    shapes = {m.shape for m in maps}
    if len(shapes) > 1:
        raise DimensionMismatch(f"maps have different sizes: {sorted(shapes)}")
