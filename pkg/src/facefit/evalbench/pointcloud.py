from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class PointCloud:
    points: np.ndarray                    # (P, 3) millimeters
    normals: np.ndarray                   # (P, 3) unit
    labels: Optional[np.ndarray] = None   # (P,) int region labels

    def __len__(self):
        return self.points.shape[0]

    def transformed(self, R, t):
        return PointCloud(self.points @ R.T + t, self.normals @ R.T, self.labels)

    def select(self, keep):
        labels = None if self.labels is None else self.labels[keep]
        return PointCloud(self.points[keep], self.normals[keep], labels)
