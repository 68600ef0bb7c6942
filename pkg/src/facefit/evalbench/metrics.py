"""Chamfer-style metrics from ground-truth points to a predicted surface.

Distances are unidirectional (GT -> mesh).  L2 is the root mean square
distance so both Chamfer numbers are in millimeters.  Recall counts points
within the threshold and is reported higher-is-better.
"""
from dataclasses import dataclass, field

import numpy as np

from ..errors import EmptyAfterMasking
from .align import RigidTransform, rigid_align
from .bvh import build_bvh, query_bvh

RECALL_THRESHOLD_MM = 2.5


@dataclass
class MetricsRecord:
    l1_mm: float
    l2_mm: float
    nc: float
    recall_2_5: float
    aligned_transform: RigidTransform = field(default_factory=RigidTransform)
    n_points: int = 0

    def to_dict(self):
        return {"l1_mm": self.l1_mm, "l2_mm": self.l2_mm, "nc": self.nc,
                "recall_2_5": self.recall_2_5, "n_points": self.n_points,
                "aligned_transform": self.aligned_transform.to_dict()}


def keep_mask(gt, keep_labels=None):
    """Boolean mask over GT points whose label is in ``keep_labels`` (None keeps all)."""
    if keep_labels is None:
        return np.ones(len(gt), dtype=bool)
    if gt.labels is None:
        raise ValueError("region labels requested but the point cloud has none")
    return np.isin(gt.labels, np.asarray(list(keep_labels)))


def distances_and_cosines(vertices, triangles, points, normals, bvh=None):
    bvh = bvh or build_bvh(vertices, triangles)
    hit = query_bvh(bvh, points)
    cos = np.einsum("ij,ij->i", hit.normal, normals)
    return hit.distance, np.clip(cos, -1.0, 1.0)


def compute_metrics(vertices, triangles, gt, keep_labels=None, threshold=RECALL_THRESHOLD_MM,
                    transform=None, bvh=None):
    """Metrics of an already-aligned mesh against ``gt`` (a PointCloud)."""
    sel = keep_mask(gt, keep_labels)
    if not sel.any():
        raise EmptyAfterMasking("no ground-truth points left after region masking")
    d, cos = distances_and_cosines(vertices, triangles, gt.points[sel], gt.normals[sel], bvh)
    return MetricsRecord(
        l1_mm=float(d.mean()),
        l2_mm=float(np.sqrt(np.mean(d * d))),
        nc=float(cos.mean()),
        recall_2_5=float(np.mean(d <= threshold)),
        aligned_transform=transform or RigidTransform(),
        n_points=int(sel.sum()),
    )


def evaluate(vertices, triangles, gt, landmark_pairs, keep_labels=None, threshold=RECALL_THRESHOLD_MM):
    """Align on landmarks + ICP (masked GT only), then compute metrics."""
    sel = keep_mask(gt, keep_labels)
    if not sel.any():
        raise EmptyAfterMasking("no ground-truth points left after region masking")
    T = rigid_align(vertices, triangles, gt.points[sel], landmark_pairs)
    return compute_metrics(T.apply(vertices), triangles, gt, keep_labels, threshold, transform=T)
