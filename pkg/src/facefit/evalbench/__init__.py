"""Point-cloud evaluation: exact surface distances, rigid alignment, metrics."""
from .align import RigidTransform, icp, procrustes, rigid_align
from .bvh import MeshBVH, SurfaceQuery, build_bvh, point_to_mesh_distance, query_bvh
from .metrics import MetricsRecord, compute_metrics, evaluate, keep_mask
from .pointcloud import PointCloud

__all__ = [
    "MeshBVH", "MetricsRecord", "PointCloud", "RigidTransform", "SurfaceQuery",
    "build_bvh", "compute_metrics", "evaluate", "icp", "keep_mask", "point_to_mesh_distance",
    "procrustes", "query_bvh", "rigid_align",
]
