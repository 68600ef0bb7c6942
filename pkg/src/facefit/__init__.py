"""Fit a parametric head model to dense uv and normal predictions.

The pipeline: uv maps give per-vertex pixel targets, normal maps give a
per-pixel shading target, and Adam minimises their weighted sum plus a
prior, on single images (``fit_image``) or whole clips (``track_sequence``).
``facefit.evalbench`` scores reconstructions against GT point clouds.
"""
__version__ = "0.1.0"

from .camera import CameraParams, project, project_jacobian, unproject
from .correspond import CorrespondenceSet, UvIndex, build_uv_index, find_correspondences
from .errors import *  # noqa: F401,F403
from .fitter import FitConfig, FitInputs, FitResult, energy_and_gradients, fit_image
from .maps import MapImage
from .model import (FaceParams, MorphableModel, default_model_path, forward, forward_jacobian,
                    load_default_model, load_model, vertex_normals)
from .raster import FragmentBuffer, rasterize, render_maps, visible_vertices
from .tracker import TrackConfig, TrackResult, smoothness_loss, track_sequence
