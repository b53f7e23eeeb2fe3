"""Gravity-field diffusion bridge for hand-object contact refinement."""

from .bridge import BridgeConfig, NoiseSchedule, StageSpec, TemplatePrior, run_bridge
from .contact import ContactMask, load_external_mask, nearest_point_mask, ray_based_mask
from .errors import GravityDBError, NumericalError, ValidationError
from .field import FieldTemplate, GravityFieldSpec, batch_force, force, potential
from .geometry import OrientedPointCloud, RigidTransform, SurfaceModel, build_surface, procrustes_align
from .scenes import Scene, load_scene, make_grasp_scene, make_primitive_object, save_scene

__version__ = "0.1.0"
