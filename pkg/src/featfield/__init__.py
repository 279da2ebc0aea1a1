"""featfield: fit a radiance field and a semantic feature field to posed
images plus teacher feature maps, then decompose and edit the scene with
open-set queries."""

__version__ = "0.1.0"

from .errors import DatastoreError, FeatFieldError, InputError, StructureError
from .field import Field, FieldConfig, FieldParams, positional_encoding
from .geometry import Camera, DepthSamples, RayBundle, generate_rays, \
    importance_sample, stratified_sample
from .scene import SceneModel

__all__ = [
    "Camera", "DepthSamples", "RayBundle", "Field", "FieldConfig",
    "FieldParams", "SceneModel", "generate_rays", "importance_sample",
    "stratified_sample", "positional_encoding", "FeatFieldError",
    "InputError", "StructureError", "DatastoreError", "__version__",
]
