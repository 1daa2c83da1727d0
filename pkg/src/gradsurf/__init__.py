"""Unsupervised normal estimation, denoising and reconstruction by fitting an implicit
signed-distance field to a single raw point cloud."""

__version__ = "0.1.0"

from .config import Config, TrainConfig, desk_config  # noqa: E402
from .errors import GradSurfError  # noqa: E402
from .geometry import PointCloud, normalize  # noqa: E402
from .inference import denoise, extract_mesh, infer_normals  # noqa: E402
from .trainer import fit, resume  # noqa: E402

__all__ = ["Config", "TrainConfig", "desk_config", "GradSurfError", "PointCloud", "normalize", "denoise",
           "extract_mesh", "infer_normals", "fit", "resume", "__version__"]
