"""Self-supervised visibility learning for novel view synthesis from sparse views."""

__version__ = "0.1.0"

from .config import ABLATIONS, TrainConfig
from .geometry import DepthPlanes, WarpedVolume, sample_depth_planes, softargmax_depth
from .pipeline import PipelineResult, PreparedViews, SynthesisPipeline, prepare_views
from .scene_io import (
    CameraIntrinsics,
    CameraPose,
    SceneManifest,
    SyntheticScene,
    View,
    generate_synthetic_scene,
    import_colmap,
    preset_layout,
    read_manifest,
    select_source_views,
    write_manifest,
)
from .training import Checkpoint, LossReport, Trainer, psnr, ssim, train_step
