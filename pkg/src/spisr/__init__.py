"""Self-supervised super-resolution of single-photon (photon counting) cubes."""

from .cube import CubeDims, CubeError, DepthImage, PhotonCountingCube, Rng
from .evaluate import EvalReport, build_report, rmse, soft_argmax_depth, softmax_histogram
from .forward import PulseShape, generate_scene_dataset, make_pulse, measure, simulate_pair
from .losses import LossConfig, equivariance_loss, kl_supervised, pukl_exact, pukl_mc
from .network import NetConfig, ReconstructionNet
from .operators import TransformSpec, apply_transform, downsample, upsample_trilinear
from .trainer import Mode, TrainConfig, TrainingAborted, train

__version__ = "0.1.0"
