"""Flow-matching diffusion transformer with per-timestep-interval patch sizes."""
from .backbone import ModelConfig, ModelState, init_model, predict_velocity, velocity
from .checkpoint import (
    Checkpoint,
    ConversionRequiredError,
    FormatError,
    LoadError,
    load_checkpoint,
    save_checkpoint,
)
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import ToyDataset, gen_dataset
from .estimator import PyramidalFlow
from .flops import analyze, bench_wallclock, block_macs, model_macs, schedule_ratio
from .metrics import StatisticsError, desk_fid
from .patching import ConfigurationError, PatchSchedule, Stage, init_from_pretrained, make_schedule, stage_of
from .sampler import SampleConfig, euler_sample, trace_stages
from .tensor import ContractError, DimensionError, Tensor, grad_check, no_grad
from .training import ConversionError, TrainConfig, convert_checkpoint, new_checkpoint, train

__version__ = "0.1.0"
