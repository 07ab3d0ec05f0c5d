"""Desk-scale guided consistency distillation with analytic mixture teachers."""

from .consistency import BoundarySpec, ConsistencyModel, boundary_coeffs, init_from_teacher
from .distill import TrainConfig, distance, lcd_loss, lcd_train, lcf_train
from .kernels import NUMBA_ENABLED
from .latent import LatentCodec, decode, encode, fit_linear_codec, identity_codec
from .net import Denoiser, EmaPair, ema_update, fourier_embed, net_grad
from .sampler_eval import (
    SampleSchedule,
    default_sample_schedule,
    endpoint_error,
    mode_metrics,
    multistep_sample,
    self_consistency_gap,
    sliced_w1,
)
from .schedule import NoiseSchedule, TimeGrid, forward_sample, make_time_grid, make_vp_schedule
from .solver import (
    cfg_solver_step,
    convergence_study,
    ddim_step,
    dpm2_step,
    dpmpp2_step,
    oracle_integrate,
)
from .teacher import MixtureSpec, TeacherModel, cfg_eps, gmm_score, teacher_eps, train_teacher

__version__ = "0.1.0"
