"""tinymorph: smooth image morphing on a toy pixel-space diffusion model."""

from .config import RunConfig
from .diffusion import (DiffusionSchedule, TrainConfig, ddim_denoise, ddim_invert,
                        make_schedule, q_sample, train_base)
from .lora import (LoraDelta, LoraFitConfig, apply_lora, effective_residuals,
                   fit_lora, init_lora, interp_lora)
from .metrics import (DistanceProfile, MetricsReport, pdv, perceptual_distance,
                      ppl, psnr, reschedule)
from .morph import (AttnCache, ChannelStats, FrameSequence, MorphConfig,
                    adain_adjust, capture_endpoint_trajectories, generate_frame,
                    interp_attention, lerp_condition, morph, slerp)
from .tensor import Graph, NonFiniteError, Tensor, grad_check
from .unet import (ArchSpec, ConditionVector, EffectiveUNet, UNetParams,
                   condition_embed, init_params, timestep_embed)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
