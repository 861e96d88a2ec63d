"""Stereo image rain removal with dual-view mutual attention.

Self-contained: a numpy-backed reverse-mode autodiff engine, the
restoration network built on it, losses and metrics, synthetic stereo-rain
data, and an Adam training loop with binary checkpoints.
"""

from .blocks import BasicBlock, ChannelAttention, Dcam, Ffn, Resample
from .data import (RainParams, SceneParams, StereoSample, build_dataset,
                   load_dataset, load_image, make_sample, random_crop,
                   save_image, synth_rain, synth_scene)
from .dma import AttentionMap, DmaLayer, attention_oracle, mutual_attention
from .gradcheck import directional_grad_check, grad_check, relative_error
from .losses import (PerceptualExtractor, SsimParams, error_map, hybrid_loss,
                     perceptual_loss, psnr, rgb_to_y, ssim, y_channel_metrics)
from .model import (ModelConfig, StereoIrrModel, count_parameters, crop_to,
                    pad_reflect)
from .rng import RngState
from .tensor import Tape, Tensor, backward
from .training import (AdamState, Checkpoint, TrainConfig, adam_step,
                       evaluate, load_checkpoint, lr_schedule,
                       restore_into, save_checkpoint, train_loop)

__version__ = "0.1.0"
