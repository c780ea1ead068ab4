"""Joint text-image diffusion with a partially shared transformer U-Net,
infilling-based conditional sampling, and masked classifier-free guidance,
exercised end to end on a synthetic shapes benchmark with an exact
consistency oracle."""

from .backbone import (ActivationMode, BackboneConfig, PSUNet, build_ps_unet,
                       build_uvit_multi, param_count)
from .sampler import (GuidanceConfig, MaskSpec, joint_infill, masked_cfg_predict,
                      scenario_mask, unconditional_sample, activation_mode_for)
from .schedule import (NoiseSchedule, build_schedule, ddim_reverse_step,
                       ddpm_reverse_step, joint_noise_loss, q_sample)
from .synth_data import (SceneSpec, SynthSample, all_specs, caption_grammar,
                         make_dataset, oracle_classify, render)
from .text_codec import (EmbeddingTable, Vocabulary, build_vocab, encode,
                         nn_decode, train_embeddings)
from .trainer import TrainConfig, train, resume

__all__ = [n for n in dir() if not n.startswith("_")]
