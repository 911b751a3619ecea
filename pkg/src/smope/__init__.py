"""Sparse mixture of prompt experts for prompt-based continual learning."""

from .continual import (ABLATION_LADDER, HyperParams, StreamSpec, Task, TaskStream, ablation_stage,
                        estimate_class_gaussians, evaluate, faa_caa, full_method, generate_task_stream,
                        run_stream, tap_refine, train_task)
from .model import DENSE, Backbone, ClassifierHead, LearnerState, ModelConfig, encode, predict
from .numerics import finite_diff_check, make_rng, softmax_masked
from .objectives import LossWeights, prototype_loss, router_loss
from .prefix_moe import (PROXY, TOKEN, PromptBlock, per_token_prompt_scores, proxy_scores,
                         smope_head_output_reference)
from .routing import NoiseConfig, adaptive_noise, select_experts, update_usage, usage_entropy
from .theory import MixingMeasure, PretrainedGate, RateConfig, fit_least_squares, rate_experiment, voronoi_loss

__version__ = "0.1.0"
