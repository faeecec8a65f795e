"""Complementary private/shared prompts for rehearsal-free continual text classification."""

from .autodiff import Tensor, backward_all, finite_difference_check, no_grad
from .config import TrainConfig, load_config
from .continual import RunReport, run_sequence, run_task, warmup_pretrain
from .data import TaskSequence, TaskSpec, gen_synthetic_suite, make_suite, tokenize_hash
from .encoder import EncoderConfig, EncoderWeights
from .prompts import PromptBank

__all__ = [
    "Tensor", "backward_all", "finite_difference_check", "no_grad",
    "TrainConfig", "load_config", "RunReport", "run_sequence", "run_task", "warmup_pretrain",
    "TaskSequence", "TaskSpec", "gen_synthetic_suite", "make_suite", "tokenize_hash",
    "EncoderConfig", "EncoderWeights", "PromptBank",
]
