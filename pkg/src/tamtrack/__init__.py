"""tamtrack: unified mask / box / point video tracking at desk scale.

A single promptable tracker covers three target granularities with one
architecture: prompts are encoded into sparse/dense embeddings, a two-way
transformer decoder emits candidate masks plus box and point readouts, and
a task-adaptive memory bank (per-task memory encoders, per-task low-rank
adapters inside memory attention) carries target state across frames.

Subpackages:
    autodiff    tensor engine with reverse-mode differentiation
    nn          layers: conv, attention, norms, adapters, interpolation
    prompts     task prompts, Gaussian point maps, prompt encoder
    decoder     two-way transformer and unified prediction heads
    memory      memory encoders, FIFO bank, memory attention with LoRA
    model       assembled tracker
    losses      focal/dice/CIoU/L1 multi-task loss stack
    synthetic   deterministic synthetic-video generator with exact GT
    training    episodic multi-task trainer
    inference   online tracking sessions and multi-object merging
    metrics     J/F, box success metrics, AJ/OA, PCK-T
    engine      clip-split / track / fuse auto-annotation
    cli         train / track / eval / annotate / gradcheck entry points
"""

from .autodiff import Tensor, Parameter, backward, forward_backward, finite_difference_grad, no_grad
from .config import ModelConfig, TrainConfig, TASKS

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Parameter",
    "backward",
    "forward_backward",
    "finite_difference_grad",
    "no_grad",
    "ModelConfig",
    "TrainConfig",
    "TASKS",
    "__version__",
]
