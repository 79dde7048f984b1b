"""Repurpose meta-learned checkpoints at test time with uncertainty-based gradient steps."""
__version__ = "0.1.0"

from .adapt import AdaptConfig, AdaptResult, adapt, adapt_grid, preset
from .modelio import Checkpoint, ModelSpec, ParamSet, load_checkpoint, save_checkpoint
from .tasks import DomainParams, Episode, sample_episode, shifted_domain

__all__ = ["AdaptConfig", "AdaptResult", "Checkpoint", "DomainParams", "Episode", "ModelSpec",
           "ParamSet", "adapt", "adapt_grid", "load_checkpoint", "preset", "sample_episode",
           "save_checkpoint", "shifted_domain"]
