"""Contrastive prototype learning with augmented embeddings, in numpy."""

from cplae.config import RunConfig
from cplae.core import PRESETS, CplConfig, FewShotModel
from cplae.evaluation import ablation_run, meta_test
from cplae.trainer import run_training

__version__ = "0.1.0"
__all__ = ["PRESETS", "CplConfig", "FewShotModel", "RunConfig", "ablation_run", "meta_test", "run_training"]
