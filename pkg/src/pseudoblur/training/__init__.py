from .ablation import AblationResult, run_ablation
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .optim import OptimState, adam_step, clip_by_global_norm, sgd_step
from .report import StageReport
from .stages import (AdaptTrace, FinetuneTrainer, InitialDeblurTrainer, MetaTransferTrainer,
                     ReblurTrainer, evaluate, meta_outer_gradient, meta_test_adapt,
                     meta_transfer_train, phase_budget, train_initial_deblur, train_reblurrer)

__all__ = [
    "AblationResult", "AdaptTrace", "Checkpoint", "FinetuneTrainer", "InitialDeblurTrainer", "MetaTransferTrainer",
    "OptimState", "ReblurTrainer", "StageReport", "adam_step", "clip_by_global_norm", "evaluate",
    "load_checkpoint", "meta_outer_gradient", "meta_test_adapt", "meta_transfer_train",
    "phase_budget", "run_ablation", "save_checkpoint", "sgd_step", "train_initial_deblur", "train_reblurrer",
]
