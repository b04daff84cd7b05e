"""Concept bottleneck models with deferral: multi-head classifiers whose concept
and task heads may each hand a decision to a simulated human expert."""
from .datagen import Dataset, SyntheticSpec, generate, read_dataset, split, write_dataset
from .experts import ORACLE, ExpertSpec, annotate_dataset, simulate_labels
from .explain import ExplainReport, explain_instance
from .losses import LossTarget, PsiKind, penalized_loss, penalized_loss_ls, psi, psi_grad, surrogate_loss
from .metrics import EvalReport, evaluate
from .model import DEFER, DcbmModel, Variant, head_decide, load_model, predict_batch, resolve, save_model
from .oracle import DiscreteJoint, bayes_decision, consistency_check, expected_surrogate
from .train import TrainConfig, train_dcbm_independent, train_dcbm_joint

__version__ = "0.1.0"

__all__ = [
    "DEFER", "Dataset", "DcbmModel", "DiscreteJoint", "EvalReport", "ExpertSpec", "ExplainReport",
    "LossTarget", "ORACLE", "PsiKind", "SyntheticSpec", "TrainConfig", "Variant", "annotate_dataset",
    "bayes_decision", "consistency_check", "evaluate", "expected_surrogate", "explain_instance",
    "generate", "head_decide", "load_model", "penalized_loss", "penalized_loss_ls", "predict_batch",
    "psi", "psi_grad", "read_dataset", "resolve", "save_model", "simulate_labels", "split",
    "surrogate_loss", "train_dcbm_independent", "train_dcbm_joint", "write_dataset",
]
