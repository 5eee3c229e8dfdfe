"""Conditional-mutual-information regularised fine-tuning on a numpy transformer."""

from .cmi import compute_centroids, dataset_cmi, dataset_cmi_value
from .data import LabeledDataset, load_jsonl, synth_task, synth_vocab
from .distiller import DistillConfig, distill, init_student
from .model import ModelConfig, ModelParams, forward, init_params, load_checkpoint, save_checkpoint
from .tokenizer import Vocab, decode, encode, load_vocab, save_vocab, train_bpe
from .trainer import RunReport, TrainConfig, alternating_fit, fit, max_cmi_fit, select_teacher, sweep

__version__ = "0.1.0"

__all__ = [
    "DistillConfig", "LabeledDataset", "ModelConfig", "ModelParams", "RunReport", "TrainConfig",
    "Vocab", "alternating_fit", "compute_centroids", "dataset_cmi", "dataset_cmi_value", "decode",
    "distill", "encode", "fit", "forward", "init_params", "init_student", "load_checkpoint",
    "load_jsonl", "load_vocab", "max_cmi_fit", "save_checkpoint", "save_vocab", "select_teacher",
    "sweep", "synth_task", "synth_vocab", "train_bpe",
]
