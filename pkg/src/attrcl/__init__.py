"""Class-incremental attribute-guided image retrieval.

A shared convolutional encoder feeds one text-conditioned attention head per
attribute. Heads are trained with InfoNCE on same-subclass doublets while an
EMA teacher distils the encoder across tasks. Two baselines (experience replay
and per-attribute triplet heads) and the A/(B) forgetting report are included.
"""

from .attention import AttentionHead, HeadConfig, HeadRegistry, head_param_count
from .augment import PerspectiveConfig, random_perspective
from .datamodel import (AttributeSpec, Dataset, DataError, Doublet, Item, SynthConfig, Task,
                        TaskSequence, Triplet, build_task_sequence, generate_synthetic,
                        load_manifest, sample_doublets, sample_triplets, write_manifest)
from .encoder import EmaTeacher, Encoder, EncoderConfig, ema_update, encode, init_teacher
from .estimator import ContinualRetriever
from .evaluation import (RetrievalReport, average_precision, export_attention_map,
                         forgetting_report, map_for_attribute)
from .losses import Hyperparams, distill_mse, info_nce, similarity, total_loss, triplet_loss
from .model import RetrievalModel, load_checkpoint, save_checkpoint
from .textemb import TextEncoder
from .trainer import MethodConfig, TrainHistory, count_images_per_step, train_sequence, train_task

__version__ = "0.1.0"

__all__ = [
    "AttentionHead", "AttributeSpec", "ContinualRetriever", "DataError", "Dataset", "Doublet",
    "EmaTeacher", "Encoder", "EncoderConfig", "HeadConfig", "HeadRegistry", "Hyperparams",
    "Item", "MethodConfig", "PerspectiveConfig", "RetrievalModel", "RetrievalReport",
    "SynthConfig", "Task", "TaskSequence", "TextEncoder", "TrainHistory", "Triplet",
    "average_precision", "build_task_sequence", "count_images_per_step", "distill_mse",
    "ema_update", "encode", "export_attention_map", "forgetting_report", "generate_synthetic",
    "head_param_count", "info_nce", "init_teacher", "load_checkpoint", "load_manifest",
    "map_for_attribute", "random_perspective", "sample_doublets", "sample_triplets",
    "save_checkpoint", "similarity", "total_loss", "train_sequence", "train_task",
    "triplet_loss", "write_manifest",
]
