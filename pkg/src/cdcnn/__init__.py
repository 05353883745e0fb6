"""Cross-domain CNN for migrant/native recognition from phone records."""

from .cnc import TrainConfig, cotrain, finetune, pretrain, select_confident, train_full
from .datagen import Dataset, GenConfig, export_dataset, gen_dataset, import_dataset
from .evaluation import compute_metrics, run_ablation, sweep_days, sweep_labels
from .model import ModelConfig, Network, build_balancer, init_params

__all__ = [
    "Dataset", "GenConfig", "ModelConfig", "Network", "TrainConfig",
    "build_balancer", "compute_metrics", "cotrain", "export_dataset", "finetune",
    "gen_dataset", "import_dataset", "init_params", "pretrain", "run_ablation",
    "select_confident", "sweep_days", "sweep_labels", "train_full",
]
__version__ = "0.1.0"
