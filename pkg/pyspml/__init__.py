__version__ = "0.1.0"
from .conf import configure, settings
from .labelspace import Dataset, load_manifest, save_manifest, split_dataset
from .losses import LossKind, LossSpec, spml_loss
from .model import forward, mlp_init
from .regimes import RegimeKind, apply_regime, gen_synthetic_assets
from .evaluation import evaluate
from .trainer import TrainConfig, Trainer, gradcheck, run_experiment, sweep, train
