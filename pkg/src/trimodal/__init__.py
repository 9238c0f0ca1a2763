"""Triple-modal conversion pipeline on seeded synthetic cohorts.

Layers, bottom to top:

- ``autograd`` / ``nn`` / ``gradcheck``: reverse-mode engine over numpy,
  layer containers, finite-difference verification.
- ``synthdata``: seeded cohorts with planted cross-modal label structure,
  volume/manifest formats, k-fold splits, probes.
- ``mmg``: vector-quantized PET generation with the hybrid objective.
- ``encoders`` / ``fusion``: modality token encoders, self-attention,
  co-attention fusion, classifier heads.
- ``losses`` / ``metrics``: focal + SDM objectives; ACC/SEN/SPE/AUC/F1.
- ``trainer``: Adam, two-stage training, cross-validation driver.
- ``config`` / ``verify`` / ``cli``: run configs, the property suite, and
  the command-line front end.
"""

from .autograd import Tensor, no_grad
from .losses import LossConfig, focal_loss, sdm_loss, total_loss, triple_loss
from .metrics import auc, confusion_metrics, threshold_metrics
from .mmg import MmgConfig, MmgModel, hybrid_loss, quantize
from .encoders import EncoderConfig, ModalityEncoders
from .fusion import CoAttention, cross_concat
from .synthdata import CohortConfig, generate_cohort, load_cohort, read_volume, \
    split_kfold, write_volume
from .trainer import Adam, TrainConfig, run_cv, train_fusion, train_mmg

__version__ = "0.1.0"

__all__ = [
    "Tensor", "no_grad",
    "LossConfig", "focal_loss", "sdm_loss", "total_loss", "triple_loss",
    "auc", "confusion_metrics", "threshold_metrics",
    "MmgConfig", "MmgModel", "hybrid_loss", "quantize",
    "EncoderConfig", "ModalityEncoders", "CoAttention", "cross_concat",
    "CohortConfig", "generate_cohort", "load_cohort", "read_volume",
    "split_kfold", "write_volume",
    "Adam", "TrainConfig", "run_cv", "train_fusion", "train_mmg",
    "__version__",
]
