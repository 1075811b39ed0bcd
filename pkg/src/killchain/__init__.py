"""Model-extraction-to-evasion kill chain at desk scale."""

from .data import BoundingBox, IngestionError, LabeledDataset, load_gtsrb, make_synthetic_pd_dataset
from .evasion import epsilon_sweep, evaluate_evasion, fgsm, transfer_attack
from .extraction import LLDS, build_llds, extract, fidelity, train_substitute
from .metrics import agreement_rate, iou, topk_accuracy
from .model import ArchitectureSpec, TrainConfig, TrainedModel, input_gradient, load_model, predict, save_model, train
from .oracle import BudgetExhausted, OracleHandle, serve_victim
from .querygen import QueryStrategy, build_attack_dataset, gen_graybox_perturbed, gen_random_blobs, gen_uniform_noise

__version__ = "0.1.0"
