from services.learn.games import (
    GeneratorMechanism,
    NeuralAttacker,
    TrainConfig,
    TrainingHistory,
    TrainingResult,
    attack_mechanism,
    attacker_loss,
    defender_loss,
    train_attacker_against,
    train_bne,
    train_lrt_defense,
)
from services.learn.checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "GeneratorMechanism",
    "NeuralAttacker",
    "TrainConfig",
    "TrainingHistory",
    "TrainingResult",
    "attack_mechanism",
    "attacker_loss",
    "defender_loss",
    "load_checkpoint",
    "save_checkpoint",
    "train_attacker_against",
    "train_bne",
    "train_lrt_defense",
]
