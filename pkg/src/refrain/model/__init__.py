from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .classifier import (
    DESK_CLASSIFIER,
    PAPER_CLASSIFIER,
    ClassifierConfig,
    ClassifierHyperparams,
    ClassifierTrainResult,
    GenreClassifier,
    classify_genre,
    evaluate_classifier,
    load_classifier,
    piece_probability,
    save_classifier,
    train_classifier,
)
from .refiner import (
    DESK_REFINER,
    MICRO_REFINER,
    PAPER_REFINER,
    RefinerConfig,
    RefinerModel,
    TrainHyperparams,
    TrainingExample,
    TrainResult,
    build_encoder_tokens,
    load_refiner,
    make_training_example,
    refine,
    save_refiner,
    token_accuracy,
    train_refiner,
    write_loss_curve,
)

__all__ = [name for name in dir() if not name.startswith("_")]
