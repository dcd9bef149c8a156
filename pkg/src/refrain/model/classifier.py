"""Binary genre classifier over 3-segment windows.

Shares the refiner's encoder structure; a Start token acts as the
pooled classification position. During scoring a stride-1 sliding
window of three segments covers the sequence and the per-window
probabilities are averaged.
"""

from __future__ import annotations

import random
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from ..tokenizer import GENRES, START, VOCAB, Segment, encode, genre_index
from ..utils import derive_seed
from .checkpoint import load_checkpoint, save_checkpoint
from .transformer import TransformerEncoder

__all__ = [
    "ClassifierConfig",
    "DESK_CLASSIFIER",
    "PAPER_CLASSIFIER",
    "GenreClassifier",
    "ClassifierHyperparams",
    "ClassifierTrainResult",
    "classify_genre",
    "train_classifier",
    "evaluate_classifier",
    "save_classifier",
    "load_classifier",
]

WINDOW_SEGMENTS = 3
POSITIVE_GENRE = GENRES[1]  # model output is the probability of this genre


@dataclass(frozen=True)
class ClassifierConfig:
    layers: int = 4
    heads: int = 4
    hidden: int = 128
    ff: int = 512
    max_len: int = 1024
    dropout: float = 0.1
    vocab_version: str = VOCAB.version


DESK_CLASSIFIER = ClassifierConfig()
PAPER_CLASSIFIER = ClassifierConfig(layers=12, heads=8, hidden=512, ff=2048, max_len=1024)


class GenreClassifier(nn.Module):
    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        self.encoder = TransformerEncoder(
            vocab_size=VOCAB.size,
            hidden=config.hidden,
            heads=config.heads,
            layers=config.layers,
            ff=config.ff,
            max_len=config.max_len,
            dropout=config.dropout,
        )
        self.head = nn.Linear(config.hidden, 1)

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        hidden = self.encoder(ids, pad_mask)
        return self.head(hidden[:, 0, :]).squeeze(-1)


def _window_ids(segments: Sequence[Segment], max_len: int) -> list[int]:
    tokens = [START, *encode(list(segments)).tokens]
    return VOCAB.encode_ids(tokens[:max_len])


def classify_genre(classifier: GenreClassifier, segments: Sequence[Segment]) -> float:
    """Average positive-genre probability over stride-1 windows of 3 segments."""
    if not segments:
        raise ValueError("classify_genre requires at least one segment")
    max_len = classifier.config.max_len
    if len(segments) < WINDOW_SEGMENTS:
        windows = [_window_ids(segments, max_len)]
    else:
        windows = [
            _window_ids(segments[k : k + WINDOW_SEGMENTS], max_len)
            for k in range(len(segments) - WINDOW_SEGMENTS + 1)
        ]
    pad = VOCAB.pad_id
    width = max(len(w) for w in windows)
    batch = torch.full((len(windows), width), pad, dtype=torch.long)
    for row, ids in enumerate(windows):
        batch[row, : len(ids)] = torch.tensor(ids)
    was_training = classifier.training
    classifier.eval()
    try:
        with torch.no_grad():
            probs = torch.sigmoid(classifier(batch, batch.eq(pad)))
    finally:
        if was_training:
            classifier.train()
    return float(probs.mean())


@dataclass
class ClassifierHyperparams:
    steps: int = 400
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    single_thread: bool = False


@dataclass
class ClassifierTrainResult:
    model: GenreClassifier
    train_accuracy: float
    loss_curve: list[tuple[int, float]]


def _sample_window(
    corpus: Sequence[tuple[Sequence[Segment], str]], rng: random.Random
) -> tuple[Sequence[Segment], int]:
    segments, genre = corpus[rng.randrange(len(corpus))]
    n = len(segments)
    if n <= WINDOW_SEGMENTS:
        window = segments
    else:
        start = rng.randrange(n - WINDOW_SEGMENTS + 1)
        window = segments[start : start + WINDOW_SEGMENTS]
    return window, genre_index(genre)


def _collate_windows(windows: list[tuple[Sequence[Segment], int]], max_len: int):
    pad = VOCAB.pad_id
    ids = [_window_ids(w, max_len) for w, _ in windows]
    width = max(len(x) for x in ids)
    batch = torch.full((len(ids), width), pad, dtype=torch.long)
    for row, x in enumerate(ids):
        batch[row, : len(x)] = torch.tensor(x)
    labels = torch.tensor([label for _, label in windows], dtype=torch.float32)
    return batch, batch.eq(pad), labels


def train_classifier(
    corpus: Sequence[tuple[Sequence[Segment], str]],
    config: ClassifierConfig = DESK_CLASSIFIER,
    hp: ClassifierHyperparams = ClassifierHyperparams(),
) -> ClassifierTrainResult:
    """Binary cross-entropy training on randomly placed 3-segment windows."""
    corpus = [(list(segs), genre) for segs, genre in corpus if len(segs) > 0]
    labels = {genre for _, genre in corpus}
    if len(labels) < 2:
        raise ValueError(f"corpus must contain both genres, found {sorted(labels)}")
    if hp.single_thread:
        torch.set_num_threads(1)

    torch.manual_seed(derive_seed(hp.seed, "classifier-init"))
    model = GenreClassifier(config)
    optimizer = torch.optim.AdamW(model.parameters(), lr=hp.lr, weight_decay=hp.weight_decay)
    rng = random.Random(derive_seed(hp.seed, "classifier-sampler"))
    loss_fn = nn.BCEWithLogitsLoss()
    loss_curve: list[tuple[int, float]] = []

    model.train()
    for step in range(hp.steps):
        windows = [_sample_window(corpus, rng) for _ in range(hp.batch_size)]
        batch, pad_mask, labels_t = _collate_windows(windows, config.max_len)
        logits = model(batch, pad_mask)
        loss = loss_fn(logits, labels_t)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        loss_curve.append((step, float(loss.item())))

    accuracy = evaluate_classifier(model, corpus, seed=derive_seed(hp.seed, "train-eval"))
    return ClassifierTrainResult(model=model, train_accuracy=accuracy, loss_curve=loss_curve)


def evaluate_classifier(
    model: GenreClassifier,
    corpus: Sequence[tuple[Sequence[Segment], str]],
    *,
    seed: int = 0,
    windows_per_piece: int = 2,
) -> float:
    """Window-level accuracy over deterministically sampled windows."""
    rng = random.Random(seed)
    correct = 0
    total = 0
    for segments, genre in corpus:
        if not segments:
            continue
        for _ in range(windows_per_piece):
            window, label = _sample_window([(segments, genre)], rng)
            prob = classify_genre(model, list(window))
            correct += int((prob >= 0.5) == bool(label))
            total += 1
    if total == 0:
        raise ValueError("no windows to evaluate")
    return correct / total


def save_classifier(path: str | Path, model: GenreClassifier) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        path,
        model_kind="classifier",
        config=asdict(model.config),
        tensors={f"model.{k}": v for k, v in model.state_dict().items()},
    )


def load_classifier(path: str | Path) -> GenreClassifier:
    ckpt = load_checkpoint(path)
    if ckpt.model_kind != "classifier":
        raise ValueError(f"checkpoint holds a {ckpt.model_kind!r} model, expected classifier")
    names = {f.name for f in fields(ClassifierConfig)}
    config = ClassifierConfig(**{k: v for k, v in ckpt.config.items() if k in names})
    model = GenreClassifier(config)
    model.load_state_dict(
        {k[len("model.") :]: v for k, v in ckpt.tensors.items() if k.startswith("model.")}
    )
    return model


def piece_probability(classifier: GenreClassifier):
    """Adapter: Piece -> positive-genre probability, for metric reports."""
    from ..tokenizer import segment as segment_piece

    def score(piece) -> float:
        return classify_genre(classifier, segment_piece(piece))

    return score
