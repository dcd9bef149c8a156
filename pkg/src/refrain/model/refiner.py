"""The segment refiner: training-example assembly, training loop, sampling.

A corrupted segment framed per the corruption module is embedded in its
surrounding context, prefixed with a genre token and a corruption-kind
token, and fed to the encoder; the decoder learns to emit the original
segment. Sampling supports temperature and per-step logit masking so
constrained decoding (harmonization) can veto token ids.
"""

from __future__ import annotations

import csv
import random
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from ..corruption import CorruptionKind, corrupt
from ..tokenizer import SEGMENT_SEP, START, VOCAB, Segment, Token, encode
from ..utils import derive_seed
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .transformer import KVCache, Seq2SeqTransformer

__all__ = [
    "RefinerConfig",
    "DESK_REFINER",
    "PAPER_REFINER",
    "MICRO_REFINER",
    "RefinerModel",
    "TrainingExample",
    "TrainHyperparams",
    "TrainResult",
    "build_encoder_tokens",
    "make_training_example",
    "refine",
    "train_refiner",
    "save_refiner",
    "load_refiner",
    "token_accuracy",
    "write_loss_curve",
]

LogitMask = np.ndarray | Callable[[int, list[int]], np.ndarray | None]


@dataclass(frozen=True)
class RefinerConfig:
    enc_layers: int = 4
    dec_layers: int = 4
    heads: int = 4
    hidden: int = 128
    ff: int = 512
    max_enc_len: int = 1024
    max_dec_len: int = 256
    dropout: float = 0.1
    vocab_version: str = VOCAB.version


# CPU-trainable in minutes; the contract every test runs against.
DESK_REFINER = RefinerConfig()
# Full-scale preset; constructible but far beyond desk budgets.
PAPER_REFINER = RefinerConfig(
    enc_layers=12,
    dec_layers=12,
    heads=8,
    hidden=512,
    ff=2048,
    max_enc_len=2048,
    max_dec_len=512,
)
# For gradient checks and other analytic tests.
MICRO_REFINER = RefinerConfig(
    enc_layers=2, dec_layers=2, heads=2, hidden=32, ff=64, max_enc_len=256, max_dec_len=64
)


class RefinerModel(Seq2SeqTransformer):
    def __init__(self, config: RefinerConfig):
        super().__init__(
            vocab_size=VOCAB.size,
            hidden=config.hidden,
            heads=config.heads,
            enc_layers=config.enc_layers,
            dec_layers=config.dec_layers,
            ff=config.ff,
            max_enc_len=config.max_enc_len,
            max_dec_len=config.max_dec_len,
            dropout=config.dropout,
        )
        self.config = config


@dataclass(frozen=True)
class TrainingExample:
    """Encoder tokens with exactly one corruption frame, plus the clean target."""

    encoder_tokens: tuple[Token, ...]
    target_tokens: tuple[Token, ...]
    kind: CorruptionKind
    segment_index: int


def build_encoder_tokens(
    left: Sequence[Segment],
    frame_tokens: Sequence[Token],
    right: Sequence[Segment],
    *,
    genre: str,
    kind: CorruptionKind,
    max_len: int | None = None,
) -> list[Token]:
    """Assemble `genre, kind, left context, frame, right context`.

    Context segments are joined with segment separators. If the result
    exceeds `max_len`, outermost context segments are dropped, right side
    first, until it fits.
    """
    left_parts = [list(encode([s]).tokens) for s in left]
    right_parts = [list(encode([s]).tokens) for s in right]
    frame = list(frame_tokens)

    def assemble() -> list[Token]:
        tokens = [Token.genre(genre), Token.corruption_kind(int(kind))]
        parts = left_parts + [frame] + right_parts
        for n, part in enumerate(parts):
            if n > 0:
                tokens.append(SEGMENT_SEP)
            tokens.extend(part)
        return tokens

    tokens = assemble()
    while max_len is not None and len(tokens) > max_len:
        if right_parts:
            right_parts.pop()
        elif left_parts:
            left_parts.pop(0)
        else:
            raise ValueError(
                f"corruption frame of {len(tokens)} tokens exceeds encoder length {max_len}"
            )
        tokens = assemble()
    return tokens


def make_training_example(
    segments: Sequence[Segment],
    i: int,
    L: int,
    R: int,
    kind: CorruptionKind,
    genre: str,
    seed: int,
    *,
    max_enc_len: int | None = None,
) -> TrainingExample:
    """Corrupt segment `i` (1-based) inside its L/R context window.

    Context is truncated at sequence boundaries. For whole-mask
    corruption the right context is additionally dropped entirely half
    the time, which is what later enables continuation and infilling.
    """
    if not 1 <= i <= len(segments):
        raise ValueError(f"segment index {i} outside 1..{len(segments)}")
    target = segments[i - 1]
    left = list(segments[max(0, i - 1 - L) : i - 1])
    right = list(segments[i : i + R])
    if kind == CorruptionKind.WHOLE_MASK:
        if random.Random(derive_seed(seed, "drop-right")).random() < 0.5:
            right = []
    corrupted = corrupt(target, kind, genre, derive_seed(seed, "corrupt"))
    encoder = build_encoder_tokens(
        left, corrupted.tokens, right, genre=genre, kind=kind, max_len=max_enc_len
    )
    return TrainingExample(
        encoder_tokens=tuple(encoder),
        target_tokens=encode([target]).tokens,
        kind=kind,
        segment_index=i,
    )


def _stable_probs(logits: torch.Tensor, temperature: float) -> torch.Tensor:
    scaled = (logits - logits.max()) / temperature
    probs = torch.exp(scaled)
    return probs / probs.sum()


def refine(
    model: RefinerModel,
    encoder_ids: Sequence[int],
    *,
    temperature: float = 1.0,
    seed: int = 0,
    logit_mask: LogitMask | None = None,
    max_new_tokens: int | None = None,
) -> list[Token]:
    """Sample decoder tokens for one corrupted input, stopping at End.

    `logit_mask` is either a fixed boolean vector over the vocabulary or
    a callable `(step, generated_ids) -> vector | None`; True entries are
    set to -inf before the softmax and can never be sampled.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if len(encoder_ids) > model.config.max_enc_len:
        raise ValueError(
            f"encoder input of {len(encoder_ids)} tokens exceeds maximum "
            f"{model.config.max_enc_len}"
        )
    budget = max_new_tokens if max_new_tokens is not None else model.config.max_dec_len - 1
    generator = torch.Generator().manual_seed(seed & (2**63 - 1))
    was_training = model.training
    model.eval()
    out_ids: list[int] = []
    try:
        with torch.no_grad():
            enc = torch.tensor([list(encoder_ids)], dtype=torch.long)
            memory = model.encode(enc)
            cache = KVCache.for_layers(model.n_dec_layers)
            step_input = torch.tensor([[VOCAB.start_id]], dtype=torch.long)
            for step in range(budget):
                logits = model.decode(step_input, memory, cache=cache, offset=step)[0, -1]
                mask = logit_mask(step, out_ids) if callable(logit_mask) else logit_mask
                if mask is not None:
                    mask_t = torch.as_tensor(mask, dtype=torch.bool)
                    if bool(mask_t.all()):
                        raise ValueError("logit mask disallows every token id")
                    logits = logits.masked_fill(mask_t, float("-inf"))
                probs = _stable_probs(logits, temperature)
                next_id = int(torch.multinomial(probs, 1, generator=generator))
                if next_id == VOCAB.end_id:
                    break
                out_ids.append(next_id)
                step_input = torch.tensor([[next_id]], dtype=torch.long)
    finally:
        if was_training:
            model.train()
    return VOCAB.decode_ids(out_ids)


@dataclass
class TrainHyperparams:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0
    out_dir: str | None = None
    context_min: int = 1
    context_max: int = 5
    grad_clip: float = 1.0
    single_thread: bool = False


@dataclass
class TrainResult:
    model: "RefinerModel"
    loss_curve: list[tuple[int, float]]


def _lr_at(step: int, hp: TrainHyperparams) -> float:
    warmup = max(1, int(hp.warmup_ratio * hp.steps))
    if step < warmup:
        return hp.lr * (step + 1) / warmup
    if hp.steps == warmup:
        return hp.lr
    return hp.lr * max(0.0, (hp.steps - step) / (hp.steps - warmup))


def _sample_example(
    corpus: Sequence[tuple[Sequence[Segment], str]],
    rng: random.Random,
    hp: TrainHyperparams,
    config: RefinerConfig,
) -> TrainingExample:
    segments, genre = corpus[rng.randrange(len(corpus))]
    n = len(segments)
    i = rng.randint(1, n - 1) if n > 1 else 1
    L = rng.randint(hp.context_min, hp.context_max)
    R = rng.randint(hp.context_min, hp.context_max)
    kind = CorruptionKind(rng.randint(1, 9))
    return make_training_example(
        segments, i, L, R, kind, genre, rng.getrandbits(63), max_enc_len=config.max_enc_len
    )


def _collate(examples: list[TrainingExample], max_dec_len: int):
    pad = VOCAB.pad_id
    enc_ids = [VOCAB.encode_ids(ex.encoder_tokens) for ex in examples]
    tgt_ids = [VOCAB.encode_ids(ex.target_tokens)[: max_dec_len - 1] for ex in examples]
    enc_len = max(len(e) for e in enc_ids)
    dec_len = max(len(t) for t in tgt_ids) + 1
    batch = len(examples)
    enc = torch.full((batch, enc_len), pad, dtype=torch.long)
    dec_in = torch.full((batch, dec_len), pad, dtype=torch.long)
    labels = torch.full((batch, dec_len), pad, dtype=torch.long)
    for row, (e, t) in enumerate(zip(enc_ids, tgt_ids)):
        enc[row, : len(e)] = torch.tensor(e)
        dec_in[row, 0] = VOCAB.start_id
        dec_in[row, 1 : len(t) + 1] = torch.tensor(t)
        labels[row, : len(t)] = torch.tensor(t)
        labels[row, len(t)] = VOCAB.end_id
    return enc, enc.eq(pad), dec_in, labels


def _rng_state_to_json(rng: random.Random) -> list:
    version, internal, gauss = rng.getstate()
    return [version, list(internal), gauss]


def _rng_state_from_json(state: list) -> tuple:
    return (state[0], tuple(state[1]), state[2])


def train_refiner(
    corpus: Sequence[tuple[Sequence[Segment], str]],
    config: RefinerConfig = DESK_REFINER,
    hp: TrainHyperparams = TrainHyperparams(),
    *,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Cross-entropy training on randomly corrupted segments.

    Deterministic for a fixed seed in single-thread mode; checkpoints
    carry optimizer and RNG state so a resumed run continues the exact
    step sequence.
    """
    corpus = [(list(segs), genre) for segs, genre in corpus if len(segs) > 0]
    if len(corpus) < hp.batch_size:
        raise ValueError(
            f"corpus of {len(corpus)} usable piece(s) is smaller than one batch "
            f"of {hp.batch_size}"
        )
    if hp.single_thread:
        torch.set_num_threads(1)

    start_step = 0
    loss_curve: list[tuple[int, float]] = []
    if resume_from is not None:
        model, extras = _load_for_resume(resume_from)
        config = model.config
    else:
        torch.manual_seed(derive_seed(hp.seed, "init"))
        model = RefinerModel(config)
        extras = None

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=hp.lr, weight_decay=hp.weight_decay
    )
    rng = random.Random(derive_seed(hp.seed, "sampler"))
    torch.manual_seed(derive_seed(hp.seed, "train"))
    if extras is not None:
        optimizer.load_state_dict(extras["optimizer_state"])
        rng.setstate(_rng_state_from_json(extras["sampler_rng"]))
        torch.set_rng_state(torch.tensor(extras["torch_rng"], dtype=torch.uint8))
        start_step = extras["step"]
        loss_curve = [tuple(x) for x in extras["loss_curve"]]

    loss_fn = nn.CrossEntropyLoss(ignore_index=VOCAB.pad_id)
    model.train()
    for step in range(start_step, hp.steps):
        for group in optimizer.param_groups:
            group["lr"] = _lr_at(step, hp)
        examples = [_sample_example(corpus, rng, hp, config) for _ in range(hp.batch_size)]
        enc, enc_pad, dec_in, labels = _collate(examples, config.max_dec_len)
        logits = model(enc, dec_in, enc_pad)
        loss = loss_fn(logits.flatten(0, 1), labels.flatten())
        optimizer.zero_grad()
        loss.backward()
        if hp.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), hp.grad_clip)
        optimizer.step()
        loss_curve.append((step, float(loss.item())))
        done = step + 1
        if hp.out_dir and hp.checkpoint_every and done % hp.checkpoint_every == 0:
            save_refiner(
                Path(hp.out_dir) / f"refiner-{done:06d}.rfck",
                model,
                optimizer=optimizer,
                sampler_rng=rng,
                step=done,
                loss_curve=loss_curve,
            )
    if hp.out_dir:
        Path(hp.out_dir).mkdir(parents=True, exist_ok=True)
        save_refiner(
            Path(hp.out_dir) / "refiner-final.rfck",
            model,
            optimizer=optimizer,
            sampler_rng=rng,
            step=hp.steps,
            loss_curve=loss_curve,
        )
        write_loss_curve(Path(hp.out_dir) / "refiner-loss.csv", loss_curve)
    return TrainResult(model=model, loss_curve=loss_curve)


def save_refiner(
    path: str | Path,
    model: RefinerModel,
    *,
    optimizer: torch.optim.Optimizer | None = None,
    sampler_rng: random.Random | None = None,
    step: int | None = None,
    loss_curve: list[tuple[int, float]] | None = None,
) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    extra: dict = {}
    if optimizer is not None:
        state = optimizer.state_dict()
        for idx, slots in state["state"].items():
            for key, value in slots.items():
                tensors[f"opt.{idx}.{key}"] = torch.as_tensor(value, dtype=torch.float32)
        extra["param_groups"] = state["param_groups"]
    if sampler_rng is not None:
        extra["sampler_rng"] = _rng_state_to_json(sampler_rng)
        extra["torch_rng"] = torch.get_rng_state().tolist()
    if step is not None:
        extra["step"] = step
    if loss_curve is not None:
        extra["loss_curve"] = [[s, l] for s, l in loss_curve]
    save_checkpoint(
        path,
        model_kind="refiner",
        config=asdict(model.config),
        tensors=tensors,
        extra=extra,
    )


def _config_from_dict(data: dict) -> RefinerConfig:
    names = {f.name for f in fields(RefinerConfig)}
    return RefinerConfig(**{k: v for k, v in data.items() if k in names})


def _model_from_checkpoint(ckpt: Checkpoint) -> RefinerModel:
    if ckpt.model_kind != "refiner":
        raise ValueError(f"checkpoint holds a {ckpt.model_kind!r} model, expected refiner")
    model = RefinerModel(_config_from_dict(ckpt.config))
    state = {k[len("model.") :]: v for k, v in ckpt.tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    return model


def load_refiner(path: str | Path) -> RefinerModel:
    return _model_from_checkpoint(load_checkpoint(path))


def _load_for_resume(path: str | Path) -> tuple[RefinerModel, dict]:
    ckpt = load_checkpoint(path)
    model = _model_from_checkpoint(ckpt)
    opt_state: dict[int, dict] = {}
    for name, tensor in ckpt.tensors.items():
        if not name.startswith("opt."):
            continue
        _, idx, key = name.split(".", 2)
        slots = opt_state.setdefault(int(idx), {})
        slots[key] = tensor if tensor.dim() else tensor.clone()
    extras = {
        "optimizer_state": {"state": opt_state, "param_groups": ckpt.extra["param_groups"]},
        "sampler_rng": ckpt.extra["sampler_rng"],
        "torch_rng": ckpt.extra["torch_rng"],
        "step": ckpt.extra["step"],
        "loss_curve": ckpt.extra.get("loss_curve", []),
    }
    return model, extras


def token_accuracy(model: RefinerModel, example: TrainingExample) -> float:
    """Teacher-forced accuracy over the example's target positions."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            enc, enc_pad, dec_in, labels = _collate([example], model.config.max_dec_len)
            logits = model(enc, dec_in, enc_pad)
            pred = logits.argmax(-1)
            keep = labels.ne(VOCAB.pad_id)
            return float((pred[keep] == labels[keep]).float().mean())
    finally:
        if was_training:
            model.train()


def write_loss_curve(path: str | Path, curve: list[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        writer.writerows(curve)
