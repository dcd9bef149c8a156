"""Command-line surface: tokenize, corrupt, train, generate, evaluate.

Every command taking --seed is byte-deterministic in its outputs. Exit
codes: 0 success, 1 internal error, 2 usage or input error.
"""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path

import click

from .corpus import (
    CLASSICAL_SPEC,
    JAZZ_SPEC,
    CorpusIndex,
    generate_synthetic,
    load_pieces,
    scan as scan_corpus,
    split as split_corpus,
    tokenize_pieces,
)
from .corruption import CorruptionKind, corrupt as corrupt_segment
from .engine import (
    ModelRefiner,
    PassSchedule,
    PassSpec,
    continue_prompt,
    harmonize as harmonize_engine,
    improvise as improvise_engine,
    infill as infill_engine,
    select_preserved,
)
from .metrics import compute_report
from .midi_io import MidiParseError, Piece, parse_midi, write_midi
from .model import (
    DESK_CLASSIFIER,
    DESK_REFINER,
    MICRO_REFINER,
    PAPER_REFINER,
    ClassifierHyperparams,
    TrainHyperparams,
    load_classifier,
    load_refiner,
    piece_probability,
    save_classifier,
    train_classifier,
    train_refiner,
    write_loss_curve,
)
from .tokenizer import (
    BINARY_MAGIC,
    Segment,
    Token,
    TokenKind,
    decode,
    encode,
    segment as segment_piece,
    segments_to_piece,
    tokens_from_binary,
    tokens_from_text,
    tokens_to_binary,
    tokens_to_text,
)

MODEL_DIR_ENV = "REFRAIN_MODEL_DIR"
REFINER_PRESETS = {"desk": DESK_REFINER, "paper": PAPER_REFINER, "micro": MICRO_REFINER}


def _read_piece(path: str, genre: str = "unknown") -> Piece:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise click.UsageError(str(exc)) from exc
    try:
        result = parse_midi(data, genre=genre, source_id=Path(path).name)
    except MidiParseError as exc:
        raise click.UsageError(f"{path}: {exc}") from exc
    for warning in result.warnings:
        click.echo(f"warning: {path}: {warning}", err=True)
    return result.piece


def _write_piece(path: str, piece: Piece) -> None:
    Path(path).write_bytes(write_midi(piece))


def _resolve_checkpoint(path: str) -> Path:
    candidate = Path(path)
    if candidate.exists():
        return candidate
    model_dir = os.environ.get(MODEL_DIR_ENV)
    if model_dir:
        fallback = Path(model_dir) / path
        if fallback.exists():
            return fallback
    raise click.UsageError(
        f"checkpoint {path} not found"
        + (f" (also looked in ${MODEL_DIR_ENV}={model_dir})" if model_dir else "")
    )


def _load_refiner(path: str) -> ModelRefiner:
    try:
        return ModelRefiner(load_refiner(_resolve_checkpoint(path)))
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc


@click.group()
def main() -> None:
    """Corruption-refinement improvisation toolkit for solo piano MIDI."""


@main.command()
@click.argument("in_midi", type=click.Path())
@click.argument("out_tokens", type=click.Path())
@click.option("--binary", is_flag=True, help="Write the packed integer-id format.")
def tokenize(in_midi: str, out_tokens: str, binary: bool) -> None:
    """Tokenize IN_MIDI into OUT_TOKENS (text format by default)."""
    piece = _read_piece(in_midi)
    tokens = encode(segment_piece(piece)).tokens
    if binary:
        Path(out_tokens).write_bytes(tokens_to_binary(tokens))
    else:
        Path(out_tokens).write_text(tokens_to_text(tokens))
    click.echo(f"wrote {len(tokens)} tokens to {out_tokens}")


@main.command()
@click.argument("in_tokens", type=click.Path())
@click.argument("out_midi", type=click.Path())
def detokenize(in_tokens: str, out_midi: str) -> None:
    """Rebuild a MIDI file from a token stream (text or binary)."""
    try:
        blob = Path(in_tokens).read_bytes()
    except OSError as exc:
        raise click.UsageError(str(exc)) from exc
    try:
        if blob[:4] == BINARY_MAGIC:
            tokens = tokens_from_binary(blob)
        else:
            tokens = tokens_from_text(blob.decode())
        result = decode(tokens)
    except ValueError as exc:
        raise click.UsageError(f"{in_tokens}: {exc}") from exc
    if result.repairs:
        click.echo(f"warning: repaired {result.repairs} incomplete triple(s)", err=True)
    _write_piece(out_midi, segments_to_piece(list(result.segments)))
    click.echo(f"wrote {out_midi}")


def _concrete_notes(payload) -> list:
    """Fully specified (Onset, Duration, PitchVelocity) triples only."""
    from .tokenizer import SegmentNote

    notes = []
    buffer: list[Token] = []
    for tok in payload:
        if tok.kind == TokenKind.ONSET and not buffer:
            buffer = [tok]
        elif tok.kind == TokenKind.DURATION and len(buffer) == 1:
            buffer.append(tok)
        elif tok.kind == TokenKind.PITCH_VELOCITY and len(buffer) == 2:
            notes.append(SegmentNote(buffer[0].value, tok.value, tok.extra, buffer[1].value))
            buffer = []
        else:
            buffer = []
    return sorted(notes)


@main.command("corrupt")
@click.argument("in_midi", type=click.Path())
@click.argument("out_midi", type=click.Path())
@click.option("--kind", required=True, help="Corruption function name, e.g. skyline.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--genre", default="classical", show_default=True)
def corrupt_cmd(in_midi: str, out_midi: str, kind: str, seed: int, genre: str) -> None:
    """Apply one corruption function to every segment of IN_MIDI.

    Mask corruptions erase note fields, so their output drops the masked
    notes entirely (whole-mask yields an empty piece).
    """
    try:
        corruption_kind = CorruptionKind.from_name(kind)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    piece = _read_piece(in_midi, genre=genre)
    segments = segment_piece(piece)
    out_segments = []
    for seg in segments:
        corrupted = corrupt_segment(seg, corruption_kind, genre, seed)
        out_segments.append(Segment(index=seg.index, notes=tuple(_concrete_notes(corrupted.payload))))
    _write_piece(out_midi, segments_to_piece(out_segments, genre=genre))
    click.echo(f"wrote {out_midi}")


@main.command("scan")
@click.argument("root", type=click.Path())
@click.argument("out_index", type=click.Path())
@click.option(
    "--label",
    "labels",
    multiple=True,
    help="substring=genre rule for labeling, first match wins.",
)
def scan_cmd(root: str, out_index: str, labels: tuple[str, ...]) -> None:
    """Index the MIDI files under ROOT into OUT_INDEX (JSON)."""
    rules = []
    for rule in labels:
        if "=" not in rule:
            raise click.UsageError(f"label rule {rule!r} is not of the form substring=genre")
        pattern, genre = rule.split("=", 1)
        rules.append((pattern, genre))
    try:
        index = scan_corpus(root, rules)
    except FileNotFoundError as exc:
        raise click.UsageError(str(exc)) from exc
    index.save(out_index)
    click.echo(f"indexed {len(index.entries)} file(s), {len(index.errors)} error(s)")


@main.command("split")
@click.argument("index_path", type=click.Path())
@click.option("--test-count", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None, help="Defaults to rewriting INDEX_PATH.")
def split_cmd(index_path: str, test_count: int, seed: int, out: str | None) -> None:
    """Assign a deterministic train/test split inside a corpus index."""
    try:
        index = CorpusIndex.load(index_path)
        result = split_corpus(index, test_count, seed)
    except (OSError, ValueError, KeyError) as exc:
        raise click.UsageError(str(exc)) from exc
    result.save(out or index_path)
    click.echo(f"{len(result.paths('train'))} train / {len(result.paths('test'))} test")


@main.command("synth")
@click.argument("out_dir", type=click.Path())
@click.option("--pieces-per-genre", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--duration-min", type=int, default=60, show_default=True)
@click.option("--duration-max", type=int, default=120, show_default=True)
def synth_cmd(
    out_dir: str, pieces_per_genre: int, seed: int, duration_min: int, duration_max: int
) -> None:
    """Generate the synthetic two-genre corpus into OUT_DIR, with an index."""
    out = Path(out_dir)
    pieces = generate_synthetic(
        CLASSICAL_SPEC,
        JAZZ_SPEC,
        pieces_per_genre,
        seed,
        duration_s=(duration_min, duration_max),
    )
    for piece in pieces:
        path = out / piece.genre / f"{piece.source_id}.mid"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(write_midi(piece))
    index = scan_corpus(out)
    index.save(out / "index.json")
    click.echo(f"wrote {len(pieces)} pieces and {out / 'index.json'}")


def _load_training_corpus(index_path: str, split: str | None):
    try:
        index = CorpusIndex.load(index_path)
        pieces = load_pieces(index, split=split)
    except (OSError, ValueError, KeyError, MidiParseError) as exc:
        raise click.UsageError(f"{index_path}: {exc}") from exc
    if not pieces:
        raise click.UsageError(f"{index_path}: no pieces in split {split!r}")
    return tokenize_pieces(pieces)


@main.command("train")
@click.argument("index_path", type=click.Path())
@click.option("--preset", type=click.Choice(sorted(REFINER_PRESETS)), default="desk", show_default=True)
@click.option("--steps", type=int, default=1000, show_default=True)
@click.option("--batch-size", type=int, default=8, show_default=True)
@click.option("--lr", type=float, default=3e-4, show_default=True)
@click.option("--warmup-ratio", type=float, default=0.1, show_default=True)
@click.option("--weight-decay", type=float, default=0.01, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--checkpoint-every", type=int, default=0, show_default=True)
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--resume", type=click.Path(), default=None, help="Checkpoint to resume from.")
@click.option("--split", default=None, help="Restrict to one split (train/test).")
@click.option("--single-thread", is_flag=True, help="Bitwise-deterministic mode.")
@click.option("--context-max", type=int, default=5, show_default=True)
def train_cmd(
    index_path: str,
    preset: str,
    steps: int,
    batch_size: int,
    lr: float,
    warmup_ratio: float,
    weight_decay: float,
    seed: int,
    checkpoint_every: int,
    out_dir: str,
    resume: str | None,
    split: str | None,
    single_thread: bool,
    context_max: int,
) -> None:
    """Train the segment refiner on an indexed corpus."""
    corpus = _load_training_corpus(index_path, split)
    hp = TrainHyperparams(
        steps=steps,
        batch_size=batch_size,
        lr=lr,
        warmup_ratio=warmup_ratio,
        weight_decay=weight_decay,
        seed=seed,
        checkpoint_every=checkpoint_every,
        out_dir=out_dir,
        context_max=context_max,
        single_thread=single_thread,
    )
    try:
        result = train_refiner(corpus, REFINER_PRESETS[preset], hp, resume_from=resume)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    final = result.loss_curve[-1][1] if result.loss_curve else float("nan")
    click.echo(f"trained {steps} step(s); final loss {final:.4f}; checkpoints in {out_dir}")


@main.command("train-classifier")
@click.argument("index_path", type=click.Path())
@click.option("--steps", type=int, default=400, show_default=True)
@click.option("--batch-size", type=int, default=16, show_default=True)
@click.option("--lr", type=float, default=1e-4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--split", default=None)
@click.option("--single-thread", is_flag=True)
def train_classifier_cmd(
    index_path: str,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    out: str,
    split: str | None,
    single_thread: bool,
) -> None:
    """Train the binary genre classifier on an indexed corpus."""
    corpus = _load_training_corpus(index_path, split)
    hp = ClassifierHyperparams(
        steps=steps, batch_size=batch_size, lr=lr, seed=seed, single_thread=single_thread
    )
    try:
        result = train_classifier(corpus, DESK_CLASSIFIER, hp)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    save_classifier(out, result.model)
    write_loss_curve(Path(out).with_suffix(".loss.csv"), result.loss_curve)
    click.echo(f"train accuracy {result.train_accuracy:.3f}; saved {out}")


def _schedule_from_options(
    schedule_path: str | None,
    kind: str | None,
    alpha: float | None,
    passes: int | None,
    left: int | None,
    right: int | None,
    target_genre: str | None,
    temperature: float | None,
    seed: int | None,
) -> PassSchedule:
    """Schedule file plus flag overrides; flags alone build a uniform schedule."""
    overrides = {
        key: value
        for key, value in {
            "kind": kind,
            "alpha": alpha,
            "left": left,
            "right": right,
            "target_genre": target_genre,
            "temperature": temperature,
        }.items()
        if value is not None
    }
    try:
        if schedule_path is not None:
            schedule = PassSchedule.from_json_file(schedule_path)
            specs = []
            for q, spec in enumerate(schedule.passes):
                data = spec.to_dict()
                data.update(overrides)
                if seed is not None:
                    from .utils import derive_seed

                    data["seed"] = derive_seed(seed, "pass", q)
                specs.append(PassSpec(**data))
            return PassSchedule(passes=tuple(specs))
        return PassSchedule.uniform(
            passes or 1,
            seed=seed or 0,
            kind=overrides.get("kind", "random"),
            alpha=overrides.get("alpha", 1.0),
            left=overrides.get("left", 2),
            right=overrides.get("right", 1),
            target_genre=overrides.get("target_genre", "classical"),
            temperature=overrides.get("temperature", 1.0),
        )
    except (OSError, ValueError, KeyError) as exc:
        raise click.UsageError(f"bad schedule: {exc}") from exc


@main.command("improvise")
@click.argument("in_midi", type=click.Path())
@click.argument("out_midi", type=click.Path())
@click.option("--checkpoint", required=True, help="Refiner checkpoint path.")
@click.option("--schedule", "schedule_path", type=click.Path(), default=None)
@click.option("--kind", default=None, help="Corruption kind or 'random'.")
@click.option("--alpha", type=float, default=None)
@click.option("--passes", type=int, default=None)
@click.option("--left", type=int, default=None)
@click.option("--right", type=int, default=None)
@click.option("--target-genre", default=None)
@click.option("--temperature", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--preservation-ratio", type=float, default=0.05, show_default=True)
@click.option("--provenance", type=click.Path(), default=None)
def improvise_cmd(
    in_midi: str,
    out_midi: str,
    checkpoint: str,
    schedule_path: str | None,
    kind: str | None,
    alpha: float | None,
    passes: int | None,
    left: int | None,
    right: int | None,
    target_genre: str | None,
    temperature: float | None,
    seed: int | None,
    preservation_ratio: float,
    provenance: str | None,
) -> None:
    """Multi-pass corruption-refinement over IN_MIDI."""
    refiner = _load_refiner(checkpoint)
    piece = _read_piece(in_midi)
    segments = segment_piece(piece)
    if not segments:
        raise click.UsageError(f"{in_midi}: piece has no notes")
    schedule = _schedule_from_options(
        schedule_path, kind, alpha, passes, left, right, target_genre, temperature, seed
    )
    mask = select_preserved(segments, preservation_ratio)
    state = improvise_engine(segments, refiner, schedule, mask)
    _write_piece(out_midi, state.piece(genre=schedule.passes[0].target_genre))
    if provenance:
        state.write_provenance(provenance)
    click.echo(f"wrote {out_midi} after {state.pass_index} pass(es)")


@main.command("continue")
@click.argument("in_midi", type=click.Path())
@click.argument("out_midi", type=click.Path())
@click.option("--checkpoint", required=True)
@click.option("--segments", "n_segments", type=int, default=2, show_default=True)
@click.option("--genre", default="classical", show_default=True)
@click.option("--temperature", type=float, default=1.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--provenance", type=click.Path(), default=None)
def continue_cmd(
    in_midi: str,
    out_midi: str,
    checkpoint: str,
    n_segments: int,
    genre: str,
    temperature: float,
    seed: int,
    provenance: str | None,
) -> None:
    """Continue a short prompt by N whole-mask-generated segments."""
    refiner = _load_refiner(checkpoint)
    piece = _read_piece(in_midi, genre=genre)
    segments = segment_piece(piece)
    if not segments:
        raise click.UsageError(f"{in_midi}: piece has no notes")
    state = continue_prompt(
        segments, refiner, n_segments, genre=genre, temperature=temperature, seed=seed
    )
    _write_piece(out_midi, state.piece(genre=genre))
    if provenance:
        state.write_provenance(provenance)
    click.echo(f"wrote {out_midi} ({len(state.segments)} segments)")


@main.command("infill")
@click.argument("in_midi", type=click.Path())
@click.argument("out_midi", type=click.Path())
@click.option("--checkpoint", required=True)
@click.option("--gap-start", type=int, required=True, help="1-based first segment of the gap.")
@click.option("--gap-segments", type=int, required=True, help="Number of segments to regenerate.")
@click.option("--genre", default="classical", show_default=True)
@click.option("--temperature", type=float, default=1.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--provenance", type=click.Path(), default=None)
def infill_cmd(
    in_midi: str,
    out_midi: str,
    checkpoint: str,
    gap_start: int,
    gap_segments: int,
    genre: str,
    temperature: float,
    seed: int,
    provenance: str | None,
) -> None:
    """Regenerate a gap of segments inside IN_MIDI."""
    refiner = _load_refiner(checkpoint)
    piece = _read_piece(in_midi, genre=genre)
    segments = segment_piece(piece)
    left = segments[: gap_start - 1]
    right = segments[gap_start - 1 + gap_segments :]
    if gap_segments < 1:
        raise click.UsageError("--gap-segments must be at least 1")
    if not left or not right:
        raise click.UsageError(
            f"gap {gap_start}..{gap_start + gap_segments - 1} leaves an empty context "
            f"side (piece has {len(segments)} segments)"
        )
    state = infill_engine(
        left, right, refiner, gap_segments, genre=genre, temperature=temperature, seed=seed
    )
    _write_piece(out_midi, state.piece(genre=genre))
    if provenance:
        state.write_provenance(provenance)
    click.echo(f"wrote {out_midi}")


@main.command("harmonize")
@click.argument("in_midi", type=click.Path())
@click.argument("out_midi", type=click.Path())
@click.option("--checkpoint", required=True)
@click.option("--target-genre", default="jazz", show_default=True)
@click.option("--chord-budget", type=int, default=3, show_default=True)
@click.option("--extra-passes", type=int, default=1, show_default=True)
@click.option("--temperature", type=float, default=1.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--unconstrained", is_flag=True, help="Skip the chord onset logit constraint.")
@click.option("--provenance", type=click.Path(), default=None)
def harmonize_cmd(
    in_midi: str,
    out_midi: str,
    checkpoint: str,
    target_genre: str,
    chord_budget: int,
    extra_passes: int,
    temperature: float,
    seed: int,
    unconstrained: bool,
    provenance: str | None,
) -> None:
    """Harmonize a monophonic melody in the target genre."""
    refiner = _load_refiner(checkpoint)
    piece = _read_piece(in_midi)
    segments = segment_piece(piece)
    if not segments:
        raise click.UsageError(f"{in_midi}: piece has no notes")
    try:
        state = harmonize_engine(
            segments,
            refiner,
            target_genre,
            chord_onset_budget=chord_budget,
            extra_passes=extra_passes,
            temperature=temperature,
            seed=seed,
            constrained=not unconstrained,
        )
    except ValueError as exc:
        raise click.UsageError(f"{in_midi}: {exc}") from exc
    _write_piece(out_midi, state.piece(genre=target_genre))
    if provenance:
        state.write_provenance(provenance)
    click.echo(f"wrote {out_midi}")


@main.command("evaluate")
@click.argument("original", type=click.Path())
@click.argument("generated", type=click.Path())
@click.option("--metrics", "metric_names", default="all", show_default=True,
              help="Comma-separated metric names, or 'all'.")
@click.option("--out", type=click.Path(), default=None, help="Report destination (stdout default).")
@click.option("--classifier", "classifier_path", default=None,
              help="Genre classifier checkpoint for genre_probability.")
@click.option("--reference-magnitudes", is_flag=True,
              help="Embed full-scale reference magnitudes in the report.")
def evaluate_cmd(
    original: str,
    generated: str,
    metric_names: str,
    out: str | None,
    classifier_path: str | None,
    reference_magnitudes: bool,
) -> None:
    """Metric report for GENERATED against ORIGINAL.

    With two directories, pairs files by name and emits one CSV row per
    pair.
    """
    wanted = "all" if metric_names == "all" else tuple(m.strip() for m in metric_names.split(","))
    scorer = None
    if classifier_path:
        try:
            scorer = piece_probability(load_classifier(_resolve_checkpoint(classifier_path)))
        except ValueError as exc:
            raise click.UsageError(str(exc)) from exc

    if Path(original).is_dir() and Path(generated).is_dir():
        _evaluate_batch(Path(original), Path(generated), wanted, out, scorer)
        return
    ref = _read_piece(original)
    cand = _read_piece(generated)
    try:
        report = compute_report(cand, ref, metrics=wanted, genre_classifier=scorer)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    text = report.to_json(include_reference=reference_magnitudes)
    if out:
        Path(out).write_text(text + "\n")
        click.echo(f"wrote {out}")
    else:
        click.echo(text)


def _evaluate_batch(original_dir: Path, generated_dir: Path, wanted, out, scorer) -> None:
    names = sorted(
        p.name
        for p in original_dir.iterdir()
        if p.suffix.lower() in (".mid", ".midi") and (generated_dir / p.name).exists()
    )
    if not names:
        raise click.UsageError("no filename-matched MIDI pairs between the two directories")
    from .metrics import ALL_METRICS

    columns = list(ALL_METRICS if wanted == "all" else wanted)
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(["pair"] + columns)
    for name in names:
        ref = _read_piece(str(original_dir / name))
        cand = _read_piece(str(generated_dir / name))
        report = compute_report(cand, ref, metrics=wanted, genre_classifier=scorer)
        row = report.to_dict()
        writer.writerow([name] + [row.get(c, "") for c in columns])
    text = buffer.getvalue()
    if out:
        Path(out).write_text(text)
        click.echo(f"wrote {out} ({len(names)} pairs)")
    else:
        click.echo(text, nl=False)


if __name__ == "__main__":
    main()
