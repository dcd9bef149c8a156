"""Corpus management: scanning MIDI trees, splits, and synthetic genres.

The synthetic generator ships two deliberately separable presets standing
in for the classical and jazz corpora, so end-to-end behavior (classifier
separability, genre conversion direction) is verifiable at desk scale.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .midi_io import MidiParseError, NoteEvent, Piece, parse_midi
from .tokenizer import GENRES, Segment, segment, truncate_restrikes
from .utils import derive_seed

__all__ = [
    "CorpusEntry",
    "CorpusIndex",
    "SyntheticGenreSpec",
    "CLASSICAL_SPEC",
    "JAZZ_SPEC",
    "MELODY_SPEC",
    "scan",
    "split",
    "generate_synthetic",
    "generate_pieces",
    "load_pieces",
    "tokenize_pieces",
]


@dataclass(frozen=True)
class CorpusEntry:
    path: str
    genre: str
    duration_ms: int
    note_count: int
    checksum: str
    split: str = "train"


@dataclass
class CorpusIndex:
    root: str
    entries: list[CorpusEntry] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)

    def paths(self, split: str | None = None) -> list[str]:
        return [e.path for e in self.entries if split is None or e.split == split]

    def to_json(self) -> str:
        return json.dumps(
            {
                "root": self.root,
                "entries": [asdict(e) for e in self.entries],
                "errors": self.errors,
            },
            indent=2,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "CorpusIndex":
        data = json.loads(Path(path).read_text())
        return cls(
            root=data["root"],
            entries=[CorpusEntry(**e) for e in data["entries"]],
            errors=data.get("errors", []),
        )


def _label_for(relative: str, rules: Sequence[tuple[str, str]]) -> str:
    for pattern, genre in rules:
        if pattern in relative:
            return genre
    for genre in GENRES:
        if genre in relative.lower():
            return genre
    return "unknown"


def scan(root: str | Path, label_rules: Sequence[tuple[str, str]] = ()) -> CorpusIndex:
    """Index every parseable .mid/.midi under `root`, deterministically by path.

    `label_rules` are (substring, genre) pairs matched against the
    relative path, first hit wins; otherwise a genre name appearing in
    the path is used. Unparseable files land in `errors` and do not
    abort the scan.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus root {root} is not a directory")
    index = CorpusIndex(root=str(root))
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in (".mid", ".midi"))
    for path in files:
        relative = str(path.relative_to(root))
        data = path.read_bytes()
        try:
            result = parse_midi(data, source_id=relative)
        except MidiParseError as exc:
            index.errors.append({"path": relative, "error": str(exc)})
            continue
        piece = result.piece
        index.entries.append(
            CorpusEntry(
                path=relative,
                genre=_label_for(relative, label_rules),
                duration_ms=piece.span_ms,
                note_count=len(piece.events),
                checksum=hashlib.sha256(data).hexdigest(),
            )
        )
    return index


def split(index: CorpusIndex, test_count: int, seed: int) -> CorpusIndex:
    """Assign `test_count` random entries to the test split, the rest to train."""
    n = len(index.entries)
    if not 0 <= test_count <= n:
        raise ValueError(f"test_count {test_count} outside 0..{n}")
    rng = random.Random(seed)
    test_rows = set(rng.sample(range(n), test_count))
    entries = [
        CorpusEntry(**{**asdict(e), "split": "test" if row in test_rows else "train"})
        for row, e in enumerate(index.entries)
    ]
    return CorpusIndex(root=index.root, entries=entries, errors=list(index.errors))


def load_pieces(index: CorpusIndex, *, split: str | None = None) -> list[Piece]:
    root = Path(index.root)
    pieces = []
    for entry in index.entries:
        if split is not None and entry.split != split:
            continue
        result = parse_midi(
            (root / entry.path).read_bytes(), genre=entry.genre, source_id=entry.path
        )
        pieces.append(result.piece)
    return pieces


def tokenize_pieces(pieces: Sequence[Piece]) -> list[tuple[list[Segment], str]]:
    """Training-corpus view: (segments, genre) per piece."""
    return [(segment(p), p.genre) for p in pieces]


@dataclass(frozen=True)
class SyntheticGenreSpec:
    """Recipe for one synthetic genre.

    The two shipped presets differ in pitch-class palette, rhythm grid,
    velocity range and chord density, which is what makes them
    classifier-separable.
    """

    name: str
    pitch_classes: tuple[int, ...]
    octave_low: int = 4
    octave_high: int = 6
    grid_ms: int = 250
    offbeat_ms: int = 0
    offbeat_prob: float = 0.0
    rest_prob: float = 0.35
    chord_prob: float = 0.3
    velocity_low: int = 55
    velocity_high: int = 95
    duration_low_ms: int = 200
    duration_high_ms: int = 900

    def __post_init__(self):
        if not self.pitch_classes:
            raise ValueError("palette must contain at least one pitch class")
        if self.octave_low > self.octave_high:
            raise ValueError("octave range inverted")

    @property
    def lattice(self) -> tuple[int, ...]:
        """All pitches in the palette across the octave range, ascending."""
        pitches = [
            12 * octave + pc
            for octave in range(self.octave_low, self.octave_high + 1)
            for pc in self.pitch_classes
        ]
        return tuple(sorted(p for p in pitches if 0 <= p <= 127))


CLASSICAL_SPEC = SyntheticGenreSpec(
    name="classical",
    pitch_classes=(0, 2, 4, 5, 7, 9, 11),
    grid_ms=250,
    offbeat_prob=0.0,
    rest_prob=0.4,
    chord_prob=0.3,
    velocity_low=55,
    velocity_high=90,
    duration_low_ms=250,
    duration_high_ms=1000,
)

JAZZ_SPEC = SyntheticGenreSpec(
    name="jazz",
    pitch_classes=(1, 3, 6, 8, 10),
    grid_ms=250,
    offbeat_ms=120,
    offbeat_prob=0.6,
    rest_prob=0.25,
    chord_prob=0.55,
    velocity_low=40,
    velocity_high=120,
    duration_low_ms=150,
    duration_high_ms=700,
)

MELODY_SPEC = SyntheticGenreSpec(
    name="classical",
    pitch_classes=(0, 2, 4, 5, 7, 9, 11),
    octave_low=5,
    octave_high=6,
    grid_ms=500,
    offbeat_prob=0.0,
    rest_prob=0.3,
    chord_prob=0.0,
    velocity_low=60,
    velocity_high=90,
    duration_low_ms=250,
    duration_high_ms=450,
)


def generate_pieces(
    spec: SyntheticGenreSpec,
    count: int,
    seed: int,
    *,
    duration_s: tuple[int, int] = (60, 120),
) -> list[Piece]:
    """Deterministic random-walk pieces obeying the spec's constraints."""
    pieces = []
    for k in range(count):
        rng = random.Random(derive_seed(seed, spec.name, k))
        length_ms = rng.randint(duration_s[0], duration_s[1]) * 1000
        lattice = spec.lattice
        position = rng.randrange(len(lattice))
        events: dict[tuple[int, int], NoteEvent] = {}
        t = 0
        while t < length_ms:
            slot = t
            if spec.offbeat_prob and rng.random() < spec.offbeat_prob:
                slot = t + spec.offbeat_ms
            if rng.random() >= spec.rest_prob:
                position = max(0, min(len(lattice) - 1, position + rng.randint(-3, 3)))
                duration = rng.randint(spec.duration_low_ms, spec.duration_high_ms)
                velocity = rng.randint(spec.velocity_low, spec.velocity_high)
                chord = {lattice[position]}
                if spec.chord_prob and rng.random() < spec.chord_prob:
                    for step_down in (2, 4):
                        low = position - step_down
                        if low >= 0:
                            chord.add(lattice[low])
                for pitch in sorted(chord):
                    events[(slot, pitch)] = NoteEvent(slot, pitch, velocity, duration)
            t += spec.grid_ms
        ordered = truncate_restrikes(
            sorted(events.values(), key=lambda e: (e.onset_ms, e.pitch))
        )
        pieces.append(
            Piece(
                events=tuple(ordered),
                genre=spec.name,
                source_id=f"synthetic-{spec.name}-{k:04d}",
            )
        )
    return pieces


def generate_synthetic(
    spec_a: SyntheticGenreSpec,
    spec_b: SyntheticGenreSpec,
    pieces_per_genre: int,
    seed: int,
    *,
    duration_s: tuple[int, int] = (60, 120),
) -> list[Piece]:
    """Two-genre corpus, `pieces_per_genre` of each, deterministic per seed."""
    return generate_pieces(
        spec_a, pieces_per_genre, derive_seed(seed, "a"), duration_s=duration_s
    ) + generate_pieces(spec_b, pieces_per_genre, derive_seed(seed, "b"), duration_s=duration_s)
