"""Nine seeded corruption transforms over a single segment.

Each transform degrades one 5000 ms segment and frames the result as
(⟨sep⟩, ⟨G⟩, payload, ⟨sep⟩) so a refiner can be trained to restore the
original. All randomness flows through the seed: equal (segment, kind,
seed) always produces an identical token stream.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from enum import IntEnum

from .tokenizer import (
    ONSET_DURATION_MASK,
    PITCH_VELOCITY_MASK,
    SEP,
    WHOLE_MASK,
    Segment,
    SegmentNote,
    Token,
    TokenKind,
)

__all__ = [
    "CorruptionKind",
    "CorruptedSegment",
    "corrupt",
    "pitch_velocity_mask",
    "onset_duration_mask",
    "whole_mask",
    "permute_pitch",
    "permute_pitch_velocity",
    "fragmentation",
    "incorrect_transposition",
    "note_modification",
    "skyline",
    "payload_notes",
    "group_chords",
]

CHORD_WINDOW_MS = 50
SKYLINE_VELOCITY = 90
INSERT_VELOCITIES = (45, 60, 75, 90, 105)
DEFAULT_GENRE = "classical"


class CorruptionKind(IntEnum):
    PITCH_VELOCITY_MASK = 1
    ONSET_DURATION_MASK = 2
    WHOLE_MASK = 3
    PERMUTE_PITCH = 4
    PERMUTE_PITCH_VELOCITY = 5
    FRAGMENTATION = 6
    INCORRECT_TRANSPOSITION = 7
    NOTE_MODIFICATION = 8
    SKYLINE = 9

    @classmethod
    def from_name(cls, name: str) -> "CorruptionKind":
        try:
            return cls[name.strip().upper().replace("-", "_")]
        except KeyError:
            valid = ", ".join(k.name.lower() for k in cls)
            raise ValueError(f"unknown corruption kind {name!r}; valid kinds: {valid}") from None


@dataclass(frozen=True, slots=True)
class CorruptedSegment:
    """Framed corruption output: (⟨sep⟩, ⟨G⟩, payload, ⟨sep⟩)."""

    tokens: tuple[Token, ...]
    kind: CorruptionKind
    seed: int

    @property
    def payload(self) -> tuple[Token, ...]:
        return self.tokens[2:-1]


def _frame(payload: list[Token], kind: CorruptionKind, genre: str, seed: int) -> CorruptedSegment:
    tokens = (SEP, Token.genre(genre), *payload, SEP)
    return CorruptedSegment(tokens=tokens, kind=kind, seed=seed)


def _note_triples(notes) -> list[Token]:
    tokens: list[Token] = []
    for n in notes:
        tokens.append(Token.onset(n.onset))
        tokens.append(Token.duration(n.duration))
        tokens.append(Token.pitch_velocity(n.pitch, n.velocity))
    return tokens


def payload_notes(payload) -> list[SegmentNote]:
    """Read (Onset, Duration, PitchVelocity) triples back in payload order.

    Used by conservation checks that need slot correspondence; unlike
    `tokenizer.decode` this keeps the emitted order and rejects masks.
    """
    notes = []
    items = list(payload)
    if len(items) % 3:
        raise ValueError("payload length not a multiple of 3")
    for i in range(0, len(items), 3):
        onset, duration, pv = items[i : i + 3]
        if (
            onset.kind != TokenKind.ONSET
            or duration.kind != TokenKind.DURATION
            or pv.kind != TokenKind.PITCH_VELOCITY
        ):
            raise ValueError(f"malformed triple at payload offset {i}")
        notes.append(SegmentNote(onset.value, pv.value, pv.extra, duration.value))
    return notes


def group_chords(notes, window_ms: int = CHORD_WINDOW_MS) -> list[list[SegmentNote]]:
    """Cluster onset-sorted notes into chord groups.

    A note joins the current group while its onset is within `window_ms`
    of the group's first onset; the threshold absorbs the slight onset
    spread of chords in human performance.
    """
    groups: list[list[SegmentNote]] = []
    for note in sorted(notes):
        if groups and note.onset - groups[-1][0].onset < window_ms:
            groups[-1].append(note)
        else:
            groups.append([note])
    return groups


def pitch_velocity_mask(s: Segment, *, genre: str = DEFAULT_GENRE) -> CorruptedSegment:
    """Mask every PitchVelocity token; Onset and Duration stay verbatim."""
    payload: list[Token] = []
    for n in s.notes:
        payload += [Token.onset(n.onset), Token.duration(n.duration), PITCH_VELOCITY_MASK]
    return _frame(payload, CorruptionKind.PITCH_VELOCITY_MASK, genre, 0)


def onset_duration_mask(s: Segment, *, genre: str = DEFAULT_GENRE) -> CorruptedSegment:
    """Mask each Onset/Duration pair; PitchVelocity tokens keep their order."""
    payload: list[Token] = []
    for n in s.notes:
        payload += [ONSET_DURATION_MASK, ONSET_DURATION_MASK, Token.pitch_velocity(n.pitch, n.velocity)]
    return _frame(payload, CorruptionKind.ONSET_DURATION_MASK, genre, 0)


def whole_mask(s: Segment, *, genre: str = DEFAULT_GENRE) -> CorruptedSegment:
    """Replace the entire segment with the single whole-mask token."""
    return _frame([WHOLE_MASK], CorruptionKind.WHOLE_MASK, genre, 0)


def _shuffled(items: list, rng: random.Random) -> list:
    out = list(items)
    rng.shuffle(out)
    return out


def permute_pitch(s: Segment, seed: int, *, genre: str = DEFAULT_GENRE) -> CorruptedSegment:
    """Shuffle pitches among note slots; velocities and timing stay put."""
    rng = random.Random(seed)
    pitches = _shuffled([n.pitch for n in s.notes], rng)
    notes = [replace(n, pitch=p) for n, p in zip(s.notes, pitches)]
    return _frame(_note_triples(notes), CorruptionKind.PERMUTE_PITCH, genre, seed)


def permute_pitch_velocity(s: Segment, seed: int, *, genre: str = DEFAULT_GENRE) -> CorruptedSegment:
    """Shuffle (pitch, velocity) pairs jointly among note slots."""
    rng = random.Random(seed)
    pairs = _shuffled([(n.pitch, n.velocity) for n in s.notes], rng)
    notes = [replace(n, pitch=p, velocity=v) for n, (p, v) in zip(s.notes, pairs)]
    return _frame(_note_triples(notes), CorruptionKind.PERMUTE_PITCH_VELOCITY, genre, seed)


def fragmentation(s: Segment, seed: int, *, genre: str = DEFAULT_GENRE) -> CorruptedSegment:
    """Keep only the opening 20%-50% of the notes, in onset order."""
    rng = random.Random(seed)
    if not s.notes:
        return _frame([], CorruptionKind.FRAGMENTATION, genre, seed)
    ratio = rng.uniform(0.2, 0.5)
    k = max(1, round(ratio * len(s.notes)))
    return _frame(_note_triples(s.notes[:k]), CorruptionKind.FRAGMENTATION, genre, seed)


def incorrect_transposition(s: Segment, seed: int, *, genre: str = DEFAULT_GENRE) -> CorruptedSegment:
    """Shift half the notes by a nonzero offset within +-5 semitones.

    Exactly floor(n/2) notes are chosen; offsets are drawn per note and
    exclude 0 so the corruption is never a no-op, and shifted pitches are
    clamped into [0, 127]. Velocities and timing are untouched.
    """
    rng = random.Random(seed)
    n = len(s.notes)
    chosen = set(rng.sample(range(n), n // 2))
    offsets = (-5, -4, -3, -2, -1, 1, 2, 3, 4, 5)
    notes = []
    for i, note in enumerate(s.notes):
        if i in chosen:
            shifted = min(127, max(0, note.pitch + rng.choice(offsets)))
            notes.append(replace(note, pitch=shifted))
        else:
            notes.append(note)
    return _frame(_note_triples(notes), CorruptionKind.INCORRECT_TRANSPOSITION, genre, seed)


def note_modification(s: Segment, seed: int, *, genre: str = DEFAULT_GENRE) -> CorruptedSegment:
    """Omit some spaced notes into their predecessors, then sprinkle new ones.

    Phase 1 draws one omission probability in [0.10, 0.40] for the segment
    and drops eligible notes (>= 50 ms after the previous kept note) with
    it, adding each dropped note's duration to its predecessor. Phase 2
    draws one insertion probability in [0.10, 0.40] and, after each note
    longer than 500 ms, may insert a neighbor within +-5 semitones at one
    of the velocities 45..105 (step 15). Inserted durations are drawn from
    100-500 ms on the 10 ms grid.
    """
    rng = random.Random(seed)
    if not s.notes:
        return _frame([], CorruptionKind.NOTE_MODIFICATION, genre, seed)

    omit_p = rng.uniform(0.10, 0.40)
    kept: list[SegmentNote] = []
    for note in sorted(s.notes):
        eligible = kept and note.onset - kept[-1].onset >= 50
        if eligible and rng.random() < omit_p:
            prev = kept[-1]
            kept[-1] = replace(prev, duration=min(30_000, prev.duration + note.duration))
        else:
            kept.append(note)

    insert_p = rng.uniform(0.10, 0.40)
    out = list(kept)
    for note in kept:
        if note.duration > 500 and rng.random() < insert_p:
            pitch = min(127, max(0, note.pitch + rng.randint(-5, 5)))
            onset = min(4990, note.onset + note.duration)
            onset = onset // 10 * 10
            out.append(
                SegmentNote(
                    onset=onset,
                    pitch=pitch,
                    velocity=rng.choice(INSERT_VELOCITIES),
                    duration=rng.randrange(100, 501, 10),
                )
            )
    return _frame(_note_triples(sorted(out)), CorruptionKind.NOTE_MODIFICATION, genre, seed)


def skyline(s: Segment, *, genre: str = DEFAULT_GENRE) -> CorruptedSegment:
    """Melody extraction: keep the top pitch of each chord group at velocity 90.

    The kept note takes the group's earliest onset; pitch ties resolve to
    the earliest-onset note. Deterministic.
    """
    notes = []
    for group in group_chords(s.notes):
        top = max(group, key=lambda n: n.pitch)
        notes.append(replace(top, onset=group[0].onset, velocity=SKYLINE_VELOCITY))
    return _frame(_note_triples(sorted(notes)), CorruptionKind.SKYLINE, genre, 0)


_SEEDED = {
    CorruptionKind.PERMUTE_PITCH: permute_pitch,
    CorruptionKind.PERMUTE_PITCH_VELOCITY: permute_pitch_velocity,
    CorruptionKind.FRAGMENTATION: fragmentation,
    CorruptionKind.INCORRECT_TRANSPOSITION: incorrect_transposition,
    CorruptionKind.NOTE_MODIFICATION: note_modification,
}
_UNSEEDED = {
    CorruptionKind.PITCH_VELOCITY_MASK: pitch_velocity_mask,
    CorruptionKind.ONSET_DURATION_MASK: onset_duration_mask,
    CorruptionKind.WHOLE_MASK: whole_mask,
    CorruptionKind.SKYLINE: skyline,
}


def corrupt(s: Segment, kind: CorruptionKind, genre: str, seed: int) -> CorruptedSegment:
    """Apply the corruption function `kind` and frame the result."""
    kind = CorruptionKind(kind)
    if kind in _SEEDED:
        result = _SEEDED[kind](s, seed, genre=genre)
    else:
        result = _UNSEEDED[kind](s, genre=genre)
        result = CorruptedSegment(tokens=result.tokens, kind=kind, seed=seed)
    return result
