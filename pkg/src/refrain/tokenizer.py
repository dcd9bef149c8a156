"""Chunked absolute-onset token encoding for expressive piano streams.

Pieces are cut into 5000 ms segments separated by a segment-separator
token; within a segment each note becomes an (Onset, Duration,
PitchVelocity) triple with onsets relative to the segment start. Onsets
and durations are quantized to 10 ms, velocities to steps of 15 (0-120).
Bars, keys and time signatures are not encoded.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, replace
from enum import Enum

from .midi_io import NoteEvent, Piece

__all__ = [
    "SEGMENT_MS",
    "GENRES",
    "TokenKind",
    "Token",
    "TokenSequence",
    "SegmentNote",
    "Segment",
    "DecodeResult",
    "DecodeError",
    "Vocabulary",
    "VOCAB",
    "segment",
    "segments_to_piece",
    "truncate_restrikes",
    "encode",
    "decode",
    "quantize_time",
    "quantize_velocity",
    "tokens_to_text",
    "tokens_from_text",
    "tokens_to_binary",
    "tokens_from_binary",
]

log = logging.getLogger(__name__)

SEGMENT_MS = 5000
TIME_STEP_MS = 10
VELOCITY_STEP = 15
MAX_ONSET_MS = 4990
MIN_DURATION_MS = 10
MAX_DURATION_MS = 30_000

GENRES = ("classical", "jazz")
N_CORRUPTION_KINDS = 9

VOCAB_VERSION = "refrain-onset500-dur3000-pv1152-v1"
BINARY_MAGIC = b"RFTK"


class TokenKind(Enum):
    PAD = "PAD"
    START = "START"
    END = "END"
    SEGMENT_SEP = "SEGMENT_SEP"
    SEP = "SEP"
    WHOLE_MASK = "WHOLE_MASK"
    PITCH_VELOCITY_MASK = "PITCH_VELOCITY_MASK"
    ONSET_DURATION_MASK = "ONSET_DURATION_MASK"
    GENRE = "GENRE"
    CORRUPTION_KIND = "CORRUPTION_KIND"
    ONSET = "ONSET"
    DURATION = "DURATION"
    PITCH_VELOCITY = "PITCH_VELOCITY"


@dataclass(frozen=True, slots=True)
class Token:
    """One vocabulary symbol; `value`/`extra` depend on the kind."""

    kind: TokenKind
    value: int = 0
    extra: int = 0

    @staticmethod
    def onset(ms: int) -> "Token":
        if ms % TIME_STEP_MS or not 0 <= ms <= MAX_ONSET_MS:
            raise ValueError(f"onset {ms} not on the token grid")
        return Token(TokenKind.ONSET, ms)

    @staticmethod
    def duration(ms: int) -> "Token":
        if ms % TIME_STEP_MS or not MIN_DURATION_MS <= ms <= MAX_DURATION_MS:
            raise ValueError(f"duration {ms} not on the token grid")
        return Token(TokenKind.DURATION, ms)

    @staticmethod
    def pitch_velocity(pitch: int, velocity: int) -> "Token":
        if not 0 <= pitch <= 127:
            raise ValueError(f"pitch {pitch} outside [0, 127]")
        if velocity % VELOCITY_STEP or not 0 <= velocity <= 120:
            raise ValueError(f"velocity {velocity} not a multiple of 15 in [0, 120]")
        return Token(TokenKind.PITCH_VELOCITY, pitch, velocity)

    @staticmethod
    def genre(name: str) -> "Token":
        return Token(TokenKind.GENRE, genre_index(name))

    @staticmethod
    def corruption_kind(kind_id: int) -> "Token":
        if not 1 <= kind_id <= N_CORRUPTION_KINDS:
            raise ValueError(f"corruption kind id {kind_id} outside 1..{N_CORRUPTION_KINDS}")
        return Token(TokenKind.CORRUPTION_KIND, kind_id)


PAD = Token(TokenKind.PAD)
START = Token(TokenKind.START)
END = Token(TokenKind.END)
SEGMENT_SEP = Token(TokenKind.SEGMENT_SEP)
SEP = Token(TokenKind.SEP)
WHOLE_MASK = Token(TokenKind.WHOLE_MASK)
PITCH_VELOCITY_MASK = Token(TokenKind.PITCH_VELOCITY_MASK)
ONSET_DURATION_MASK = Token(TokenKind.ONSET_DURATION_MASK)


def genre_index(name: str) -> int:
    try:
        return GENRES.index(name)
    except ValueError:
        raise ValueError(f"unknown genre {name!r}; valid genres: {', '.join(GENRES)}") from None


def genre_name(index: int) -> str:
    return GENRES[index]


@dataclass(frozen=True, slots=True)
class TokenSequence:
    tokens: tuple[Token, ...]
    vocab_version: str = VOCAB_VERSION

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)


@dataclass(frozen=True, slots=True, order=True)
class SegmentNote:
    """A quantized note, onset relative to its segment start."""

    onset: int
    pitch: int
    velocity: int
    duration: int


@dataclass(frozen=True, slots=True)
class Segment:
    """All notes of one 5000 ms window; index is 1-based."""

    index: int
    notes: tuple[SegmentNote, ...]

    def __post_init__(self):
        if self.index < 1:
            raise ValueError(f"segment index {self.index} < 1")
        keys = [(n.onset, n.pitch) for n in self.notes]
        if keys != sorted(keys):
            raise ValueError("segment notes not sorted by (onset, pitch)")


def quantize_time(ms: int) -> int:
    """Round to the nearest 10 ms, ties rounding up."""
    return (ms + TIME_STEP_MS // 2) // TIME_STEP_MS * TIME_STEP_MS


def quantize_velocity(v: int) -> int:
    """Round to the nearest multiple of 15, capped at 120."""
    return min(120, (2 * v + VELOCITY_STEP) // (2 * VELOCITY_STEP) * VELOCITY_STEP)


def _quantize_duration(ms: int) -> int:
    q = quantize_time(ms)
    if q > MAX_DURATION_MS:
        log.warning("duration %d ms exceeds %d ms cap, clamping", ms, MAX_DURATION_MS)
        return MAX_DURATION_MS
    return max(MIN_DURATION_MS, q)


def truncate_restrikes(events: list[NoteEvent]) -> list[NoteEvent]:
    """End each note no later than the next strike of the same pitch.

    A piano key cannot sound twice at once, and SMF note pairing cannot
    represent nested same-pitch overlaps; truncating at the re-strike
    makes every event list losslessly writable.
    """
    by_pitch: dict[int, list[NoteEvent]] = {}
    for e in events:
        by_pitch.setdefault(e.pitch, []).append(e)
    out: list[NoteEvent] = []
    for pitch_events in by_pitch.values():
        pitch_events.sort(key=lambda e: e.onset_ms)
        for e, nxt in zip(pitch_events, pitch_events[1:]):
            capped = min(e.duration_ms, nxt.onset_ms - e.onset_ms)
            out.append(replace(e, duration_ms=capped) if capped != e.duration_ms else e)
        out.append(pitch_events[-1])
    out.sort(key=lambda e: (e.onset_ms, e.pitch))
    return out


def segment(piece: Piece) -> list[Segment]:
    """Split a piece into quantized 5000 ms segments.

    Notes are assigned to segments by raw onset; the relative onset is
    quantized afterwards and clamped to the top of the onset grid when a
    note rounds onto the next segment boundary. Notes that collide on
    (onset, pitch) after quantization are merged, keeping the longest
    duration and the highest velocity, and same-pitch notes are truncated
    at their re-strike so the canonical form stays MIDI-representable.
    """
    if not piece.events:
        return []
    merged: dict[tuple[int, int], NoteEvent] = {}
    for e in piece.events:
        base = e.onset_ms // SEGMENT_MS * SEGMENT_MS
        onset = base + min(MAX_ONSET_MS, quantize_time(e.onset_ms % SEGMENT_MS))
        velocity = quantize_velocity(e.velocity)
        duration = _quantize_duration(e.duration_ms)
        prev = merged.get((onset, e.pitch))
        if prev is not None:
            velocity = max(prev.velocity, velocity)
            duration = max(prev.duration_ms, duration)
        merged[(onset, e.pitch)] = NoteEvent(onset, e.pitch, velocity, duration)
    events = truncate_restrikes(sorted(merged.values(), key=lambda e: (e.onset_ms, e.pitch)))
    n_segments = max(e.onset_ms // SEGMENT_MS for e in events) + 1
    buckets: list[list[SegmentNote]] = [[] for _ in range(n_segments)]
    for e in events:
        buckets[e.onset_ms // SEGMENT_MS].append(
            SegmentNote(
                onset=e.onset_ms % SEGMENT_MS,
                pitch=e.pitch,
                velocity=e.velocity,
                duration=e.duration_ms,
            )
        )
    return [
        Segment(index=i + 1, notes=tuple(sorted(bucket)))
        for i, bucket in enumerate(buckets)
    ]


def segments_to_piece(
    segments: list[Segment], *, genre: str = "unknown", source_id: str = ""
) -> Piece:
    """Reassemble segments into a piece with absolute onsets.

    Notes colliding on (onset, pitch), which model output may contain,
    are merged with the same longest-duration/highest-velocity rule as
    `segment`, and same-pitch overlaps are truncated at the re-strike.
    """
    merged: dict[tuple[int, int], NoteEvent] = {}
    for seg in segments:
        base = (seg.index - 1) * SEGMENT_MS
        for n in seg.notes:
            key = (base + n.onset, n.pitch)
            prev = merged.get(key)
            if prev is None:
                merged[key] = NoteEvent(key[0], n.pitch, n.velocity, n.duration)
            else:
                merged[key] = NoteEvent(
                    key[0],
                    n.pitch,
                    max(prev.velocity, n.velocity),
                    max(prev.duration_ms, n.duration),
                )
    events = truncate_restrikes(sorted(merged.values(), key=lambda e: (e.onset_ms, e.pitch)))
    return Piece(events=tuple(events), genre=genre, source_id=source_id)


def encode(segments: list[Segment]) -> TokenSequence:
    """Emit (Onset, Duration, PitchVelocity) triples, segments joined by ⟨T⟩."""
    tokens: list[Token] = []
    for i, seg in enumerate(segments):
        if i > 0:
            tokens.append(SEGMENT_SEP)
        for n in seg.notes:
            tokens.append(Token.onset(n.onset))
            tokens.append(Token.duration(n.duration))
            tokens.append(Token.pitch_velocity(n.pitch, n.velocity))
    return TokenSequence(tokens=tuple(tokens))


class DecodeError(ValueError):
    """Structurally unrecoverable token stream. Carries the token index."""

    def __init__(self, message: str, index: int):
        super().__init__(f"{message} (token index {index})")
        self.index = index


@dataclass(frozen=True, slots=True)
class DecodeResult:
    segments: tuple[Segment, ...]
    repairs: int


def decode(tokens: TokenSequence | list[Token]) -> DecodeResult:
    """Rebuild segments from a content-token stream.

    Incomplete triples at segment boundaries or at the end of the stream
    are dropped and counted as repairs; any other malformation (for
    instance a Duration with no preceding Onset) raises DecodeError.
    Leading Start and Pad tokens are skipped and an End token terminates
    the stream, so refined decoder output can be fed in directly.
    """
    items = list(tokens.tokens if isinstance(tokens, TokenSequence) else tokens)
    notes: list[list[SegmentNote]] = [[]]
    pending: list[Token] = []
    repairs = 0

    def flush_pending() -> None:
        nonlocal repairs
        if pending:
            pending.clear()
            repairs += 1

    ended = False
    for idx, tok in enumerate(items):
        if tok.kind in (TokenKind.PAD, TokenKind.START):
            continue
        if tok.kind == TokenKind.END:
            ended = True
            break
        if tok.kind == TokenKind.SEGMENT_SEP:
            flush_pending()
            notes.append([])
        elif tok.kind == TokenKind.ONSET:
            if pending:
                raise DecodeError("Onset token inside an unfinished triple", idx)
            pending.append(tok)
        elif tok.kind == TokenKind.DURATION:
            if len(pending) != 1:
                raise DecodeError("Duration token without a preceding Onset", idx)
            pending.append(tok)
        elif tok.kind == TokenKind.PITCH_VELOCITY:
            if len(pending) != 2:
                raise DecodeError("PitchVelocity token without Onset and Duration", idx)
            onset, duration = pending
            notes[-1].append(
                SegmentNote(
                    onset=onset.value,
                    pitch=tok.value,
                    velocity=tok.extra,
                    duration=duration.value,
                )
            )
            pending.clear()
        else:
            raise DecodeError(f"unexpected {tok.kind.value} token in content stream", idx)
    flush_pending()

    if len(notes) == 1 and not notes[0] and not ended and not items:
        return DecodeResult(segments=(), repairs=0)
    segments = tuple(
        Segment(index=i + 1, notes=tuple(sorted(bucket))) for i, bucket in enumerate(notes)
    )
    return DecodeResult(segments=segments, repairs=repairs)


class Vocabulary:
    """Stable token-to-integer-id mapping.

    Layout (fixed across runs): specials, genre tokens, corruption-kind
    tokens, 500 onset bins, 3000 duration bins, 128x9 pitch-velocity bins.
    """

    def __init__(self) -> None:
        tokens: list[Token] = [
            PAD,
            START,
            END,
            SEGMENT_SEP,
            SEP,
            WHOLE_MASK,
            PITCH_VELOCITY_MASK,
            ONSET_DURATION_MASK,
        ]
        tokens += [Token(TokenKind.GENRE, g) for g in range(len(GENRES))]
        tokens += [Token(TokenKind.CORRUPTION_KIND, j) for j in range(1, N_CORRUPTION_KINDS + 1)]
        self.onset_id_start = len(tokens)
        tokens += [Token(TokenKind.ONSET, ms) for ms in range(0, MAX_ONSET_MS + 1, TIME_STEP_MS)]
        self.duration_id_start = len(tokens)
        tokens += [
            Token(TokenKind.DURATION, ms)
            for ms in range(MIN_DURATION_MS, MAX_DURATION_MS + 1, TIME_STEP_MS)
        ]
        self.pv_id_start = len(tokens)
        tokens += [
            Token(TokenKind.PITCH_VELOCITY, p, v)
            for p in range(128)
            for v in range(0, 121, VELOCITY_STEP)
        ]
        self.id_to_token: tuple[Token, ...] = tuple(tokens)
        self.token_to_id: dict[Token, int] = {t: i for i, t in enumerate(tokens)}
        self.size = len(tokens)
        self.n_onsets = (MAX_ONSET_MS // TIME_STEP_MS) + 1
        self.n_durations = (MAX_DURATION_MS - MIN_DURATION_MS) // TIME_STEP_MS + 1
        self.version = VOCAB_VERSION
        self.version_hash = struct.unpack(
            "<I", hashlib.sha256(VOCAB_VERSION.encode()).digest()[:4]
        )[0]

    def id_of(self, token: Token) -> int:
        return self.token_to_id[token]

    def token_of(self, token_id: int) -> Token:
        return self.id_to_token[token_id]

    def encode_ids(self, tokens) -> list[int]:
        return [self.token_to_id[t] for t in tokens]

    def decode_ids(self, ids) -> list[Token]:
        return [self.id_to_token[i] for i in ids]

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def start_id(self) -> int:
        return self.token_to_id[START]

    @property
    def end_id(self) -> int:
        return self.token_to_id[END]

    def onset_id(self, ms: int) -> int:
        return self.token_to_id[Token.onset(ms)]

    def is_onset_id(self, token_id: int) -> bool:
        return self.onset_id_start <= token_id < self.duration_id_start

    def is_duration_id(self, token_id: int) -> bool:
        return self.duration_id_start <= token_id < self.pv_id_start

    def is_pv_id(self, token_id: int) -> bool:
        return self.pv_id_start <= token_id < self.size

    def onset_ids_in_window(self, lo_ms: int, hi_ms: int) -> list[int]:
        """Ids of Onset tokens with value in [lo_ms, hi_ms], clipped to the grid."""
        lo = max(0, -(-lo_ms // TIME_STEP_MS) * TIME_STEP_MS)
        hi = min(MAX_ONSET_MS, hi_ms // TIME_STEP_MS * TIME_STEP_MS)
        return [self.onset_id(ms) for ms in range(lo, hi + 1, TIME_STEP_MS)]


VOCAB = Vocabulary()


def _token_to_text(token: Token) -> str:
    kind = token.kind
    if kind == TokenKind.GENRE:
        return f"GENRE {genre_name(token.value)}"
    if kind == TokenKind.CORRUPTION_KIND:
        return f"CORRUPTION_KIND {token.value}"
    if kind == TokenKind.ONSET:
        return f"ONSET {token.value}"
    if kind == TokenKind.DURATION:
        return f"DURATION {token.value}"
    if kind == TokenKind.PITCH_VELOCITY:
        return f"PITCH_VELOCITY {token.value} {token.extra}"
    return kind.value


def tokens_to_text(tokens) -> str:
    """Line-delimited `KIND value [value]` serialization."""
    return "".join(_token_to_text(t) + "\n" for t in tokens)


def tokens_from_text(text: str) -> list[Token]:
    tokens: list[Token] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        name, args = parts[0], parts[1:]
        try:
            kind = TokenKind(name)
        except ValueError:
            raise ValueError(f"line {lineno}: unknown token kind {name!r}") from None
        try:
            if kind == TokenKind.GENRE:
                tokens.append(Token.genre(args[0]))
            elif kind == TokenKind.CORRUPTION_KIND:
                tokens.append(Token.corruption_kind(int(args[0])))
            elif kind == TokenKind.ONSET:
                tokens.append(Token.onset(int(args[0])))
            elif kind == TokenKind.DURATION:
                tokens.append(Token.duration(int(args[0])))
            elif kind == TokenKind.PITCH_VELOCITY:
                tokens.append(Token.pitch_velocity(int(args[0]), int(args[1])))
            else:
                tokens.append(Token(kind))
        except (IndexError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return tokens


def tokens_to_binary(tokens, vocab: Vocabulary = VOCAB) -> bytes:
    """Packed id stream: 16-byte header (magic, vocab hash, count), u16 ids."""
    ids = vocab.encode_ids(tokens)
    header = BINARY_MAGIC + struct.pack("<IQ", vocab.version_hash, len(ids))
    return header + struct.pack(f"<{len(ids)}H", *ids)


def tokens_from_binary(data: bytes, vocab: Vocabulary = VOCAB) -> list[Token]:
    if len(data) < 16 or data[:4] != BINARY_MAGIC:
        raise ValueError("not a token stream: bad magic")
    version_hash, count = struct.unpack("<IQ", data[4:16])
    if version_hash != vocab.version_hash:
        raise ValueError(
            f"vocab mismatch: stream hash {version_hash:#x}, expected {vocab.version_hash:#x}"
        )
    expected = 16 + 2 * count
    if len(data) != expected:
        raise ValueError(f"token stream length {len(data)} != expected {expected}")
    ids = struct.unpack(f"<{count}H", data[16:])
    return vocab.decode_ids(ids)
