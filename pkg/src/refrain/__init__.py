"""Corruption-refinement improvisation engine for expressive solo piano MIDI.

Pipeline: MIDI in/out (`midi_io`), chunked absolute-onset tokenization
(`tokenizer`), nine segment corruptions (`corruption`), a trainable
encoder-decoder refiner and genre classifier (`model`), the iterative
multi-pass generation engine (`engine`), objective evaluation
(`metrics`), and corpus tooling (`corpus`). The `refrain` CLI binds it
all together.
"""

__version__ = "0.1.0"

from .midi_io import MidiParseError, NoteEvent, ParseResult, Piece, parse_midi, write_midi
from .tokenizer import (
    GENRES,
    VOCAB,
    Segment,
    SegmentNote,
    Token,
    TokenKind,
    TokenSequence,
    decode,
    encode,
    segment,
    segments_to_piece,
)
from .corruption import CorruptedSegment, CorruptionKind, corrupt

__all__ = [
    "__version__",
    "MidiParseError",
    "NoteEvent",
    "ParseResult",
    "Piece",
    "parse_midi",
    "write_midi",
    "GENRES",
    "VOCAB",
    "Segment",
    "SegmentNote",
    "Token",
    "TokenKind",
    "TokenSequence",
    "decode",
    "encode",
    "segment",
    "segments_to_piece",
    "CorruptedSegment",
    "CorruptionKind",
    "corrupt",
]
