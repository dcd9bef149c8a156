"""Standard MIDI File parsing and writing for solo piano note streams.

Reads SMF type 0/1 files into a flat, millisecond-timed note-event list
(piano-program tracks only, sustain pedal folded into note durations) and
writes such lists back out on a fixed 500-ticks-per-quarter, 120 BPM grid
so that one tick equals one millisecond and round trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

__all__ = [
    "NoteEvent",
    "Piece",
    "ParseResult",
    "MidiParseError",
    "parse_midi",
    "write_midi",
]

# GM programs 0-7 form the piano class (acoustic/electric pianos, harpsichord,
# clavinet); tracks outside this class and the drum channel are dropped.
PIANO_PROGRAMS = frozenset(range(8))
DRUM_CHANNEL = 9

# Output grid: 500 ticks/quarter at 120 BPM (500000 us/quarter) => 1 tick = 1 ms.
TICKS_PER_QUARTER = 500
TEMPO_US_PER_QUARTER = 500_000


class MidiParseError(ValueError):
    """Malformed SMF data. Carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True, slots=True, order=True)
class NoteEvent:
    """One piano note with absolute millisecond timing."""

    onset_ms: int
    pitch: int
    velocity: int
    duration_ms: int

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch {self.pitch} outside [0, 127]")
        if not 0 <= self.velocity <= 127:
            raise ValueError(f"velocity {self.velocity} outside [0, 127]")
        if self.onset_ms < 0:
            raise ValueError(f"onset_ms {self.onset_ms} negative")
        if self.duration_ms < 1:
            raise ValueError(f"duration_ms {self.duration_ms} < 1")


@dataclass(frozen=True, slots=True)
class Piece:
    """An ordered solo-piano note stream with a genre label."""

    events: tuple[NoteEvent, ...]
    genre: str = "unknown"
    source_id: str = ""

    def __post_init__(self):
        keys = [(e.onset_ms, e.pitch) for e in self.events]
        if keys != sorted(keys):
            raise ValueError("events not sorted by (onset_ms, pitch)")
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (onset_ms, pitch) events")

    @property
    def span_ms(self) -> int:
        if not self.events:
            return 0
        return max(e.onset_ms + e.duration_ms for e in self.events)


@dataclass(frozen=True, slots=True)
class ParseResult:
    """Parsed piece plus non-fatal parser warnings (e.g. unclosed notes)."""

    piece: Piece
    warnings: tuple[str, ...] = ()

    @property
    def warning_count(self) -> int:
        return len(self.warnings)


class _Reader:
    """Cursor over SMF bytes that reports offsets on underrun."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MidiParseError(
                f"unexpected end of data (wanted {n} bytes)", self.pos
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.read(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.read(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.read(4))[0]

    def varlen(self) -> int:
        value = 0
        for _ in range(4):
            byte = self.u8()
            value = (value << 7) | (byte & 0x7F)
            if not byte & 0x80:
                return value
        raise MidiParseError("variable-length quantity longer than 4 bytes", self.pos)


@dataclass(slots=True)
class _RawEvent:
    tick: int
    status: int  # upper-nibble status (0x80/0x90/0xB0/0xC0), or 0xFF for meta
    channel: int
    data1: int
    data2: int
    track: int
    seq: int


def _parse_track(reader: _Reader, track_index: int, events: list[_RawEvent]) -> None:
    start = reader.pos
    magic = reader.read(4)
    if magic != b"MTrk":
        raise MidiParseError(f"expected MTrk chunk, got {magic!r}", start)
    length = reader.u32()
    end = reader.pos + length
    if end > len(reader.data):
        raise MidiParseError("track chunk length exceeds file size", reader.pos - 4)

    tick = 0
    running_status = 0
    while reader.pos < end:
        tick += reader.varlen()
        status = reader.u8()
        if status < 0x80:
            if running_status == 0:
                raise MidiParseError("data byte with no running status", reader.pos - 1)
            reader.pos -= 1
            status = running_status

        kind = status & 0xF0
        channel = status & 0x0F
        if kind in (0x80, 0x90, 0xA0, 0xB0, 0xE0):
            running_status = status
            d1 = reader.u8()
            d2 = reader.u8()
            events.append(_RawEvent(tick, kind, channel, d1, d2, track_index, len(events)))
        elif kind in (0xC0, 0xD0):
            running_status = status
            d1 = reader.u8()
            events.append(_RawEvent(tick, kind, channel, d1, 0, track_index, len(events)))
        elif status == 0xFF:
            running_status = 0
            meta_type = reader.u8()
            meta_len = reader.varlen()
            payload = reader.read(meta_len)
            if meta_type == 0x51 and meta_len == 3:
                tempo = int.from_bytes(payload, "big")
                events.append(_RawEvent(tick, 0xFF, 0, 0x51, tempo, track_index, len(events)))
            if meta_type == 0x2F:
                break
        elif status in (0xF0, 0xF7):
            running_status = 0
            sysex_len = reader.varlen()
            reader.read(sysex_len)
        else:
            raise MidiParseError(f"unexpected status byte 0x{status:02x}", reader.pos - 1)
    reader.pos = end


class _TempoMap:
    """Piecewise tick-to-millisecond conversion from set_tempo events."""

    def __init__(self, tempo_events: list[tuple[int, int]], division: int):
        self.division = division
        changes = sorted(tempo_events)
        self.ticks: list[int] = [0]
        self.ms: list[float] = [0.0]
        self.us_per_tick: list[float] = [TEMPO_US_PER_QUARTER / division]
        for tick, tempo in changes:
            if tick <= self.ticks[-1]:
                self.us_per_tick[-1] = tempo / division
                continue
            elapsed = (tick - self.ticks[-1]) * self.us_per_tick[-1] / 1000.0
            self.ticks.append(tick)
            self.ms.append(self.ms[-1] + elapsed)
            self.us_per_tick.append(tempo / division)

    def to_ms(self, tick: int) -> int:
        i = len(self.ticks) - 1
        while self.ticks[i] > tick:
            i -= 1
        exact = self.ms[i] + (tick - self.ticks[i]) * self.us_per_tick[i] / 1000.0
        return int(exact + 0.5)


@dataclass(slots=True)
class _OpenNote:
    onset_ms: int
    velocity: int


def parse_midi(data: bytes, *, genre: str = "unknown", source_id: str = "") -> ParseResult:
    """Parse SMF bytes into a sorted solo-piano note stream.

    Keeps notes on piano-program channels only (drum channel excluded);
    sustain pedal (CC64 >= 64) extends sounding notes until pedal release.
    Note-ons left open at end of file are closed there with a warning.
    """
    reader = _Reader(data)
    magic = reader.read(4)
    if magic != b"MThd":
        raise MidiParseError(f"expected MThd header, got {magic!r}", 0)
    header_len = reader.u32()
    if header_len < 6:
        raise MidiParseError(f"header chunk length {header_len} < 6", 4)
    fmt = reader.u16()
    ntrks = reader.u16()
    division = reader.u16()
    reader.read(header_len - 6)
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division not supported", 12)
    if division == 0:
        raise MidiParseError("zero ticks-per-quarter division", 12)

    raw: list[_RawEvent] = []
    for t in range(ntrks):
        if reader.pos >= len(reader.data):
            raise MidiParseError(f"missing track chunk {t + 1} of {ntrks}", reader.pos)
        # Skip alien chunks, as the SMF spec allows.
        while reader.data[reader.pos : reader.pos + 4] not in (b"MTrk",):
            chunk_start = reader.pos
            reader.read(4)
            skip = reader.u32()
            if reader.pos + skip > len(reader.data):
                raise MidiParseError("unrecognized chunk overruns file", chunk_start)
            reader.read(skip)
        _parse_track(reader, t, raw)

    tempo_events = [(e.tick, e.data2) for e in raw if e.status == 0xFF and e.data1 == 0x51]
    tempo_map = _TempoMap(tempo_events, division)

    # Note-off before note-on at the same tick, else stream order.
    def order(e: _RawEvent) -> tuple:
        is_off = e.status == 0x80 or (e.status == 0x90 and e.data2 == 0)
        return (e.tick, 0 if e.status == 0xB0 else 1, 0 if is_off else 1, e.track, e.seq)

    program = {ch: 0 for ch in range(16)}
    pedal_down = {ch: False for ch in range(16)}
    open_notes: dict[tuple[int, int], list[_OpenNote]] = {}
    # Notes whose note-off arrived while the pedal was down; they end at
    # pedal release or are truncated by a re-strike of the same pitch.
    sustained: dict[tuple[int, int], list[_OpenNote]] = {}
    finished: list[NoteEvent] = []
    warnings: list[str] = []
    last_ms = 0

    def close(note: _OpenNote, pitch: int, end_ms: int) -> None:
        duration = max(1, end_ms - note.onset_ms)
        finished.append(NoteEvent(note.onset_ms, pitch, note.velocity, duration))

    for e in sorted(raw, key=order):
        now = tempo_map.to_ms(e.tick)
        last_ms = max(last_ms, now)
        if e.status == 0xFF:
            continue
        ch = e.channel
        if e.status == 0xC0:
            program[ch] = e.data1
            continue
        if e.status == 0xB0 and e.data1 == 64:
            down = e.data2 >= 64
            if pedal_down[ch] and not down:
                for (sch, pitch), notes in list(sustained.items()):
                    if sch != ch:
                        continue
                    for note in notes:
                        close(note, pitch, now)
                    del sustained[(sch, pitch)]
            pedal_down[ch] = down
            continue
        if ch == DRUM_CHANNEL or program[ch] not in PIANO_PROGRAMS:
            continue

        is_on = e.status == 0x90 and e.data2 > 0
        is_off = e.status == 0x80 or (e.status == 0x90 and e.data2 == 0)
        key = (ch, e.data1)
        if is_on:
            for note in sustained.pop(key, []):
                close(note, e.data1, now)
            open_notes.setdefault(key, []).append(_OpenNote(now, e.data2))
        elif is_off:
            queue = open_notes.get(key)
            if not queue:
                continue
            note = queue.pop(0)
            if pedal_down[ch]:
                sustained.setdefault(key, []).append(note)
            else:
                close(note, e.data1, now)

    for (ch, pitch), notes in open_notes.items():
        for note in notes:
            warnings.append(f"note-on pitch {pitch} at {note.onset_ms} ms never released")
            close(note, pitch, max(last_ms, note.onset_ms + 1))
    for (ch, pitch), notes in sustained.items():
        for note in notes:
            close(note, pitch, max(last_ms, note.onset_ms + 1))

    finished.sort(key=lambda n: (n.onset_ms, n.pitch))
    deduped: list[NoteEvent] = []
    for note in finished:
        if deduped and (deduped[-1].onset_ms, deduped[-1].pitch) == (note.onset_ms, note.pitch):
            prev = deduped[-1]
            deduped[-1] = replace(
                prev,
                duration_ms=max(prev.duration_ms, note.duration_ms),
                velocity=max(prev.velocity, note.velocity),
            )
        else:
            deduped.append(note)

    piece = Piece(events=tuple(deduped), genre=genre, source_id=source_id)
    return ParseResult(piece=piece, warnings=tuple(warnings))


def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def write_midi(piece: Piece) -> bytes:
    """Serialize a piece as SMF type 0 on the fixed 1-tick-per-ms grid.

    Velocity-0 events are written with velocity 1: a note-on with velocity 0
    is a note-off by MIDI convention, so velocity 0 has no on-the-wire form.
    Same-pitch overlaps are written off-before-on at shared ticks and pair
    back up first-in-first-out, matching the parser.
    """
    # (tick, off-before-on, pitch, is_on, velocity)
    messages: list[tuple[int, int, int, bool, int]] = []
    for e in piece.events:
        messages.append((e.onset_ms, 1, e.pitch, True, max(1, e.velocity)))
        messages.append((e.onset_ms + e.duration_ms, 0, e.pitch, False, 64))
    messages.sort(key=lambda m: (m[0], m[1], m[2]))

    track = bytearray()
    track += _varlen(0) + bytes([0xFF, 0x51, 0x03]) + TEMPO_US_PER_QUARTER.to_bytes(3, "big")
    track += _varlen(0) + bytes([0xC0, 0x00])
    tick = 0
    for when, _, pitch, is_on, velocity in messages:
        track += _varlen(when - tick)
        status = 0x90 if is_on else 0x80
        track += bytes([status, pitch, velocity])
        tick = when
    track += _varlen(0) + bytes([0xFF, 0x2F, 0x00])

    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, TICKS_PER_QUARTER)
    return header + b"MTrk" + struct.pack(">I", len(track)) + bytes(track)
