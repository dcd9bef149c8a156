"""Iterative corruption-refinement generation.

A pass sweeps the piece left to right; each corruptible segment is,
with probability alpha, corrupted and regenerated by the refiner
conditioned on the target genre and the corruption kind. Structurally
novel segments and the endpoints are preserved. Short continuation,
short infilling and constrained melody harmonization reuse the same
machinery with whole-mask and skyline corruptions.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .corruption import CHORD_WINDOW_MS, CorruptionKind, corrupt, skyline, whole_mask
from .model.refiner import RefinerModel, build_encoder_tokens, refine
from .tokenizer import (
    GENRES,
    VOCAB,
    Segment,
    SegmentNote,
    Token,
    decode,
    genre_index,
    segments_to_piece,
)
from .utils import derive_seed

__all__ = [
    "PassSpec",
    "PassSchedule",
    "PreservationMask",
    "ProvenanceRecord",
    "PassState",
    "SegmentRefiner",
    "ModelRefiner",
    "RefineRequest",
    "select_preserved",
    "novelty_curve",
    "improvise",
    "continue_prompt",
    "infill",
    "harmonize",
    "renumber",
]

RANDOM_KIND = "random"
NOVELTY_KERNEL_HALF_WIDTH = 4
HARMONIZE_WINDOW_MS = 50
CONTINUATION_MAX_SEGMENTS = 4


@dataclass(frozen=True)
class PassSpec:
    """One corruption-refinement sweep.

    `kind` is a CorruptionKind or the string "random" for a fresh uniform
    draw per segment. `alpha` is the per-segment corruption probability,
    `left`/`right` the context sizes in segments (1-5), and
    `draw_per_pass` switches to a single alpha draw deciding the whole
    pass instead of one draw per segment.
    """

    kind: CorruptionKind | str = RANDOM_KIND
    alpha: float = 1.0
    left: int = 2
    right: int = 1
    target_genre: str = GENRES[0]
    temperature: float = 1.0
    seed: int = 0
    draw_per_pass: bool = False

    def __post_init__(self):
        if isinstance(self.kind, str) and self.kind != RANDOM_KIND:
            object.__setattr__(self, "kind", CorruptionKind.from_name(self.kind))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")
        if not 1 <= self.left <= 5 or not 1 <= self.right <= 5:
            raise ValueError(f"context sizes ({self.left}, {self.right}) outside 1..5")
        if self.temperature <= 0:
            raise ValueError(f"temperature {self.temperature} must be positive")
        genre_index(self.target_genre)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["kind"] = self.kind if isinstance(self.kind, str) else self.kind.name.lower()
        return data


@dataclass(frozen=True)
class PassSchedule:
    """Ordered pass list; serializes to {"passes": [PassSpec dict, ...]}."""

    passes: tuple[PassSpec, ...]

    def __post_init__(self):
        if not self.passes:
            raise ValueError("schedule must contain at least one pass")

    def __len__(self) -> int:
        return len(self.passes)

    @classmethod
    def single(cls, **kwargs) -> "PassSchedule":
        return cls(passes=(PassSpec(**kwargs),))

    @classmethod
    def uniform(cls, n_passes: int, *, seed: int = 0, **kwargs) -> "PassSchedule":
        """`n_passes` identical passes with per-pass derived seeds."""
        return cls(
            passes=tuple(
                PassSpec(seed=derive_seed(seed, "pass", q), **kwargs)
                for q in range(n_passes)
            )
        )

    def to_dict(self) -> dict:
        return {"passes": [p.to_dict() for p in self.passes]}

    @classmethod
    def from_dict(cls, data: dict) -> "PassSchedule":
        return cls(passes=tuple(PassSpec(**p) for p in data["passes"]))

    @classmethod
    def from_json_file(cls, path: str | Path) -> "PassSchedule":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class PreservationMask:
    """keep[i] = True exempts segment i+1 from corruption."""

    keep: tuple[bool, ...]

    def __post_init__(self):
        if self.keep and not (self.keep[0] and self.keep[-1]):
            raise ValueError("first and last segments must be preserved")

    @classmethod
    def endpoints(cls, n: int) -> "PreservationMask":
        if n <= 0:
            raise ValueError("need at least one segment")
        keep = [False] * n
        keep[0] = keep[-1] = True
        return cls(keep=tuple(keep))

    @property
    def corruptible_count(self) -> int:
        return sum(1 for k in self.keep if not k)


def _segment_chroma(seg: Segment) -> np.ndarray:
    chroma = np.zeros(12)
    for n in seg.notes:
        chroma[n.pitch % 12] += n.duration
    return chroma


def _cosine_matrix(features: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(features, axis=1)
    safe = np.where(norms == 0, 1.0, norms)
    unit = features / safe[:, None]
    ssm = unit @ unit.T
    zero = norms == 0
    if zero.any():
        ssm[zero, :] = 0.0
        ssm[:, zero] = 0.0
        ssm[np.ix_(zero, zero)] = 1.0
    return ssm


def _checkerboard_kernel(half_width: int) -> np.ndarray:
    axis = np.arange(-half_width, half_width + 1)
    taper = np.sqrt(0.5) / (half_width * 0.5)
    gaussian = np.exp(-(taper**2) * axis**2)
    kernel = np.outer(np.sign(axis), np.sign(axis)) * np.outer(gaussian, gaussian)
    return kernel / np.abs(kernel).sum()


def novelty_curve(segments: Sequence[Segment], half_width: int = NOVELTY_KERNEL_HALF_WIDTH) -> np.ndarray:
    """Checkerboard-kernel novelty over the chroma self-similarity matrix."""
    features = np.stack([_segment_chroma(s) for s in segments])
    ssm = _cosine_matrix(features)
    kernel = _checkerboard_kernel(half_width)
    size = 2 * half_width + 1
    padded = np.pad(ssm, half_width, mode="constant")
    n = len(segments)
    curve = np.empty(n)
    for k in range(n):
        curve[k] = np.sum(padded[k : k + size, k : k + size] * kernel)
    return curve


def select_preserved(segments: Sequence[Segment], preservation_ratio: float) -> PreservationMask:
    """Preserve the endpoints plus the ceil(ratio*N) most novel interior segments.

    Novelty peaks mark section starts, so preserving them keeps the
    original form recognizable while everything else is free to change.
    """
    n = len(segments)
    if n == 0:
        raise ValueError("need at least one segment")
    if not 0.0 <= preservation_ratio <= 1.0:
        raise ValueError(f"preservation ratio {preservation_ratio} outside [0, 1]")
    keep = [False] * n
    keep[0] = keep[-1] = True
    quota = min(int(np.ceil(preservation_ratio * n)), max(0, n - 2))
    if quota:
        curve = novelty_curve(segments)
        interior = sorted(range(1, n - 1), key=lambda k: (-curve[k], k))
        for k in interior[:quota]:
            keep[k] = True
    return PreservationMask(keep=tuple(keep))


@dataclass(frozen=True)
class ProvenanceRecord:
    pass_index: int
    segment_index: int
    preserved: bool
    corrupted: bool
    kind: str | None = None
    seed: int | None = None
    repairs: int = 0
    constrained: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class PassState:
    """Current segments plus one provenance record per (pass, segment)."""

    segments: tuple[Segment, ...]
    pass_index: int
    log: list[ProvenanceRecord] = field(default_factory=list)

    def write_provenance(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for record in self.log:
                fh.write(record.to_json() + "\n")

    def piece(self, *, genre: str = "unknown", source_id: str = ""):
        return segments_to_piece(list(self.segments), genre=genre, source_id=source_id)


@dataclass(frozen=True)
class RefineRequest:
    """Everything a refiner needs to regenerate one segment."""

    encoder_tokens: tuple[Token, ...]
    kind: CorruptionKind
    genre: str
    temperature: float
    seed: int
    segment_index: int
    logit_mask: object | None = None


class SegmentRefiner(Protocol):
    def refine_segment(self, request: RefineRequest) -> list[Token]: ...

    @property
    def max_encoder_len(self) -> int: ...


class ModelRefiner:
    """Adapter running RefineRequests through a trained refiner model."""

    def __init__(self, model: RefinerModel):
        self.model = model

    @property
    def max_encoder_len(self) -> int:
        return self.model.config.max_enc_len

    def refine_segment(self, request: RefineRequest) -> list[Token]:
        return refine(
            self.model,
            VOCAB.encode_ids(request.encoder_tokens),
            temperature=request.temperature,
            seed=request.seed,
            logit_mask=request.logit_mask,
        )


def _decoded_segment(tokens: list[Token], index: int) -> tuple[Segment, int]:
    """Decode refiner output into one segment at `index`, merging any extras."""
    result = decode(tokens)
    notes: list[SegmentNote] = []
    for seg in result.segments:
        notes.extend(seg.notes)
    merged: dict[tuple[int, int], SegmentNote] = {}
    for note in sorted(notes):
        key = (note.onset, note.pitch)
        prev = merged.get(key)
        if prev is None or (note.duration, note.velocity) > (prev.duration, prev.velocity):
            merged[key] = note
    return Segment(index=index, notes=tuple(sorted(merged.values()))), result.repairs


def _refine_one(
    refiner: SegmentRefiner,
    state: list[Segment],
    i: int,
    kind: CorruptionKind,
    spec: PassSpec,
    corrupt_seed: int,
    sample_seed: int,
    logit_mask=None,
    frame_tokens: Sequence[Token] | None = None,
    include_right: bool = True,
) -> tuple[Segment, int]:
    target = state[i - 1]
    if frame_tokens is None:
        frame_tokens = corrupt(target, kind, spec.target_genre, corrupt_seed).tokens
    left = state[max(0, i - 1 - spec.left) : i - 1]
    right = state[i : i + spec.right] if include_right else []
    encoder = build_encoder_tokens(
        left,
        frame_tokens,
        right,
        genre=spec.target_genre,
        kind=kind,
        max_len=refiner.max_encoder_len,
    )
    request = RefineRequest(
        encoder_tokens=tuple(encoder),
        kind=kind,
        genre=spec.target_genre,
        temperature=spec.temperature,
        seed=sample_seed,
        segment_index=i,
        logit_mask=logit_mask,
    )
    out = refiner.refine_segment(request)
    return _decoded_segment(out, i)


def improvise(
    segments: Sequence[Segment],
    refiner: SegmentRefiner,
    schedule: PassSchedule,
    mask: PreservationMask | None = None,
) -> PassState:
    """Run the pass schedule over the piece.

    Within a pass, refinement sees already-refined left neighbors and
    not-yet-refined right neighbors. Preserved segments are carried
    through untouched; every (pass, segment) decision is logged.
    """
    state = [Segment(index=k + 1, notes=s.notes) for k, s in enumerate(segments)]
    n = len(state)
    if n == 0:
        raise ValueError("cannot improvise an empty sequence")
    if mask is None:
        mask = PreservationMask.endpoints(n)
    if len(mask.keep) != n:
        raise ValueError(f"mask length {len(mask.keep)} != segment count {n}")

    log: list[ProvenanceRecord] = []
    for q, spec in enumerate(schedule.passes, start=1):
        pass_draw = random.Random(derive_seed(spec.seed, "pass-draw")).random()
        for i in range(1, n + 1):
            if mask.keep[i - 1]:
                log.append(ProvenanceRecord(q, i, preserved=True, corrupted=False))
                continue
            rng = random.Random(derive_seed(spec.seed, "segment", i))
            u = pass_draw if spec.draw_per_pass else rng.random()
            if u >= spec.alpha:
                log.append(ProvenanceRecord(q, i, preserved=False, corrupted=False))
                continue
            kind = (
                CorruptionKind(1 + rng.randrange(9))
                if spec.kind == RANDOM_KIND
                else CorruptionKind(spec.kind)
            )
            corrupt_seed = derive_seed(spec.seed, "corrupt", i)
            sample_seed = derive_seed(spec.seed, "sample", i)
            refined, repairs = _refine_one(
                refiner, state, i, kind, spec, corrupt_seed, sample_seed
            )
            state[i - 1] = refined
            log.append(
                ProvenanceRecord(
                    q,
                    i,
                    preserved=False,
                    corrupted=True,
                    kind=kind.name.lower(),
                    seed=sample_seed,
                    repairs=repairs,
                )
            )
    return PassState(segments=tuple(state), pass_index=len(schedule.passes), log=log)


def renumber(segments: Sequence[Segment]) -> list[Segment]:
    return [Segment(index=k + 1, notes=s.notes) for k, s in enumerate(segments)]


def continue_prompt(
    prompt: Sequence[Segment],
    refiner: SegmentRefiner,
    n_segments: int,
    *,
    genre: str = GENRES[0],
    temperature: float = 1.0,
    seed: int = 0,
    left_context: int = 4,
) -> PassState:
    """Append segments one at a time with whole-mask frames, left context only.

    Coherence degrades beyond 4 generated segments (20 seconds), so
    larger requests proceed with a logged warning rather than failing.
    """
    if n_segments < 0:
        raise ValueError("n_segments must be non-negative")
    if n_segments > CONTINUATION_MAX_SEGMENTS:
        logging.getLogger(__name__).warning(
            "continuation of %d segments exceeds the supported maximum of %d; "
            "coherence is not guaranteed",
            n_segments,
            CONTINUATION_MAX_SEGMENTS,
        )
    if not prompt:
        raise ValueError("prompt must contain at least one segment")
    state = renumber(prompt)
    log: list[ProvenanceRecord] = []
    spec = PassSpec(
        kind=CorruptionKind.WHOLE_MASK,
        alpha=1.0,
        left=min(5, max(1, left_context)),
        right=1,
        target_genre=genre,
        temperature=temperature,
        seed=seed,
    )
    for step in range(n_segments):
        i = len(state) + 1
        state.append(Segment(index=i, notes=()))
        frame = whole_mask(Segment(index=i, notes=()), genre=genre).tokens
        refined, repairs = _refine_one(
            refiner,
            state,
            i,
            CorruptionKind.WHOLE_MASK,
            spec,
            corrupt_seed=derive_seed(seed, "corrupt", i),
            sample_seed=derive_seed(seed, "sample", i),
            frame_tokens=frame,
            include_right=False,
        )
        state[i - 1] = refined
        log.append(
            ProvenanceRecord(
                1,
                i,
                preserved=False,
                corrupted=True,
                kind=CorruptionKind.WHOLE_MASK.name.lower(),
                seed=derive_seed(seed, "sample", i),
                repairs=repairs,
            )
        )
    return PassState(segments=tuple(state), pass_index=1, log=log)


def infill(
    left: Sequence[Segment],
    right: Sequence[Segment],
    refiner: SegmentRefiner,
    n_segments: int,
    *,
    genre: str = GENRES[0],
    temperature: float = 1.0,
    seed: int = 0,
    left_context: int = 4,
    right_context: int = 2,
) -> PassState:
    """Fill a gap of `n_segments` between two contexts.

    The first n-1 gap segments continue the left context alone; the final
    one sees both sides so the junction into the right context is smooth.
    """
    if not left or not right:
        raise ValueError("both left and right contexts must be non-empty")
    if n_segments < 1:
        raise ValueError("n_segments must be at least 1")
    continued = continue_prompt(
        left,
        refiner,
        n_segments - 1,
        genre=genre,
        temperature=temperature,
        seed=seed,
        left_context=left_context,
    )
    state = renumber(list(continued.segments) + [Segment(index=1, notes=())] + list(right))
    log = list(continued.log)
    i = len(left) + n_segments
    spec = PassSpec(
        kind=CorruptionKind.WHOLE_MASK,
        alpha=1.0,
        left=min(5, max(1, left_context)),
        right=min(5, max(1, right_context)),
        target_genre=genre,
        temperature=temperature,
        seed=seed,
    )
    frame = whole_mask(Segment(index=i, notes=()), genre=genre).tokens
    refined, repairs = _refine_one(
        refiner,
        state,
        i,
        CorruptionKind.WHOLE_MASK,
        spec,
        corrupt_seed=derive_seed(seed, "corrupt-final", i),
        sample_seed=derive_seed(seed, "sample-final", i),
        frame_tokens=frame,
    )
    state[i - 1] = refined
    log.append(
        ProvenanceRecord(
            1,
            i,
            preserved=False,
            corrupted=True,
            kind=CorruptionKind.WHOLE_MASK.name.lower(),
            seed=derive_seed(seed, "sample-final", i),
            repairs=repairs,
        )
    )
    return PassState(segments=tuple(state), pass_index=1, log=log)


class ChordOnsetConstraint:
    """Logit mask forcing a chord under a segment's first melody note.

    While fewer than `budget` onset tokens have been emitted, positions
    cycle Onset -> Duration -> PitchVelocity and each onset must fall in
    a 50 ms window: the first anchors to the melody note's onset, later
    ones to the first generated onset. Duration and pitch-velocity
    positions are restricted to their kind but free in value. Once the
    budget is spent the mask disappears entirely.
    """

    def __init__(self, anchor_ms: int, budget: int, window_ms: int = HARMONIZE_WINDOW_MS):
        self.anchor_ms = anchor_ms
        self.budget = budget
        self.window_ms = window_ms
        self._released = budget <= 0
        self._duration_mask = self._kind_mask(VOCAB.is_duration_id)
        self._pv_mask = self._kind_mask(VOCAB.is_pv_id)

    @staticmethod
    def _kind_mask(predicate) -> np.ndarray:
        mask = np.ones(VOCAB.size, dtype=bool)
        for token_id in range(VOCAB.size):
            if predicate(token_id):
                mask[token_id] = False
        return mask

    def _onset_mask(self, lo_ms: int) -> np.ndarray:
        mask = np.ones(VOCAB.size, dtype=bool)
        for token_id in VOCAB.onset_ids_in_window(lo_ms, lo_ms + self.window_ms):
            mask[token_id] = False
        return mask

    def __call__(self, step: int, generated_ids: list[int]) -> np.ndarray | None:
        if self._released:
            return None
        onsets_done = sum(1 for t in generated_ids if VOCAB.is_onset_id(t))
        position = len(generated_ids) % 3
        if onsets_done >= self.budget and position == 0:
            self._released = True
            return None
        if position == 0:
            if onsets_done == 0:
                return self._onset_mask(self.anchor_ms)
            first = next(VOCAB.token_of(t) for t in generated_ids if VOCAB.is_onset_id(t))
            return self._onset_mask(first.value)
        if position == 1:
            return self._duration_mask
        return self._pv_mask


def harmonize(
    melody: Sequence[Segment],
    refiner: SegmentRefiner,
    target_genre: str,
    *,
    chord_onset_budget: int = 3,
    extra_passes: int = 1,
    temperature: float = 1.0,
    seed: int = 0,
    constrained: bool = True,
    left_context: int = 2,
    right_context: int = 1,
) -> PassState:
    """Harmonize a monophonic melody with skyline corruption.

    Pass 1 constrains each segment's first `chord_onset_budget` onset
    tokens into a 50 ms window at the segment's first melody note, which
    forces a chord there; later passes rerun skyline refinement without
    constraints to smooth the result. Pass `constrained=False` to skip
    the logit constraint (for comparison runs).
    """
    state = renumber(melody)
    if not state:
        raise ValueError("melody must contain at least one segment")
    _require_monophonic(state)

    log: list[ProvenanceRecord] = []
    n = len(state)
    for q in range(1, 2 + max(0, extra_passes)):
        first_pass = q == 1
        spec = PassSpec(
            kind=CorruptionKind.SKYLINE,
            alpha=1.0,
            left=min(5, max(1, left_context)),
            right=min(5, max(1, right_context)),
            target_genre=target_genre,
            temperature=temperature,
            seed=derive_seed(seed, "pass", q),
        )
        for i in range(1, n + 1):
            if not state[i - 1].notes:
                log.append(ProvenanceRecord(q, i, preserved=False, corrupted=False))
                continue
            frame = skyline(state[i - 1], genre=target_genre)
            mask = None
            if first_pass and constrained:
                anchor = frame.payload[0].value
                mask = ChordOnsetConstraint(anchor, chord_onset_budget)
            refined, repairs = _refine_one(
                refiner,
                state,
                i,
                CorruptionKind.SKYLINE,
                spec,
                corrupt_seed=0,
                sample_seed=derive_seed(spec.seed, "sample", i),
                logit_mask=mask,
                frame_tokens=frame.tokens,
            )
            state[i - 1] = refined
            log.append(
                ProvenanceRecord(
                    q,
                    i,
                    preserved=False,
                    corrupted=True,
                    kind=CorruptionKind.SKYLINE.name.lower(),
                    seed=derive_seed(spec.seed, "sample", i),
                    repairs=repairs,
                    constrained=mask is not None,
                )
            )
    return PassState(segments=tuple(state), pass_index=1 + max(0, extra_passes), log=log)


def _require_monophonic(segments: Sequence[Segment]) -> None:
    """Reject input where two notes sound within the chord window."""
    onsets: list[tuple[int, SegmentNote]] = []
    for seg in segments:
        base = (seg.index - 1) * 5000
        for note in seg.notes:
            onsets.append((base + note.onset, note))
    onsets.sort(key=lambda x: x[0])
    for (t0, a), (t1, b) in zip(onsets, onsets[1:]):
        if t1 - t0 < CHORD_WINDOW_MS:
            raise ValueError(
                f"polyphonic input: notes at {t0} ms (pitch {a.pitch}) and "
                f"{t1} ms (pitch {b.pitch}) are closer than {CHORD_WINDOW_MS} ms"
            )
