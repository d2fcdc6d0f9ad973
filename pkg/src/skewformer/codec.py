"""Symbolic music token codecs.

Two serializations are provided:

* A sixteenth-note grid codec for four-voice chorales: the 4 x T pitch grid is
  interleaved voice-by-voice within each time step (soprano, alto, tenor, bass,
  then the next step).  Token ids are MIDI pitches, plus one rest id.
* A MIDI-like performance codec over a 388-symbol vocabulary: 128 note-on,
  128 note-off, 100 time-shift events in 10 ms increments up to 1 s, and 32
  velocity bins.  Sustain-pedal preprocessing extends note durations before
  encoding.

Ingestion is a plain text note list (no binary MIDI here).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

__all__ = [
    "CodecError",
    "ParseError",
    "CodecWarning",
    "NoteEvent",
    "PedalEvent",
    "TokenSequence",
    "jsb_serialize",
    "jsb_deserialize",
    "jsb_token_attributes",
    "apply_sustain_pedal",
    "performance_encode",
    "performance_decode",
    "augment",
    "ingest_notes",
    "format_notes",
    "read_grid_file",
    "write_grid_file",
    "read_tokens",
    "write_tokens",
]

# Performance vocabulary layout.
NOTE_ON_BASE = 0
NOTE_OFF_BASE = 128
TIME_SHIFT_BASE = 256
VELOCITY_BASE = 356
PERFORMANCE_VOCAB = 388
NUM_SHIFT_TOKENS = 100  # 10 ms .. 1000 ms
NUM_VELOCITY_BINS = 32
TIME_QUANTUM_MS = 10

# Grid codec: ids are MIDI pitches, one extra id for a silent voice.
JSB_REST_ID = 128
JSB_VOCAB = 129
JSB_VOICES = 4
REST_MARK = "R"

PEDAL_DOWN_THRESHOLD = 64
ALLOWED_TRANSPOSITIONS = range(-3, 4)
ALLOWED_STRETCHES = (0.95, 0.975, 1.0, 1.025, 1.05)


class CodecError(ValueError):
    """Invalid musical data for the requested codec operation."""


class ParseError(CodecError):
    """Malformed note-list or grid text; message carries the line number."""


class CodecWarning(UserWarning):
    """Recoverable policy decision taken while decoding (e.g. dropped event)."""


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    velocity: int
    onset_ms: int
    offset_ms: int
    voice: int | None = None

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise CodecError(f"pitch {self.pitch} outside 0..127")
        if not 1 <= self.velocity <= 127:
            raise CodecError(f"velocity {self.velocity} outside 1..127")
        if self.onset_ms < 0:
            raise CodecError(f"negative onset {self.onset_ms}")
        if self.offset_ms <= self.onset_ms:
            raise CodecError(
                f"offset {self.offset_ms} must exceed onset {self.onset_ms}"
            )
        if self.voice is not None and not 0 <= self.voice < JSB_VOICES:
            raise CodecError(f"voice {self.voice} outside 0..{JSB_VOICES - 1}")


@dataclass(frozen=True)
class PedalEvent:
    time_ms: int
    value: int

    def __post_init__(self):
        if self.time_ms < 0:
            raise CodecError(f"negative pedal time {self.time_ms}")
        if not 0 <= self.value <= 127:
            raise CodecError(f"pedal value {self.value} outside 0..127")


@dataclass
class TokenSequence:
    codec_id: str  # "jsb_grid" | "performance"
    ids: list[int]
    vocab_size: int

    def __post_init__(self):
        if self.codec_id not in ("jsb_grid", "performance"):
            raise CodecError(f"unknown codec id {self.codec_id!r}")
        for t in self.ids:
            if not 0 <= t < self.vocab_size:
                raise CodecError(f"token id {t} outside vocabulary of {self.vocab_size}")

    def __len__(self):
        return len(self.ids)


# ---------------------------------------------------------------------------
# Grid codec


def jsb_serialize(grid) -> TokenSequence:
    """Interleave a 4 x T pitch grid column by column (S A T B per step).

    Grid entries are MIDI pitches; -1 marks a silent voice.
    """
    grid = np.asarray(grid, dtype=np.int64)
    if grid.ndim != 2 or grid.shape[0] != JSB_VOICES:
        raise CodecError(f"grid must have {JSB_VOICES} voice rows, got shape {grid.shape}")
    if grid.size == 0:
        raise CodecError("empty grid")
    if grid.max() > 127 or grid.min() < -1:
        raise CodecError("grid entries must be MIDI pitches 0..127 or -1 for rests")
    ids = np.where(grid < 0, JSB_REST_ID, grid).T.reshape(-1)
    return TokenSequence("jsb_grid", [int(t) for t in ids], JSB_VOCAB)


def jsb_deserialize(tokens: TokenSequence | list[int]) -> np.ndarray:
    ids = tokens.ids if isinstance(tokens, TokenSequence) else list(tokens)
    if len(ids) % JSB_VOICES != 0:
        raise CodecError(f"token count {len(ids)} not divisible by {JSB_VOICES} voices")
    arr = np.asarray(ids, dtype=np.int64).reshape(-1, JSB_VOICES).T
    return np.where(arr == JSB_REST_ID, -1, arr)


def jsb_token_attributes(ids) -> tuple[np.ndarray, np.ndarray]:
    """Per-token (pitch, sixteenth-step) attributes for pitch/time logits.

    Rest tokens are unpitched (-1); the time step advances every four tokens.
    """
    ids = np.asarray(ids, dtype=np.int64)
    pitches = np.where(ids >= JSB_REST_ID, -1, ids)
    times = np.arange(len(ids)) // JSB_VOICES
    return pitches, times


# ---------------------------------------------------------------------------
# Sustain pedal preprocessing


def _pedal_periods(pedals: list[PedalEvent]) -> list[tuple[int, float]]:
    """Half-open [down, up) sustain intervals; an unreleased pedal runs forever."""
    periods = []
    down_at = None
    for p in sorted(pedals, key=lambda e: e.time_ms):
        if p.value >= PEDAL_DOWN_THRESHOLD:
            if down_at is None:
                down_at = p.time_ms
        else:
            if down_at is not None:
                periods.append((down_at, float(p.time_ms)))
                down_at = None
    if down_at is not None:
        periods.append((down_at, float("inf")))
    return periods


def apply_sustain_pedal(notes: list[NoteEvent], pedals: list[PedalEvent]) -> list[NoteEvent]:
    """Extend note durations while the sustain pedal is down.

    A note ending inside a sustain period is held until the next onset of the
    same pitch or the pedal release, whichever comes first; durations already
    reaching past that point are kept.  Notes are never shortened.
    """
    if not pedals:
        return sorted(notes, key=lambda n: (n.onset_ms, n.pitch))
    periods = _pedal_periods(pedals)
    onsets_by_pitch: dict[int, list[int]] = {}
    for n in notes:
        onsets_by_pitch.setdefault(n.pitch, []).append(n.onset_ms)
    for v in onsets_by_pitch.values():
        v.sort()

    out = []
    for n in notes:
        new_offset = n.offset_ms
        for down, up in periods:
            if down <= n.offset_ms < up:
                restrike = next(
                    (t for t in onsets_by_pitch[n.pitch] if t >= n.offset_ms), None
                )
                target = up if restrike is None else min(float(restrike), up)
                if target != float("inf"):
                    new_offset = max(n.offset_ms, int(target))
                break
        out.append(replace(n, offset_ms=new_offset) if new_offset != n.offset_ms else n)
    return sorted(out, key=lambda n: (n.onset_ms, n.pitch))


# ---------------------------------------------------------------------------
# Performance codec


def velocity_bin(velocity: int) -> int:
    return velocity * NUM_VELOCITY_BINS // 128


def _quantize_step(t_ms: int) -> int:
    return (t_ms + TIME_QUANTUM_MS // 2) // TIME_QUANTUM_MS


def _emit_shift(ids: list[int], steps: int):
    while steps > 0:
        chunk = min(steps, NUM_SHIFT_TOKENS)
        ids.append(TIME_SHIFT_BASE + chunk - 1)
        steps -= chunk


def performance_encode(notes: list[NoteEvent]) -> TokenSequence:
    """Serialize notes to performance events.

    Times snap to the 10 ms grid relative to the first event (leading silence
    is dropped); zero-length notes after quantization get one quantum.  At a
    shared timestamp, note-offs come first, then each note-on preceded by a
    velocity token when its bin differs from the running one.
    """
    if not notes:
        return TokenSequence("performance", [], PERFORMANCE_VOCAB)
    origin = min(n.onset_ms for n in notes)
    ons = []
    offs = []
    for n in notes:
        on_step = _quantize_step(n.onset_ms - origin)
        off_step = max(_quantize_step(n.offset_ms - origin), on_step + 1)
        ons.append((on_step, n.pitch, velocity_bin(n.velocity)))
        offs.append((off_step, n.pitch))
    ons.sort()
    offs.sort()

    ids: list[int] = []
    now = 0
    current_bin = None
    i = j = 0
    while i < len(offs) or j < len(ons):
        t_off = offs[i][0] if i < len(offs) else None
        t_on = ons[j][0] if j < len(ons) else None
        t = min(x for x in (t_off, t_on) if x is not None)
        _emit_shift(ids, t - now)
        now = t
        while i < len(offs) and offs[i][0] == t:
            ids.append(NOTE_OFF_BASE + offs[i][1])
            i += 1
        while j < len(ons) and ons[j][0] == t:
            _, pitch, vbin = ons[j]
            if vbin != current_bin:
                ids.append(VELOCITY_BASE + vbin)
                current_bin = vbin
            ids.append(NOTE_ON_BASE + pitch)
            j += 1
    return TokenSequence("performance", ids, PERFORMANCE_VOCAB)


def performance_decode(tokens: TokenSequence | list[int]) -> list[NoteEvent]:
    """Reconstruct notes; times land on the 10 ms grid, velocities at bin centers.

    A note-off with no matching open note is dropped with a warning; note-ons
    still open at the end are closed there.
    """
    ids = tokens.ids if isinstance(tokens, TokenSequence) else list(tokens)
    now = 0
    velocity = 2  # center of bin 0 until a velocity token arrives
    open_notes: dict[int, list[tuple[int, int]]] = {}
    finished = []
    for t in ids:
        if not 0 <= t < PERFORMANCE_VOCAB:
            raise CodecError(f"token id {t} outside the performance vocabulary")
        if t < NOTE_OFF_BASE:
            open_notes.setdefault(t, []).append((now, velocity))
        elif t < TIME_SHIFT_BASE:
            pitch = t - NOTE_OFF_BASE
            queue = open_notes.get(pitch)
            if not queue:
                warnings.warn(
                    f"note-off for pitch {pitch} with no open note; dropped",
                    CodecWarning,
                    stacklevel=2,
                )
                continue
            onset, vel = queue.pop(0)
            finished.append(
                NoteEvent(pitch, vel, onset * TIME_QUANTUM_MS, max(now, onset + 1) * TIME_QUANTUM_MS)
            )
        elif t < VELOCITY_BASE:
            now += t - TIME_SHIFT_BASE + 1
        else:
            velocity = (t - VELOCITY_BASE) * 4 + 2
    for pitch, queue in sorted(open_notes.items()):
        for onset, vel in queue:
            warnings.warn(
                f"note-on for pitch {pitch} still open at the end; closed there",
                CodecWarning,
                stacklevel=2,
            )
            finished.append(
                NoteEvent(pitch, vel, onset * TIME_QUANTUM_MS, max(now, onset + 1) * TIME_QUANTUM_MS)
            )
    return sorted(finished, key=lambda n: (n.onset_ms, n.pitch))


# ---------------------------------------------------------------------------
# Augmentation


def augment(notes: list[NoteEvent], transpose_steps: int, stretch_factor: float) -> list[NoteEvent]:
    """Pitch transposition and time stretch (applied before quantization).

    Notes transposed out of MIDI range are dropped with a warning.
    """
    if transpose_steps not in ALLOWED_TRANSPOSITIONS:
        raise CodecError(
            f"transposition {transpose_steps} outside "
            f"{ALLOWED_TRANSPOSITIONS.start}..{ALLOWED_TRANSPOSITIONS.stop - 1}"
        )
    if not any(abs(stretch_factor - s) < 1e-9 for s in ALLOWED_STRETCHES):
        raise CodecError(f"stretch {stretch_factor} not in {ALLOWED_STRETCHES}")
    out = []
    for n in notes:
        pitch = n.pitch + transpose_steps
        if not 0 <= pitch <= 127:
            warnings.warn(
                f"note at pitch {n.pitch} transposed out of range; dropped",
                CodecWarning,
                stacklevel=2,
            )
            continue
        out.append(
            replace(
                n,
                pitch=pitch,
                onset_ms=int(n.onset_ms * stretch_factor + 0.5),
                offset_ms=int(n.offset_ms * stretch_factor + 0.5),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Text formats


def ingest_notes(source) -> tuple[list[NoteEvent], list[PedalEvent]]:
    """Parse a note-list document.

    Records: ``note PITCH VELOCITY ONSET_MS OFFSET_MS [VOICE]`` and
    ``pedal TIME_MS VALUE``; blank lines and ``#`` comments are skipped.
    Output lists come back chronologically sorted.
    """
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        text = Path(source).read_text()
    else:
        text = str(source)
    notes: list[NoteEvent] = []
    pedals: list[PedalEvent] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        kind = fields[0]
        try:
            if kind == "note":
                if len(fields) not in (5, 6):
                    raise CodecError(f"expected 4 or 5 note fields, got {len(fields) - 1}")
                pitch, vel, on, off = (int(x) for x in fields[1:5])
                voice = int(fields[5]) if len(fields) == 6 else None
                notes.append(NoteEvent(pitch, vel, on, off, voice))
            elif kind == "pedal":
                if len(fields) != 3:
                    raise CodecError(f"expected 2 pedal fields, got {len(fields) - 1}")
                pedals.append(PedalEvent(int(fields[1]), int(fields[2])))
            else:
                raise CodecError(f"unknown record type {kind!r}")
        except (ValueError, CodecError) as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
    notes.sort(key=lambda n: (n.onset_ms, n.pitch))
    pedals.sort(key=lambda p: p.time_ms)
    return notes, pedals


def format_notes(notes: list[NoteEvent], pedals: list[PedalEvent] | None = None) -> str:
    lines = []
    for n in notes:
        voice = "" if n.voice is None else f" {n.voice}"
        lines.append(f"note {n.pitch} {n.velocity} {n.onset_ms} {n.offset_ms}{voice}")
    for p in pedals or []:
        lines.append(f"pedal {p.time_ms} {p.value}")
    return "\n".join(lines) + "\n"


def read_grid_file(path) -> np.ndarray:
    rows = []
    lines = [l for l in Path(path).read_text().splitlines() if l.strip()]
    if len(lines) != JSB_VOICES:
        raise ParseError(f"grid file must have {JSB_VOICES} voice rows, found {len(lines)}")
    for lineno, line in enumerate(lines, start=1):
        row = []
        for tok in line.split():
            if tok.upper() == REST_MARK:
                row.append(-1)
            else:
                try:
                    row.append(int(tok))
                except ValueError as exc:
                    raise ParseError(f"line {lineno}: bad pitch {tok!r}") from exc
        rows.append(row)
    if len({len(r) for r in rows}) != 1:
        raise ParseError("grid rows have unequal lengths")
    return np.asarray(rows, dtype=np.int64)


def write_grid_file(path, grid):
    grid = np.asarray(grid)
    lines = [
        " ".join(REST_MARK if p < 0 else str(int(p)) for p in row) for row in grid
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_tokens(path) -> list[int]:
    text = Path(path).read_text().strip()
    return [int(t) for t in text.split()] if text else []


def write_tokens(path, ids):
    Path(path).write_text(" ".join(str(int(t)) for t in ids) + "\n")
