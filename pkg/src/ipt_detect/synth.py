"""Synthetic playing-technique fixtures with exact note annotations.

A fixture spec is a mapping (usually loaded from YAML)::

    duration: 6.0          # seconds of audio to render
    seed: 0                # phase/noise seed (optional)
    noise: 0.0             # white-noise amplitude (optional)
    events:
      - ipt: vibrato       # any IPT label or alias
        onset: 0.5         # seconds
        duration: 1.0      # seconds, > 0
        freq: 440.0        # base frequency in Hz
        freq_end: 880.0    # optional: chirp target (UP/DP) or run direction (glissando)
        amplitude: 0.3     # optional, default 0.3

Each class has its own signature: a stationary decaying tone (plucks), a
frequency-modulated tone (vibrato), a monotone glide up or down (UP/DP), a
brief pitch bump after the onset (PN), a run of short discrete pentatonic
tones (glissando, one annotated note per tone) and an amplitude-pulsed tone
(tremolo).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .dataset import (
    SAMPLE_RATE,
    IptClass,
    LabelError,
    NoteAnnotation,
    TrackMetadata,
    write_annotations,
    write_metadata,
)

HARMONICS = (1.0, 0.35, 0.15)
VIBRATO_RATE = 6.0
VIBRATO_DEPTH = 0.8  # semitones
PORTAMENTO_INTERVAL = 4.0  # semitones, when freq_end is not given
POINT_NOTE_BUMP = 2.0  # semitones
POINT_NOTE_LENGTH = 0.12  # seconds
GLISSANDO_STEP = 0.06  # seconds per tone
PENTATONIC_STEPS = (2, 2, 3, 2, 3)
TREMOLO_RATE = 12.0
PLUCK_DECAY = 0.4  # seconds


class FixtureError(ValueError):
    pass


@dataclass
class SynthEvent:
    ipt: IptClass
    onset: float
    duration: float
    freq: float
    freq_end: float | None = None
    amplitude: float = 0.3

    @classmethod
    def from_dict(cls, d: dict) -> "SynthEvent":
        unknown = set(d) - {"ipt", "onset", "duration", "freq", "freq_end", "amplitude"}
        if unknown:
            raise FixtureError(f"unknown event key(s): {sorted(unknown)}")
        try:
            ev = cls(
                ipt=IptClass.parse(str(d["ipt"])),
                onset=float(d["onset"]),
                duration=float(d["duration"]),
                freq=float(d["freq"]),
                freq_end=None if d.get("freq_end") is None else float(d["freq_end"]),
                amplitude=float(d.get("amplitude", 0.3)),
            )
        except KeyError as exc:
            raise FixtureError(f"event is missing key {exc}") from None
        except LabelError as exc:
            raise FixtureError(str(exc)) from None
        if ev.duration <= 0:
            raise FixtureError(f"event duration must be positive, got {ev.duration}")
        if ev.onset < 0:
            raise FixtureError(f"event onset must be non-negative, got {ev.onset}")
        if not 27.5 <= ev.freq <= 4186.0:
            raise FixtureError(f"event frequency {ev.freq} Hz outside the piano range")
        return ev


def midi_of(freq: float) -> int:
    return int(np.clip(round(69 + 12 * np.log2(freq / 440.0)), 21, 108))


def _oscillator(inst_freq: np.ndarray, phase0: float) -> np.ndarray:
    phase = phase0 + 2 * np.pi * np.cumsum(inst_freq) / SAMPLE_RATE
    out = np.zeros_like(phase)
    for k, a in enumerate(HARMONICS, start=1):
        # drop partials above Nyquist
        out += a * np.sin(k * phase) * (k * inst_freq < SAMPLE_RATE / 2)
    return out / sum(HARMONICS)


def _fade(n: int, attack: float = 0.005, release: float = 0.02) -> np.ndarray:
    env = np.ones(n)
    a = min(n // 2, int(attack * SAMPLE_RATE))
    r = min(n // 2, int(release * SAMPLE_RATE))
    if a:
        env[:a] = np.linspace(0, 1, a, endpoint=False)
    if r:
        env[n - r :] = np.linspace(1, 0, r)
    return env


def render_event(ev: SynthEvent, rng: np.random.Generator) -> tuple[np.ndarray, list[NoteAnnotation]]:
    n = max(1, int(round(ev.duration * SAMPLE_RATE)))
    t = np.arange(n) / SAMPLE_RATE
    phase0 = rng.uniform(0, 2 * np.pi)
    ipt = ev.ipt
    notes = [NoteAnnotation(ev.onset, ev.onset + ev.duration, midi_of(ev.freq), ipt)]

    if ipt == IptClass.GLISSANDO:
        ascending = ev.freq_end is None or ev.freq_end >= ev.freq
        n_tones = max(1, int(round(ev.duration / GLISSANDO_STEP)))
        step = ev.duration / n_tones
        out = np.zeros(n)
        notes = []
        semis = 0
        for i in range(n_tones):
            f = ev.freq * 2 ** ((semis if ascending else -semis) / 12)
            s0, s1 = int(round(i * step * SAMPLE_RATE)), int(round((i + 1) * step * SAMPLE_RATE))
            s1 = min(s1, n)
            seg = np.arange(s1 - s0)
            decay = np.exp(-seg / (0.5 * step * SAMPLE_RATE))
            out[s0:s1] = _oscillator(np.full(s1 - s0, f), phase0) * decay * _fade(s1 - s0, 0.002, 0.005)
            onset = ev.onset + i * step
            offset = ev.onset + (i + 1) * step if i < n_tones - 1 else ev.onset + ev.duration
            notes.append(NoteAnnotation(onset, offset, midi_of(f), ipt))
            semis += PENTATONIC_STEPS[i % len(PENTATONIC_STEPS)]
        return ev.amplitude * out, notes

    env = _fade(n)
    if ipt == IptClass.PLUCKS:
        freq = np.full(n, ev.freq)
        env = env * np.exp(-t / PLUCK_DECAY)
    elif ipt == IptClass.VIBRATO:
        freq = ev.freq * 2 ** (VIBRATO_DEPTH / 12 * np.sin(2 * np.pi * VIBRATO_RATE * t))
    elif ipt in (IptClass.UPWARD_PORTAMENTO, IptClass.DOWNWARD_PORTAMENTO):
        sign = 1 if ipt == IptClass.UPWARD_PORTAMENTO else -1
        end = ev.freq_end if ev.freq_end is not None else ev.freq * 2 ** (sign * PORTAMENTO_INTERVAL / 12)
        ramp = t / ev.duration
        freq = ev.freq * (end / ev.freq) ** ramp
    elif ipt == IptClass.POINT_NOTE:
        bump = np.where(t < POINT_NOTE_LENGTH, np.sin(np.pi * t / POINT_NOTE_LENGTH), 0.0)
        freq = ev.freq * 2 ** (POINT_NOTE_BUMP / 12 * bump)
    elif ipt == IptClass.TREMOLO:
        freq = np.full(n, ev.freq)
        env = env * (0.5 * (1 - np.cos(2 * np.pi * TREMOLO_RATE * t))) ** 2
    else:  # pragma: no cover - IptClass is closed
        raise FixtureError(f"unsupported class {ipt}")
    return ev.amplitude * env * _oscillator(freq, phase0), notes


def parse_fixture_spec(spec: dict) -> tuple[float, list[SynthEvent], int, float]:
    if spec is None:
        spec = {}
    unknown = set(spec) - {"duration", "seed", "noise", "events"}
    if unknown:
        raise FixtureError(f"unknown fixture key(s): {sorted(unknown)}")
    events = [SynthEvent.from_dict(e) for e in spec.get("events") or []]
    end = max((e.onset + e.duration for e in events), default=0.0)
    duration = float(spec.get("duration", max(end, 1.0)))
    if duration <= 0:
        raise FixtureError("fixture duration must be positive")
    for e in events:
        if e.onset + e.duration > duration + 1e-9:
            raise FixtureError(
                f"{e.ipt.label} event [{e.onset}, {e.onset + e.duration}] exceeds duration {duration}"
            )
    return duration, events, int(spec.get("seed", 0)), float(spec.get("noise", 0.0))


def synth_fixture(spec: dict, seed: int | None = None) -> tuple[np.ndarray, list[NoteAnnotation]]:
    """Render a fixture spec to a mono 44.1 kHz waveform and its note annotations."""
    duration, events, spec_seed, noise = parse_fixture_spec(spec)
    rng = np.random.default_rng(spec_seed if seed is None else seed)
    n = int(round(duration * SAMPLE_RATE))
    wave = np.zeros(n)
    notes: list[NoteAnnotation] = []
    for ev in events:
        sig, ev_notes = render_event(ev, rng)
        s0 = int(round(ev.onset * SAMPLE_RATE))
        s1 = min(s0 + len(sig), n)
        wave[s0:s1] += sig[: s1 - s0]
        notes.extend(ev_notes)
    if noise > 0:
        wave += noise * rng.standard_normal(n)
    peak = np.abs(wave).max() if n else 0.0
    if peak > 1:
        wave /= peak
    return wave.astype(np.float32), sorted(notes)


def load_fixture_spec(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return yaml.safe_load(fh) or {}


# ---------------------------------------------------------------------------
# random fixture corpora

_DURATION_RANGE = {
    IptClass.VIBRATO: (0.6, 1.4),
    IptClass.UPWARD_PORTAMENTO: (0.5, 1.2),
    IptClass.DOWNWARD_PORTAMENTO: (0.5, 1.2),
    IptClass.POINT_NOTE: (0.25, 0.5),
    IptClass.GLISSANDO: (0.3, 0.6),
    IptClass.TREMOLO: (0.8, 1.6),
    IptClass.PLUCKS: (0.3, 1.0),
}


def random_fixture_spec(
    rng: np.random.Generator,
    duration: float = 30.0,
    overlap_prob: float = 0.15,
    noise: float = 0.002,
) -> dict:
    """Random event schedule that cycles through all seven classes.

    Events follow each other with short gaps; with probability
    ``overlap_prob`` a plucks note an octave-and-a-fifth away is layered on
    top, giving multi-label frames.
    """
    events = []
    t = float(rng.uniform(0.1, 0.4))
    order: list[IptClass] = []
    while True:
        if not order:
            order = list(rng.permutation(list(IptClass)))
        ipt = IptClass(int(order.pop()))
        lo, hi = _DURATION_RANGE[ipt]
        d = float(rng.uniform(lo, hi))
        if t + d > duration - 0.05:
            break
        freq = float(220.0 * 2 ** (rng.integers(0, 19) / 12))
        events.append(
            {"ipt": ipt.label, "onset": round(t, 4), "duration": round(d, 4), "freq": round(freq, 3),
             "amplitude": round(float(rng.uniform(0.2, 0.4)), 3)}
        )
        if ipt != IptClass.PLUCKS and rng.random() < overlap_prob:
            events.append(
                {"ipt": "plucks", "onset": round(t, 4), "duration": round(d, 4),
                 "freq": round(freq * 2 ** (19 / 12), 3), "amplitude": 0.15}
            )
        t += d + float(rng.uniform(0.05, 0.4))
    return {"duration": duration, "seed": int(rng.integers(0, 2**31)), "noise": noise, "events": events}


def synth_corpus(
    root: str | Path,
    n_tracks: int = 20,
    seed: int = 0,
    track_seconds: float = 30.0,
    performers: tuple[str, ...] = ("performer_a", "performer_b"),
) -> list[TrackMetadata]:
    """Write a fixture corpus (metadata.csv, audio/*.wav, annotations/*.tsv, specs/*.yaml)."""
    from .features import write_audio

    root = Path(root)
    for sub in ("audio", "annotations", "specs"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    tracks = []
    for i in range(n_tracks):
        audio_id = f"fixture_{i:03d}"
        spec = random_fixture_spec(rng, duration=track_seconds)
        wave, notes = synth_fixture(spec)
        write_audio(root / "audio" / f"{audio_id}.wav", wave)
        write_annotations(root / "annotations" / f"{audio_id}.tsv", notes)
        with open(root / "specs" / f"{audio_id}.yaml", "w", encoding="utf-8") as fh:
            yaml.safe_dump(spec, fh, sort_keys=False)
        tracks.append(
            TrackMetadata(
                audio_id=audio_id,
                audio_name=f"Fixture {i}",
                mode="synthetic",
                time_signature="4/4",
                performer=performers[i % len(performers)],
                genre="fixture",
                audio_length=round(len(wave) / SAMPLE_RATE, 3),
            )
        )
    write_metadata(root / "metadata.csv", tracks)
    return tracks
