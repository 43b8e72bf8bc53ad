"""Clip manifests, decoding, 1 s chunking, and the synthetic two-family corpus."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy.signal

from .wav import read_wav, write_wav16

SAMPLE_RATE = 16000
CHUNK_SAMPLES = SAMPLE_RATE
SPLITS = ("train", "val", "test")

KAISER_BETA = 8.0
TAPS_PER_PHASE = 64


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LabelVocabulary:
    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 2:
            raise DatasetError("vocabulary needs at least 2 classes")
        if len(set(self.names)) != len(self.names):
            dup = sorted({n for n in self.names if self.names.count(n) > 1})
            raise DatasetError(f"duplicate class names in vocabulary: {dup}")
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(self.names)})

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self._index[name]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    @classmethod
    def load(cls, path) -> "LabelVocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(line.strip() for line in lines if line.strip()))

    def save(self, path) -> None:
        Path(path).write_text("".join(n + "\n" for n in self.names), encoding="utf-8")


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    path: Path
    labels: frozenset[int]
    split: str

    def multi_hot(self, n_classes: int) -> np.ndarray:
        v = np.zeros(n_classes, dtype=np.float32)
        v[sorted(self.labels)] = 1.0
        return v


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Chunk:
    clip_id: str
    chunk_index: int
    samples: np.ndarray
    target: np.ndarray


# manifests ------------------------------------------------------------------

MANIFEST_HEADER = ["clip_id", "labels", "split"]


def load_manifest(path, vocab_path) -> tuple[list[ClipRecord], LabelVocabulary]:
    """Parse ``clip_id,labels,split`` rows; labels are ';'-separated class names.

    Audio is expected at ``<manifest dir>/audio/<clip_id>.wav``. A leading
    header row is optional.
    """
    path = Path(path)
    vocab = LabelVocabulary.load(vocab_path)
    records: list[ClipRecord] = []
    seen: set[str] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and row == MANIFEST_HEADER):
                continue
            if len(row) != 3:
                raise DatasetError(f"{path}:{lineno}: expected 3 columns, got {len(row)}: {row}")
            clip_id, labels, split = (c.strip() for c in row)
            if split not in SPLITS:
                raise DatasetError(f"{path}:{lineno}: unknown split {split!r}")
            if clip_id in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate clip_id {clip_id!r}")
            names = [n.strip() for n in labels.split(";") if n.strip()]
            if not names:
                raise DatasetError(f"{path}:{lineno}: clip {clip_id!r} has no labels")
            unknown = [n for n in names if n not in vocab]
            if unknown:
                raise DatasetError(f"{path}:{lineno}: unknown label {unknown[0]!r} in row {row}")
            seen.add(clip_id)
            records.append(ClipRecord(
                clip_id,
                path.parent / "audio" / f"{clip_id}.wav",
                frozenset(vocab.index(n) for n in names),
                split,
            ))
    return records, vocab


def write_manifest(path, records: Iterable[ClipRecord], vocab: LabelVocabulary) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            w.writerow([r.clip_id, ";".join(vocab.names[i] for i in sorted(r.labels)), r.split])


def by_split(records: Iterable[ClipRecord]) -> dict[str, list[ClipRecord]]:
    groups: dict[str, list[ClipRecord]] = {s: [] for s in SPLITS}
    for r in records:
        groups[r.split].append(r)
    return groups


# decoding -------------------------------------------------------------------

def resample(x: np.ndarray, rate_in: int, rate_out: int = SAMPLE_RATE) -> np.ndarray:
    """Polyphase windowed-sinc resampling (Kaiser beta 8).

    The prototype low-pass has 64 taps per phase of the faster side, i.e.
    64 * max(up, down) + 1 taps at the intermediate rate.
    """
    if rate_in == rate_out:
        return np.asarray(x, dtype=np.float64).copy()
    g = math.gcd(rate_in, rate_out)
    up, down = rate_out // g, rate_in // g
    n = max(up, down)
    h = scipy.signal.firwin(TAPS_PER_PHASE * n + 1, 1.0 / n, window=("kaiser", KAISER_BETA))
    return scipy.signal.resample_poly(np.asarray(x, dtype=np.float64), up, down, window=h)


def decode_and_resample(record: ClipRecord) -> AudioClip:
    frames, rate = read_wav(record.path)
    mono = frames.mean(axis=1)
    y = np.clip(resample(mono, rate), -1.0, 1.0)
    return AudioClip(y, SAMPLE_RATE)


def chunk_clip(clip: AudioClip, record: ClipRecord, n_classes: int) -> list[Chunk]:
    """Split into non-overlapping 1 s chunks.

    A trailing remainder of at least half a second is zero padded to a full
    chunk, a shorter one is dropped; a clip shorter than one second becomes a
    single padded chunk.
    """
    if clip.sample_rate != SAMPLE_RATE:
        raise DatasetError(f"clip {record.clip_id} is at {clip.sample_rate} Hz, expected {SAMPLE_RATE}")
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.size == 0:
        raise DatasetError(f"clip {record.clip_id} is empty")
    full, rem = divmod(x.size, CHUNK_SAMPLES)
    keep_tail = rem >= CHUNK_SAMPLES // 2 or full == 0
    n = full + (1 if keep_tail and rem else 0)
    padded = np.zeros(n * CHUNK_SAMPLES)
    used = min(x.size, n * CHUNK_SAMPLES)
    padded[:used] = x[:used]
    target = record.multi_hot(n_classes)
    return [
        Chunk(record.clip_id, i, padded[i * CHUNK_SAMPLES:(i + 1) * CHUNK_SAMPLES], target.copy())
        for i in range(n)
    ]


def expected_chunk_count(n_samples: int) -> int:
    full, rem = divmod(n_samples, CHUNK_SAMPLES)
    if full == 0:
        return 1 if n_samples else 0
    return full + (1 if rem >= CHUNK_SAMPLES // 2 else 0)


def load_chunks(records: Iterable[ClipRecord], n_classes: int) -> list[Chunk]:
    out = []
    for r in records:
        out.extend(chunk_clip(decode_and_resample(r), r, n_classes))
    return out


# synthetic corpus -------------------------------------------------------------

@dataclass(frozen=True)
class SynthRecipe:
    """Knobs of the two-family generator.

    Pitch-family class k is a comb of sinusoids on every ``comb_step``-th
    semitone of ``comb_bins``, offset by k semitones, under one shared
    Gaussian envelope; ``comb_partials`` adds harmonics per note.
    Timbre-family classes share a single harmonic tone and differ only in
    which harmonics their envelope favours.
    """

    clip_seconds: float = 3.0
    mixed_fraction: float = 0.2
    comb_step: int = 4
    # Low notes (40-250 Hz) sit closer together than the mel bands there, so
    # every pitch class produces nearly the same log-mel envelope.
    comb_bins: tuple[int, int] = (0, 32)        # CQT bin range holding comb notes
    comb_center_bin: float = 14.0
    comb_width_bins: float = 8.0
    comb_partials: tuple[tuple[int, float], ...] = ((1, 1.0),)
    timbre_f0_bin: int = 28                     # 40 * 2**(28/12) ~ 203 Hz
    timbre_harmonics: int = 5
    detune_cents: float = 25.0
    snr_db: tuple[float, float] = (0.0, 10.0)
    gain: tuple[float, float] = (0.25, 0.8)
    splits: tuple[float, float, float] = (0.6, 0.2, 0.2)


def bin_freq(b: float) -> float:
    return 40.0 * 2.0 ** (b / 12.0)


def timbre_envelopes(n: int, harmonics: int) -> np.ndarray:
    """(n, harmonics) amplitude profiles; class j peaks on a different harmonic."""
    h = np.arange(harmonics)
    centres = np.linspace(0, harmonics - 1, n)
    env = np.exp(-0.5 * ((h[None, :] - centres[:, None]) / 0.8) ** 2)
    return 0.15 + 0.85 * env


def _tone(freqs, amps, n, rng):
    t = np.arange(n) / SAMPLE_RATE
    x = np.zeros(n)
    for f, a in zip(freqs, amps):
        if f < SAMPLE_RATE / 2 - 200:
            x += a * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return x


def _pitch_signal(k: int, n: int, recipe: SynthRecipe, rng) -> np.ndarray:
    lo, hi = recipe.comb_bins
    detune = rng.uniform(-1, 1) * recipe.detune_cents / 100.0
    freqs, amps = [], []
    for b in range(lo + k, hi, recipe.comb_step):
        w = math.exp(-0.5 * ((b - recipe.comb_center_bin) / recipe.comb_width_bins) ** 2)
        for octave, oa in recipe.comb_partials:
            f = bin_freq(b + detune) * octave
            freqs.append(f)
            amps.append(w * oa)
    return _tone(freqs, amps, n, rng)


def _timbre_signal(j: int, n: int, recipe: SynthRecipe, envelopes: np.ndarray, rng) -> np.ndarray:
    detune = rng.uniform(-1, 1) * recipe.detune_cents / 100.0
    f0 = bin_freq(recipe.timbre_f0_bin + detune)
    h = np.arange(1, recipe.timbre_harmonics + 1)
    return _tone(f0 * h, envelopes[j], n, rng)


def _fade(n: int, ramp: int = 160) -> np.ndarray:
    env = np.ones(n)
    r = np.linspace(0.0, 1.0, ramp)
    env[:ramp] = r
    env[-ramp:] = r[::-1]
    return env


def _normalise(x: np.ndarray) -> np.ndarray:
    return x / max(np.sqrt(np.mean(x * x)), 1e-12)


@dataclass
class SyntheticCorpus:
    root: Path
    manifest: Path
    vocab_path: Path
    records: list[ClipRecord] = field(default_factory=list)
    vocab: LabelVocabulary | None = None


def synth_class_names(n_classes: int) -> tuple[str, ...]:
    half = n_classes // 2
    return tuple(f"pitch_{k}" for k in range(half)) + tuple(f"timbre_{k}" for k in range(half))


def synthesize_clip(labels: Iterable[int], n_classes: int, recipe: SynthRecipe,
                    rng: np.random.Generator) -> np.ndarray:
    """Render one clip containing every listed class, at a random gain and SNR."""
    half = n_classes // 2
    n = int(round(recipe.clip_seconds * SAMPLE_RATE))
    envelopes = timbre_envelopes(half, recipe.timbre_harmonics)
    parts = []
    for lab in sorted(labels):
        if lab < half:
            parts.append(_normalise(_pitch_signal(lab, n, recipe, rng)))
        else:
            parts.append(_normalise(_timbre_signal(lab - half, n, recipe, envelopes, rng)))
    x = _normalise(sum(parts))
    snr = rng.uniform(*recipe.snr_db)
    x = x + rng.standard_normal(n) * 10.0 ** (-snr / 20.0)
    x = x * _fade(n)
    return x / np.max(np.abs(x)) * rng.uniform(*recipe.gain)


def generate_synthetic_corpus(root, seed: int, n_classes: int = 8, clips_per_class: int = 60,
                              recipe: SynthRecipe = SynthRecipe()) -> SyntheticCorpus:
    """Write ``audio/*.wav``, ``manifest.csv`` and ``vocab.txt`` under ``root``.

    Output is a pure function of the arguments. Each class owns
    ``clips_per_class`` clips; a ``mixed_fraction`` of them also carry one
    label from the other family, mixed in at equal loudness.
    """
    if n_classes < 4 or n_classes % 2:
        raise DatasetError(f"n_classes must be an even number >= 4, got {n_classes}")
    if clips_per_class < 1:
        raise DatasetError("clips_per_class must be positive")
    root = Path(root)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    vocab = LabelVocabulary(synth_class_names(n_classes))
    half = n_classes // 2
    n_mixed = int(round(recipe.mixed_fraction * clips_per_class))
    n_train = int(round(recipe.splits[0] * clips_per_class))
    n_val = int(round(recipe.splits[1] * clips_per_class))

    records = []
    for c in range(n_classes):
        order = rng.permutation(clips_per_class)
        for i in range(clips_per_class):
            labels = {c}
            if order[i] < n_mixed:
                other = rng.integers(half) + (0 if c >= half else half)
                labels.add(int(other))
            split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
            clip_id = f"syn{c:02d}_{i:03d}"
            x = synthesize_clip(labels, n_classes, recipe, rng)
            write_wav16(root / "audio" / f"{clip_id}.wav", x, SAMPLE_RATE)
            records.append(ClipRecord(clip_id, root / "audio" / f"{clip_id}.wav", frozenset(labels), split))

    manifest = root / "manifest.csv"
    vocab_path = root / "vocab.txt"
    write_manifest(manifest, records, vocab)
    vocab.save(vocab_path)
    (root / "synth.json").write_text(json.dumps(
        {"seed": seed, "n_classes": n_classes, "clips_per_class": clips_per_class,
         "recipe": {k: getattr(recipe, k) for k in recipe.__dataclass_fields__}},
        indent=2, sort_keys=True) + "\n")
    return SyntheticCorpus(root, manifest, vocab_path, records, vocab)
