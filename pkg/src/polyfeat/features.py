"""The four per-chunk views: binary CQT peak map, MFCC, waveform patches, neuralogram."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Protocol

import numpy as np
import scipy.fft
import scipy.signal

from .dataset import CHUNK_SAMPLES, SAMPLE_RATE

VIEWS = ("pitch", "timbre", "waveform", "neuralogram")
VIEW_TAGS = {v: i for i, v in enumerate(VIEWS)}
VIEW_SHAPES = {
    "pitch": (80, 40),
    "timbre": (12, 40),
    "waveform": (40, 400),
    "neuralogram": (1024, 10),
}

HOP = 400
N_FRAMES = CHUNK_SAMPLES // HOP
LOG_FLOOR = 1e-10


class FeatureError(ValueError):
    pass


def _check_chunk(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.shape != (CHUNK_SAMPLES,):
        raise FeatureError(f"expected a chunk of {CHUNK_SAMPLES} samples, got shape {x.shape}")
    return x


# constant-Q -----------------------------------------------------------------

@dataclass(frozen=True)
class CqtConfig:
    n_bins: int = 80
    bins_per_octave: int = 12
    f_min: float = 40.0
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.center_freqs()[-1] >= self.sample_rate / 2:
            raise ValueError("top CQT bin is above Nyquist")

    @property
    def q(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    def center_freqs(self) -> np.ndarray:
        return self.f_min * 2.0 ** (np.arange(self.n_bins) / self.bins_per_octave)

    def window_lengths(self, n_samples: int = CHUNK_SAMPLES) -> np.ndarray:
        lengths = np.ceil(self.q * self.sample_rate / self.center_freqs()).astype(int)
        return np.minimum(lengths, n_samples)


@lru_cache(maxsize=4)
def _cqt_kernels(cfg: CqtConfig) -> tuple[np.ndarray, int]:
    # Every bin's kernel is laid out centred inside a common span so one matmul
    # against the frame matrix evaluates all bins.
    lengths = cfg.window_lengths()
    span = int(lengths.max())
    half = span // 2
    kern = np.zeros((cfg.n_bins, span), dtype=np.complex128)
    for b, (f, n) in enumerate(zip(cfg.center_freqs(), lengths)):
        t = np.arange(n) - n // 2
        win = scipy.signal.get_window("hann", n, fftbins=False) if n > 1 else np.ones(1)
        kern[b, half - n // 2: half - n // 2 + n] = win * np.exp(-2j * np.pi * f * t / cfg.sample_rate)
    return kern, half


def cqt_log_magnitude(samples, cfg: CqtConfig = CqtConfig()) -> np.ndarray:
    """(n_bins, frames) natural-log magnitude of a direct constant-Q analysis.

    Frame t is centred on sample t * hop. The signal is reflection padded so
    every window fits.
    """
    x = _check_chunk(samples)
    kern, half = _cqt_kernels(cfg)
    span = kern.shape[1]
    padded = np.pad(x, (half, span - half), mode="reflect")
    starts = np.arange(len(x) // cfg.hop) * cfg.hop
    frames = padded[starts[:, None] + np.arange(span)]
    mag = np.abs(kern @ frames.T)
    return np.log(np.maximum(mag, LOG_FLOOR))


def lower_median(values: np.ndarray) -> float:
    flat = np.sort(np.asarray(values).reshape(-1))
    return float(flat[(flat.size - 1) // 2])


def peak_map(logmag: np.ndarray, radius: int = 2) -> np.ndarray:
    """Binary mask of per-slice local maxima that reach the chunk median.

    A bin is kept when it is >= every bin within ``radius`` in its own
    column (ties all survive) and >= the lower median of the whole matrix.
    """
    m = np.asarray(logmag, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise FeatureError("peak_map input must be finite")
    n_bins = m.shape[0]
    padded = np.pad(m, [(radius, radius), (0, 0)], constant_values=-np.inf)
    neighbourhood = np.max(
        np.stack([padded[i: i + n_bins] for i in range(2 * radius + 1)]), axis=0
    )
    keep = (m >= neighbourhood) & (m >= lower_median(m))
    return keep.astype(np.float32)


def pitch_map(samples, cfg: CqtConfig = CqtConfig()) -> np.ndarray:
    return peak_map(cqt_log_magnitude(samples, cfg))


# MFCC -----------------------------------------------------------------------

MFCC_WINDOW = 1024
N_MELS = 40
N_MFCC = 13


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = MFCC_WINDOW, sr: int = SAMPLE_RATE,
                   f_lo: float = 0.0, f_hi: float = SAMPLE_RATE / 2) -> np.ndarray:
    """Triangular filters equally spaced on the HTK mel scale, unit area in Hz."""
    edges = mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m: m + 3]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling)) * (2.0 / (hi - lo))
    return fb


def mfcc(samples) -> np.ndarray:
    """12 x 40 MFCC matrix: coefficients 1..12 of a 13-coefficient MFCC per 25 ms hop."""
    x = _check_chunk(samples)
    half = MFCC_WINDOW // 2
    padded = np.pad(x, half, mode="reflect")
    starts = np.arange(N_FRAMES) * HOP
    frames = padded[starts[:, None] + np.arange(MFCC_WINDOW)]
    frames = frames * scipy.signal.get_window("hann", MFCC_WINDOW)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    logmel = np.log(np.maximum(power @ mel_filterbank().T, LOG_FLOOR))
    coeffs = scipy.fft.dct(logmel, type=2, norm="ortho", axis=1)[:, :N_MFCC]
    return coeffs[:, 1:].T.copy()


# waveform patches -------------------------------------------------------------

def patch_waveform(samples) -> np.ndarray:
    return _check_chunk(samples).reshape(N_FRAMES, HOP).copy()


# neuralogram ------------------------------------------------------------------

SEGMENT = 1600
EMBED_DIM = 1024
N_SEGMENTS = CHUNK_SAMPLES // SEGMENT


class Projector(Protocol):
    """Maps one 100 ms segment (1600 samples) to a 1024-dim vector."""

    def __call__(self, segment: np.ndarray, *, clip_id: str, chunk_index: int, column: int) -> np.ndarray:
        ...


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


class StandInProjector:
    """Frozen random conv stack: three strided 1-D convolutions, ReLU between,
    then a global max over time.

    Weights are orthogonal, drawn from ``seed``, and never change after
    construction, so one instance can be shared across threads.
    """

    # (out_channels, kernel, stride) per layer
    LAYERS = ((64, 64, 8), (256, 8, 4), (EMBED_DIM, 4, 2))

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.weights = []
        in_ch = 1
        for out_ch, k, _ in self.LAYERS:
            w = _orthogonal(rng, out_ch, in_ch * k)
            w.setflags(write=False)
            self.weights.append(w)
            in_ch = out_ch

    def __call__(self, segment, *, clip_id: str = "", chunk_index: int = 0, column: int = 0) -> np.ndarray:
        h = np.asarray(segment, dtype=np.float64)[None, :]  # (channels, time)
        for i, ((_, k, stride), w) in enumerate(zip(self.LAYERS, self.weights)):
            win = np.lib.stride_tricks.sliding_window_view(h, k, axis=1)[:, ::stride]  # (C, T', k)
            cols = win.transpose(1, 0, 2).reshape(win.shape[1], -1)
            h = w @ cols.T
            if i < len(self.LAYERS) - 1:
                h = np.maximum(h, 0.0)
        return h.max(axis=1)


class FileProjector:
    """Serves precomputed neuralogram columns from a PFV1 container."""

    def __init__(self, path):
        from .cache import read_records

        self.path = path
        self.table = {
            (r.clip_id, r.chunk_index): r.data
            for r in read_records(path)
            if r.view == "neuralogram"
        }

    def __call__(self, segment, *, clip_id: str, chunk_index: int, column: int) -> np.ndarray:
        try:
            return self.table[(clip_id, chunk_index)][:, column]
        except KeyError:
            raise FeatureError(
                f"missing precomputed embedding for clip {clip_id!r} chunk {chunk_index} in {self.path}"
            ) from None


def neuralogram(samples, projector: Projector, clip_id: str = "", chunk_index: int = 0) -> np.ndarray:
    x = _check_chunk(samples)
    cols = []
    for k in range(N_SEGMENTS):
        v = np.asarray(
            projector(x[k * SEGMENT:(k + 1) * SEGMENT], clip_id=clip_id, chunk_index=chunk_index, column=k),
            dtype=np.float64,
        )
        if v.shape != (EMBED_DIM,):
            raise FeatureError(f"projector returned shape {v.shape}, expected ({EMBED_DIM},)")
        if not np.all(np.isfinite(v)):
            raise FeatureError(f"projector returned non-finite values for column {k}")
        cols.append(v)
    return np.stack(cols, axis=1)


def compute_view(view: str, samples, projector: Projector | None = None,
                 clip_id: str = "", chunk_index: int = 0) -> np.ndarray:
    if view == "pitch":
        return pitch_map(samples)
    if view == "timbre":
        return mfcc(samples)
    if view == "waveform":
        return patch_waveform(samples)
    if view == "neuralogram":
        if projector is None:
            raise FeatureError("neuralogram view needs a projector")
        return neuralogram(samples, projector, clip_id, chunk_index)
    raise FeatureError(f"unknown view {view!r}")


def view_feature_shape(view: str) -> tuple[int, int]:
    try:
        return VIEW_SHAPES[view]
    except KeyError:
        raise FeatureError(f"unknown view {view!r}") from None

