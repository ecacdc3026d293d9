"""Log-mel filterbank front-end with per-utterance mean normalization."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft
from numpy.lib.stride_tricks import sliding_window_view

from .corpus import Waveform

LOG_FLOOR = 1e-10


class FeatureError(ValueError):
    pass


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (T, D)
    frame_hop: float

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 20.0,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular filters, shape (n_fft // 2 + 1, n_mels)."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((freqs.size, n_mels))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        fb[:, m] = np.maximum(0.0, np.minimum(rising, falling))
    fb.flags.writeable = False
    return fb


def frame_count(n_samples: int, win: int, hop: int) -> int:
    return 1 + (n_samples - win) // hop


def logmel_array(x: np.ndarray, sample_rate: int, n_mels: int = 40, win: float = 0.025,
                 hop: float = 0.010, normalize: bool = True) -> np.ndarray:
    """Batched log-mel over the last axis: (..., S) -> (..., T, n_mels)."""
    win_n = int(round(win * sample_rate))
    hop_n = int(round(hop * sample_rate))
    if x.shape[-1] < win_n:
        raise FeatureError(f"input of {x.shape[-1]} samples is shorter than one {win_n}-sample window")
    n_fft = 1 << (win_n - 1).bit_length()
    frames = sliding_window_view(x, win_n, axis=-1)[..., ::hop_n, :]
    window = np.hanning(win_n + 1)[:-1].astype(x.dtype)
    spec = scipy.fft.rfft(frames * window, n=n_fft, axis=-1)
    power = spec.real ** 2 + spec.imag ** 2
    mel = power @ mel_filterbank(n_mels, n_fft, sample_rate).astype(x.dtype)
    feats = np.log(np.maximum(mel, LOG_FLOOR))
    if normalize:
        feats = feats - feats.mean(axis=-2, keepdims=True)
    return feats


def logmel(w: Waveform, n_mels: int = 40, win: float = 0.025, hop: float = 0.010) -> FeatureSequence:
    return FeatureSequence(logmel_array(w.samples, w.sample_rate, n_mels, win, hop), hop)
