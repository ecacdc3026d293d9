"""Waveform augmentation and multi-crop view construction.

Utterance-level pitch shift happens before cropping; tempo change and one of
additive noise / reverberation are then drawn independently per crop.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import fftconvolve, resample

from .corpus import Waveform, limit_peak, synthesize, random_profile

FRAME_SECONDS = 0.030
HOP_SECONDS = 0.010
SEARCH_SECONDS = 0.0075
SILENT_NOISE_DBFS = -20.0


class AugmentError(ValueError):
    pass


@dataclass
class AugmentConfig:
    p_pitch: float = 0.0
    pitch_cents_choices: tuple = (-200.0, 200.0)
    p_tempo: float = 0.0
    tempo_ratio_choices: tuple = (0.9, 1.1)
    p_noise_reverb: float = 1.0
    snr_db_range: tuple = (5.0, 20.0)
    noise_bank: list = field(default_factory=list)
    ir_bank: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("p_pitch", "p_tempo", "p_noise_reverb"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise AugmentError(f"{name}={p} is not a probability")
        lo, hi = self.snr_db_range
        if lo > hi:
            raise AugmentError(f"snr range low {lo} exceeds high {hi}")
        if self.p_pitch > 0 and not self.pitch_cents_choices:
            raise AugmentError("p_pitch > 0 needs pitch_cents_choices")
        if self.p_tempo > 0 and not self.tempo_ratio_choices:
            raise AugmentError("p_tempo > 0 needs tempo_ratio_choices")
        if self.p_noise_reverb > 0 and not (self.noise_bank and self.ir_bank):
            raise AugmentError("p_noise_reverb > 0 needs both a noise bank and an IR bank")


@dataclass(frozen=True)
class SegmentPlan:
    n_long: int = 2
    long_seconds: float = 3.0
    n_short: int = 4
    short_seconds: float = 2.0

    def __post_init__(self):
        if self.n_long < 1 or self.n_short < 0:
            raise AugmentError("need n_long >= 1 and n_short >= 0")
        if not self.long_seconds >= self.short_seconds > 0:
            raise AugmentError("need long_seconds >= short_seconds > 0")

    @property
    def n_views(self) -> int:
        return self.n_long + self.n_short


# -- tempo / pitch -------------------------------------------------------

def _wsola(x: np.ndarray, ratio: float, out_len: int, sr: int) -> np.ndarray:
    n = int(round(FRAME_SECONDS * sr))
    hs = int(round(HOP_SECONDS * sr))
    radius = int(round(SEARCH_SECONDS * sr))
    ha = hs * ratio
    win = np.hanning(n + 2)[1:-1]

    n_frames = int(np.ceil(out_len / hs)) + 1
    pad_tail = int(np.ceil((n_frames - 1) * ha)) + n + 2 * radius + hs
    xp = np.concatenate([np.zeros(radius), x, np.zeros(pad_tail)])

    out = np.zeros((n_frames - 1) * hs + n)
    norm = np.zeros_like(out)
    prev = 0
    for k in range(n_frames):
        nominal = int(round(k * ha))
        if k == 0:
            pos = nominal
        else:
            target = xp[radius + prev + hs: radius + prev + hs + n]
            region = xp[nominal: nominal + n + 2 * radius]
            scores = sliding_window_view(region, n) @ target
            pos = nominal - radius + int(np.argmax(scores))
        frame = xp[radius + pos: radius + pos + n]
        out[k * hs: k * hs + n] += frame * win
        norm[k * hs: k * hs + n] += win
        prev = pos
    norm[norm < 1e-8] = 1.0
    return (out / norm)[:out_len]


def tempo_stretch(w: Waveform, ratio: float) -> Waveform:
    """Change speed by ``ratio`` keeping pitch; output has round(len/ratio) samples."""
    if not 0.5 <= ratio <= 2.0:
        raise AugmentError(f"tempo ratio {ratio} outside [0.5, 2.0]")
    if ratio == 1.0:
        return Waveform(w.samples.copy(), w.sample_rate)
    out_len = max(1, int(round(len(w) / ratio)))
    return Waveform(_wsola(w.samples, ratio, out_len, w.sample_rate), w.sample_rate)


def pitch_shift(w: Waveform, cents: float) -> Waveform:
    """Shift pitch by ``cents`` while keeping duration.

    Resampling by 2**(cents/1200) moves every frequency; a tempo stretch then
    restores the original length.
    """
    if abs(cents) > 1200:
        raise AugmentError(f"pitch shift {cents} cents outside [-1200, 1200]")
    if cents == 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    factor = 2.0 ** (cents / 1200.0)
    squeezed = resample(w.samples, max(1, int(round(len(w) / factor))))
    ratio = squeezed.size / len(w)
    return Waveform(_wsola(squeezed, ratio, len(w), w.sample_rate), w.sample_rate)


# -- noise / reverb ------------------------------------------------------

def add_noise(w: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    if not np.isfinite(snr_db):
        raise AugmentError("snr_db must be finite")
    if len(noise) < len(w):
        raise AugmentError(f"noise has {len(noise)} samples, signal needs {len(w)}")
    nz = noise.samples[: len(w)]
    p_noise = np.mean(nz ** 2)
    if p_noise <= 0:
        raise AugmentError("noise segment has zero power")
    p_sig = np.mean(w.samples ** 2)
    info = {"snr_db": float(snr_db)}
    if p_sig > 0:
        gain = np.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    else:
        gain = 10.0 ** (SILENT_NOISE_DBFS / 20.0) / np.sqrt(p_noise)
        info["silent_signal"] = True
    info["noise_gain"] = float(gain)
    return Waveform(limit_peak(w.samples + gain * nz), w.sample_rate, info)


def reverberate(w: Waveform, ir: Waveform) -> Waveform:
    y = fftconvolve(w.samples, ir.samples)[: len(w)]
    peak_in = np.max(np.abs(w.samples))
    peak_out = np.max(np.abs(y))
    if peak_out > 0:
        y *= peak_in / peak_out
    return Waveform(y, w.sample_rate)


# -- banks ---------------------------------------------------------------

def colored_noise(n: int, exponent: float, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=float)
    f[0] = 1.0
    x = np.fft.irfft(spec / f ** (exponent / 2.0), n)
    return x / np.max(np.abs(x)) * 0.5


def make_noise_bank(count: int, seconds: float, seed: int, sample_rate: int = 16000) -> list:
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0xA0])
    n = int(round(seconds * sample_rate))
    bank = []
    for i in range(count):
        if i % 2 == 0:
            x = colored_noise(n, float(rng.choice([0.0, 1.0, 2.0])), rng)
        else:
            talkers = int(rng.integers(3, 6))
            x = np.zeros(n)
            for t in range(talkers):
                prof = random_profile(f"babble{t}", rng)
                x += synthesize(prof, seconds, int(rng.integers(2**31)), sample_rate).samples
            x /= np.max(np.abs(x))
        bank.append(Waveform(x, sample_rate))
    return bank


def make_ir_bank(count: int, seed: int, rt60_range=(0.2, 0.8), sample_rate: int = 16000) -> list:
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0xB0])
    bank = []
    for _ in range(count):
        rt60 = rng.uniform(*rt60_range)
        n = int(rt60 * sample_rate)
        h = rng.standard_normal(n) * np.exp(-6.9078 * np.arange(n) / (rt60 * sample_rate))
        h[0] = 1.0
        bank.append(Waveform(h / np.max(np.abs(h)), sample_rate))
    return bank


# -- views ---------------------------------------------------------------

def min_utterance_seconds(cfg: AugmentConfig, plan: SegmentPlan) -> float:
    stretch = max(cfg.tempo_ratio_choices) if cfg.p_tempo > 0 else 1.0
    return plan.long_seconds * max(stretch, 1.0)


def _augment_segment(seg: Waveform, cfg: AugmentConfig, rng: np.random.Generator,
                     q_ar: float) -> Waveform:
    if q_ar < cfg.p_noise_reverb:
        if rng.integers(2) == 0:
            noise = cfg.noise_bank[int(rng.integers(len(cfg.noise_bank)))]
            samples = noise.samples
            if len(samples) < len(seg):  # loop a short noise clip to cover the segment
                samples = np.resize(samples, len(seg))
            start = int(rng.integers(0, len(samples) - len(seg) + 1))
            crop = Waveform(samples[start:start + len(seg)], noise.sample_rate)
            snr = rng.uniform(*cfg.snr_db_range)
            seg = add_noise(seg, crop, snr)
            seg.info["kind"] = "noise"
        else:
            ir = cfg.ir_bank[int(rng.integers(len(cfg.ir_bank)))]
            seg = reverberate(seg, ir)
            seg.info["kind"] = "reverb"
    return seg


def _segments(w: Waveform, count: int, seconds: float, cfg: AugmentConfig,
              rng: np.random.Generator) -> list:
    sr = w.sample_rate
    want = int(round(seconds * sr))
    views = []
    for _ in range(count):
        q_t, q_ar = rng.uniform(), rng.uniform()
        ratio = 1.0
        if q_t < cfg.p_tempo:
            ratio = float(cfg.tempo_ratio_choices[int(rng.integers(len(cfg.tempo_ratio_choices)))])
        # crop enough source audio that the stretched segment has the target length
        take = min(int(round(want * ratio)), len(w))
        start = int(rng.integers(0, len(w) - take + 1))
        seg = Waveform(w.samples[start:start + take], sr)
        if ratio != 1.0:
            seg = tempo_stretch(seg, ratio)
        x = seg.samples
        if x.size != want:
            x = np.pad(x, (0, max(0, want - x.size)))[:want]
            seg = Waveform(x, sr)
        seg = _augment_segment(seg, cfg, rng, q_ar)
        seg.info.update(tempo_ratio=ratio, start=start)
        views.append(seg)
    return views


def build_views(w: Waveform, cfg: AugmentConfig, plan: SegmentPlan, rng_seed) -> list:
    """Return ``[("long", wav) * L, ("short", wav) * M]`` for one utterance.

    Each view's ``info`` records the pitch shift, tempo ratio, crop start and
    the noise/reverb choice applied to it.
    """
    need = min_utterance_seconds(cfg, plan)
    if w.duration + 1e-9 < need:
        raise AugmentError(
            f"utterance of {w.duration:.3f} s is too short; need at least {need:.3f} s")
    rng = np.random.default_rng(rng_seed)
    q_p = rng.uniform()
    cents = 0.0
    if q_p < cfg.p_pitch:
        cents = float(cfg.pitch_cents_choices[int(rng.integers(len(cfg.pitch_cents_choices)))])
        w = pitch_shift(w, cents)
    short = _segments(w, plan.n_short, plan.short_seconds, cfg, rng)
    long = _segments(w, plan.n_long, plan.long_seconds, cfg, rng)
    for v in short + long:
        v.info["pitch_cents"] = cents
    return [("long", v) for v in long] + [("short", v) for v in short]
