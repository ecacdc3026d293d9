"""Synthetic multi-speaker corpus, WAV ingestion and the utterance manifest.

Synthetic speakers are a harmonic source at a speaker-specific fundamental,
shaped by three two-pole formant resonators, broken into syllable-like bursts
and mixed with low-level white noise.  Everything is a pure function of the
stored parameters and seed, so a manifest line is enough to rebuild the audio.
"""
from __future__ import annotations

import base64
import json
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

DEFAULT_SAMPLE_RATE = 16000
NOISE_DBFS = -30.0
PEAK_LIMIT = 0.99
CHANNEL_SNR_DB = (0.0, 15.0)
VOWEL_SPREAD = 0.06


class CorpusError(ValueError):
    pass


class WavFormatError(CorpusError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise CorpusError("waveform must be a non-empty 1-D sequence")
        if self.sample_rate <= 0:
            raise CorpusError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def limit_peak(x: np.ndarray) -> np.ndarray:
    """Rescale to a 0.99 peak if any sample leaves [-1, 1]; never hard-clip."""
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak > 1.0:
        return x * (PEAK_LIMIT / peak)
    return x


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    fundamental_hz: float
    formant_centers: tuple[float, float, float]
    formant_bandwidths: tuple[float, float, float]
    jitter: float

    def __post_init__(self):
        if not 80.0 <= self.fundamental_hz <= 300.0:
            raise CorpusError(f"fundamental_hz {self.fundamental_hz} outside [80, 300]")
        fc = self.formant_centers
        if len(fc) != 3 or not (fc[0] < fc[1] < fc[2]):
            raise CorpusError("formant centers must be 3 strictly increasing values")
        if len(self.formant_bandwidths) != 3 or min(self.formant_bandwidths) <= 0:
            raise CorpusError("formant bandwidths must be 3 positive values")
        if not 0.0 <= self.jitter <= 0.1:
            raise CorpusError(f"jitter {self.jitter} outside [0, 0.1]")


def random_profile(speaker_id: str, rng: np.random.Generator) -> SpeakerProfile:
    f1 = rng.uniform(300.0, 850.0)
    f2 = rng.uniform(max(f1 + 250.0, 900.0), 2400.0)
    f3 = rng.uniform(max(f2 + 300.0, 2500.0), 3600.0)
    return SpeakerProfile(
        speaker_id=speaker_id,
        fundamental_hz=float(rng.uniform(80.0, 300.0)),
        formant_centers=(float(f1), float(f2), float(f3)),
        formant_bandwidths=tuple(float(b) for b in rng.uniform(60.0, 160.0, size=3)),
        jitter=float(rng.uniform(0.0, 0.1)),
    )


def _resonator(center: float, bandwidth: float, sr: int):
    r = np.exp(-np.pi * bandwidth / sr)
    theta = 2.0 * np.pi * center / sr
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    # unit gain at the resonance
    z = np.exp(-1j * theta)
    gain = abs(a[0] + a[1] * z + a[2] * z * z)
    return np.array([gain]), a


def synthesize(profile: SpeakerProfile, duration: float, seed: int,
               sample_rate: int = DEFAULT_SAMPLE_RATE, channel: bool = True) -> Waveform:
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x5EED])
    n = int(round(duration * sample_rate))
    f0_utt = profile.fundamental_hz * (1.0 + profile.jitter * rng.uniform(-1.0, 1.0))

    out = np.zeros(n)
    t = int(rng.uniform(0.0, 0.15) * sample_rate)
    while t < n:
        syl = int(rng.uniform(0.12, 0.35) * sample_rate)
        gap = int(rng.uniform(0.04, 0.15) * sample_rate)
        end = min(t + syl, n)
        m = end - t
        if m < 16:
            break
        glide = f0_utt * (1.0 + rng.uniform(-0.06, 0.06, size=2))
        f0 = np.linspace(glide[0], glide[1], m)
        phase = np.cumsum(f0) / sample_rate + rng.uniform()
        excitation = 2.0 * (phase % 1.0) - 1.0
        envelope = np.sin(np.pi * (np.arange(m) + 0.5) / m) ** 2
        vowel = rng.uniform(1.0 - VOWEL_SPREAD, 1.0 + VOWEL_SPREAD, size=3)
        amp = rng.uniform(0.6, 1.0)
        # let the resonators ring into the following gap
        tail = min(gap, n - end)
        burst = np.concatenate([excitation * envelope * amp, np.zeros(tail)])
        for fc, bw, v in zip(profile.formant_centers, profile.formant_bandwidths, vowel):
            b, a = _resonator(min(fc * v, 0.45 * sample_rate), bw, sample_rate)
            burst = lfilter(b, a, burst)
        out[t:t + burst.size] += burst
        t = end + gap

    if channel:
        out = _recording_channel(out, rng, sample_rate)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.5 / peak
    out += rng.standard_normal(n) * 10.0 ** (NOISE_DBFS / 20.0)
    return Waveform(limit_peak(out), sample_rate)


def _recording_channel(speech: np.ndarray, rng: np.random.Generator, sr: int) -> np.ndarray:
    """Per-utterance recording condition shared by every frame of the utterance:
    a microphone coloration on the speech and a colored ambient noise bed."""
    tilt = rng.uniform(-0.8, 0.8)
    colored = lfilter([1.0, tilt], [1.0], speech)
    b, a = _resonator(rng.uniform(300.0, 0.4 * sr), rng.uniform(200.0, 1200.0), sr)
    mix = rng.uniform(0.0, 0.7)
    colored = (1.0 - mix) * colored + mix * lfilter(b, a, colored)
    spec = np.fft.rfft(rng.standard_normal(speech.size))
    f = np.arange(spec.size, dtype=float)
    f[0] = 1.0
    bed = np.fft.irfft(spec / f ** (rng.uniform(0.0, 2.0) / 2.0), speech.size)
    snr = rng.uniform(CHANNEL_SNR_DB[0], CHANNEL_SNR_DB[1])
    p_s = np.mean(colored ** 2)
    p_b = np.mean(bed ** 2)
    if p_s > 0 and p_b > 0:
        colored = colored + bed * np.sqrt(p_s / (p_b * 10.0 ** (snr / 10.0)))
    return colored


# -- WAV -----------------------------------------------------------------

def load_wav(path) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            nframes = fh.getnframes()
            raw = fh.readframes(nframes)
    except wave.Error as exc:
        raise WavFormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: truncated header") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: expected mono, found {channels} channels")
    if width != 2:
        raise WavFormatError(f"{path}: expected 16-bit PCM, found {8 * width}-bit samples")
    if len(raw) != nframes * 2:
        raise WavFormatError(
            f"{path}: truncated data, header declares {nframes} frames but {len(raw) // 2} present")
    if nframes == 0:
        raise WavFormatError(f"{path}: no samples")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(data, rate)


def write_wav(path, w: Waveform) -> None:
    ints = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(ints.tobytes())


# -- manifest ------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    source: str

    def encode(self) -> str:
        return f"{self.utterance_id}\t{self.speaker_id}\t{self.source}"


class Manifest:
    """Ordered, immutable mapping of utterance ids to audio sources."""

    def __init__(self, entries):
        self.entries = tuple(entries)
        self._index = {}
        for i, e in enumerate(self.entries):
            if e.utterance_id in self._index:
                raise CorpusError(f"duplicate utterance id {e.utterance_id!r}")
            self._index[e.utterance_id] = i

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, utt_id):
        return utt_id in self._index

    def __getitem__(self, utt_id) -> ManifestEntry:
        try:
            return self.entries[self._index[utt_id]]
        except KeyError:
            raise KeyError(f"unknown utterance id {utt_id!r}") from None

    @property
    def utterance_ids(self) -> list[str]:
        return [e.utterance_id for e in self.entries]

    def speakers(self) -> list[str]:
        return sorted({e.speaker_id for e in self.entries})

    def labels(self) -> dict[str, str]:
        return {e.utterance_id: e.speaker_id for e in self.entries}

    def subset(self, utt_ids) -> "Manifest":
        return Manifest(self[u] for u in utt_ids)

    def dumps(self) -> str:
        return "".join(e.encode() + "\n" for e in self.entries)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "Manifest":
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CorpusError(f"manifest line {lineno}: expected 3 tab-separated fields")
            if not parts[2].startswith(("wav:", "synth:")):
                raise CorpusError(f"manifest line {lineno}: unknown source {parts[2][:20]!r}")
            entries.append(ManifestEntry(*parts))
        return cls(entries)

    @classmethod
    def load(cls, path) -> "Manifest":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _encode_synth(profile: SpeakerProfile, duration: float, sample_rate: int, seed: int) -> str:
    params = {"profile": asdict(profile), "duration": duration, "sample_rate": sample_rate}
    blob = base64.urlsafe_b64encode(json.dumps(params, sort_keys=True).encode()).decode()
    return f"synth:{blob}:{seed}"


def _decode_synth(source: str):
    _, blob, seed = source.split(":")
    params = json.loads(base64.urlsafe_b64decode(blob.encode()))
    prof = params["profile"]
    profile = SpeakerProfile(
        speaker_id=prof["speaker_id"],
        fundamental_hz=prof["fundamental_hz"],
        formant_centers=tuple(prof["formant_centers"]),
        formant_bandwidths=tuple(prof["formant_bandwidths"]),
        jitter=prof["jitter"],
    )
    return profile, params["duration"], params["sample_rate"], int(seed)


def synth_corpus(n_speakers: int, utts_per_speaker: int, utt_duration: float, seed: int,
                 min_duration: float = 6.0, sample_rate: int = DEFAULT_SAMPLE_RATE,
                 prefix: str = "spk") -> Manifest:
    """Build a manifest of synthetic utterances.

    ``min_duration`` is the shortest utterance the configured segment plan can
    crop from; the default fits two 3 s long views.
    """
    if n_speakers < 2:
        raise CorpusError("need at least 2 speakers")
    if utts_per_speaker < 1:
        raise CorpusError("need at least 1 utterance per speaker")
    if utt_duration < min_duration:
        raise CorpusError(
            f"utterance duration {utt_duration} s is shorter than the {min_duration} s "
            "required by the configured segment lengths")
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0xC0])
    entries = []
    for s in range(n_speakers):
        spk = f"{prefix}{s:04d}"
        profile = random_profile(spk, rng)
        for u in range(utts_per_speaker):
            utt_seed = int(rng.integers(0, 2**31 - 1))
            source = _encode_synth(profile, float(utt_duration), sample_rate, utt_seed)
            entries.append(ManifestEntry(f"{spk}-u{u:04d}", spk, source))
    return Manifest(entries)


def resolve(manifest: Manifest, utterance_id: str) -> Waveform:
    return resolve_source(manifest[utterance_id].source)


def resolve_source(source: str) -> Waveform:
    if source.startswith("wav:"):
        return load_wav(source[4:])
    if source.startswith("synth:"):
        profile, duration, sr, seed = _decode_synth(source)
        return synthesize(profile, duration, seed, sr)
    raise CorpusError(f"unresolvable source {source[:30]!r}")


class AudioCache:
    """Resolves manifest entries once and keeps float32 copies in memory."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._store: dict[str, tuple[np.ndarray, int]] = {}

    def __call__(self, utterance_id: str) -> Waveform:
        hit = self._store.get(utterance_id)
        if hit is None:
            w = resolve(self.manifest, utterance_id)
            hit = (w.samples.astype(np.float32), w.sample_rate)
            self._store[utterance_id] = hit
        return Waveform(hit[0].astype(np.float64), hit[1])
