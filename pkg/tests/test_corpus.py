import wave

import numpy as np
import pytest

from spkdino import corpus
from spkdino.corpus import (AudioCache, CorpusError, Manifest, ManifestEntry, SpeakerProfile,
                            Waveform, WavFormatError, load_wav, resolve, synth_corpus, synthesize,
                            write_wav)


def test_synth_corpus_counts():
    m = synth_corpus(2, 1, 6.0, 7)
    assert len(m) == 2
    assert len(m.speakers()) == 2
    assert len(synth_corpus(20, 50, 6.0, 1)) == 1000


def test_synth_corpus_deterministic():
    a = synth_corpus(3, 2, 6.0, 5)
    b = synth_corpus(3, 2, 6.0, 5)
    assert a.dumps() == b.dumps()
    for u in a.utterance_ids:
        assert np.array_equal(resolve(a, u).samples, resolve(b, u).samples)


def test_synth_corpus_seed_changes_audio():
    a = synth_corpus(2, 1, 6.0, 5)
    b = synth_corpus(2, 1, 6.0, 6)
    assert not np.array_equal(resolve(a, a.utterance_ids[0]).samples,
                              resolve(b, b.utterance_ids[0]).samples)


def test_synth_corpus_rejects_short_utterances():
    with pytest.raises(CorpusError, match="shorter"):
        synth_corpus(2, 1, 4.0, 1)
    with pytest.raises(CorpusError):
        synth_corpus(1, 1, 6.0, 1)


def test_synthesized_audio_in_range():
    m = synth_corpus(4, 2, 6.0, 3)
    for u in m.utterance_ids:
        w = resolve(m, u)
        assert len(w) == 96000
        assert np.max(np.abs(w.samples)) <= 1.0
        assert np.all(np.isfinite(w.samples))


@pytest.mark.parametrize("kw", [
    dict(fundamental_hz=60.0),
    dict(fundamental_hz=310.0),
    dict(formant_centers=(900.0, 500.0, 2500.0)),
    dict(formant_bandwidths=(50.0, 0.0, 80.0)),
    dict(jitter=0.2),
])
def test_profile_invariants(kw):
    base = dict(speaker_id="s", fundamental_hz=120.0, formant_centers=(500.0, 1500.0, 2500.0),
                formant_bandwidths=(80.0, 90.0, 100.0), jitter=0.02)
    base.update(kw)
    with pytest.raises(CorpusError):
        SpeakerProfile(**base)


def _long_term_spectrum(x, n_fft=512):
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::256]
    spec = np.abs(np.fft.rfft(frames * np.hanning(n_fft), axis=-1)) ** 2
    s = np.log(spec.mean(axis=0) + 1e-12)
    return s - s.mean()


def test_speakers_separable_at_source():
    """Between-speaker spectral distance exceeds within-speaker distance."""
    m = synth_corpus(6, 4, 6.0, 11)
    spec = {u: _long_term_spectrum(resolve(m, u).samples) for u in m.utterance_ids}
    labels = m.labels()
    within, between = [], []
    ids = m.utterance_ids
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            d = np.linalg.norm(spec[a] - spec[b])
            (within if labels[a] == labels[b] else between).append(d)
    assert np.mean(between) > np.mean(within)


def test_wav_basic_load(tmp_path):
    path = tmp_path / "a.wav"
    ints = np.zeros(16000, dtype="<i2")
    ints[5] = 32767
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(16000)
        fh.writeframes(ints.tobytes())
    w = load_wav(path)
    assert len(w) == 16000 and w.sample_rate == 16000
    assert w.samples[5] == 32767 / 32768


def test_wav_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    w = Waveform(rng.uniform(-0.9, 0.9, 4000), 8000)
    write_wav(tmp_path / "r.wav", w)
    back = load_wav(tmp_path / "r.wav")
    assert back.sample_rate == 8000
    assert np.max(np.abs(back.samples - w.samples)) <= 1 / 32768


def test_wav_rejects_stereo_and_empty(tmp_path):
    p = tmp_path / "st.wav"
    with wave.open(str(p), "wb") as fh:
        fh.setnchannels(2)
        fh.setsampwidth(2)
        fh.setframerate(16000)
        fh.writeframes(np.zeros(20, dtype="<i2").tobytes())
    with pytest.raises(WavFormatError):
        load_wav(p)
    e = tmp_path / "empty.wav"
    e.write_bytes(b"")
    with pytest.raises(WavFormatError):
        load_wav(e)


def test_resolve_unknown_and_repeatable():
    m = synth_corpus(2, 1, 6.0, 2)
    u = m.utterance_ids[0]
    assert len(resolve(m, u)) > 0
    assert np.array_equal(resolve(m, u).samples, resolve(m, u).samples)
    with pytest.raises(KeyError):
        resolve(m, "nope")


def test_manifest_round_trip_and_duplicates(tmp_path):
    m = synth_corpus(2, 2, 6.0, 4)
    m.save(tmp_path / "m.tsv")
    back = Manifest.load(tmp_path / "m.tsv")
    assert back.dumps() == m.dumps()
    e = m.entries[0]
    with pytest.raises(CorpusError, match="duplicate"):
        Manifest([e, e])
    with pytest.raises(CorpusError):
        Manifest.loads("a\tb\tftp:thing\n")


def test_wav_manifest_entries(tmp_path):
    w = Waveform(np.full(1600, 0.25), 16000)
    write_wav(tmp_path / "x.wav", w)
    m = Manifest([ManifestEntry("x", "s", f"wav:{tmp_path / 'x.wav'}")])
    assert np.allclose(resolve(m, "x").samples, 0.25)


def test_audio_cache_matches_resolve():
    m = synth_corpus(2, 1, 6.0, 9)
    cache = AudioCache(m)
    u = m.utterance_ids[1]
    a, b = cache(u), resolve(m, u)
    assert np.allclose(a.samples, b.samples, atol=1e-7)
    assert cache(u) is not cache(u)  # callers get private copies


def test_limit_peak_rescales_without_clipping():
    x = np.array([0.0, 2.0, -1.0])
    y = corpus.limit_peak(x)
    assert np.isclose(np.max(np.abs(y)), corpus.PEAK_LIMIT)
    assert np.allclose(y / y[1], x / x[1])


def test_synthesize_without_channel_is_quieter_floor():
    prof = SpeakerProfile("s", 120.0, (500.0, 1500.0, 2500.0), (80.0, 90.0, 100.0), 0.0)
    w = synthesize(prof, 1.0, 3, channel=False)
    assert len(w) == 16000
    assert np.max(np.abs(w.samples)) <= 1.0
