"""DSP front-end tests: WAV round trips, STFT geometry, filterbank golden
hash, cepstra algebra, and the audition-only Griffin-Lim path."""

import hashlib

import numpy as np
import pytest

from elvc import dsp
from elvc.errors import ConfigError, ContractError, FormatError

MEL_MATRIX_SHA256 = "585e5e484683cd933bc32b1eaf5ad0d520edb765ab7192e959842b396462fff6"


def _sine(freq, seconds=1.0, amp=0.5):
    t = np.arange(int(seconds * dsp.SAMPLE_RATE)) / dsp.SAMPLE_RATE
    return dsp.Waveform((amp * np.sin(2 * np.pi * freq * t)).astype(np.float32))


# --- WAV ------------------------------------------------------------------------

def test_wav_roundtrip_silence(tmp_path):
    wav = dsp.Waveform(np.zeros(dsp.SAMPLE_RATE, dtype=np.float32))
    path = tmp_path / "silence.wav"
    dsp.wav_write(path, wav)
    back = dsp.wav_read(path)
    assert np.all(back.samples == 0.0)
    assert back.samples.size == dsp.SAMPLE_RATE


def test_wav_roundtrip_sine_within_quantization(tmp_path):
    wav = _sine(440.0)
    path = tmp_path / "sine.wav"
    dsp.wav_write(path, wav)
    back = dsp.wav_read(path)
    assert np.abs(back.samples - wav.samples).max() <= 2.0 ** -15


def test_wav_rejects_stereo(tmp_path):
    import wave as wave_mod
    path = tmp_path / "stereo.wav"
    with wave_mod.open(str(path), "wb") as fh:
        fh.setnchannels(2)
        fh.setsampwidth(2)
        fh.setframerate(dsp.SAMPLE_RATE)
        fh.writeframes(np.zeros(200, dtype="<i2").tobytes())
    with pytest.raises(FormatError, match="mono"):
        dsp.wav_read(path)


def test_wav_rejects_wrong_rate(tmp_path):
    import wave as wave_mod
    path = tmp_path / "slow.wav"
    with wave_mod.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(16000)
        fh.writeframes(np.zeros(200, dtype="<i2").tobytes())
    with pytest.raises(FormatError, match="16000"):
        dsp.wav_read(path)


def test_wav_rejects_non_wav(tmp_path):
    path = tmp_path / "junk.wav"
    path.write_bytes(b"not a riff file at all, definitely")
    with pytest.raises(FormatError):
        dsp.wav_read(path)


# --- STFT ------------------------------------------------------------------------

def test_stft_zero_signal():
    power = dsp.stft(dsp.Waveform(np.zeros(6000, dtype=np.float32)))
    assert power.shape == (1 + 6000 // dsp.HOP, dsp.N_FFT // 2 + 1)
    assert np.all(power == 0.0)


def test_stft_rejects_short_input():
    with pytest.raises(ContractError):
        dsp.stft(dsp.Waveform(np.ones(100, dtype=np.float32)))


@pytest.mark.parametrize("k", [10, 40, 80, 150, 200, 300, 400, 500, 700, 900])
def test_stft_sine_at_bin_center_peaks_at_that_bin(k):
    freq = k * dsp.SAMPLE_RATE / dsp.N_FFT
    power = dsp.stft(_sine(freq, seconds=0.5))
    interior = power[5:-5]
    assert np.all(interior.argmax(axis=1) == k)


def test_stft_parseval_with_hann_window():
    rng = np.random.default_rng(0)
    x = (0.4 * rng.standard_normal(9000)).astype(np.float32)
    wav = dsp.Waveform(np.clip(x, -1, 1))
    power = dsp.stft(wav)
    frames = dsp._frame(wav.samples) * dsp._hann()[None, :]
    time_energy = (frames ** 2).sum(axis=1)
    # real FFT keeps 1025 of 2048 bins; interior bins count twice
    spec_energy = (power[:, 0] + 2 * power[:, 1:-1].sum(axis=1) + power[:, -1]) / dsp.N_FFT
    rel = np.abs(spec_energy - time_energy) / np.maximum(time_energy, 1e-12)
    assert rel.max() < 1e-3


def test_frame_count_formula_random_lengths():
    rng = np.random.default_rng(1)
    lengths = rng.integers(dsp.WIN, 12000, size=1000)
    for n in lengths[:20]:
        wav = dsp.Waveform(np.ones(int(n), dtype=np.float32) * 0.1)
        assert dsp.stft(wav).shape[0] == dsp.n_frames_for(int(n))
    # formula itself for the full draw
    for n in lengths:
        assert dsp.n_frames_for(int(n)) == 1 + int(n) // dsp.HOP


# --- mel filterbank -----------------------------------------------------------------

def test_mel_matrix_golden_hash():
    m = dsp.mel_matrix()
    assert hashlib.sha256(m.tobytes()).hexdigest() == MEL_MATRIX_SHA256


def test_mel_matrix_rows():
    m = dsp.mel_matrix()
    assert m.shape == (dsp.N_MELS, dsp.N_FFT // 2 + 1)
    assert np.all(m >= 0.0)
    assert np.allclose(m.max(axis=1), 1.0)
    assert np.all(m.sum(axis=1) > 0.0)
    centers = m.argmax(axis=1)
    assert np.all(np.diff(centers) > 0)


def test_mel_filters_overlap():
    m = dsp.mel_matrix()
    support = m > 0
    overlap = (support[:-1] & support[1:]).sum(axis=1)
    assert np.all(overlap > 0)


# --- log-mel -------------------------------------------------------------------------

def test_log_mel_silence_hits_floor():
    mel = dsp.log_mel(dsp.Waveform(np.zeros(6000, dtype=np.float32)))
    assert np.all(mel.frames == np.float32(np.log(dsp.LOG_FLOOR)))
    assert not mel.normalized


def test_log_mel_frame_count_one_second():
    mel = dsp.log_mel(dsp.Waveform(np.zeros(24000, dtype=np.float32)))
    assert mel.n_frames == 81


@pytest.mark.parametrize("band", [10, 30, 50, 70])
def test_log_mel_sine_at_band_center(band):
    m = dsp.mel_matrix()
    center_bin = m[band].argmax()
    freq = center_bin * dsp.SAMPLE_RATE / dsp.N_FFT
    mel = dsp.log_mel(_sine(freq, seconds=0.5))
    interior = mel.frames[5:-5]
    assert np.all(interior.argmax(axis=1) == band)


def test_log_mel_normalization_requires_stats():
    with pytest.raises(ConfigError):
        dsp.log_mel(_sine(440, 0.2), stats=None, normalize=True)


def test_log_mel_scale_shift_bounded():
    wav = _sine(500.0, seconds=0.4, amp=0.3)
    doubled = dsp.Waveform(np.clip(wav.samples * 2.0, -1, 1))
    a = dsp.log_mel(wav).frames
    b = dsp.log_mel(doubled).frames
    shift = b - a
    above_floor = a > np.log(dsp.LOG_FLOOR) + 1e-3
    assert np.all(shift >= -1e-4)
    assert np.all(shift[above_floor] <= np.log(4.0) + 1e-3)


def test_feature_stats_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    frames = rng.standard_normal((40, dsp.N_MELS)) - 5.0
    stats = dsp.FeatureStats.from_frames([frames])
    normed = stats.normalize(frames)
    assert np.allclose(normed.mean(axis=0), 0.0, atol=1e-4)
    assert np.allclose(stats.denormalize(normed), frames, atol=1e-4)
    stats.save(tmp_path / "stats.json")
    loaded = dsp.FeatureStats.load(tmp_path / "stats.json")
    assert np.array_equal(loaded.mean, stats.mean)
    assert np.array_equal(loaded.std, stats.std)


# --- cepstra -------------------------------------------------------------------------

def test_cepstra_constant_row():
    v = 2.5
    row = np.full((1, dsp.N_MELS), v)
    cep = dsp.mel_cepstra(row)
    assert cep.shape == (1, dsp.N_CEPS)
    assert np.isclose(cep[0, 0], v * np.sqrt(dsp.N_MELS))
    assert np.allclose(cep[0, 1:], 0.0, atol=1e-9)


def test_dct_orthonormal_roundtrip():
    rng = np.random.default_rng(3)
    rows = rng.standard_normal((5, dsp.N_MELS))
    d = dsp._dct_matrix()
    full = rows @ d.T
    back = full @ d
    assert np.abs(back - rows).max() < 1e-6


def test_dct_matches_scipy():
    from scipy.fft import dct as scipy_dct
    rng = np.random.default_rng(4)
    rows = rng.standard_normal((6, dsp.N_MELS))
    ours = dsp.mel_cepstra(rows)
    ref = scipy_dct(rows, type=2, norm="ortho", axis=1)[:, :dsp.N_CEPS]
    assert np.abs(ours - ref).max() < 1e-9


def test_cepstra_energy_bounded_by_total():
    rng = np.random.default_rng(5)
    rows = rng.standard_normal((8, dsp.N_MELS))
    cep = dsp.mel_cepstra(rows)
    kept = (cep ** 2).sum(axis=1)
    total = (rows ** 2).sum(axis=1)
    assert np.all(kept <= total + 1e-9)


# --- Griffin-Lim ----------------------------------------------------------------------

def test_griffin_lim_preserves_band_peak():
    m = dsp.mel_matrix()
    band = 40
    freq = m[band].argmax() * dsp.SAMPLE_RATE / dsp.N_FFT
    mel = dsp.log_mel(_sine(freq, seconds=0.4))
    wav = dsp.griffin_lim(mel, iters=24)
    mel_back = dsp.log_mel(wav)
    interior = mel_back.frames[5:-5]
    assert np.all(interior.argmax(axis=1) == band)


def test_griffin_lim_floor_is_near_silent():
    mel = dsp.MelSpec(np.full((40, dsp.N_MELS), np.log(dsp.LOG_FLOOR), dtype=np.float32))
    wav = dsp.griffin_lim(mel, iters=4)
    rms = float(np.sqrt((wav.samples.astype(np.float64) ** 2).mean()))
    assert rms < 1e-3


def test_griffin_lim_deterministic():
    mel = dsp.log_mel(_sine(800.0, seconds=0.3))
    a = dsp.griffin_lim(mel, iters=8, seed=7)
    b = dsp.griffin_lim(mel, iters=8, seed=7)
    assert a.samples.tobytes() == b.samples.tobytes()


def test_griffin_lim_rejects_zero_iters():
    mel = dsp.MelSpec(np.zeros((10, dsp.N_MELS), dtype=np.float32))
    with pytest.raises(ContractError):
        dsp.griffin_lim(mel, iters=0)


# --- feature cache ----------------------------------------------------------------------

def test_mel_cache_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(6)
    mel = dsp.MelSpec(rng.standard_normal((33, dsp.N_MELS)).astype(np.float32), normalized=True)
    path = tmp_path / "utt.mel"
    dsp.write_mel(path, mel)
    back = dsp.read_mel(path)
    assert back.frames.tobytes() == mel.frames.tobytes()
    assert back.hop_samples == dsp.HOP and back.fft_size == dsp.N_FFT
    # writing again produces identical bytes
    blob = path.read_bytes()
    dsp.write_mel(path, mel)
    assert path.read_bytes() == blob


def test_mel_cache_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.mel"
    path.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(FormatError):
        dsp.read_mel(path)
