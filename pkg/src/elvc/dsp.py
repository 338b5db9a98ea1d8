"""Signal-processing front-end: WAV I/O, STFT, log-mel features, cepstra,
and a Griffin-Lim resynthesis path used for auditioning only.

Analysis setup: 24 kHz mono, 2048-point FFT, 300-sample hop, 1200-sample
periodic Hann window, 80 mel bands from 80 Hz to 7600 Hz (HTK scale,
peak-normalized triangles). All metrics downstream are computed in
feature space; waveforms exist for listening and for the toy corpus.
"""

from __future__ import annotations

import json
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError

SAMPLE_RATE = 24000
N_FFT = 2048
HOP = 300
WIN = 1200
N_MELS = 80
FMIN = 80.0
FMAX = 7600.0
LOG_FLOOR = 1e-10
N_CEPS = 25

_MEL_MAGIC = b"MEL1"


@dataclass
class Waveform:
    """Mono audio in [-1, 1] at the fixed project rate."""

    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ContractError("waveform must be a non-empty 1-D array")
        if self.sample_rate_hz != SAMPLE_RATE:
            raise ConfigError(f"sample rate must be {SAMPLE_RATE}, got {self.sample_rate_hz}")

    @property
    def duration_s(self):
        return self.samples.size / self.sample_rate_hz


@dataclass
class MelSpec:
    """frames: n x 80 log-mel matrix; `normalized` marks z-scored features."""

    frames: np.ndarray
    normalized: bool = False
    hop_samples: int = HOP
    fft_size: int = N_FFT

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise ContractError(f"mel frames must be n x {N_MELS}, got {self.frames.shape}")

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclass
class FeatureStats:
    """Per-band mean/std of raw log-mel energies over one reference corpus.

    Computed once on the pretraining corpus and reused everywhere so every
    model sees the same input scale.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_frames(cls, frame_arrays):
        stacked = np.concatenate([np.asarray(f, dtype=np.float64) for f in frame_arrays], axis=0)
        mean = stacked.mean(axis=0)
        std = np.maximum(stacked.std(axis=0), 1e-5)
        return cls(mean=mean.astype(np.float32), std=std.astype(np.float32))

    def normalize(self, frames):
        return ((frames - self.mean) / self.std).astype(np.float32)

    def denormalize(self, frames):
        return (frames * self.std + self.mean).astype(np.float32)

    def floor_row(self):
        """Normalized value of an all-floor (silence) log-mel row."""
        return ((np.log(LOG_FLOOR) - self.mean) / self.std).astype(np.float32)

    def save(self, path):
        payload = {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path):
        payload = json.loads(Path(path).read_text())
        return cls(mean=np.asarray(payload["mean"], dtype=np.float32),
                   std=np.asarray(payload["std"], dtype=np.float32))


# --- WAV I/O -----------------------------------------------------------------

def wav_write(path, waveform: Waveform):
    """Write RIFF PCM16 mono at the project rate."""
    pcm = np.round(np.clip(waveform.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(waveform.sample_rate_hz)
        fh.writeframes(pcm.tobytes())


def wav_read(path) -> Waveform:
    """Read a WAV file, rejecting anything but PCM16 mono 24 kHz."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1:
                raise FormatError(f"{path}: expected mono, got {fh.getnchannels()} channels")
            if fh.getsampwidth() != 2:
                raise FormatError(f"{path}: expected 16-bit PCM, got {fh.getsampwidth() * 8}-bit")
            if fh.getframerate() != SAMPLE_RATE:
                raise FormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {fh.getframerate()} Hz")
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise FormatError(f"{path}: not a PCM RIFF/WAVE file ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32767.0
    return Waveform(np.clip(samples, -1.0, 1.0))


# --- spectra -------------------------------------------------------------------

def _hann():
    # periodic Hann; hop = win/4 gives constant overlap-add for resynthesis
    n = np.arange(WIN)
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * n / WIN)).astype(np.float64)


def _frame(samples):
    padded = np.pad(samples.astype(np.float64), WIN // 2, mode="reflect")
    n = 1 + (padded.size - WIN) // HOP
    idx = np.arange(WIN)[None, :] + HOP * np.arange(n)[:, None]
    return padded[idx]


def stft_complex(waveform: Waveform):
    if waveform.samples.size < WIN:
        raise ContractError(f"waveform shorter than the {WIN}-sample analysis window")
    frames = _frame(waveform.samples) * _hann()[None, :]
    return np.fft.rfft(frames, n=N_FFT, axis=1)


def stft(waveform: Waveform):
    """Power spectrogram, n x 1025, frame count 1 + len//hop."""
    spec = stft_complex(waveform)
    return (spec.real ** 2 + spec.imag ** 2)


def n_frames_for(n_samples):
    """Frame count the padding rule yields for a given sample count."""
    return 1 + n_samples // HOP


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_matrix():
    """80 x 1025 triangular filterbank, each row peak-normalized to 1.0."""
    edges_hz = _mel_to_hz(np.linspace(_hz_to_mel(FMIN), _hz_to_mel(FMAX), N_MELS + 2))
    bin_hz = np.arange(N_FFT // 2 + 1) * (SAMPLE_RATE / N_FFT)
    lo = edges_hz[:-2][:, None]
    mid = edges_hz[1:-1][:, None]
    hi = edges_hz[2:][:, None]
    rise = (bin_hz[None, :] - lo) / (mid - lo)
    fall = (hi - bin_hz[None, :]) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rise, fall))
    peaks = weights.max(axis=1)
    if (peaks <= 0).any():
        raise ConfigError("empty mel filter; FFT resolution too coarse for the band layout")
    return (weights / peaks[:, None]).astype(np.float32)


_MEL_MATRIX_CACHE = None


def _mel_weights():
    global _MEL_MATRIX_CACHE
    if _MEL_MATRIX_CACHE is None:
        _MEL_MATRIX_CACHE = mel_matrix()
    return _MEL_MATRIX_CACHE


def log_mel(waveform: Waveform, stats: FeatureStats | None = None,
            normalize: bool | None = None) -> MelSpec:
    """Log-mel features; z-normalized with `stats` when requested.

    normalize defaults to True exactly when stats are supplied.
    """
    if normalize is None:
        normalize = stats is not None
    if normalize and stats is None:
        raise ConfigError("normalization requested but no feature statistics supplied")
    power = stft(waveform)
    mel = power.astype(np.float32) @ _mel_weights().T
    frames = np.log(np.maximum(mel, LOG_FLOOR))
    if normalize:
        frames = stats.normalize(frames)
    return MelSpec(frames=frames, normalized=normalize)


# --- cepstra --------------------------------------------------------------------

def _dct_matrix(n=N_MELS):
    # orthonormal DCT-II
    k = np.arange(n)[:, None]
    m = np.arange(n)[None, :]
    d = np.cos(np.pi * (2 * m + 1) * k / (2.0 * n)) * np.sqrt(2.0 / n)
    d[0] /= np.sqrt(2.0)
    return d


_DCT = _dct_matrix()


def mel_cepstra(frames) -> np.ndarray:
    """First 25 orthonormal DCT-II coefficients of each raw log-mel row.

    Callers must pass denormalized (raw) log-mel frames.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != N_MELS:
        raise ContractError(f"expected n x {N_MELS} raw log-mel frames, got {frames.shape}")
    return frames @ _DCT[:N_CEPS].T


# --- Griffin-Lim ------------------------------------------------------------------

def _istft(spec):
    frames = np.fft.irfft(spec, n=N_FFT, axis=1)[:, :WIN]
    win = _hann()
    frames = frames * win[None, :]
    n = frames.shape[0]
    total = WIN + HOP * (n - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    win_sq = win * win
    for i in range(n):
        out[i * HOP: i * HOP + WIN] += frames[i]
        norm[i * HOP: i * HOP + WIN] += win_sq
    out = out / np.maximum(norm, 1e-8)
    return out[WIN // 2: total - WIN // 2]


def griffin_lim(melspec: MelSpec, iters: int = 32, stats: FeatureStats | None = None,
                seed: int = 0) -> Waveform:
    """Iterative phase reconstruction from log-mel features.

    Audition quality only; every metric in this project is computed in
    feature space. Deterministic for a fixed initial-phase seed.
    """
    if iters < 1:
        raise ContractError("iters must be >= 1")
    frames = melspec.frames
    if melspec.normalized:
        if stats is None:
            raise ConfigError("normalized features need stats to invert")
        frames = stats.denormalize(frames)
    mel_power = np.exp(frames.astype(np.float64))
    inv = np.linalg.pinv(_mel_weights().astype(np.float64))
    lin_power = np.maximum(mel_power @ inv.T, 0.0)
    mag = np.sqrt(lin_power)

    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    spec = mag * phase
    x = _istft(spec)
    for _ in range(iters - 1):
        rebuilt = stft_complex(Waveform(np.clip(x, -1, 1)))
        rebuilt = rebuilt[: mag.shape[0]]
        if rebuilt.shape[0] < mag.shape[0]:
            pad = np.zeros((mag.shape[0] - rebuilt.shape[0], mag.shape[1]), dtype=complex)
            rebuilt = np.concatenate([rebuilt, pad], axis=0)
        angles = rebuilt / np.maximum(np.abs(rebuilt), 1e-12)
        x = _istft(mag * angles)
    peak = np.abs(x).max()
    if peak > 1e-4:
        x = 0.95 * x / peak
    return Waveform(np.clip(x, -1.0, 1.0).astype(np.float32))


# --- feature cache -----------------------------------------------------------------

def write_mel(path, melspec: MelSpec):
    """Cache one utterance's features: MEL1 header then little-endian f32 rows.

    The cache stores features exactly as produced (normalized, in this
    pipeline); the container itself is scale-agnostic.
    """
    frames = np.ascontiguousarray(melspec.frames, dtype="<f4")
    header = _MEL_MAGIC + struct.pack("<4I", frames.shape[0], N_MELS,
                                      melspec.hop_samples, melspec.fft_size)
    Path(path).write_bytes(header + frames.tobytes())


def read_mel(path, normalized=True) -> MelSpec:
    blob = Path(path).read_bytes()
    if blob[:4] != _MEL_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {_MEL_MAGIC!r}")
    n, mels, hop, fft = struct.unpack("<4I", blob[4:20])
    if mels != N_MELS:
        raise FormatError(f"{path}: {mels} mel bands, expected {N_MELS}")
    data = np.frombuffer(blob[20:], dtype="<f4")
    if data.size != n * mels:
        raise FormatError(f"{path}: truncated payload ({data.size} values for {n}x{mels})")
    return MelSpec(frames=data.reshape(n, mels).copy(), normalized=normalized,
                   hop_samples=hop, fft_size=fft)
