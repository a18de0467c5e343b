"""Waveform front end: STFT, Slaney mel filterbank, log-mel, l2 normalization, WAV I/O."""

from __future__ import annotations

import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PCM_SCALE = 32768.0


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    fft_size: int = 400
    hop: int = 160
    mel_bands: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-10
    whisper_clamp: bool = False

    def __post_init__(self):
        if self.hop > self.fft_size:
            raise ValueError(f"hop ({self.hop}) must not exceed fft_size ({self.fft_size})")
        if self.mel_bands < 4:
            raise ValueError(f"mel_bands must be >= 4, got {self.mel_bands}")
        if self.fmax is not None and self.fmax > self.sample_rate / 2:
            raise ValueError(f"fmax {self.fmax} exceeds Nyquist {self.sample_rate / 2}")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def f_max(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else self.fmax

    @property
    def log_floor_value(self) -> float:
        return float(np.log10(self.log_floor))

    @classmethod
    def toy(cls, **overrides) -> "FrontendConfig":
        return cls(**{"mel_bands": 40, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MelSpectrogram:
    """``frames`` is a (time, mel_bands) matrix of log10 mel magnitudes."""

    frames: np.ndarray
    config: FrontendConfig = field(default_factory=FrontendConfig)

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape

    @property
    def duration(self) -> float:
        """Approximate audio duration covered by the frames, in seconds."""
        cfg = self.config
        n = self.frames.shape[0]
        return ((n - 1) * cfg.hop + cfg.fft_size) / cfg.sample_rate

    def with_frames(self, frames: np.ndarray) -> "MelSpectrogram":
        return MelSpectrogram(np.asarray(frames), self.config)

    def to_csv(self, path) -> None:
        np.savetxt(path, self.frames, delimiter=",", fmt="%.9g")


def as_frames(x) -> np.ndarray:
    return x.frames if isinstance(x, MelSpectrogram) else np.asarray(x)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def n_frames(length: int, config: FrontendConfig) -> int:
    return (length - config.fft_size) // config.hop + 1


def stft(waveform, config: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Unnormalized Hann-windowed STFT without padding, shape (frames, fft_size//2 + 1)."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"waveform must be 1-D, got shape {x.shape}")
    if x.size < config.fft_size:
        raise ValueError(f"waveform of {x.size} samples is shorter than fft_size {config.fft_size}")
    frames = sliding_window_view(x, config.fft_size)[::config.hop]
    return np.fft.rfft(frames * hann(config.fft_size), axis=-1)


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    logstep = np.log(6.4) / 27.0
    mel = f / f_sp
    return np.where(f >= 1000.0, 15.0 + np.log(np.maximum(f, 1e-12) / 1000.0) / logstep, mel)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    logstep = np.log(6.4) / 27.0
    return np.where(m >= 15.0, 1000.0 * np.exp(logstep * (m - 15.0)), f_sp * m)


def mel_edges(config: FrontendConfig) -> np.ndarray:
    """The ``mel_bands + 2`` band edge frequencies in Hz; band ``b`` peaks at ``edges[b + 1]``."""
    lo, hi = hz_to_mel(config.fmin), hz_to_mel(config.f_max)
    return mel_to_hz(np.linspace(lo, hi, config.mel_bands + 2))


def band_centers(config: FrontendConfig) -> np.ndarray:
    return mel_edges(config)[1:-1]


_FB_CACHE: dict[FrontendConfig, np.ndarray] = {}


def mel_filterbank(config: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Triangular filters with Slaney area normalization, shape (mel_bands, bins)."""
    fb = _FB_CACHE.get(config)
    if fb is not None:
        return fb
    freqs = np.linspace(0.0, config.sample_rate / 2, config.fft_size // 2 + 1)
    edges = mel_edges(config)
    fdiff = np.diff(edges)
    ramps = edges[:, None] - freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    fb = np.maximum(0.0, np.minimum(lower, upper))
    fb *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    fb.setflags(write=False)
    _FB_CACHE[config] = fb
    return fb


def mel_magnitude(waveform, config: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Linear mel magnitudes (not power), shape (frames, mel_bands)."""
    return np.abs(stft(waveform, config)) @ mel_filterbank(config).T


def log_mel(waveform, config: FrontendConfig = FrontendConfig()) -> MelSpectrogram:
    logmel = np.log10(np.maximum(mel_magnitude(waveform, config), config.log_floor))
    if config.whisper_clamp:
        logmel = np.maximum(logmel, logmel.max() - 8.0)
        logmel = (logmel + 4.0) / 4.0
    return MelSpectrogram(logmel, config)


def l2_normalize(spec) -> tuple[MelSpectrogram, float]:
    """Scale the whole matrix to unit Frobenius norm; returns the (clamped) norm too."""
    frames = as_frames(spec)
    if frames.size == 0:
        raise ValueError("cannot normalize an empty spectrogram")
    norm = max(float(np.linalg.norm(frames)), 1e-8)
    cfg = spec.config if isinstance(spec, MelSpectrogram) else FrontendConfig()
    return MelSpectrogram(frames / norm, cfg), norm


def to_linear_mel(spec) -> np.ndarray:
    """Undo the log10 map: nonnegative mel magnitudes."""
    return np.power(10.0, as_frames(spec))


# ---------------------------------------------------------------------------
# 16-bit PCM WAV


def quantize_pcm16(x) -> np.ndarray:
    """Round onto the 16-bit PCM grid so a WAV round trip is lossless."""
    q = np.clip(np.round(np.asarray(x, dtype=np.float64) * PCM_SCALE), -32768, 32767)
    return q / PCM_SCALE


def write_wav(path, waveform, sample_rate: int = 16000) -> None:
    pcm = np.clip(np.round(np.asarray(waveform, dtype=np.float64) * PCM_SCALE), -32768, 32767)
    path = Path(path)
    try:
        with path.open("wb") as fh, wave.open(fh, "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(int(sample_rate))
            w.writeframes(pcm.astype("<i2").tobytes())
    except OSError as exc:
        raise OSError(f"could not write WAV {path}: {exc}") from exc


def read_wav(path) -> tuple[np.ndarray, int]:
    path = Path(path)
    try:
        with path.open("rb") as fh, wave.open(fh, "rb") as w:
            if w.getsampwidth() != 2 or w.getnchannels() != 1:
                raise ValueError(f"{path}: expected 16-bit mono PCM")
            sr = w.getframerate()
            raw = w.readframes(w.getnframes())
    except OSError as exc:
        raise OSError(f"could not read WAV {path}: {exc}") from exc
    except (wave.Error, EOFError) as exc:
        raise ValueError(f"{path}: not a valid WAV file ({exc})") from None
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE, sr
