"""Deterministic toy speaker encoder.

Features are a gain-invariant long-term average log-mel spectrum and a soft
histogram of autocorrelation pitch estimates. They are mapped to
``embed_dim`` by a fixed seeded projection with orthonormal rows or columns
and then l2-normalized.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import dsp


@dataclass(frozen=True)
class EmbedConfig:
    embed_dim: int = 512
    frontend: dsp.FrontendConfig = field(default_factory=dsp.FrontendConfig.toy)
    f0_bins: int = 16
    f0_min: float = 65.0
    f0_max: float = 400.0
    envelope_weight: float = 0.5
    pitch_weight: float = 1.0
    projection_seed: int = 1234
    min_duration_s: float = 0.5

    @classmethod
    def toy(cls, **overrides) -> "EmbedConfig":
        return cls(**{"embed_dim": 32, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SpeakerEmbedding:
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.vector.size


@lru_cache(maxsize=8)
def _projection(embed_dim: int, feat_dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((max(embed_dim, feat_dim), min(embed_dim, feat_dim)))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    proj = q if embed_dim >= feat_dim else q.T
    proj.setflags(write=False)
    return proj  # (embed_dim, feat_dim)


def envelope_features(logmel: np.ndarray) -> np.ndarray:
    """Mean log-mel over active frames, centered across bands (removes overall gain)."""
    frame_peak = logmel.max(axis=1)
    active = frame_peak >= frame_peak.max() - 4.0
    ltas = logmel[active].mean(axis=0)
    ltas = ltas - ltas.mean()
    return ltas / max(np.linalg.norm(ltas), 1e-12)


def estimate_f0(waveform, sample_rate: int = 16000, frame: int = 640, hop: int = 160,
                f0_min: float = 65.0, f0_max: float = 400.0,
                voicing: float = 0.45) -> np.ndarray:
    """Autocorrelation pitch per frame; NaN where a frame is quiet or unvoiced."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.size < frame:
        return np.full(0, np.nan)
    frames = sliding_window_view(x, frame)[::hop]
    frames = frames - frames.mean(axis=1, keepdims=True)
    e = (frames * frames).sum(axis=1)
    nfft = 1 << int(np.ceil(np.log2(2 * frame)))
    spec = np.fft.rfft(frames * dsp.hann(frame), n=nfft, axis=1)
    ac = np.fft.irfft(np.abs(spec) ** 2, n=nfft, axis=1)
    lo, hi = int(sample_rate / f0_max), int(np.ceil(sample_rate / f0_min))
    r0 = np.maximum(ac[:, 0], 1e-20)
    seg = ac[:, lo:hi + 1] / r0[:, None]
    lag = np.argmax(seg, axis=1)
    peak = seg[np.arange(len(seg)), lag]
    # parabolic refinement around the peak
    left = seg[np.arange(len(seg)), np.clip(lag - 1, 0, seg.shape[1] - 1)]
    right = seg[np.arange(len(seg)), np.clip(lag + 1, 0, seg.shape[1] - 1)]
    denom = left - 2 * peak + right
    shift = np.where(np.abs(denom) > 1e-12, 0.5 * (left - right) / denom, 0.0)
    f0 = sample_rate / (lo + lag + np.clip(shift, -0.5, 0.5))
    ok = (peak >= voicing) & (e >= e.max() * 1e-3)
    return np.where(ok, f0, np.nan)


def pitch_histogram(f0: np.ndarray, bins: int, f0_min: float, f0_max: float) -> np.ndarray:
    """Soft (linearly interpolated) histogram over log-spaced pitch bins, unit norm."""
    f0 = f0[np.isfinite(f0)]
    hist = np.zeros(bins)
    if f0.size == 0:
        return hist
    pos = (np.log(np.clip(f0, f0_min, f0_max)) - np.log(f0_min)) / np.log(f0_max / f0_min)
    pos = pos * (bins - 1)
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    np.add.at(hist, lo, 1.0 - frac)
    np.add.at(hist, np.minimum(lo + 1, bins - 1), frac)
    return hist / np.linalg.norm(hist)


def _finish(feat: np.ndarray, config: EmbedConfig) -> SpeakerEmbedding:
    proj = _projection(config.embed_dim, feat.size, config.projection_seed)
    v = proj @ feat
    n = np.linalg.norm(v)
    if n == 0:
        v = np.zeros(config.embed_dim)
        v[0] = 1.0
        return SpeakerEmbedding(v)
    return SpeakerEmbedding(v / n)


def embed(reference, config: EmbedConfig = EmbedConfig()) -> SpeakerEmbedding:
    """Unit-norm embedding of a reference waveform."""
    x = np.asarray(reference, dtype=np.float64)
    sr = config.frontend.sample_rate
    if x.size < config.min_duration_s * sr:
        raise ValueError(f"reference of {x.size / sr:.3f} s is shorter than "
                         f"{config.min_duration_s} s")
    env = envelope_features(dsp.log_mel(x, config.frontend).frames)
    f0 = estimate_f0(x, sr, f0_min=config.f0_min, f0_max=config.f0_max)
    hist = pitch_histogram(f0, config.f0_bins, config.f0_min, config.f0_max)
    feat = np.concatenate([config.envelope_weight * env, config.pitch_weight * hist])
    return _finish(feat, config)


def embed_mel(spec, config: EmbedConfig = EmbedConfig()) -> SpeakerEmbedding:
    """Envelope-only embedding of a log-mel matrix (no waveform, so no pitch branch)."""
    env = envelope_features(dsp.as_frames(spec))
    feat = np.concatenate([config.envelope_weight * env, np.zeros(config.f0_bins)])
    return _finish(feat, config)


def cosine_similarity(a, b) -> float:
    va = a.vector if isinstance(a, SpeakerEmbedding) else np.asarray(a, dtype=np.float64)
    vb = b.vector if isinstance(b, SpeakerEmbedding) else np.asarray(b, dtype=np.float64)
    c = float(np.dot(va, vb) / max(np.linalg.norm(va) * np.linalg.norm(vb), 1e-300))
    return min(1.0, max(-1.0, c))
