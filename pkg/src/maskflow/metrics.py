"""Mel-domain quality metrics and real-time-factor timing.

These stand in for word error rate, which needs a recognizer. They are
relative quality indicators on synthetic data and are not comparable to WER.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dsp
from . import flow as fl
from . import speaker as spk


def mel_metrics(estimate, target) -> tuple[float, float]:
    """``(mel_mse, lsd)``: mean squared log-mel error and mean per-frame RMS difference."""
    a = np.asarray(dsp.as_frames(estimate), dtype=np.float64)
    b = np.asarray(dsp.as_frames(target), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mel_metrics: shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    mse = float(np.mean(diff ** 2))
    lsd = float(np.mean(np.sqrt(np.mean(diff ** 2, axis=-1))))
    return mse, lsd


def speaker_cosine(estimate, target, config: spk.EmbedConfig = spk.EmbedConfig.toy()) -> float:
    """Cosine between envelope embeddings of two log-mel matrices."""
    return spk.cosine_similarity(spk.embed_mel(estimate, config), spk.embed_mel(target, config))


@dataclass
class EvalReport:
    items: list[dict] = field(default_factory=list)

    def add(self, item_id: str, estimate, target, rtf: float | None = None,
            embed_cfg: spk.EmbedConfig = spk.EmbedConfig.toy()) -> dict:
        mse, lsd = mel_metrics(estimate, target)
        row = {"id": item_id, "mel_mse": mse, "log_spectral_distance": lsd,
               "speaker_cosine": speaker_cosine(estimate, target, embed_cfg), "rtf": rtf}
        self.items.append(row)
        return row

    @property
    def aggregate(self) -> dict:
        out = {"n_items": len(self.items)}
        for key in ("mel_mse", "log_spectral_distance", "speaker_cosine", "rtf"):
            vals = [r[key] for r in self.items if r[key] is not None]
            out[key] = float(np.mean(vals)) if vals else None
        return out

    def to_dict(self) -> dict:
        return {"items": self.items, "aggregate": self.aggregate}


@dataclass
class RTFStats:
    median: float
    p90: float
    samples: list[float]
    audio_seconds: float
    steps: int | None
    mode: str

    def to_dict(self) -> dict:
        return asdict(self)


def bench_rtf(x, d, mask_model, flow_model, steps: int | None, repeats: int = 10,
              warmup: int = 3, prior: fl.FlowPrior = fl.FlowPrior("masked"),
              audio_seconds: float | None = None) -> RTFStats:
    """Time model inference only (features are precomputed), batch size 1.

    ``flow_model=None`` or ``steps=None`` times the mask stage alone. RTF is
    processing time divided by audio duration.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    frames = dsp.as_frames(x)
    if audio_seconds is None:
        audio_seconds = dsp.MelSpectrogram(frames, getattr(x, "config", dsp.FrontendConfig())).duration
    mask_only = flow_model is None or steps is None
    if mask_only:
        if mask_model is None:
            raise ValueError("nothing to time: no mask and no flow model")

        def run():
            fl.mask_stage(frames, d, mask_model)
    else:
        def run():
            fl.tse_infer(frames, d, mask_model, flow_model, prior, steps)
    for _ in range(warmup):
        run()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        samples.append((time.perf_counter() - t0) / audio_seconds)
    return RTFStats(float(np.median(samples)), float(np.percentile(samples, 90)), samples,
                    float(audio_seconds), None if mask_only else int(steps),
                    "mask" if mask_only else f"mask+flow({steps})")
