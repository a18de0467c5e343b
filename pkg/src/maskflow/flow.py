"""Straight-path flow matching: trajectory samples, loss, Euler sampling, end-to-end inference."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import dsp
from . import masknet as mn
from . import tensor as T
from .dit import DiT
from .layers import mse
from .tensor import Tensor

PRIOR_KINDS = ("gaussian", "mixture", "masked")


@dataclass(frozen=True)
class FlowPrior:
    """Where integration starts. ``sigma`` adds path noise during training (0 = straight path)."""

    kind: str = "masked"
    noise_scale: float = 1.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ValueError(f"unknown prior {self.kind!r}; expected one of {PRIOR_KINDS}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    @property
    def needs_mask(self) -> bool:
        return self.kind == "masked"


@dataclass
class FlowSample:
    x0: np.ndarray
    x1: np.ndarray
    t: float
    x_t: np.ndarray
    u: np.ndarray


def draw_prior(prior: FlowPrior, x, x_enh, seed: int) -> np.ndarray:
    frames = dsp.as_frames(x)
    if prior.kind == "gaussian":
        rng = np.random.default_rng(seed)
        return prior.noise_scale * rng.standard_normal(frames.shape)
    if prior.kind == "mixture":
        return np.array(frames, dtype=np.float64)
    if x_enh is None:
        raise ValueError("masked prior needs the masked spectrogram X_enh")
    return np.array(dsp.as_frames(x_enh), dtype=np.float64)


def conditioning_input(prior: FlowPrior, x, x_enh) -> np.ndarray:
    """Per-frame conditioning matrix: X_enh for the masked prior, the mixture otherwise."""
    if prior.kind == "masked":
        if x_enh is None:
            raise ValueError("masked prior needs the masked spectrogram X_enh")
        return dsp.as_frames(x_enh)
    return dsp.as_frames(x)


def make_trajectory_sample(prior: FlowPrior, x, x_enh, y, t: float, seed: int = 0) -> FlowSample:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    x1 = np.asarray(dsp.as_frames(y), dtype=np.float64)
    if dsp.as_frames(x).shape != x1.shape:
        raise ValueError(f"shape mismatch: mixture {dsp.as_frames(x).shape} vs target {x1.shape}")
    if x_enh is not None and dsp.as_frames(x_enh).shape != x1.shape:
        raise ValueError(f"shape mismatch: X_enh {dsp.as_frames(x_enh).shape} vs target {x1.shape}")
    x0 = draw_prior(prior, x, x_enh, seed)
    x_t = (1.0 - t) * x0 + t * x1
    if prior.sigma > 0 and 0.0 < t < 1.0:
        rng = np.random.default_rng([seed, 1])
        x_t = x_t + prior.sigma * rng.standard_normal(x_t.shape)
    return FlowSample(x0=x0, x1=x1, t=t, x_t=x_t, u=x1 - x0)


def flow_loss(v_pred, sample_or_u) -> float | Tensor:
    """Mean squared error between a predicted velocity and the target ``x1 - x0``."""
    u = sample_or_u.u if isinstance(sample_or_u, FlowSample) else sample_or_u
    if isinstance(v_pred, Tensor):
        u = u if isinstance(u, Tensor) else Tensor(np.asarray(u))
        if v_pred.shape != u.shape:
            raise ValueError(f"flow_loss: shape mismatch {v_pred.shape} vs {u.shape}")
        return mse(v_pred, u)
    v, u = np.asarray(v_pred), np.asarray(u)
    if v.shape != u.shape:
        raise ValueError(f"flow_loss: shape mismatch {v.shape} vs {u.shape}")
    return float(np.mean((v - u) ** 2))


def euler_integrate(x0, steps: int, velocity_fn: Callable, d=None) -> list[np.ndarray]:
    """Integrate from t=0 to t=1 on the grid ``k / steps``; returns all ``steps + 1`` states."""
    if int(steps) != steps or steps < 1:
        raise ValueError(f"steps must be a positive integer, got {steps}")
    x = np.asarray(dsp.as_frames(x0), dtype=np.float64)
    states = [x]
    dt = 1.0 / steps
    for k in range(steps):
        v = np.asarray(velocity_fn(x, k / steps, d))
        x = x + dt * v
        if not np.isfinite(x).all():
            raise FloatingPointError(f"Euler step {k + 1} of {steps} produced a non-finite state")
        states.append(x)
    return states


def mask_stage(x, d, mask_model: mn.MaskNet) -> np.ndarray:
    """Normalize, predict the mask, and apply it to the raw log-mel: returns X_enh."""
    frames = dsp.as_frames(x)
    xn, _ = dsp.l2_normalize(frames)
    m = mn.mask_forward(xn.frames, d, mask_model)
    return mn.apply_mask(frames, m)


def flow_velocity_fn(flow_model: DiT, cond: np.ndarray) -> Callable:
    def fn(x, t, d):
        vec = d.vector if hasattr(d, "vector") else np.asarray(d)
        with T.no_grad():
            v = flow_model.forward(x[None], cond[None], np.array([t]), vec[None])
        return v.data[0]

    return fn


def tse_infer(x, d, mask_model: mn.MaskNet | None, flow_model: DiT | None,
              prior: FlowPrior = FlowPrior(), steps: int = 1, seed: int = 0,
              return_trajectory: bool = False):
    """Mixture log-mel and speaker vector in, estimated target log-mel out.

    With ``return_trajectory`` the result is ``(estimate, states, x_enh)``.
    """
    frames = np.asarray(dsp.as_frames(x), dtype=np.float64)
    x_enh = None
    if prior.needs_mask:
        if mask_model is None:
            raise ValueError("masked prior requires a mask checkpoint")
        x_enh = mask_stage(frames, d, mask_model)
    if flow_model is None:
        if x_enh is None:
            raise ValueError("no flow checkpoint and no mask stage to run")
        states = [x_enh]
    else:
        x0 = draw_prior(prior, frames, x_enh, seed)
        cond = conditioning_input(prior, frames, x_enh)
        states = euler_integrate(x0, steps, flow_velocity_fn(flow_model, cond), d)
    cfg = x.config if isinstance(x, dsp.MelSpectrogram) else dsp.FrontendConfig(mel_bands=frames.shape[1])
    out = dsp.MelSpectrogram(states[-1], cfg)
    if return_trajectory:
        return out, states, x_enh
    return out
