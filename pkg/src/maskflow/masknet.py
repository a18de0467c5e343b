"""Stage-1 soft-mask network: conv front end, speaker-conditioned BiLSTM, sigmoid mask."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import dsp
from . import tensor as T
from .layers import Module, broadcast_rows, linear, linear_init, mse
from .tensor import Tensor


@dataclass(frozen=True)
class MaskNetConfig:
    mel_bands: int = 80
    embed_dim: int = 512
    conv_layers: int = 4
    conv_channels: int = 8
    lstm_layers: int = 2
    lstm_hidden: int = 416
    leaky_slope: float = 0.01
    init_seed: int = 0
    mask_bias_init: float = 2.0

    def __post_init__(self):
        for name in ("mel_bands", "embed_dim", "conv_layers", "conv_channels",
                     "lstm_layers", "lstm_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"MaskNetConfig.{name} must be positive")

    @classmethod
    def toy(cls, **overrides) -> "MaskNetConfig":
        return cls(**{"mel_bands": 40, "embed_dim": 32, "lstm_hidden": 32, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: MaskNetConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 1
    for i in range(cfg.conv_layers):
        shapes[f"conv{i}.w"] = (cfg.conv_channels, cin, 3, 3)
        shapes[f"bn{i}.gamma"] = (cfg.conv_channels,)
        shapes[f"bn{i}.beta"] = (cfg.conv_channels,)
        cin = cfg.conv_channels
    width = cfg.conv_channels * cfg.mel_bands
    hid = cfg.lstm_hidden
    for layer in range(cfg.lstm_layers):
        nin = width + cfg.embed_dim
        for direction in ("fwd", "bwd"):
            shapes[f"lstm{layer}.{direction}.w_ih"] = (nin, 4 * hid)
            shapes[f"lstm{layer}.{direction}.w_hh"] = (hid, 4 * hid)
            shapes[f"lstm{layer}.{direction}.b"] = (4 * hid,)
        shapes[f"res{layer}.w"] = (nin, 2 * hid)
        shapes[f"res{layer}.b"] = (2 * hid,)
        shapes[f"ln{layer}.gamma"] = (2 * hid,)
        shapes[f"ln{layer}.beta"] = (2 * hid,)
        width = 2 * hid
    shapes["out.w"] = (width, cfg.mel_bands)
    shapes["out.b"] = (cfg.mel_bands,)
    return shapes


def count_params(cfg: MaskNetConfig) -> int:
    """Trainable parameter count, computed from shapes alone."""
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


class MaskNet(Module):
    """Predicts a (time, mel) mask in (0, 1) from an l2-normalized log-mel and a speaker vector.

    Residual connections span each recurrent layer's full input (features
    concatenated with the speaker vector), projected to the layer's output
    width.
    """

    def __init__(self, config: MaskNetConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        hid = config.lstm_hidden
        for name, shape in param_shapes(config).items():
            if name.startswith("conv"):
                fan_in = shape[1] * 9
                value = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            elif name.endswith(".gamma"):
                value = np.ones(shape)
            elif name.endswith(".beta"):
                value = np.zeros(shape)
            elif ".w_" in name:
                value = rng.uniform(-1, 1, size=shape) / np.sqrt(hid)
            elif name.startswith("lstm") and name.endswith(".b"):
                value = np.zeros(shape)
                value[hid:2 * hid] = 1.0  # forget gate
            elif name.endswith(".w"):
                value = linear_init(rng, *shape)
                if name == "out.w":
                    value *= 0.1
            else:
                value = np.zeros(shape)
            if name == "out.b":
                value = np.full(shape, config.mask_bias_init)
            self.add_param(name, value)
        dt = T.get_default_dtype()
        for i in range(config.conv_layers):
            self.buffers[f"bn{i}.running_mean"] = np.zeros(config.conv_channels, dtype=dt)
            self.buffers[f"bn{i}.running_var"] = np.ones(config.conv_channels, dtype=dt)

    def forward(self, x_norm, d, training: bool = False) -> Tensor:
        """``x_norm``: (batch, time, mel); ``d``: (batch, embed_dim). Returns the mask tensor."""
        cfg = self.config
        p = self.params
        x = x_norm if isinstance(x_norm, Tensor) else Tensor(np.asarray(x_norm))
        d = d if isinstance(d, Tensor) else Tensor(np.asarray(d))
        if x.ndim != 3 or x.shape[2] != cfg.mel_bands:
            raise ValueError(f"mask net expects (batch, time, {cfg.mel_bands}) input, got {x.shape}")
        if d.shape != (x.shape[0], cfg.embed_dim):
            raise ValueError(f"speaker embedding shape {d.shape} does not fit "
                             f"(batch={x.shape[0]}, embed_dim={cfg.embed_dim})")
        bsz, steps, bands = x.shape
        h = T.reshape(x, (bsz, 1, steps, bands))
        for i in range(cfg.conv_layers):
            h = T.conv2d(h, p[f"conv{i}.w"], None, padding=1)
            h = T.batch_norm(h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"],
                             self.buffers[f"bn{i}.running_mean"],
                             self.buffers[f"bn{i}.running_var"], training)
            h = T.leaky_relu(h, cfg.leaky_slope)
        # (B, C, T, F) -> (B, T, C*F): time stays the sequence axis
        h = T.reshape(T.transpose(h, (0, 2, 1, 3)), (bsz, steps, cfg.conv_channels * bands))
        d_rows = broadcast_rows(d, steps)
        for layer in range(cfg.lstm_layers):
            inp = T.concat([h, d_rows], axis=-1)
            pre = f"lstm{layer}"
            fwd = T.lstm(inp, p[f"{pre}.fwd.w_ih"], p[f"{pre}.fwd.w_hh"], p[f"{pre}.fwd.b"])
            bwd = T.lstm(inp, p[f"{pre}.bwd.w_ih"], p[f"{pre}.bwd.w_hh"], p[f"{pre}.bwd.b"],
                         reverse=True)
            rec = T.concat([fwd, bwd], axis=-1)
            res = linear(inp, p[f"res{layer}.w"], p[f"res{layer}.b"])
            h = T.layer_norm(T.add(rec, res), p[f"ln{layer}.gamma"], p[f"ln{layer}.beta"])
        return T.sigmoid(linear(h, p["out.w"], p["out.b"]))


def mask_forward(x_norm, d, model: MaskNet, mode: str = "eval") -> np.ndarray:
    """Functional wrapper for a single item: (time, mel) in, (time, mel) mask out."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    frames = dsp.as_frames(x_norm)
    vec = d.vector if hasattr(d, "vector") else np.asarray(d)
    with T.no_grad():
        m = model.forward(frames[None], vec[None], training=mode == "train")
    return m.data[0]


def apply_mask(x, m, log_floor: float = 1e-10):
    """Mask the log-mel ``x`` elementwise, measuring log magnitude from the floor.

    Computes ``x - (x - floor) * (1 - m)``, i.e. ``floor + (x - floor) * m``,
    so that ``m = 1`` is the identity, ``m = 0`` gives the silent floor and any
    ``m`` in [0, 1] can only lower a bin. Works on arrays, MelSpectrograms and
    tensors (the latter for training).
    """
    floor = float(np.log10(log_floor))
    if isinstance(m, Tensor) or isinstance(x, Tensor):
        xd = x.data if isinstance(x, Tensor) else dsp.as_frames(x)
        if xd.shape != m.shape:
            raise ValueError(f"apply_mask: shape mismatch {xd.shape} vs {m.shape}")
        ones = Tensor(np.ones(m.shape))
        return T.sub(Tensor(xd), T.mul(Tensor(xd - floor), T.sub(ones, m)))
    frames = dsp.as_frames(x)
    md = dsp.as_frames(m)
    if frames.shape != md.shape:
        raise ValueError(f"apply_mask: shape mismatch {frames.shape} vs {md.shape}")
    out = frames - (frames - floor) * (1.0 - md)
    if isinstance(x, dsp.MelSpectrogram):
        return x.with_frames(out)
    return out


def mask_loss(x_enh, y) -> float | Tensor:
    """Mean squared error over all bins."""
    if isinstance(x_enh, Tensor):
        return mse(x_enh, Tensor(dsp.as_frames(y)))
    a, b = dsp.as_frames(x_enh), dsp.as_frames(y)
    if a.shape != b.shape:
        raise ValueError(f"mask_loss: shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))
