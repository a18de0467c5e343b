"""Velocity network: a frame-token transformer with rotary attention and AdaLN-Zero.

Every frame is one token. The input projection sees ``[x_t | cond | d]`` per
frame, and the speaker vector reaches each block a second time through the
conditioning vector ``c = MLP(t) + W_d d``. All modulation projections and the
output projection start at zero, so a fresh network predicts a zero velocity
and every block is an exact identity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import dsp
from . import tensor as T
from .layers import Module, broadcast_rows, gelu, linear, linear_init, silu
from .tensor import Tensor

TIME_FREQS = 128
TIME_SCALE = 1000.0
ROPE_BASE = 10000.0


@dataclass(frozen=True)
class DiTConfig:
    blocks: int = 9
    hidden: int = 768
    heads: int = 8
    mel_bands: int = 80
    embed_dim: int = 512
    mlp_ratio: float = 1.5
    init_seed: int = 0

    def __post_init__(self):
        for name in ("blocks", "hidden", "heads", "mel_bands", "embed_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"DiTConfig.{name} must be positive")
        if self.hidden % self.heads:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.head_dim % 2:
            raise ValueError(f"head_dim ({self.head_dim}) must be even for rotary pairs")
        if self.mlp_width < 1:
            raise ValueError("mlp_ratio too small")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def mlp_width(self) -> int:
        return int(round(self.hidden * self.mlp_ratio))

    @classmethod
    def toy(cls, **overrides) -> "DiTConfig":
        return cls(**{"blocks": 2, "hidden": 64, "heads": 4, "mel_bands": 40,
                      "embed_dim": 32, "mlp_ratio": 4.0, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: DiTConfig) -> dict[str, tuple[int, ...]]:
    h, f = cfg.hidden, cfg.mel_bands
    shapes: dict[str, tuple[int, ...]] = {
        "in.w": (2 * f + cfg.embed_dim, h),
        "in.b": (h,),
        "time.w1": (2 * TIME_FREQS, h),
        "time.b1": (h,),
        "time.w2": (h, h),
        "time.b2": (h,),
        "spk.w": (cfg.embed_dim, h),
    }
    for i in range(cfg.blocks):
        p = f"block{i}"
        shapes[f"{p}.mod.w"] = (h, 6 * h)
        shapes[f"{p}.mod.b"] = (6 * h,)
        shapes[f"{p}.qkv.w"] = (h, 3 * h)
        shapes[f"{p}.qkv.b"] = (3 * h,)
        shapes[f"{p}.proj.w"] = (h, h)
        shapes[f"{p}.proj.b"] = (h,)
        shapes[f"{p}.fc1.w"] = (h, cfg.mlp_width)
        shapes[f"{p}.fc1.b"] = (cfg.mlp_width,)
        shapes[f"{p}.fc2.w"] = (cfg.mlp_width, h)
        shapes[f"{p}.fc2.b"] = (h,)
    shapes["final.mod.w"] = (h, 2 * h)
    shapes["final.mod.b"] = (2 * h,)
    shapes["out.w"] = (h, f)
    shapes["out.b"] = (f,)
    return shapes


def count_params(cfg: DiTConfig) -> int:
    """Trainable parameter count, computed from shapes alone."""
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def _zero_init(name: str) -> bool:
    return ".mod." in name or name.startswith("out.")


def sinusoid(t) -> np.ndarray:
    """``(batch,)`` times in [0, 1] -> ``(batch, 2 * TIME_FREQS)`` cos/sin features."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if t.ndim != 1:
        raise ValueError(f"t must be a scalar or 1-D, got shape {t.shape}")
    if not np.all((t >= 0.0) & (t <= 1.0)):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    freqs = np.exp(-np.log(10000.0) * np.arange(TIME_FREQS) / TIME_FREQS)
    arg = TIME_SCALE * t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(arg), np.sin(arg)], axis=1)


def rope_tables(steps: int, head_dim: int, positions=None) -> tuple[np.ndarray, np.ndarray]:
    """Cos/sin tables of shape ``(steps, head_dim // 2)``."""
    if head_dim % 2:
        raise ValueError(f"head_dim ({head_dim}) must be even")
    pos = np.arange(steps, dtype=np.float64) if positions is None else np.asarray(positions, np.float64)
    if pos.shape != (steps,):
        raise ValueError(f"positions must have shape ({steps},), got {pos.shape}")
    inv = ROPE_BASE ** (-np.arange(0, head_dim, 2) / head_dim)
    ang = pos[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def rope_rotate(x, positions=None):
    """Rotate pairs ``(j, j + head_dim/2)`` of a ``(..., frames, heads, head_dim)`` array.

    Pair ``j`` at position ``p`` turns by ``p * 10000 ** (-2j / head_dim)``.
    Accepts a numpy array or a Tensor (differentiable).
    """
    is_tensor = isinstance(x, Tensor)
    shape = x.shape
    if len(shape) < 3:
        raise ValueError(f"rope_rotate expects (..., frames, heads, head_dim), got {shape}")
    steps, hd = shape[-3], shape[-1]
    cos, sin = rope_tables(steps, hd, positions)
    half = hd // 2
    cos = np.broadcast_to(cos[:, None, :], shape[:-1] + (half,))
    sin = np.broadcast_to(sin[:, None, :], shape[:-1] + (half,))
    if not is_tensor:
        x1, x2 = x[..., :half], x[..., half:]
        return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)
    lead = (slice(None),) * (len(shape) - 1)
    x1 = T.getitem(x, lead + (slice(0, half),))
    x2 = T.getitem(x, lead + (slice(half, hd),))
    c, s = Tensor(cos), Tensor(sin)
    return T.concat([T.sub(T.mul(x1, c), T.mul(x2, s)),
                     T.add(T.mul(x2, c), T.mul(x1, s))], axis=-1)


class DiT(Module):
    def __init__(self, config: DiTConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        for name, shape in param_shapes(config).items():
            if _zero_init(name) or name.endswith(".b") or name.endswith((".b1", ".b2")):
                value = np.zeros(shape)
            elif name.startswith("time."):
                value = rng.normal(0.0, 0.02, size=shape)
            else:
                value = linear_init(rng, *shape)
            self.add_param(name, value)

    def condition(self, t, d) -> Tensor:
        """``c = MLP(sinusoid(t)) + W_d d`` for a batch: ``(batch, hidden)``."""
        p = self.params
        d = d if isinstance(d, Tensor) else Tensor(np.atleast_2d(d))
        emb = Tensor(sinusoid(t))
        if emb.shape[0] != d.shape[0]:
            emb = Tensor(np.repeat(emb.data, d.shape[0], axis=0)) if emb.shape[0] == 1 else emb
        tm = linear(silu(linear(emb, p["time.w1"], p["time.b1"])), p["time.w2"], p["time.b2"])
        return T.add(tm, T.matmul(d, p["spk.w"]))

    def block(self, h: Tensor, c: Tensor, idx: int, positions=None) -> Tensor:
        cfg = self.config
        p = self.params
        pre = f"block{idx}"
        bsz, steps, hid = h.shape
        nh, hd = cfg.heads, cfg.head_dim
        mod = linear(silu(c), p[f"{pre}.mod.w"], p[f"{pre}.mod.b"])
        g_att, b_att, a_att, g_mlp, b_mlp, a_mlp = (
            broadcast_rows(T.getitem(mod, (slice(None), slice(k * hid, (k + 1) * hid))), steps)
            for k in range(6))

        hn = T.layer_norm(h)
        x = T.add(T.add(hn, T.mul(hn, g_att)), b_att)
        qkv = T.reshape(linear(x, p[f"{pre}.qkv.w"], p[f"{pre}.qkv.b"]), (bsz, steps, 3, nh, hd))
        q = rope_rotate(T.getitem(qkv, (slice(None), slice(None), 0)), positions)
        k = rope_rotate(T.getitem(qkv, (slice(None), slice(None), 1)), positions)
        v = T.getitem(qkv, (slice(None), slice(None), 2))
        q, k, v = (T.transpose(z, (0, 2, 1, 3)) for z in (q, k, v))
        att = T.softmax(T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd)))
        y = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (bsz, steps, hid))
        y = linear(y, p[f"{pre}.proj.w"], p[f"{pre}.proj.b"])
        h = T.add(h, T.mul(a_att, y))

        hn = T.layer_norm(h)
        x = T.add(T.add(hn, T.mul(hn, g_mlp)), b_mlp)
        y = linear(gelu(linear(x, p[f"{pre}.fc1.w"], p[f"{pre}.fc1.b"])),
                   p[f"{pre}.fc2.w"], p[f"{pre}.fc2.b"])
        return T.add(h, T.mul(a_mlp, y))

    def embed_input(self, x_t, cond, d) -> Tensor:
        p = self.params
        steps = x_t.shape[1]
        inp = T.concat([x_t, cond, broadcast_rows(d, steps)], axis=-1)
        return linear(inp, p["in.w"], p["in.b"])

    def forward(self, x_t, cond, t, d, positions=None) -> Tensor:
        """Batched velocity: ``x_t``, ``cond`` are (batch, time, mel); ``t`` (batch,); ``d`` (batch, embed)."""
        cfg = self.config
        p = self.params
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t))
        cond = cond if isinstance(cond, Tensor) else Tensor(np.asarray(cond))
        d = d if isinstance(d, Tensor) else Tensor(np.asarray(d))
        if x_t.ndim != 3 or x_t.shape[2] != cfg.mel_bands:
            raise ValueError(f"flow net expects (batch, time, {cfg.mel_bands}) input, got {x_t.shape}")
        if cond.shape != x_t.shape:
            raise ValueError(f"conditioning shape {cond.shape} differs from x_t shape {x_t.shape}")
        if d.shape != (x_t.shape[0], cfg.embed_dim):
            raise ValueError(f"speaker embedding shape {d.shape} does not fit "
                             f"(batch={x_t.shape[0]}, embed_dim={cfg.embed_dim})")
        steps = x_t.shape[1]
        c = self.condition(t, d)
        h = self.embed_input(x_t, cond, d)
        for i in range(cfg.blocks):
            h = self.block(h, c, i, positions)
        mod = linear(silu(c), p["final.mod.w"], p["final.mod.b"])
        hid = cfg.hidden
        gam = broadcast_rows(T.getitem(mod, (slice(None), slice(0, hid))), steps)
        bet = broadcast_rows(T.getitem(mod, (slice(None), slice(hid, 2 * hid))), steps)
        hn = T.layer_norm(h)
        return linear(T.add(T.add(hn, T.mul(hn, gam)), bet), p["out.w"], p["out.b"])


def timestep_embed(t, model: DiT) -> np.ndarray:
    """MLP(sinusoid(t)) for a scalar ``t``: a ``(hidden,)`` vector."""
    p = model.params
    with T.no_grad():
        emb = Tensor(sinusoid(t))
        out = linear(silu(linear(emb, p["time.w1"], p["time.b1"])), p["time.w2"], p["time.b2"])
    return out.data[0]


def adaln_condition(t, d, model: DiT) -> np.ndarray:
    vec = d.vector if hasattr(d, "vector") else np.asarray(d)
    with T.no_grad():
        return model.condition(t, vec[None]).data[0]


def dit_block(h, c, model: DiT, block_idx: int, positions=None) -> np.ndarray:
    """Apply one block to a single ``(frames, hidden)`` matrix under conditioning ``c``."""
    with T.no_grad():
        out = model.block(Tensor(np.asarray(h)[None]), Tensor(np.asarray(c)[None]),
                          block_idx, positions)
    return out.data[0]


def velocity_forward(x_t, x_enh, t, d, model: DiT, positions=None) -> np.ndarray:
    """Single-item velocity, ``(time, mel)``; ``x_enh`` is the per-frame conditioning input."""
    a, b = dsp.as_frames(x_t), dsp.as_frames(x_enh)
    if a.shape != b.shape:
        raise ValueError(f"velocity_forward: shape mismatch {a.shape} vs {b.shape}")
    vec = d.vector if hasattr(d, "vector") else np.asarray(d)
    with T.no_grad():
        v = model.forward(a[None], b[None], np.array([t], dtype=np.float64), vec[None], positions)
    return v.data[0]
