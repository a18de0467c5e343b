"""Two-stage training: mask network first, then the velocity network on top of the frozen mask.

Optimization is AdamW with decoupled weight decay and a linear warmup, plus an
exponential moving average of the weights that is used at inference time.
Every run is a pure function of its :class:`TrainConfig` and the manifest, so
repeating a run reproduces its checkpoint byte-for-byte.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import dsp
from . import masknet as mn
from . import mixture as mix
from . import speaker as spk
from . import tensor as T
from .dit import DiT, DiTConfig
from .flow import FlowPrior
from .layers import Module, mse
from .tensor import Tensor

STAGES = ("mask", "flow")


class TrainingDiverged(RuntimeError):
    """A non-finite loss or gradient stopped training; the last saved checkpoint is intact."""


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``weight_decay`` and the AdamW betas/epsilon are conventional choices, not
    tuned values. ``scale`` picks the toy or full-size network and front end;
    ``model`` holds overrides for the network config.
    """

    stage: str = "mask"
    lr: float = 2e-4
    warmup_steps: int = 10000
    batch_size: int = 10
    grad_accum: int = 2
    ema_decay: float = 0.9999
    max_steps: int = 100000
    seed: int = 0
    chunk_seconds: float = 10.0
    weight_decay: float = 0.01
    prior: str = "masked"
    scale: str = "full"
    n_references: int = 4
    holdout: float = 0.1
    eval_every: int = 0
    save_every: int = 1000
    mask_checkpoint: str | None = None
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.grad_accum < 1 or self.batch_size < 1:
            raise ValueError("grad_accum and batch_size must be >= 1")
        if self.max_steps < 0 or self.warmup_steps < 0:
            raise ValueError("max_steps and warmup_steps must be >= 0")
        if self.scale not in ("toy", "full"):
            raise ValueError(f"scale must be 'toy' or 'full', got {self.scale!r}")
        if self.n_references < 1:
            raise ValueError("n_references must be >= 1")
        FlowPrior(self.prior)

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        base = {"lr": 1e-3, "warmup_steps": 200, "batch_size": 4, "grad_accum": 1,
                "ema_decay": 0.99, "chunk_seconds": 2.0, "scale": "toy", "max_steps": 1000,
                "save_every": 500}
        return cls(**{**base, **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# optimizer, schedule, EMA


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: list[np.ndarray], **kw) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState,
               lr_t: float, weight_decay: float) -> None:
    """In-place AdamW update: ``p -= lr_t * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"grad {i} has shape {g.shape}, param has {params[i].shape}")
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for parameter {i}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + weight_decay * p
        p -= lr_t * update


def lr_schedule(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear ramp from 0 at step 0 to ``base_lr`` at ``warmup_steps``, then constant."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return float(base_lr)
    return float(base_lr) * step / warmup_steps


def ema_update(ema_params: list[np.ndarray], params: list[np.ndarray], decay: float) -> None:
    for e, p in zip(ema_params, params):
        e *= decay
        e += (1.0 - decay) * p


# ---------------------------------------------------------------------------
# models and checkpoints


def frontend_for(scale: str) -> dsp.FrontendConfig:
    return dsp.FrontendConfig.toy() if scale == "toy" else dsp.FrontendConfig()


def embed_config_for(scale: str) -> spk.EmbedConfig:
    return spk.EmbedConfig.toy() if scale == "toy" else spk.EmbedConfig()


def model_config(stage: str, scale: str, overrides: dict | None = None):
    overrides = overrides or {}
    cls = mn.MaskNetConfig if stage == "mask" else DiTConfig
    return cls.toy(**overrides) if scale == "toy" else cls(**overrides)


def build_model(stage: str, config) -> Module:
    return mn.MaskNet(config) if stage == "mask" else DiT(config)


def save_checkpoint(path, model: Module, ema: list[np.ndarray], meta: dict) -> str:
    tensors = {f"raw/{k}": v for k, v in model.state_dict().items()}
    for name, e in zip(model.params, ema):
        tensors[f"ema/param/{name}"] = e
    return ckpt.save(path, tensors, meta)


def load_model(path, use_ema: bool = True) -> tuple[Module, dict]:
    """Rebuild a network from a training checkpoint (EMA weights by default)."""
    tensors, meta = ckpt.load(path)
    stage = meta.get("stage")
    if stage not in STAGES:
        raise ckpt.CheckpointError(f"{path}: not a training checkpoint (stage={stage!r})")
    cls = mn.MaskNetConfig if stage == "mask" else DiTConfig
    model = build_model(stage, cls(**meta["model_config"]))
    state = {k[len("raw/"):]: v for k, v in tensors.items() if k.startswith("raw/")}
    if use_ema:
        for k, v in tensors.items():
            if k.startswith("ema/"):
                state[k[len("ema/"):]] = v
    model.load_state_dict(state)
    return model, meta


def init_checkpoint(path, stage: str, scale: str = "toy", overrides: dict | None = None,
                    seed: int = 0) -> str:
    """Write a freshly initialized (untrained) network in checkpoint form."""
    cfg = model_config(stage, scale, {"init_seed": seed, **(overrides or {})})
    model = build_model(stage, cfg)
    meta = {"stage": stage, "model_config": cfg.to_dict(), "scale": scale, "step": 0}
    return save_checkpoint(path, model, [p.data.copy() for p in model.parameters()], meta)


# ---------------------------------------------------------------------------
# data


@dataclass
class PreparedData:
    """Log-mel matrices for every manifest item and ``n_references`` speaker vectors per item."""

    ids: list[str]
    mixture: np.ndarray  # (items, frames, mel)
    target: np.ndarray
    refs: np.ndarray  # (items, references, embed_dim)
    frontend: dsp.FrontendConfig
    masked: np.ndarray | None = None  # (items, references, frames, mel)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "PreparedData":
        idx = np.asarray(idx, dtype=int)
        return PreparedData([self.ids[i] for i in idx], self.mixture[idx], self.target[idx],
                            self.refs[idx], self.frontend,
                            None if self.masked is None else self.masked[idx])


def alternate_reference(item: dict, k: int, duration_s: float, sample_rate: int) -> np.ndarray:
    """The ``k``-th extra utterance of the item's target speaker (k >= 1)."""
    seed = int(np.random.SeedSequence([int(item["reference_seed"]), int(k)]).generate_state(1)[0])
    speaker = mix.SyntheticSpeaker.from_id(int(item["target_speaker_id"]))
    return dsp.quantize_pcm16(mix.synth_utterance(speaker, duration_s, seed, sample_rate))


def prepare_data(manifest: dict, frontend: dsp.FrontendConfig, embed_cfg: spk.EmbedConfig,
                 n_references: int = 1) -> PreparedData:
    mixes, targets, refs, ids = [], [], [], []
    sr = frontend.sample_rate
    for item in manifest["items"]:
        x, sr_x = dsp.read_wav(item["mixture_path"])
        y, _ = dsp.read_wav(item["target_path"])
        r, _ = dsp.read_wav(item["reference_path"])
        if sr_x != sr:
            raise ValueError(f"{item['id']}: sample rate {sr_x} differs from front end {sr}")
        mixes.append(dsp.log_mel(x, frontend).frames)
        targets.append(dsp.log_mel(y, frontend).frames)
        vecs = [spk.embed(r, embed_cfg).vector]
        for k in range(1, n_references):
            alt = alternate_reference(item, k, r.size / sr, sr)
            vecs.append(spk.embed(alt, embed_cfg).vector)
        refs.append(vecs)
        ids.append(item["id"])
    if len({m.shape for m in mixes}) != 1:
        raise ValueError("manifest items must share one duration")
    return PreparedData(ids, np.stack(mixes), np.stack(targets), np.array(refs), frontend)


def masked_inputs(data: PreparedData, mask_model: mn.MaskNet, batch: int = 16) -> np.ndarray:
    """X_enh for every (item, reference) pair, computed with the frozen mask network."""
    n, k = data.refs.shape[:2]
    x = data.mixture
    norms = np.maximum(np.linalg.norm(x.reshape(n, -1), axis=1), 1e-8)
    xn = x / norms[:, None, None]
    out = np.empty((n, k) + x.shape[1:])
    with T.no_grad():
        for j in range(k):
            for s in range(0, n, batch):
                m = mask_model.forward(xn[s:s + batch], data.refs[s:s + batch, j]).data
                out[s:s + batch, j] = mn.apply_mask(x[s:s + batch], m.astype(np.float64))
    return out


def split_holdout(n: int, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Last ``ceil(fraction * n)`` items are held out (none when ``fraction`` is 0 or n < 2)."""
    n_hold = 0 if fraction <= 0 or n < 2 else min(n - 1, max(1, math.ceil(fraction * n)))
    return np.arange(n - n_hold), np.arange(n - n_hold, n)


class BatchStream:
    """Epoch-wise shuffled (item, reference) draws; the reference is re-picked every epoch."""

    def __init__(self, n_items: int, n_refs: int, rng: np.random.Generator):
        self.n_items, self.n_refs, self.rng = n_items, n_refs, rng
        self._queue: list[tuple[int, int]] = []

    def take(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        while len(self._queue) < k:
            perm = self.rng.permutation(self.n_items)
            ref = self.rng.integers(0, self.n_refs, size=self.n_items)
            self._queue.extend((int(i), int(ref[i])) for i in perm)
        got, self._queue = self._queue[:k], self._queue[k:]
        return np.array([g[0] for g in got]), np.array([g[1] for g in got])


def _crop(arrays: list[np.ndarray], frames: int, rng: np.random.Generator) -> list[np.ndarray]:
    total = arrays[0].shape[-2]
    if frames >= total:
        return arrays
    start = int(rng.integers(0, total - frames + 1))
    return [a[..., start:start + frames, :] for a in arrays]


# ---------------------------------------------------------------------------
# losses


def mask_batch_loss(model: mn.MaskNet, x: np.ndarray, y: np.ndarray, d: np.ndarray,
                    training: bool = True) -> Tensor:
    """Mean squared log-mel error of the masked mixture against the target."""
    n = x.shape[0]
    norms = np.maximum(np.linalg.norm(x.reshape(n, -1), axis=1), 1e-8)
    m = model.forward(x / norms[:, None, None], d, training=training)
    x_enh = mn.apply_mask(Tensor(x), m)
    return mse(x_enh, Tensor(y))


def flow_batch(prior: FlowPrior, x, x_enh, y, rng: np.random.Generator):
    """Draw ``t`` and the prior, and build ``(x_t, cond, t, u)`` for a batch."""
    n = y.shape[0]
    t = rng.uniform(0.0, 1.0, size=n)
    if prior.kind == "gaussian":
        x0 = prior.noise_scale * rng.standard_normal(y.shape)
        cond = x
    elif prior.kind == "mixture":
        x0, cond = x, x
    else:
        x0, cond = x_enh, x_enh
    tt = t[:, None, None]
    x_t = (1.0 - tt) * x0 + tt * y
    if prior.sigma > 0:
        x_t = x_t + prior.sigma * rng.standard_normal(y.shape)
    return x_t, cond, t, y - x0


def flow_batch_loss(model: DiT, x_t, cond, t, d, u) -> Tensor:
    v = model.forward(x_t, cond, t, d)
    return mse(v, Tensor(u))


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    checkpoint: Path
    sha256: str
    log: list[dict]
    heldout: list[tuple[int, float]]
    steps_run: int
    converged: bool
    mask_sha256: str | None = None


def has_converged(history: list[tuple[int, float]], step: int, max_steps: int) -> bool:
    """True when held-out loss improved by less than 1% over the last 20% of ``max_steps``."""
    window = 0.2 * max_steps
    if step < 2 * window or not history:
        return False
    before = [l for s, l in history if s <= step - window]
    recent = [l for s, l in history if s > step - window]
    if not before or not recent:
        return False
    best_before = min(before)
    return min(recent) > best_before * 0.99 if best_before > 0 else min(recent) >= best_before


def heldout_loss(config: TrainConfig, model: Module, data: PreparedData, prior: FlowPrior,
                 batch: int = 8) -> float:
    """Mean validation loss with the first reference of every item (eval mode, no grad)."""
    total, count = 0.0, 0
    rng = np.random.default_rng([config.seed, 99])
    with T.no_grad():
        for s in range(0, len(data), batch):
            sl = slice(s, s + batch)
            d = data.refs[sl, 0]
            if config.stage == "mask":
                loss = mask_batch_loss(model, data.mixture[sl], data.target[sl], d, training=False)
            else:
                x_enh = None if data.masked is None else data.masked[sl, 0]
                x_t, cond, t, u = flow_batch(prior, data.mixture[sl], x_enh, data.target[sl], rng)
                loss = flow_batch_loss(model, x_t, cond, t, d, u)
            k = data.mixture[sl].shape[0]
            total += float(loss.data) * k
            count += k
    return total / max(count, 1)


def train_stage(config: TrainConfig, manifest, out_path, log_path=None,
                data: PreparedData | None = None, progress=None) -> TrainResult:
    """Train one stage and write its checkpoint (raw + EMA weights, configs, step).

    ``manifest`` is a manifest dict or path. Pass ``data`` to reuse prepared
    features across runs. ``progress(step, loss)`` is called after every update.
    """
    if isinstance(manifest, (str, Path)):
        manifest = mix.load_manifest(manifest)
    out_path = Path(out_path)
    frontend = frontend_for(config.scale)
    embed_cfg = embed_config_for(config.scale)
    if data is None:
        data = prepare_data(manifest, frontend, embed_cfg, config.n_references)
    prior = FlowPrior(config.prior)

    mask_sha = None
    if config.stage == "flow" and prior.needs_mask:
        if not config.mask_checkpoint:
            raise ValueError("flow stage with the masked prior needs mask_checkpoint")
        mask_sha = ckpt.file_sha256(config.mask_checkpoint)
        mask_model, _ = load_model(config.mask_checkpoint)
        data = replace(data, masked=masked_inputs(data, mask_model))

    cfg_overrides = {"init_seed": config.seed, **config.model}
    if config.scale == "toy" or "mel_bands" not in cfg_overrides:
        cfg_overrides.setdefault("mel_bands", frontend.mel_bands)
        cfg_overrides.setdefault("embed_dim", embed_cfg.embed_dim)
    mcfg = model_config(config.stage, config.scale, cfg_overrides)
    model = build_model(config.stage, mcfg)
    params = model.parameters()
    ema = [p.data.copy() for p in params]
    opt = OptimizerState.zeros_like([p.data for p in params])

    train_idx, hold_idx = split_holdout(len(data), config.holdout if config.stage == "mask" else 0)
    train_data = data.subset(train_idx)
    hold_data = data.subset(hold_idx) if len(hold_idx) else None
    rng = np.random.default_rng([config.seed, 1 if config.stage == "mask" else 2])
    stream = BatchStream(len(train_data), train_data.refs.shape[1], rng)
    chunk = dsp.n_frames(int(round(config.chunk_seconds * frontend.sample_rate)), frontend)
    eval_every = config.eval_every or max(1, config.max_steps // 20)

    meta = {
        "stage": config.stage,
        "scale": config.scale,
        "model_config": mcfg.to_dict(),
        "train_config": config.to_dict(),
        "frontend": frontend.to_dict(),
        "mask_sha256": mask_sha,
        "step": 0,
    }
    sha = save_checkpoint(out_path, model, ema, meta)
    log: list[dict] = []
    history: list[tuple[int, float]] = []
    converged = False
    step = 0
    g_scale = 1.0 / config.grad_accum
    log_fh = None
    writer = None
    if log_path is not None:
        log_fh = Path(log_path).open("w", newline="")
        writer = csv.DictWriter(log_fh, fieldnames=["step", "loss", "lr"])
        writer.writeheader()
    try:
        for step in range(1, config.max_steps + 1):
            T.zero_grad(params)
            total = 0.0
            for _ in range(config.grad_accum):
                items, refs = stream.take(config.batch_size)
                d = train_data.refs[items, refs]
                if config.stage == "mask":
                    x, y = _crop([train_data.mixture[items], train_data.target[items]], chunk, rng)
                    loss = mask_batch_loss(model, x, y, d)
                else:
                    x_enh = None if train_data.masked is None else train_data.masked[items, refs]
                    arrs = [train_data.mixture[items], train_data.target[items]]
                    if x_enh is not None:
                        arrs.append(x_enh)
                    arrs = _crop(arrs, chunk, rng)
                    x, y = arrs[0], arrs[1]
                    x_enh = arrs[2] if x_enh is not None else None
                    loss = flow_batch_loss(model, *_flow_inputs(prior, x, x_enh, y, d, rng))
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss at step {step}")
                total += value * g_scale
                T.backward(T.scale(loss, g_scale))
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            lr_t = lr_schedule(step, config.lr, config.warmup_steps)
            adamw_step([p.data for p in params], grads, opt, lr_t, config.weight_decay)
            ema_update(ema, [p.data for p in params], config.ema_decay)
            row = {"step": step, "loss": total, "lr": lr_t}
            log.append(row)
            if writer is not None:
                writer.writerow(row)
            if progress is not None:
                progress(step, total)
            if hold_data is not None and step % eval_every == 0:
                history.append((step, heldout_loss(config, model, hold_data, prior)))
                if has_converged(history, step, config.max_steps):
                    converged = True
            if config.save_every and step % config.save_every == 0 and step < config.max_steps:
                sha = save_checkpoint(out_path, model, ema, {**meta, "step": step})
            if converged:
                break
    except (T.NonFiniteError, FloatingPointError) as exc:
        T.clear_tape()
        raise TrainingDiverged(f"training stopped at step {step}: {exc}; "
                               f"last good checkpoint kept at {out_path}") from exc
    finally:
        if log_fh is not None:
            log_fh.close()
    steps_run = log[-1]["step"] if log else 0
    sha = save_checkpoint(out_path, model, ema, {**meta, "step": steps_run,
                                                 "converged": converged})
    if mask_sha is not None and ckpt.file_sha256(config.mask_checkpoint) != mask_sha:
        raise RuntimeError("mask checkpoint changed during flow training")
    return TrainResult(out_path, sha, log, history, steps_run, converged, mask_sha)


def _flow_inputs(prior, x, x_enh, y, d, rng):
    x_t, cond, t, u = flow_batch(prior, x, x_enh, y, rng)
    return x_t, cond, t, d, u
