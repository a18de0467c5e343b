"""Synthetic speakers and target/interference mixtures.

Speakers are harmonic sources with a speaker-specific pitch and formant
layout. Every sample is a pure function of ``(seed, index)``, so datasets can
be regenerated byte-for-byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import convolve

from . import dsp

CONDITIONS = ("clean", "additive", "reverb")
MANIFEST_VERSION = 1
SNR_RANGE = (1.0, 10.0)
_SPEAKER_SALT = 0x5EED


@dataclass(frozen=True)
class SyntheticSpeaker:
    speaker_id: int
    f0: float
    formants: tuple[float, float, float]
    bandwidths: tuple[float, float, float]
    vibrato_rate: float
    vibrato_depth: float  # cents

    @classmethod
    def from_id(cls, speaker_id: int) -> "SyntheticSpeaker":
        rng = np.random.default_rng([int(speaker_id), _SPEAKER_SALT])
        f0 = float(np.exp(rng.uniform(np.log(80.0), np.log(320.0))))
        f1 = rng.uniform(300.0, 850.0)
        f2 = rng.uniform(f1 + 350.0, 2400.0)
        f3 = rng.uniform(max(f2 + 350.0, 2300.0), 3500.0)
        bws = (rng.uniform(60, 160), rng.uniform(80, 200), rng.uniform(100, 260))
        return cls(int(speaker_id), f0, (float(f1), float(f2), float(f3)),
                   tuple(float(b) for b in bws), float(rng.uniform(4.0, 7.0)),
                   float(rng.uniform(10.0, 40.0)))

    def with_f0(self, f0: float) -> "SyntheticSpeaker":
        return SyntheticSpeaker(self.speaker_id, float(f0), self.formants, self.bandwidths,
                                self.vibrato_rate, self.vibrato_depth)


@dataclass
class MixtureSample:
    mixture: np.ndarray
    target: np.ndarray
    interference: np.ndarray
    reference: np.ndarray
    condition: str
    snr_db: float | None
    seed: int
    target_speaker_id: int
    interferer_speaker_id: int | None
    index: int = 0
    reference_seed: int = 0


def _envelope(freqs, formants, bandwidths):
    gains = (1.0, 0.6, 0.35)
    amp = np.zeros_like(freqs)
    for fc, bw, g in zip(formants, bandwidths, gains):
        amp += g / (1.0 + ((freqs - fc) / (0.5 * bw)) ** 2)
    return amp


def render_utterance(speaker: SyntheticSpeaker, duration_s: float, seed: int,
                     sample_rate: int = 16000) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Waveform plus the per-sample f0 track and voicing flags used to make it."""
    if duration_s < 0.5:
        raise ValueError(f"utterance must last at least 0.5 s, got {duration_s}")
    sr = sample_rate
    n = int(round(duration_s * sr))
    rng = np.random.default_rng([speaker.speaker_id, int(seed), 1])
    t = np.arange(n) / sr

    # intonation: utterance-level offset, slow drift, vibrato
    drift = 0.04 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t + rng.uniform(0, 2 * np.pi))
    vib = 2.0 ** (speaker.vibrato_depth / 1200.0 * np.sin(2 * np.pi * speaker.vibrato_rate * t))
    f0 = speaker.f0 * rng.uniform(0.95, 1.05) * (1.0 + drift) * vib
    phase = 2 * np.pi * np.cumsum(f0) / sr

    out = np.zeros(n)
    voiced = np.zeros(n, dtype=bool)
    pos = 0
    first = True
    fade = int(0.015 * sr)
    while pos < n:
        seg = min(int(rng.uniform(0.08, 0.35) * sr), n - pos)
        is_voiced = first or rng.uniform() < 0.7
        first = False
        sl = slice(pos, pos + seg)
        env = np.ones(seg)
        k = min(fade, seg // 2)
        if k > 0:
            ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
            env[:k] = ramp
            env[seg - k:] = ramp[::-1]
        if is_voiced:
            vowel = rng.uniform(0.85, 1.15, size=3)
            formants = np.sort(np.asarray(speaker.formants) * vowel)
            f0_seg = float(f0[sl].mean())
            n_harm = max(1, int(5000.0 / (f0_seg * 1.1)))
            ks = np.arange(1, n_harm + 1)
            amps = _envelope(ks * f0_seg, formants, speaker.bandwidths) * ks ** -0.3
            wave_seg = np.sin(np.outer(phase[sl], ks)) @ amps
            wave_seg /= max(np.abs(wave_seg).max(), 1e-12)
            out[sl] = rng.uniform(0.5, 1.0) * env * wave_seg
            voiced[sl] = True
        else:
            noise = np.diff(rng.standard_normal(seg + 1))
            out[sl] = 0.02 * env * noise
        pos += seg
    out += 1e-4 * rng.standard_normal(n)
    out *= 0.5 / np.abs(out).max()
    return out, f0, voiced


def synth_utterance(speaker: SyntheticSpeaker, duration_s: float, seed: int,
                    sample_rate: int = 16000) -> np.ndarray:
    """Harmonic utterance peak-normalized to 0.5; deterministic in (speaker, seed)."""
    return render_utterance(speaker, duration_s, seed, sample_rate)[0]


def sample_snr(rng: np.random.Generator) -> float:
    return float(rng.uniform(*SNR_RANGE))


def energy(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.dot(x, x))


def measured_snr(target, interference) -> float:
    return 10.0 * np.log10(energy(target) / energy(interference))


def mix_at_snr(target, interference, snr_db: float) -> tuple[np.ndarray, np.ndarray]:
    """Scale ``interference`` to ``snr_db`` below ``target`` and add. Returns (mixture, scaled)."""
    y = np.asarray(target, dtype=np.float64)
    z = np.resize(np.asarray(interference, dtype=np.float64), y.shape)
    ey, ez = energy(y), energy(z)
    if ey == 0.0:
        raise ValueError("target is silent")
    if ez == 0.0:
        raise ValueError("interference is silent")
    z = z * np.sqrt(ey / (ez * 10.0 ** (snr_db / 10.0)))
    return y + z, z


def make_rir(seed: int, sample_rate: int = 16000, rt60: float | None = None,
             n_reflections: int | None = None) -> np.ndarray:
    """Direct path, sparse early reflections and an exponentially decaying Gaussian tail.

    ``rt60=0`` and ``n_reflections=0`` give the unit impulse.
    """
    rng = np.random.default_rng([int(seed), 7])
    if rt60 is None:
        rt60 = float(rng.uniform(0.2, 0.8))
    if n_reflections is None:
        n_reflections = int(rng.integers(4, 9))
    length = max(1, int(rt60 * sample_rate))
    rir = np.zeros(length)
    rir[0] = 1.0
    if rt60 <= 0:
        return rir
    decay = 3.0 * np.log(10.0) / rt60  # amplitude reaches -60 dB at rt60
    if n_reflections:
        delays = rng.uniform(0.002, 0.03, size=n_reflections)
        for d in delays:
            idx = min(int(d * sample_rate), length - 1)
            rir[idx] += rng.choice([-1.0, 1.0]) * rng.uniform(0.2, 0.6) * np.exp(-decay * d)
    start = int(0.005 * sample_rate)
    tt = np.arange(start, length) / sample_rate
    rir[start:] += 0.15 * rng.standard_normal(length - start) * np.exp(-decay * tt)
    return rir


def apply_reverb(waveform, seed: int, sample_rate: int = 16000, rt60: float | None = None,
                 n_reflections: int | None = None) -> np.ndarray:
    """Convolve with a synthetic RIR, truncate to the input length, restore the input peak."""
    x = np.asarray(waveform, dtype=np.float64)
    rir = make_rir(seed, sample_rate, rt60, n_reflections)
    y = convolve(x, rir, mode="full", method="direct" if rir.size == 1 else "auto")[:x.size]
    peak_in, peak_out = np.abs(x).max(), np.abs(y).max()
    if peak_out > 0 and peak_in > 0:
        y = y * (peak_in / peak_out)
    return y


def _seed_int(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def make_sample(index: int, condition: str, seed: int, duration_s: float = 2.0,
                sample_rate: int = 16000, n_speakers: int = 100) -> MixtureSample:
    """Build one item; ``condition='mixed'`` draws the condition per item."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    if condition == "mixed":
        condition = CONDITIONS[int(rng.integers(0, 3))]
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS} or 'mixed'")
    spk_t = int(rng.integers(0, n_speakers))
    spk_i = int(rng.integers(0, n_speakers - 1))
    spk_i += spk_i >= spk_t
    utt_seed, ref_seed, int_seed, rir_seed = (_seed_int(rng) for _ in range(4))
    if ref_seed == utt_seed:
        ref_seed += 1
    snr = sample_snr(rng)

    target_spk = SyntheticSpeaker.from_id(spk_t)
    y = synth_utterance(target_spk, duration_s, utt_seed, sample_rate)
    reference = dsp.quantize_pcm16(synth_utterance(target_spk, duration_s, ref_seed, sample_rate))
    if condition == "clean":
        y = dsp.quantize_pcm16(y)
        return MixtureSample(y.copy(), y, np.zeros_like(y), reference, condition, None,
                             int(seed), spk_t, None, int(index), ref_seed)

    z_raw = synth_utterance(SyntheticSpeaker.from_id(spk_i), duration_s, int_seed, sample_rate)
    x, z = mix_at_snr(y, z_raw, snr)
    peak = np.abs(x).max()
    if peak > 0.95:
        y, z = y * (0.95 / peak), z * (0.95 / peak)
    y, z = dsp.quantize_pcm16(y), dsp.quantize_pcm16(z)
    x = y + z
    if condition == "reverb":
        x = dsp.quantize_pcm16(apply_reverb(x, rir_seed, sample_rate))
    return MixtureSample(x, y, z, reference, condition, snr, int(seed), spk_t, spk_i,
                         int(index), ref_seed)


def generate_dataset(n: int, condition: str, seed: int, out_dir, duration_s: float = 2.0,
                     sample_rate: int = 16000, n_speakers: int = 100) -> dict:
    """Write ``n`` items as WAV files plus ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    items = []
    for i in range(n):
        s = make_sample(i, condition, seed, duration_s, sample_rate, n_speakers)
        stem = f"item{i:05d}"
        entry = {
            "id": stem,
            "index": i,
            "condition": s.condition,
            "snr_db": s.snr_db,
            "seed": s.seed,
            "target_speaker_id": s.target_speaker_id,
            "interferer_speaker_id": s.interferer_speaker_id,
            "reference_seed": s.reference_seed,
            "mixture": f"{stem}_mixture.wav",
            "target": f"{stem}_target.wav",
            "reference": f"{stem}_reference.wav",
        }
        dsp.write_wav(out / entry["mixture"], s.mixture, sample_rate)
        dsp.write_wav(out / entry["target"], s.target, sample_rate)
        dsp.write_wav(out / entry["reference"], s.reference, sample_rate)
        if s.condition != "clean":
            entry["interference"] = f"{stem}_interference.wav"
            dsp.write_wav(out / entry["interference"], s.interference, sample_rate)
        items.append(entry)
    manifest = {
        "version": MANIFEST_VERSION,
        "sample_rate": sample_rate,
        "duration_s": duration_s,
        "condition": condition,
        "seed": seed,
        "n_speakers": n_speakers,
        "items": items,
    }
    path = out / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"could not write manifest {path}: {exc}") from exc
    return manifest


def load_manifest(path) -> dict:
    """Read a manifest; item paths are resolved relative to its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"could not read manifest {path}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION or "items" not in manifest:
        raise ValueError(f"{path}: not a version-{MANIFEST_VERSION} manifest")
    root = path.parent
    for item in manifest["items"]:
        for key in ("mixture", "target", "reference", "interference"):
            if key in item:
                item[key + "_path"] = str(root / item[key])
    manifest["root"] = str(root)
    return manifest
