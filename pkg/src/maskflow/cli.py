"""Command-line entry point.

Every command writes its outputs under ``--out`` together with ``run.json``,
which records the arguments, the resolved configuration, the seed, the
``git describe`` string and the sha256 of every file produced. Exit codes:
0 success, 1 user error (bad flags, missing files, invalid input), 2 internal
error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
import sys
from pathlib import Path

from . import __version__
from . import checkpoint as ckpt
from . import di
from . import dsp
from . import flow as fl
from . import metrics
from . import mixture as mix
from . import speaker as spk
from . import train as tr

CONFIG_VERSION = 1


class UserError(Exception):
    """Bad input from the command line; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UserError(message)


def _global_flags() -> argparse.ArgumentParser:
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", type=Path, help="JSON config file (see README for the schema)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True, help="output directory")
    g.add_argument("--steps", type=int, help="training steps, or Euler steps at inference")
    g.add_argument("--prior", choices=fl.PRIOR_KINDS, default="masked")
    g.add_argument("--condition", default="clean",
                   help="clean, additive, reverb or mixed (per-item draw)")
    g.add_argument("--json-errors", action="store_true",
                   help="print errors to stderr as a JSON object")
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    p = _Parser(prog="maskflow", description="Mask-then-flow target speaker extraction toolkit.")
    p.add_argument("--version", action="version", version=f"maskflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--duration", type=float, help="seconds per item (default 2.0)")

    for name, helptext in (("train-mask", "train the mask network"),
                           ("train-flow", "train the velocity network")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--manifest", type=Path, required=True)
        s.add_argument("--scale", choices=("toy", "full"), default="toy")
        if name == "train-flow":
            s.add_argument("--mask", type=Path, help="mask checkpoint (masked prior)")

    for name, helptext in (("infer", "run extraction over a manifest"),
                           ("analyze-di", "delete/insert reports per step and per stage"),
                           ("eval", "mel-domain metrics over a manifest"),
                           ("bench-rtf", "time model inference")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--manifest", type=Path, required=True)
        s.add_argument("--mask", type=Path, help="mask checkpoint")
        s.add_argument("--flow", type=Path, help="flow checkpoint")
        if name == "bench-rtf":
            s.add_argument("--repeats", type=int, default=10)
            s.add_argument("--warmup", type=int, default=3)
            s.add_argument("--item", type=int, default=0, help="manifest item to time")
    return p


# ---------------------------------------------------------------------------
# helpers


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             capture_output=True, text=True, timeout=10,
                             cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UserError(f"cannot read config {path}: {exc}") from None
    except ValueError as exc:
        raise UserError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UserError(f"config {path} must be a JSON object")
    version = cfg.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise UserError(f"config {path}: unsupported version {version}")
    unknown = set(cfg) - {"version", "simulate", "train"}
    if unknown:
        raise UserError(f"config {path}: unknown sections {sorted(unknown)}")
    return cfg


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_json(out: Path, args: argparse.Namespace, config: dict, argv: list[str]) -> None:
    artifacts = {}
    for f in sorted(out.rglob("*")):
        if f.is_file() and f.name != "run.json":
            artifacts[str(f.relative_to(out))] = _sha(f)
    inputs = {}
    for key in ("manifest", "mask", "flow", "config"):
        val = getattr(args, key, None)
        if val is not None:
            p = Path(val)
            if p.is_dir():
                p = p / "manifest.json"
            if p.is_file():
                inputs[key] = {"path": str(val), "sha256": _sha(p)}
    record = {
        "command": args.command,
        "argv": argv,
        "seed": args.seed,
        "config": config,
        "inputs": inputs,
        "git_describe": git_describe(),
        "version": __version__,
        "artifacts": artifacts,
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _load_models(args):
    mask_model = flow_model = None
    meta = {}
    if args.mask is not None:
        mask_model, meta = tr.load_model(args.mask)
    if args.flow is not None:
        flow_model, fmeta = tr.load_model(args.flow)
        meta = meta or fmeta
    if args.prior == "masked" and mask_model is None:
        raise UserError("the masked prior needs --mask")
    return mask_model, flow_model, meta.get("scale", "toy")


def _items(args, scale: str):
    """Yield ``(item, X, Y, d)`` log-mel features and speaker vectors per manifest item."""
    manifest = mix.load_manifest(args.manifest)
    frontend = tr.frontend_for(scale)
    embed_cfg = tr.embed_config_for(scale)
    for item in manifest["items"]:
        x, _ = dsp.read_wav(item["mixture_path"])
        y, _ = dsp.read_wav(item["target_path"])
        r, _ = dsp.read_wav(item["reference_path"])
        yield (item, dsp.log_mel(x, frontend), dsp.log_mel(y, frontend),
               spk.embed(r, embed_cfg).vector)


def _steps(args, default: int) -> int:
    steps = default if args.steps is None else args.steps
    if steps < 1:
        raise UserError("--steps must be >= 1 for inference")
    return steps


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfg: dict) -> dict:
    opts = {"duration_s": 2.0, **cfg.get("simulate", {})}
    if args.duration is not None:
        opts["duration_s"] = args.duration
    mix.generate_dataset(args.n, args.condition, args.seed, args.out, **opts)
    return {"n": args.n, "condition": args.condition, **opts}


def cmd_train(args, cfg: dict) -> dict:
    stage = "mask" if args.command == "train-mask" else "flow"
    base = tr.TrainConfig.toy() if args.scale == "toy" else tr.TrainConfig()
    overrides = dict(cfg.get("train", {}))
    overrides.update(stage=stage, seed=args.seed, prior=args.prior, scale=args.scale)
    if args.steps is not None:
        overrides["max_steps"] = args.steps
    if stage == "flow":
        overrides["mask_checkpoint"] = str(args.mask) if args.mask else None
    config = tr.TrainConfig.from_dict({**base.to_dict(), **overrides})
    out = args.out / f"{stage}.m2f"
    result = tr.train_stage(config, args.manifest, out, log_path=args.out / f"{stage}_log.csv")
    return {"train": config.to_dict(), "steps_run": result.steps_run,
            "converged": result.converged, "checkpoint_sha256": result.sha256}


def cmd_infer(args, cfg: dict) -> dict:
    mask_model, flow_model, scale = _load_models(args)
    prior = fl.FlowPrior(args.prior)
    steps = _steps(args, 1)
    index = []
    for item, x, _, d in _items(args, scale):
        est, _, x_enh = fl.tse_infer(x, d, mask_model, flow_model, prior, steps,
                                     seed=args.seed + item["index"], return_trajectory=True)
        ckpt.save_matrix(args.out / f"{item['id']}_estimate.m2f", est.frames)
        entry = {"id": item["id"], "estimate": f"{item['id']}_estimate.m2f"}
        if x_enh is not None:
            ckpt.save_matrix(args.out / f"{item['id']}_masked.m2f", x_enh)
            entry["masked"] = f"{item['id']}_masked.m2f"
        index.append(entry)
    (args.out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return {"prior": args.prior, "steps": steps, "scale": scale}


def cmd_analyze_di(args, cfg: dict) -> dict:
    mask_model, flow_model, scale = _load_models(args)
    if flow_model is None:
        raise UserError("analyze-di needs --flow")
    prior = fl.FlowPrior(args.prior)
    steps = _steps(args, 8 if args.prior != "masked" else 1)
    rows = []
    per_step: list[list[di.DIReport]] = []
    for item, x, y, d in _items(args, scale):
        est, states, x_enh = fl.tse_infer(x, d, mask_model, flow_model, prior, steps,
                                          seed=args.seed + item["index"], return_trajectory=True)
        per_step.append(di.di_per_step(states, x.frames, condition=args.condition))
        if x_enh is not None:
            rows.append({"Mixture": x.frames, "Masked": x_enh, "Refined": est.frames,
                         "Target": y.frames})
    step_table = [di.mean_report([p[k] for p in per_step], step=k, stage="Mixture->Step",
                                 condition=args.condition) for k in range(steps + 1)]
    di.write_csv(step_table, args.out / "di_per_step.csv")
    di.write_json(step_table, args.out / "di_per_step.json")
    if rows:
        table = di.di_stage_table(rows, condition=args.condition)
        di.write_csv(table, args.out / "di_stages.csv")
        di.write_json(table, args.out / "di_stages.json")
    return {"prior": args.prior, "steps": steps, "scale": scale}


def cmd_eval(args, cfg: dict) -> dict:
    mask_model, flow_model, scale = _load_models(args)
    prior = fl.FlowPrior(args.prior)
    steps = _steps(args, 1)
    report = metrics.EvalReport()
    embed_cfg = tr.embed_config_for(scale)
    for item, x, y, d in _items(args, scale):
        est = fl.tse_infer(x, d, mask_model, flow_model, prior, steps,
                           seed=args.seed + item["index"])
        report.add(item["id"], est.frames, y.frames, embed_cfg=embed_cfg)
    (args.out / "eval.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return {"prior": args.prior, "steps": steps, "scale": scale}


def cmd_bench_rtf(args, cfg: dict) -> dict:
    mask_model, flow_model, scale = _load_models(args)
    items = list(_items(args, scale))
    if not 0 <= args.item < len(items):
        raise UserError(f"--item {args.item} out of range (manifest has {len(items)} items)")
    item, x, _, d = items[args.item]
    audio_s = x.duration
    results = {}
    results["mask"] = metrics.bench_rtf(x, d, mask_model, None, None, args.repeats,
                                        args.warmup, audio_seconds=audio_s).to_dict()
    if flow_model is not None:
        for steps in sorted({1, _steps(args, 8)}):
            results[f"mask+flow({steps})"] = metrics.bench_rtf(
                x, d, mask_model, flow_model, steps, args.repeats, args.warmup,
                fl.FlowPrior(args.prior), audio_seconds=audio_s).to_dict()
    (args.out / "rtf.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return {"repeats": args.repeats, "warmup": args.warmup, "item": args.item}


COMMANDS = {
    "simulate": cmd_simulate,
    "train-mask": cmd_train,
    "train-flow": cmd_train,
    "infer": cmd_infer,
    "analyze-di": cmd_analyze_di,
    "eval": cmd_eval,
    "bench-rtf": cmd_bench_rtf,
}

USER_ERRORS = (UserError, ValueError, OSError, ckpt.CheckpointError, tr.TrainingDiverged)


def _report(exc: BaseException, code: int, as_json: bool) -> int:
    if as_json:
        print(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc),
                                    "exit_code": code}}), file=sys.stderr)
    else:
        print(f"maskflow: error: {exc}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json-errors" in argv
    try:
        args = build_parser().parse_args(argv)
    except UserError as exc:
        return _report(exc, 1, as_json)
    try:
        cfg = load_config(args.config)
        try:
            args.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UserError(f"cannot create output directory {args.out}: {exc}") from None
        resolved = COMMANDS[args.command](args, cfg)
        write_run_json(args.out, args, resolved, argv)
    except USER_ERRORS as exc:
        return _report(exc, 1, args.json_errors)
    except Exception as exc:  # noqa: BLE001
        return _report(exc, 2, args.json_errors)
    return 0


if __name__ == "__main__":
    sys.exit(main())
