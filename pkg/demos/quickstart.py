"""Simulate a small dataset, train both stages briefly and compare them.

The models here see 32 items for a few hundred steps, so the numbers are
only a smoke signal. Expect the masked spectrogram to sit closer to the
target than the mixture, and the flow step to move it a little further.

    python demos/quickstart.py [workdir]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from maskflow import flow as fl
from maskflow import metrics
from maskflow import mixture as mix
from maskflow import train as tr


def main(work: Path) -> None:
    for split, n, seed in (("train", 32, 1), ("test", 4, 2)):
        mix.generate_dataset(n, "additive", seed, work / split, duration_s=1.0)
    fe, ec = tr.frontend_for("toy"), tr.embed_config_for("toy")
    train = tr.prepare_data(mix.load_manifest(work / "train"), fe, ec, n_references=2)
    test = tr.prepare_data(mix.load_manifest(work / "test"), fe, ec)
    print(f"{len(train)} training items, {len(test)} test items")

    mask_cfg = tr.TrainConfig.toy(max_steps=200)
    res = tr.train_stage(mask_cfg, None, work / "mask.m2f", data=train)
    print(f"mask: {res.steps_run} steps, last loss {res.log[-1]['loss']:.4f}")

    flow_cfg = tr.TrainConfig.toy(stage="flow", max_steps=200, mask_checkpoint=str(work / "mask.m2f"))
    res = tr.train_stage(flow_cfg, None, work / "flow.m2f", data=train)
    print(f"flow: {res.steps_run} steps, last loss {res.log[-1]['loss']:.4f}")

    mask, _ = tr.load_model(work / "mask.m2f")
    flow, _ = tr.load_model(work / "flow.m2f")
    rows = {"mixture": [], "masked": [], "mask+flow": []}
    for i in range(len(test)):
        x, y, d = test.mixture[i], test.target[i], test.refs[i, 0]
        est, _, x_enh = fl.tse_infer(x, d, mask, flow, steps=1, return_trajectory=True)
        rows["mixture"].append(metrics.mel_metrics(x, y))
        rows["masked"].append(metrics.mel_metrics(x_enh, y))
        rows["mask+flow"].append(metrics.mel_metrics(est.frames, y))

    print(f"\n{'':10s} {'mel MSE':>8s} {'LSD':>8s}")
    for name, vals in rows.items():
        mse, lsd = np.mean(vals, axis=0)
        print(f"{name:10s} {mse:8.4f} {lsd:8.4f}")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        main(Path(sys.argv[1]))
    else:
        with tempfile.TemporaryDirectory() as tmp:
            main(Path(tmp))
