"""The twelve acceptance criteria, each at its stated tolerance.

Every criterion records one PASS/FAIL line that is printed in the session
summary. Criteria 6 to 8 train toy models and take most of the runtime.
"""

import contextlib
import statistics
import time

import numpy as np
import pytest

import acceptance_runs as runs
import gradcases
from maskflow import di
from maskflow import dit
from maskflow import dsp
from maskflow import flow as fl
from maskflow import masknet as mn
from maskflow import metrics
from maskflow import mixture as mix
from maskflow import speaker as spk
from maskflow import tensor as T
from maskflow import train as tr

CLEAN_SEEDS = (0, 1, 2)
ABLATION_SEEDS = (0, 1, 2, 3, 4)


@contextlib.contextmanager
def criterion(n: int, title: str):
    """Record PASS or FAIL for criterion ``n``; the body stores details in the yielded dict."""
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        runs.CRITERIA_LINES[n] = f"[{n:2d}] FAIL  {title}: {info['detail'] or msg}"
        raise
    runs.CRITERIA_LINES[n] = f"[{n:2d}] PASS  {title}: {info['detail']}"


# ---------------------------------------------------------------------------
# shared training runs


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    return runs.cache_dir(tmp_path_factory)


@pytest.fixture(scope="module")
def clean_runs(run_dir):
    out = {}
    for seed in CLEAN_SEEDS:
        run = runs.prepare(run_dir, "clean", seed, runs.CLEAN["n_train"], runs.CLEAN["mask_steps"])
        out[seed] = (run, runs.train_flow(run, "masked", runs.CLEAN["flow_steps"], seed))
    return out


@pytest.fixture(scope="module")
def ablation_runs(run_dir):
    out = {}
    for seed in ABLATION_SEEDS:
        run = runs.prepare(run_dir, "additive", seed, runs.ABLATION["n_train"],
                           runs.ABLATION["mask_steps"])
        out[seed] = (run, {p: runs.train_flow(run, p, runs.ABLATION["flow_steps"], seed)
                           for p in fl.PRIOR_KINDS})
    return out


# ---------------------------------------------------------------------------
# 1-5: exact properties


def test_c01_gradient_suite():
    with criterion(1, "gradient suite, rel. err < 1e-3 over 20 seeds") as info:
        t0 = time.perf_counter()
        worst = {}
        cases = {**gradcases.OPS, **gradcases.NETWORKS}
        for name, builder in cases.items():
            max_checks = 4 if name in gradcases.NETWORKS else None
            for seed in range(20):
                rep = gradcases.check(builder, seed, max_checks=max_checks, tol=1e-3)
                assert rep.passed, f"{name} seed {seed}: {rep}"
                worst[name] = max(worst.get(name, 0.0), rep.max_error)
        elapsed = time.perf_counter() - t0
        top = max(worst, key=worst.get)
        info["detail"] = (f"{len(cases)} cases x 20 seeds, worst {worst[top]:.1e} ({top}), "
                          f"{elapsed:.0f} s")
        assert elapsed < 120, f"took {elapsed:.0f} s"


def test_c02_fresh_blocks_are_identities():
    with criterion(2, "fresh flow-network blocks are bit-exact identities") as info:
        checked = 0
        with T.precision(np.float64):
            for init in range(5):
                model = dit.DiT(dit.DiTConfig.toy(init_seed=init))
                rng = np.random.default_rng(init)
                for _ in range(10):
                    h = rng.standard_normal((int(rng.integers(1, 30)), 64)) * rng.uniform(0.1, 10)
                    c = rng.standard_normal(64)
                    for b in range(model.config.blocks):
                        assert dit.dit_block(h, c, model, b).tobytes() == h.tobytes()
                    checked += 1
        info["detail"] = f"{checked} random inputs, every block, 64-bit"
        assert checked == 50


def test_c03_flow_path_exactness():
    with criterion(3, "flow path endpoints, Euler invariance, untrained single step") as info:
        rng = np.random.default_rng(0)
        for _ in range(20):
            x, x_enh, y = (rng.standard_normal((7, 5)) for _ in range(3))
            for kind in fl.PRIOR_KINDS:
                prior = fl.FlowPrior(kind)
                s0 = fl.make_trajectory_sample(prior, x, x_enh, y, 0.0, seed=1)
                s1 = fl.make_trajectory_sample(prior, x, x_enh, y, 1.0, seed=1)
                assert s0.x_t.tobytes() == s0.x0.tobytes() and s1.x_t.tobytes() == y.tobytes()
        worst = 0.0
        for _ in range(20):
            x0, c = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
            ref = fl.euler_integrate(x0, 1, lambda s, t, d: c)[-1]
            for steps in (2, 7, 100, 1000):
                got = fl.euler_integrate(x0, steps, lambda s, t, d: c)[-1]
                worst = max(worst, float(np.abs(got - ref).max()))
        assert worst <= 1e-12
        mask, flow = mn.MaskNet(mn.MaskNetConfig.toy()), dit.DiT(dit.DiTConfig.toy())
        for i in range(5):
            x = rng.uniform(-9, 0, (25, 40))
            d = rng.standard_normal(32)
            out, _, x_enh = fl.tse_infer(x, d, mask, flow, fl.FlowPrior("masked"), 1,
                                         return_trajectory=True)
            assert out.frames.tobytes() == x_enh.tobytes()
        info["detail"] = f"endpoints exact, constant-field drift {worst:.1e}, single step == X_enh"


def test_c04_di_oracle_equivalence():
    with criterion(4, "D/I matches per-bin loop oracle on 1000 matrices") as info:
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(1000):
            delta = rng.standard_normal(tuple(rng.integers(1, 16, size=2))) * 10 ** rng.uniform(-4, 4)
            r = di.di_proportion(delta)
            D = I = 0.0  # noqa: E741
            for v in delta.ravel().tolist():
                if v < 0:
                    D -= v
                else:
                    I += v  # noqa: E741
            for got, want in ((r.D, D), (r.I, I), (r.d_pct, 100 * D / (D + I)),
                              (r.i_pct, 100 * I / (D + I))):
                worst = max(worst, abs(got - want) / abs(want) if want else abs(got))
            assert r.D + r.I == pytest.approx(np.abs(delta).sum(), rel=1e-12)
            neg = di.di_proportion(-delta)
            assert (neg.D, neg.I) == (r.I, r.D)
            c = float(rng.uniform(0.01, 100))
            sc = di.di_proportion(c * delta)
            assert sc.D == pytest.approx(c * r.D, rel=1e-9) and sc.I == pytest.approx(c * r.I, rel=1e-9)
            assert sc.d_pct == pytest.approx(r.d_pct, rel=1e-9, abs=1e-9)
        info["detail"] = f"worst relative deviation {worst:.1e}; decomposition, antisymmetry, scaling hold"
        assert worst <= 1e-9


def test_c05_mask_stage_is_pure_deletion(clean_runs):
    with criterion(5, "Mixture->Masked is D=100, I=0 for any mask") as info:
        run = clean_runs[CLEAN_SEEDS[0]][0]
        masks = [mn.MaskNet(mn.MaskNetConfig.toy(init_seed=s)) for s in range(3)]
        masks += [tr.load_model(r.mask_path)[0] for r, _ in clean_runs.values()]
        fe, ec = dsp.FrontendConfig.toy(), spk.EmbedConfig.toy()
        inputs = [(run.test.mixture[i], run.test.refs[i, 0], run.test.target[i])
                  for i in range(len(run.test))]
        for i in range(6):  # two-speaker items too, where the mask has something to remove
            s = mix.make_sample(i, "additive", seed=5)
            inputs.append((dsp.log_mel(s.mixture, fe).frames, spk.embed(s.reference, ec).vector,
                           dsp.log_mel(s.target, fe).frames))
        tables = []
        for mask in masks:
            items = []
            for x, d, y in inputs:
                x_enh = fl.mask_stage(x, d, mask)
                items.append({"Mixture": x, "Masked": x_enh, "Refined": x_enh, "Target": y})
            row = di.di_stage_table(items)[0]
            tables.append((row.d_pct, row.i_pct))
        info["detail"] = f"{len(masks)} checkpoints (3 untrained, 3 trained): {sorted(set(tables))}"
        assert all(t == (100.0, 0.0) for t in tables)


# ---------------------------------------------------------------------------
# 6-8: trained toy models


def test_c06_two_stage_di_trend(clean_runs):
    with criterion(6, "Masked->Refined is insert-dominant (clean data, 5000 flow steps)") as info:
        shares = []
        for seed, (run, flow_path) in clean_runs.items():
            mask, flow = run.model("mask.m2f"), tr.load_model(flow_path)[0]
            items = []
            for i in range(len(run.test)):
                out, _, x_enh = fl.tse_infer(run.test.mixture[i], run.test.refs[i, 0], mask, flow,
                                             fl.FlowPrior("masked"), 1, return_trajectory=True)
                items.append({"Mixture": run.test.mixture[i], "Masked": x_enh,
                              "Refined": out.frames, "Target": run.test.target[i]})
            table = {r.stage: r for r in di.di_stage_table(items, condition="clean")}
            shares.append(table["Masked->Refined"].i_pct)
        med = statistics.median(shares)
        info["detail"] = f"i_pct per seed {[round(s, 1) for s in shares]}, median {med:.1f}"
        assert med > 50


def test_flow_stage_improves_on_mask_alone(clean_runs):
    # training-harness example: 5000 masked-prior steps on 64 items beat X_enh on held-out items
    gains = []
    for run, flow_path in clean_runs.values():
        masked_only = runs.heldout_mse(run, None, "masked", 1)
        two_stage = runs.heldout_mse(run, flow_path, "masked", 1)
        gains.append(two_stage < masked_only)
    assert statistics.median(gains)


def test_c07_prior_ordering(ablation_runs):
    with criterion(7, "held-out mel-MSE masked <= mixture <= gaussian (5 seeds)") as info:
        per_prior = {p: [] for p in fl.PRIOR_KINDS}
        for run, flows in ablation_runs.values():
            for prior, path in flows.items():
                per_prior[prior].append(runs.heldout_mse(run, path, prior, runs.INFER_STEPS[prior]))
        med = {p: statistics.median(v) for p, v in per_prior.items()}
        runs.dump(next(iter(ablation_runs.values()))[0].root.parent / "prior_ablation.json",
                  {"per_seed": per_prior, "median": med})
        info["detail"] = ("median masked {masked:.4f}, mixture {mixture:.4f}, "
                          "gaussian {gaussian:.4f}".format(**med))
        assert med["masked"] <= med["mixture"] * 1.05
        assert med["mixture"] <= med["gaussian"] * 1.05


def test_c08_gaussian_prior_di_profile(ablation_runs):
    with criterion(8, "8-step gaussian prior: step 1 i_pct > 90, falling over steps 1-5") as info:
        profiles = []
        for seed in ABLATION_SEEDS[:3]:
            run, flows = ablation_runs[seed]
            flow = tr.load_model(flows["gaussian"])[0]
            per_item = []
            for i in range(len(run.test)):
                _, states, _ = fl.tse_infer(run.test.mixture[i], run.test.refs[i, 0], None, flow,
                                            fl.FlowPrior("gaussian"), 8, seed=i,
                                            return_trajectory=True)
                per_item.append(di.di_per_step(states, run.test.mixture[i]))
            profiles.append([di.mean_report([p[k] for p in per_item]).i_pct for k in range(9)])
        med = [statistics.median(col) for col in zip(*profiles)]
        info["detail"] = "median i_pct steps 0-8: " + ", ".join(f"{v:.1f}" for v in med)
        assert med[1] > 90
        assert all(a > b for a, b in zip(med[1:5], med[2:6]))


# ---------------------------------------------------------------------------
# 9-12


def test_c09_mixture_simulator():
    with criterion(9, "simulator SNR, clean identity, determinism") as info:
        worst = 0.0
        for i in range(1000):
            s = mix.make_sample(i, "additive", seed=9, duration_s=0.5)
            worst = max(worst, abs(mix.measured_snr(s.target, s.interference) - s.snr_db))
        assert worst <= 0.01
        for i in range(20):
            c = mix.make_sample(i, "clean", seed=9, duration_s=0.5)
            assert c.mixture.tobytes() == c.target.tobytes()
        a = mix.make_sample(3, "reverb", seed=1, duration_s=0.5)
        b = mix.make_sample(3, "reverb", seed=1, duration_s=0.5)
        assert all(getattr(a, k).tobytes() == getattr(b, k).tobytes()
                   for k in ("mixture", "target", "interference", "reference"))
        info["detail"] = f"worst SNR error {worst:.1e} dB over 1000 draws; clean bitwise; deterministic"


def test_c10_training_mechanics(tmp_path):
    with criterion(10, "AdamW/EMA/warmup oracles, accumulation, reproducible checkpoints") as info:
        p = [np.array([0.5])]
        st = tr.OptimizerState.zeros_like(p)
        ref, m, v = 0.5, 0.0, 0.0
        for k, g in enumerate([1.0, 1.0, -2.0], start=1):
            tr.adamw_step(p, [np.array([g])], st, 1e-3, 0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 1e-3 * ((m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8) + 0.01 * ref)
        assert abs(p[0][0] - ref) <= 1e-12
        e = [np.zeros(1)]
        for _ in range(5):
            tr.ema_update(e, [np.ones(1)], 0.99)
        assert abs(e[0][0] - (1 - 0.99 ** 5)) <= 1e-12
        assert tr.lr_schedule(0, 2e-4, 100) == 0 and tr.lr_schedule(100, 2e-4, 100) == 2e-4
        assert abs(tr.lr_schedule(50, 2e-4, 100) - 1e-4) <= 1e-12 * 1e-4

        with T.precision(np.float64):
            model = dit.DiT(dit.DiTConfig.toy())
            rng = np.random.default_rng(0)
            for q in model.parameters():
                q.data[...] += 0.05 * rng.standard_normal(q.shape)
            x_t, cond, u = (rng.standard_normal((4, 6, 40)) for _ in range(3))
            t, d = rng.uniform(0, 1, 4), rng.standard_normal((4, 32))
            params = model.parameters()
            T.zero_grad(params)
            T.backward(tr.flow_batch_loss(model, x_t, cond, t, d, u))
            full = [q.grad.copy() for q in params]
            T.zero_grad(params)
            for sl in (slice(0, 2), slice(2, 4)):
                T.backward(T.scale(tr.flow_batch_loss(model, x_t[sl], cond[sl], t[sl], d[sl], u[sl]), 0.5))
            rel = max(float(np.abs(q.grad - g).max() / max(np.abs(g).max(), 1e-300))
                      for q, g in zip(params, full))
        assert rel <= 1e-5

        mix.generate_dataset(4, "additive", 3, tmp_path / "d", duration_s=0.6)
        for stage in ("mask", "flow"):
            cfg = tr.TrainConfig.toy(stage=stage, prior="gaussian", max_steps=3, warmup_steps=1)
            a = tr.train_stage(cfg, tmp_path / "d", tmp_path / f"{stage}_a.m2f")
            b = tr.train_stage(cfg, tmp_path / "d", tmp_path / f"{stage}_b.m2f")
            assert a.sha256 == b.sha256
            assert (tmp_path / f"{stage}_a.m2f").read_bytes() == (tmp_path / f"{stage}_b.m2f").read_bytes()
        info["detail"] = f"oracles to 1e-12, accumulation rel. diff {rel:.1e}, repeated runs byte-identical"


def test_c11_full_scale_parameter_counts():
    with criterion(11, "full-scale parameter counts within 5%") as info:
        n_mask = mn.count_params(mn.MaskNetConfig())
        n_flow = dit.count_params(dit.DiTConfig())
        dm, df = n_mask / 12.7e6 - 1, n_flow / 72.6e6 - 1
        info["detail"] = f"mask {n_mask:,} ({dm:+.1%} vs 12.7M), flow {n_flow:,} ({df:+.1%} vs 72.6M)"
        assert abs(dm) <= 0.05 and abs(df) <= 0.05


def test_c12_rtf_ordering():
    with criterion(12, "RTF mask-only < mask+flow(1) < mask+flow(8)") as info:
        mask, flow = mn.MaskNet(mn.MaskNetConfig.toy()), dit.DiT(dit.DiTConfig.toy())
        sample = mix.make_sample(0, "additive", seed=12)
        fe = dsp.FrontendConfig.toy()
        x = dsp.log_mel(sample.mixture, fe)
        d = spk.embed(sample.reference, spk.EmbedConfig.toy()).vector
        stats = [metrics.bench_rtf(x, d, mask, None, None, repeats=10),
                 metrics.bench_rtf(x, d, mask, flow, 1, repeats=10),
                 metrics.bench_rtf(x, d, mask, flow, 8, repeats=10)]
        med = [s.median for s in stats]
        info["detail"] = "median RTF " + " < ".join(f"{s.mode} {m:.4f}" for s, m in zip(stats, med))
        assert med[0] < med[1] < med[2]
