"""Acceptance suite: one test per criterion, each printing a PASS line.

Criteria 4-7 share a desk-scale session: 4,000 observations, 200 stars,
17 instruments, 13 stellar parameters, T=100, z_dim=20, library defaults
elsewhere (the shipped configs/desk.toml setup). Training both models
plus the probe grid takes a few CPU minutes.

Run with `pytest tests/test_acceptance.py -v -s`.
"""

import cmath
import math
import os

import numpy as np
import pytest

import causadis.simgen as sg
from causadis.cli import main as cli_main
from causadis.evaluation import (
    embed_dataset,
    instrument_leakage_probe,
    probe_regression,
)
from causadis.model import (
    DualModel,
    LossWeights,
    ModelConfig,
    assemble_triplet_batch,
    dual_loss_and_grads,
    infonce_multi,
    total_loss,
)
from causadis.nncore import Mlp, MlpSpec, gradient_check, l2_normalize, mlp_backward, mlp_forward
from causadis.rng import stream
from causadis.train import TrainConfig, load_checkpoint, save_checkpoint, split_dataset, train_model

DESK_SIM_SEED = 20240501
DESK_TRAIN_SEED = 7701
DESK_EVAL_SEED = 1
PROBE_SIZES = (10, 30, 100, 300, 1000)


def ok(line: str) -> None:
    print(f"ACCEPTANCE {line}", flush=True)


# ---------------------------------------------------------------------------
# shared desk-scale session


@pytest.fixture(scope="session")
def desk_dataset():
    cfg = sg.SimConfig(seed=DESK_SIM_SEED)  # defaults are the desk reference scale
    assert (cfg.n_obs, cfg.n_stars, cfg.n_instruments) == (4000, 200, 17)
    assert (cfg.n_star_params, cfg.n_timesteps) == (13, 100)
    ds = sg.build_dataset(cfg)
    ds.check_invariants()
    return ds


@pytest.fixture(scope="session")
def desk_train_cfg():
    return TrainConfig(seed=DESK_TRAIN_SEED)


@pytest.fixture(scope="session")
def dual_result(desk_dataset, desk_train_cfg):
    return train_model("dual", desk_dataset, desk_train_cfg, progress=False)


@pytest.fixture(scope="session")
def baseline_result(desk_dataset, desk_train_cfg):
    return train_model("baseline", desk_dataset, desk_train_cfg, progress=False)


@pytest.fixture(scope="session")
def desk_probes(desk_dataset, desk_train_cfg, dual_result, baseline_result):
    ds = desk_dataset
    table = embed_dataset(dual_result.model, ds).merged_with(
        embed_dataset(baseline_result.model, ds)
    )
    _, val_ids = split_dataset(ds, desk_train_cfg.val_fraction, desk_train_cfg.seed)
    test_stars = sorted({ds.star_of(o) for o in val_ids})
    labels = np.array([ds.theta0_of_star(o.star_id) for o in ds.observations])
    star_ids = np.array([o.star_id for o in ds.observations])
    features = {
        "raw": ds.flux_rows(range(ds.n_obs)),
        "z_star": table.z_star,
        "z_instr": table.z_instr,
        "z_baseline": table.z_baseline,
    }
    probes = {
        rep: {
            r.train_size: r
            for r in probe_regression(
                feats,
                labels,
                star_ids,
                representation=rep,
                test_stars=test_stars,
                train_sizes=PROBE_SIZES,
                n_runs=5,
                seed=DESK_EVAL_SEED,
            )
        }
        for rep, feats in features.items()
    }
    leakage = {
        rep: instrument_leakage_probe(
            table.representation(rep),
            table.instrument_ids,
            representation=rep,
            seed=DESK_EVAL_SEED,
            n_runs=5,
        )
        for rep in ("z_star", "z_instr")
    }
    return probes, leakage


def pooled_std(a, b) -> float:
    return math.sqrt((a.r2_std**2 + b.r2_std**2) / 2.0)


# ---------------------------------------------------------------------------
# criterion 1: simulator fidelity


def test_criterion_1_simulator_fidelity():
    cfg = sg.SimConfig(seed=1)
    times = sg.time_grid(cfg)
    rng = stream(1, "fidelity")
    worst = 0.0
    for _ in range(100):
        star = sg.sample_star(rng, cfg)
        inst = sg.sample_instrument(rng, cfg)
        phases = rng.uniform(0, 2 * np.pi, cfg.n_star_params - 1)

        period = cfg.n_timesteps * math.exp(star.theta[0]) * cfg.lambda_reduction
        sig = sg.stellar_signal(star, phases, times, cfg)
        want_sig = np.array(
            [
                sum(
                    star.theta[k]
                    * cmath.exp(1j * phases[k - 1])
                    / k**cfg.alpha
                    * cmath.exp(1j * 2 * math.pi * k * t / period)
                    for k in range(1, cfg.n_star_params)
                ).real
                for t in times
            ]
        )
        worst = max(worst, float(np.max(np.abs(sig - want_sig))))

        scale = sg.instrument_scale(inst, times, cfg)
        offset = sg.instrument_offset(inst, times, cfg)
        want_scale = np.array(
            [
                1.0
                + 0.05
                * sum(
                    b * cmath.exp(1j * math.pi * j * t / cfg.n_timesteps)
                    for j, b in enumerate(inst.beta)
                ).real
                for t in times
            ]
        )
        want_offset = np.array(
            [
                0.05
                * sum(
                    g * cmath.exp(1j * math.pi * j * t / cfg.n_timesteps)
                    for j, g in enumerate(inst.gamma)
                ).real
                for t in times
            ]
        )
        worst = max(worst, float(np.max(np.abs(scale - want_scale))))
        worst = max(worst, float(np.max(np.abs(offset - want_offset))))

        # full observation with noise off: clip(scale * signal + offset)
        quiet = sg.SimConfig(**{**cfg.__dict__, "noise_std": 0.0})
        lc = sg.observe(star, inst, phases, stream(2, "o"), quiet)
        want_flux = np.clip(want_scale * want_sig + want_offset, -1.0, 1.0)
        worst = max(worst, float(np.max(np.abs(lc.flux - want_flux))))
    assert worst < 1e-12

    star = sg.sample_star(stream(3, "s"), cfg)
    inst = sg.sample_instrument(stream(3, "i"), cfg)
    residuals = []
    for n in range(1000):
        orng = stream(4, "obs", n)
        phases = orng.uniform(0, 2 * np.pi, cfg.n_star_params - 1)
        lc = sg.observe(star, inst, phases, orng, cfg)
        clean = np.clip(
            sg.instrument_scale(inst, times, cfg) * sg.stellar_signal(star, phases, times, cfg)
            + sg.instrument_offset(inst, times, cfg),
            -1.0,
            1.0,
        )
        residuals.append(lc.flux - clean)
    noise_std = float(np.concatenate(residuals).std())
    assert 0.029 <= noise_std <= 0.031
    ok(f"1: PASS - generative equations match brute-force oracles (max abs diff "
       f"{worst:.2e}); noise std {noise_std:.5f} in [0.029, 0.031]")


# ---------------------------------------------------------------------------
# criterion 2: gradient correctness


def test_criterion_2_gradient_correctness():
    cfg = sg.SimConfig(
        n_stars=10, n_instruments=4, n_obs=60, n_star_params=5, n_inst_terms=4,
        n_timesteps=16, seed=9,
    )
    ds = sg.build_dataset(cfg)
    rng = stream(9, "trip")
    triplets = [sg.sample_triplet(ds, a, rng) for a in range(4)]
    batch = assemble_triplet_batch(ds, triplets)
    mcfg = ModelConfig(
        t_len=16, z_dim=6, fuse_dim=8, enc_hidden=(12, 10), dec_hidden=(12,),
        proj_hidden=(8,), proj_dim=5,
    )
    model = DualModel(mcfg, stream(9, "init"))
    weights = LossWeights(1.0, 1.0, 1.0)
    model.zero_grad()
    dual_loss_and_grads(model, batch, weights)
    report = gradient_check(
        lambda: total_loss(model, batch, weights)[0],
        model.named_params(),
        tolerance=1e-4,
        h=1e-5,
    )
    assert report.passed, f"max rel error {report.max_rel_error}"

    # linear sub-network: central differences are exact up to rounding
    lin = Mlp(MlpSpec((6, 4), "relu", "none"), stream(9, "lin"))
    x = stream(9, "x").standard_normal((5, 6))
    r = stream(9, "r").standard_normal((5, 4))
    out, cache = mlp_forward(lin, x)
    mlp_backward(cache, r)
    lin_report = gradient_check(
        lambda: float(np.sum(r * mlp_forward(lin, x)[0])),
        lin.params(),
        tolerance=1e-10,
        h=1e-3,
    )
    assert lin_report.passed, f"linear max rel error {lin_report.max_rel_error}"
    ok(f"2: PASS - full objective FD check {report.max_rel_error:.2e} < 1e-4 over "
       f"{sum(b.n_checked for b in report.blocks)} coordinates; linear sub-network "
       f"{lin_report.max_rel_error:.2e} < 1e-10")


# ---------------------------------------------------------------------------
# criterion 3: InfoNCE identities


def test_criterion_3_infonce_identities():
    a = np.array([1.0, 0.0])
    v = np.array([[0.0, 1.0]])
    ln2_err = abs(infonce_multi(a, v, v, tau=1.0) - math.log(2.0))
    assert ln2_err < 1e-12

    u = l2_normalize(np.array([[0.3, -0.2, 0.9]]))[0]
    anchor = l2_normalize(np.array([[1.0, 2.0, 3.0]]))[0]
    uniform_err = 0.0
    for n_pos, n_neg in [(2, 3), (5, 1), (4, 7)]:
        got = infonce_multi(anchor, np.tile(u, (n_pos, 1)), np.tile(u, (n_neg, 1)), tau=0.2)
        uniform_err = max(uniform_err, abs(got + math.log(n_pos / (n_pos + n_neg))))
    assert uniform_err < 1e-12

    rng = stream(31, "v")
    pos = l2_normalize(rng.standard_normal((6, 5)))
    neg = l2_normalize(rng.standard_normal((9, 5)))
    anchor = l2_normalize(rng.standard_normal((1, 5)))[0]
    base = infonce_multi(anchor, pos, neg, tau=0.1)
    for trial in range(20):
        p = pos[stream(32, "p", trial).permutation(len(pos))]
        n = neg[stream(32, "n", trial).permutation(len(neg))]
        assert infonce_multi(anchor, p, n, tau=0.1) == base  # exact
    ok(f"3: PASS - ln2 identity err {ln2_err:.1e}, uniform-logit identity err "
       f"{uniform_err:.1e} (both < 1e-12); set-order invariance bit-exact over 20 permutations")


# ---------------------------------------------------------------------------
# criteria 4-7: desk-scale training, disentanglement, and probes


def test_criterion_4_optimization_sanity(dual_result, desk_train_cfg):
    val0 = dual_result.log[0].val_total
    reduction = 1.0 - dual_result.best_val / val0
    epochs_run = len(dual_result.log) - 1
    assert reduction >= 0.30, f"val loss reduction {reduction:.1%}"
    assert dual_result.stopped_early
    assert epochs_run < desk_train_cfg.max_epochs == 200
    ok(f"4: PASS - val total loss fell {reduction:.1%} (epoch0 {val0:.3f} -> best "
       f"{dual_result.best_val:.3f}); early stopping fired at epoch {epochs_run} < 200")


def test_criterion_5_disentanglement_asymmetry(desk_probes):
    probes, leakage = desk_probes
    acc_gap = leakage["z_instr"].mean_accuracy - leakage["z_star"].mean_accuracy
    assert acc_gap >= 0.15, (
        f"instrument-probe accuracy gap {acc_gap:.3f} "
        f"(z_instr {leakage['z_instr'].mean_accuracy:.3f}, z_star {leakage['z_star'].mean_accuracy:.3f})"
    )
    r2_star = probes["z_star"][1000].r2_mean
    r2_instr = probes["z_instr"][1000].r2_mean
    assert r2_star - r2_instr >= 0.1, f"R2 gap {r2_star - r2_instr:.3f}"
    ok(f"5: PASS - instrument-ID accuracy z_instr {leakage['z_instr'].mean_accuracy:.3f} vs "
       f"z_star {leakage['z_star'].mean_accuracy:.3f} (gap {acc_gap:.3f} >= 0.15); "
       f"theta0 R2 z_star {r2_star:.3f} vs z_instr {r2_instr:.3f} (gap {r2_star - r2_instr:.3f} >= 0.1)")


def test_criterion_6_fewshot_ordering(desk_probes):
    probes, _ = desk_probes
    lines = []
    for size in (10, 30, 100):
        z = probes["z_star"][size]
        b = probes["z_baseline"][size]
        raw = probes["raw"][size]
        gap_zb = z.r2_mean - b.r2_mean
        gap_br = b.r2_mean - raw.r2_mean
        assert gap_zb >= pooled_std(z, b), (
            f"@{size}: z_star {z.r2_mean:.3f} vs baseline {b.r2_mean:.3f}, "
            f"gap {gap_zb:.3f} < pooled std {pooled_std(z, b):.3f}"
        )
        assert gap_br >= pooled_std(b, raw), (
            f"@{size}: baseline {b.r2_mean:.3f} vs raw {raw.r2_mean:.3f}, "
            f"gap {gap_br:.3f} < pooled std {pooled_std(b, raw):.3f}"
        )
        lines.append(
            f"@{size} z_star {z.r2_mean:.3f} > baseline {b.r2_mean:.3f} > raw {raw.r2_mean:.3f}"
        )
    ok("6: PASS - few-shot ordering holds with >= 1 pooled-std gaps: " + "; ".join(lines))


def test_criterion_7_data_efficiency(desk_probes):
    probes, _ = desk_probes
    z100 = probes["z_star"][100].r2_mean
    raw1000 = probes["raw"][1000].r2_mean
    assert z100 >= raw1000, f"z_star@100 {z100:.3f} < raw@1000 {raw1000:.3f}"
    ok(f"7: PASS - z_star probe with 100 labels (R2 {z100:.3f}) matches or beats "
       f"raw-flux probe with 1000 labels (R2 {raw1000:.3f})")


# ---------------------------------------------------------------------------
# criterion 8: whole-pipeline byte determinism


COMPACT_CONFIG = """\
format_version = 1

[sim]
n_stars = 30
n_instruments = 5
n_obs = 600
n_star_params = 7
n_inst_terms = 5
n_timesteps = 48
seed = 501

[model]
z_dim = 8
fuse_dim = 16
enc_hidden = [32, 16]
dec_hidden = [32]
proj_hidden = [12]
proj_dim = 8

[train]
batch_size = 32
max_epochs = 4
patience = 3
val_fraction = 0.15
seed = 502

[eval]
train_sizes = [8, 24]
n_runs = 2
seed = 503
probe_epochs = 60
leakage_epochs = 100
leakage_runs = 2
"""


def _run_compact_pipeline(root):
    os.makedirs(root, exist_ok=True)
    cfg_path = os.path.join(root, "config.toml")
    with open(cfg_path, "w") as fh:
        fh.write(COMPACT_CONFIG)
    ds = os.path.join(root, "dataset.bin")
    train_out = os.path.join(root, "train")
    report_out = os.path.join(root, "report")
    assert cli_main(["simulate", "--config", cfg_path, "--out", ds]) == 0
    assert cli_main(["train", "--config", cfg_path, "--dataset", ds, "--out", train_out]) == 0
    ckpt = os.path.join(train_out, "checkpoint_dual.bin")
    assert cli_main([
        "report", "--config", cfg_path, "--dataset", ds, "--checkpoint", ckpt,
        "--out", report_out,
    ]) == 0
    artifacts = {
        "dataset.bin": ds,
        "train_log.jsonl": os.path.join(train_out, "train_log_dual.jsonl"),
        "checkpoint.bin": ckpt,
    }
    for name in sorted(os.listdir(report_out)):
        artifacts[f"report/{name}"] = os.path.join(report_out, name)
    return artifacts


def test_criterion_8_pipeline_byte_determinism(tmp_path):
    run_a = _run_compact_pipeline(str(tmp_path / "a"))
    run_b = _run_compact_pipeline(str(tmp_path / "b"))
    assert run_a.keys() == run_b.keys()
    for name in run_a:
        with open(run_a[name], "rb") as fa, open(run_b[name], "rb") as fb:
            assert fa.read() == fb.read(), f"{name} differs between identical-seed reruns"
    ok(f"8: PASS - identical-seed pipeline rerun reproduced {len(run_a)} artifacts "
       f"byte-for-byte (dataset, training log, checkpoint, report bundle)")


# ---------------------------------------------------------------------------
# criterion 9: round-trip integrity

def test_criterion_9_roundtrip_integrity(tmp_path):
    cfg = sg.SimConfig(
        n_stars=20, n_instruments=3, n_obs=200, n_star_params=5, n_inst_terms=4,
        n_timesteps=24, seed=90,
    )
    ds = sg.build_dataset(cfg)
    ds_path = tmp_path / "ds.bin"
    sg.save_dataset(ds, ds_path)
    assert sg.load_dataset(ds_path) == ds

    mcfg = ModelConfig(
        t_len=24, z_dim=6, fuse_dim=8, enc_hidden=(16, 12), dec_hidden=(16,),
        proj_hidden=(8,), proj_dim=5,
    )
    tcfg = TrainConfig(batch_size=16, max_epochs=6, patience=6, val_fraction=0.2, seed=91)
    full = train_model("dual", ds, tcfg, mcfg, progress=False)

    half = train_model("dual", ds, tcfg, mcfg, epochs_limit=3, progress=False)
    ck = tmp_path / "ck.bin"
    save_checkpoint(half.state, ck)
    restored = load_checkpoint(ck)
    for name, arr in half.state.params.items():
        np.testing.assert_array_equal(arr, restored.params[name])
    resumed = train_model("dual", ds, tcfg, resume=restored, progress=False)

    worst = 0.0
    assert len(full.log) == len(resumed.log)
    for a, b in zip(full.log, resumed.log):
        worst = max(worst, abs(a.train_total - b.train_total), abs(a.val_total - b.val_total))
    assert worst < 1e-12
    ok(f"9: PASS - dataset and checkpoint round-trips exact; resumed training matches "
       f"uninterrupted run with max loss deviation {worst:.1e} < 1e-12")
