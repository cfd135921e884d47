"""Simulator tests: closed-form cases, brute-force oracles, and Monte Carlo laws."""

import cmath
import hashlib
import math
import os

import numpy as np
import pytest

import causadis.simgen as sg
from causadis.errors import DataError, FormatError
from causadis.rng import stream

HERE = os.path.dirname(__file__)


def small_config(**overrides):
    base = dict(
        n_stars=12,
        n_instruments=4,
        n_obs=96,
        n_star_params=5,
        n_inst_terms=4,
        n_timesteps=32,
        alpha=1.0,
        lambda_reduction=0.5,
        noise_std=0.03,
        seed=42,
    )
    base.update(overrides)
    return sg.SimConfig(**base)


# ---------------------------------------------------------------------------
# independent oracles: plain-Python complex summation, no numpy vectorization


def oracle_stellar_signal(theta, phases, times, alpha, lam, T):
    L = T * math.exp(theta[0]) * lam
    out = []
    for t in times:
        acc = 0j
        for k in range(1, len(theta)):
            acc += (
                theta[k]
                * cmath.exp(1j * phases[k - 1])
                / k**alpha
                * cmath.exp(1j * 2.0 * math.pi * k * t / L)
            )
        out.append(acc.real)
    return np.array(out)


def oracle_scale(beta, times, T):
    out = []
    for t in times:
        acc = 0j
        for j, b in enumerate(beta):
            acc += b * cmath.exp(1j * math.pi * j * t / T)
        out.append(1.0 + 0.05 * acc.real)
    return np.array(out)


def oracle_offset(gamma, times, T):
    out = []
    for t in times:
        acc = 0j
        for j, g in enumerate(gamma):
            acc += g * cmath.exp(1j * math.pi * j * t / T)
        out.append(0.05 * acc.real)
    return np.array(out)


# ---------------------------------------------------------------------------
# sampling laws


def test_sample_star_deterministic():
    cfg = small_config()
    a = sg.sample_star(stream(7, "star", 0), cfg)
    b = sg.sample_star(stream(7, "star", 0), cfg)
    assert a.theta.tobytes() == b.theta.tobytes()


def test_sample_star_monte_carlo_law():
    cfg = small_config()
    rng = stream(123, "mc")
    thetas = np.stack([sg.sample_star(rng, cfg).theta for _ in range(10_000)])
    theta1 = thetas[:, 1]
    assert abs(theta1.mean()) < 0.05
    assert abs(theta1.std() - 1.0) < 0.05
    theta0 = thetas[:, 0]
    assert theta0.min() >= -1.0 and theta0.max() <= 1.0
    assert abs(theta0.mean()) < 0.05


def test_sample_star_thirteen_params():
    cfg = small_config(n_star_params=13)
    star = sg.sample_star(stream(1, "s"), cfg)
    assert len(star.theta) == 13


def test_sample_instrument_lengths_and_determinism():
    cfg = small_config(n_inst_terms=17)
    a = sg.sample_instrument(stream(9, "i"), cfg)
    b = sg.sample_instrument(stream(9, "i"), cfg)
    assert len(a.beta) == 17 and len(a.gamma) == 17
    assert a.beta.tobytes() == b.beta.tobytes()
    assert a.gamma.tobytes() == b.gamma.tobytes()


def test_sample_instrument_pooled_std():
    cfg = small_config(n_inst_terms=10)
    rng = stream(55, "mc")
    draws = np.concatenate(
        [np.concatenate([i.beta, i.gamma]) for i in (sg.sample_instrument(rng, cfg) for _ in range(500))]
    )
    assert draws.size == 10_000
    assert abs(draws.std() - 1.0) < 0.05


# ---------------------------------------------------------------------------
# the generative equations


def test_stellar_signal_zero_amplitudes():
    cfg = small_config()
    theta = np.zeros(cfg.n_star_params)
    theta[0] = 0.3
    star = sg.StellarParams(0, theta)
    phases = np.linspace(0, 6, cfg.n_star_params - 1)
    out = sg.stellar_signal(star, phases, sg.time_grid(cfg), cfg)
    assert np.all(out == 0.0)


def test_stellar_signal_single_cosine():
    cfg = small_config(n_star_params=2, alpha=0.0, lambda_reduction=1.0)
    star = sg.StellarParams(0, np.array([0.0, 1.0]))
    times = sg.time_grid(cfg)
    out = sg.stellar_signal(star, np.array([0.0]), times, cfg)
    expected = np.cos(2.0 * np.pi * times / cfg.n_timesteps)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_stellar_signal_matches_bruteforce_oracle():
    cfg = small_config(n_star_params=8, alpha=1.3, lambda_reduction=0.7)
    times = sg.time_grid(cfg)
    rng = stream(2, "oracle")
    for _ in range(100):
        star = sg.sample_star(rng, cfg)
        phases = rng.uniform(0, 2 * np.pi, cfg.n_star_params - 1)
        got = sg.stellar_signal(star, phases, times, cfg)
        want = oracle_stellar_signal(
            star.theta, phases, times, cfg.alpha, cfg.lambda_reduction, cfg.n_timesteps
        )
        assert np.max(np.abs(got - want)) < 1e-12


def test_stellar_signal_rejects_degenerate_lambda():
    cfg = small_config(lambda_reduction=1.0)
    bad = sg.SimConfig(**{**cfg.__dict__, "lambda_reduction": 0.0})
    star = sg.StellarParams(0, np.ones(bad.n_star_params))
    with pytest.raises(DataError):
        sg.stellar_signal(star, np.zeros(bad.n_star_params - 1), sg.time_grid(bad), bad)


def test_stellar_signal_phase_count_checked():
    cfg = small_config()
    star = sg.sample_star(stream(0, "s"), cfg)
    with pytest.raises(DataError):
        sg.stellar_signal(star, np.zeros(cfg.n_star_params), sg.time_grid(cfg), cfg)


def test_instrument_distortions_trivial_cases():
    cfg = small_config()
    times = sg.time_grid(cfg)
    silent = sg.InstrumentParams(0, np.zeros(cfg.n_inst_terms), np.zeros(cfg.n_inst_terms))
    np.testing.assert_array_equal(sg.instrument_scale(silent, times, cfg), np.ones_like(times))
    np.testing.assert_array_equal(sg.instrument_offset(silent, times, cfg), np.zeros_like(times))

    beta = np.zeros(cfg.n_inst_terms)
    beta[0] = 1.0  # j=0 term is constant: e^0 = 1
    constant = sg.InstrumentParams(0, beta, np.zeros(cfg.n_inst_terms))
    np.testing.assert_allclose(sg.instrument_scale(constant, times, cfg), 1.05, atol=1e-15)


def test_instrument_distortions_match_bruteforce_oracle():
    cfg = small_config(n_inst_terms=9)
    times = sg.time_grid(cfg)
    rng = stream(3, "oracle")
    for _ in range(100):
        inst = sg.sample_instrument(rng, cfg)
        got_s = sg.instrument_scale(inst, times, cfg)
        got_o = sg.instrument_offset(inst, times, cfg)
        assert np.max(np.abs(got_s - oracle_scale(inst.beta, times, cfg.n_timesteps))) < 1e-12
        assert np.max(np.abs(got_o - oracle_offset(inst.gamma, times, cfg.n_timesteps))) < 1e-12


def test_observe_clip_saturation(monkeypatch):
    cfg = small_config(noise_std=0.0)
    star = sg.sample_star(stream(0, "s"), cfg)
    silent = sg.InstrumentParams(0, np.zeros(cfg.n_inst_terms), np.zeros(cfg.n_inst_terms))
    monkeypatch.setattr(sg, "stellar_signal", lambda *a, **k: np.full(cfg.n_timesteps, 10.0))
    lc = sg.observe(star, silent, np.zeros(cfg.n_star_params - 1), stream(0, "o"), cfg)
    np.testing.assert_array_equal(lc.flux, np.full(cfg.n_timesteps, 1.0))


def test_observe_clip_inert_when_signal_small():
    cfg = small_config(noise_std=0.0)
    theta = np.zeros(cfg.n_star_params)
    theta[1] = 0.2  # single small harmonic stays inside the clip window
    star = sg.StellarParams(0, theta)
    silent = sg.InstrumentParams(0, np.zeros(cfg.n_inst_terms), np.zeros(cfg.n_inst_terms))
    phases = stream(4, "p").uniform(0, 2 * np.pi, cfg.n_star_params - 1)
    signal = sg.stellar_signal(star, phases, sg.time_grid(cfg), cfg)
    assert np.max(np.abs(signal)) < 1.0
    lc = sg.observe(star, silent, phases, stream(4, "o"), cfg)
    np.testing.assert_array_equal(lc.flux, signal)


def test_observe_noise_std_monte_carlo():
    cfg = small_config(n_timesteps=100, noise_std=0.03)
    star = sg.sample_star(stream(1, "s"), cfg)
    inst = sg.sample_instrument(stream(1, "i"), cfg)
    times = sg.time_grid(cfg)
    residuals = []
    for n in range(1000):
        rng = stream(77, "obs", n)
        phases = rng.uniform(0, 2 * np.pi, cfg.n_star_params - 1)
        lc = sg.observe(star, inst, phases, rng, cfg)
        clean = np.clip(
            sg.instrument_scale(inst, times, cfg) * sg.stellar_signal(star, phases, times, cfg)
            + sg.instrument_offset(inst, times, cfg),
            cfg.clip_lo,
            cfg.clip_hi,
        )
        residuals.append(lc.flux - clean)
    pooled = np.concatenate(residuals)
    assert pooled.size == 100_000
    assert 0.029 <= pooled.std() <= 0.031


def test_noise_residuals_uncorrelated_across_lags():
    cfg = small_config(n_timesteps=100, noise_std=0.03)
    star = sg.sample_star(stream(6, "s"), cfg)
    inst = sg.InstrumentParams(0, np.zeros(cfg.n_inst_terms), np.zeros(cfg.n_inst_terms))
    times = sg.time_grid(cfg)
    residuals = []
    for n in range(1000):
        rng = stream(88, "obs", n)
        phases = rng.uniform(0, 2 * np.pi, cfg.n_star_params - 1)
        lc = sg.observe(star, inst, phases, rng, cfg)
        clean = np.clip(
            sg.stellar_signal(star, phases, times, cfg), cfg.clip_lo, cfg.clip_hi
        )
        residuals.append(lc.flux - clean)
    pooled = np.concatenate(residuals)
    pooled = (pooled - pooled.mean()) / pooled.std()
    n = pooled.size
    for lag in (1, 2, 5):
        r = float(np.mean(pooled[:-lag] * pooled[lag:]))
        assert abs(r) < 5.0 / np.sqrt(n), f"lag {lag} autocorrelation {r}"


def test_clip_bounds_hold_without_noise():
    cfg = small_config(noise_std=0.0)
    ds = sg.build_dataset(cfg)
    flux = np.concatenate([o.flux for o in ds.observations])
    assert flux.min() >= cfg.clip_lo and flux.max() <= cfg.clip_hi


def test_amplitude_spectrum_phase_invariance_at_aligned_period():
    # exact only for unclipped signals whose harmonics land on DFT bins:
    # small amplitudes, theta0 = 0, lambda = 1
    cfg = small_config(noise_std=0.0, lambda_reduction=1.0)
    theta = 0.1 * stream(5, "t").standard_normal(cfg.n_star_params)
    theta[0] = 0.0
    star = sg.StellarParams(0, theta)
    silent = sg.InstrumentParams(0, np.zeros(cfg.n_inst_terms), np.zeros(cfg.n_inst_terms))
    rng = stream(5, "p")
    lc1 = sg.observe(star, silent, rng.uniform(0, 2 * np.pi, cfg.n_star_params - 1), rng, cfg)
    lc2 = sg.observe(star, silent, rng.uniform(0, 2 * np.pi, cfg.n_star_params - 1), rng, cfg)
    assert max(np.max(np.abs(lc1.flux)), np.max(np.abs(lc2.flux))) < 1.0  # clip inert
    amp1 = np.abs(np.fft.rfft(lc1.flux))
    amp2 = np.abs(np.fft.rfft(lc2.flux))
    assert np.max(np.abs(amp1 - amp2)) < 1e-9


def test_period_law_doubles_with_log_parameter():
    cfg = small_config()
    theta = np.zeros(cfg.n_star_params)
    theta[0] = 0.2
    base = sg.period_of(sg.StellarParams(0, theta), cfg)
    theta2 = theta.copy()
    theta2[0] = 0.2 + np.log(2.0)
    doubled = sg.period_of(sg.StellarParams(0, theta2), cfg)
    assert math.isclose(doubled, 2.0 * base, rel_tol=1e-12)


# ---------------------------------------------------------------------------
# dataset construction


def test_build_dataset_small_invariants():
    ds = sg.build_dataset(small_config())
    ds.check_invariants()
    assert ds.n_obs == 96
    per_star = {len(v) for v in ds.index_by_star.values()}
    assert per_star == {96 // 12}


def test_build_dataset_desk_scale_invariants():
    cfg = sg.SimConfig(seed=2025)  # defaults: 4000 obs, 200 stars, 17 instruments
    ds = sg.build_dataset(cfg)
    ds.check_invariants()
    assert ds.n_obs == 4000
    assert len(ds.stars) == 200
    assert len(ds.instruments) == 17


@pytest.mark.slow
def test_build_dataset_paper_scale():
    cfg = sg.SimConfig(n_stars=2000, n_instruments=17, n_obs=40_000, seed=7)
    ds = sg.build_dataset(cfg)
    assert ds.n_obs == 40_000
    assert len(ds.stars) == 2000
    assert len(ds.instruments) == 17
    assert all(len(v) == 20 for v in ds.index_by_star.values())
    ds.check_invariants()


def test_build_dataset_rejects_impossible_configs():
    with pytest.raises(DataError):
        sg.build_dataset(small_config(n_obs=12))  # 1 obs per star
    with pytest.raises(DataError):
        sg.build_dataset(small_config(n_instruments=1))


def test_build_dataset_seed_determinism(tmp_path):
    cfg = small_config(seed=31)
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    sg.save_dataset(sg.build_dataset(cfg), p1)
    sg.save_dataset(sg.build_dataset(cfg), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_repair_handles_tight_configs():
    # tiny graphs force the repair passes to actually run
    for seed in range(12):
        cfg = small_config(n_stars=4, n_obs=8, n_instruments=3, seed=seed)
        sg.build_dataset(cfg).check_invariants()


# ---------------------------------------------------------------------------
# triplets


def test_sample_triplet_postconditions():
    ds = sg.build_dataset(small_config())
    rng = stream(11, "t")
    for anchor in range(ds.n_obs):
        t = sg.sample_triplet(ds, anchor, rng)
        assert ds.star_of(t.anchor) == ds.star_of(t.same_star)
        assert ds.instrument_of(t.anchor) != ds.instrument_of(t.same_star)
        assert ds.instrument_of(t.anchor) == ds.instrument_of(t.same_inst)
        assert ds.star_of(t.anchor) != ds.star_of(t.same_inst)
        assert len({t.anchor, t.same_star, t.same_inst}) == 3


def test_sample_triplet_uniform_over_candidates():
    ds = sg.build_dataset(small_config())
    anchor = 0
    candidates = sg.same_star_candidates(ds, anchor)
    rng = stream(13, "u")
    n_draws = 10_000
    counts = {c: 0 for c in candidates}
    for _ in range(n_draws):
        counts[sg.sample_triplet(ds, anchor, rng).same_star] += 1
    p = 1.0 / len(candidates)
    sigma = math.sqrt(n_draws * p * (1 - p))
    for c, n in counts.items():
        assert abs(n - n_draws * p) < 5 * sigma, f"candidate {c}: {n} draws"


def test_sample_triplet_respects_allowed_filter():
    ds = sg.build_dataset(small_config())
    anchor = 0
    allowed = frozenset(range(ds.n_obs // 2))
    rng = stream(17, "t")
    for _ in range(50):
        t = sg.sample_triplet(ds, anchor, rng, allowed=allowed)
        assert t.same_star in allowed and t.same_inst in allowed


def test_sample_triplet_structural_error():
    ds = sg.build_dataset(small_config())
    with pytest.raises(DataError):
        sg.sample_triplet(ds, 0, stream(0, "t"), allowed=frozenset({0}))


# ---------------------------------------------------------------------------
# persistence


def test_dataset_roundtrip_identity(tmp_path):
    ds = sg.build_dataset(small_config(seed=77))
    path = tmp_path / "ds.bin"
    sg.save_dataset(ds, path)
    loaded = sg.load_dataset(path)
    assert loaded == ds


def test_truncated_file_raises_checksum_error(tmp_path):
    ds = sg.build_dataset(small_config())
    path = tmp_path / "ds.bin"
    sg.save_dataset(ds, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 100])
    with pytest.raises(FormatError, match="checksum|short"):
        sg.load_dataset(path)


def test_corrupted_payload_raises_checksum_error(tmp_path):
    ds = sg.build_dataset(small_config())
    path = tmp_path / "ds.bin"
    sg.save_dataset(ds, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="checksum"):
        sg.load_dataset(path)


def test_fixture_file_loads_with_recorded_hash():
    """Guards on-disk format stability: fixture generated once, hash frozen."""
    path = os.path.join(HERE, "data", "dataset_fixture.bin")
    ds = sg.load_dataset(path)
    ds.check_invariants()
    flux = np.stack([o.flux for o in ds.observations])
    digest = hashlib.sha256(flux.tobytes()).hexdigest()
    expected = open(os.path.join(HERE, "data", "dataset_fixture.flux.sha256")).read().strip()
    assert digest == expected


def test_json_export_is_lossless(tmp_path):
    import json

    ds = sg.build_dataset(small_config(seed=5))
    path = tmp_path / "ds.json"
    sg.export_dataset_json(ds, path)
    doc = json.loads(path.read_text())
    assert doc["config"]["seed"] == 5
    flux0 = np.array(doc["observations"][0]["flux"])
    np.testing.assert_array_equal(flux0, ds.observations[0].flux)
