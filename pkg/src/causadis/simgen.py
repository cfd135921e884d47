"""Synthetic light-curve generator.

A star's intrinsic signal is a truncated complex Fourier series whose
harmonics decay as a power law; each observation of that star is
distorted by an instrument-specific multiplicative scale and additive
offset (both low-order Fourier series in time), clipped to a fixed
amplitude window, and then perturbed by white Gaussian noise. Crucially
the clip is applied before the noise, so noise can carry flux slightly
outside the window.

The observation graph guarantees that every star is seen by at least two
distinct instruments and every instrument sees at least two distinct
stars, which is what makes (anchor, same-star, same-instrument) triplet
sampling always feasible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import storage
from .errors import DataError, FormatError
from .rng import stream

DATASET_MAGIC = b"CDLC"
DATASET_VERSION = 1

SCALE_AMPLITUDE = 0.05  # fractional size of instrument scale wiggles
OFFSET_AMPLITUDE = 0.05  # size of instrument offset wiggles


@dataclass(frozen=True)
class SimConfig:
    """Knobs of the generative process.

    ``n_star_params`` counts the stellar parameter vector entries: index 0
    sets the log-period, indices 1..n-1 are harmonic amplitudes.
    ``n_inst_terms`` counts Fourier terms per instrument distortion.
    """

    n_stars: int = 200
    n_instruments: int = 17
    n_obs: int = 4000
    n_star_params: int = 13
    n_inst_terms: int = 17
    n_timesteps: int = 100
    alpha: float = 1.0
    lambda_reduction: float = 0.5
    noise_std: float = 0.03
    clip_lo: float = -1.0
    clip_hi: float = 1.0
    seed: int = 12345

    def validate(self) -> None:
        if self.n_obs < self.n_stars:
            raise DataError("n_obs must be >= n_stars")
        if self.n_star_params < 2:
            raise DataError("n_star_params must be >= 2")
        if self.n_timesteps < 2:
            raise DataError("n_timesteps must be >= 2")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")
        if not self.clip_lo < self.clip_hi:
            raise DataError("clip_lo must be < clip_hi")
        if self.lambda_reduction <= 0:
            raise DataError("lambda_reduction must be > 0 (degenerate period)")
        if self.n_instruments < 1 or self.n_inst_terms < 1:
            raise DataError("n_instruments and n_inst_terms must be >= 1")
        if self.seed < 0:
            raise DataError("seed must be non-negative")


@dataclass(frozen=True)
class StellarParams:
    star_id: int
    theta: np.ndarray  # (n_star_params,)

    def __eq__(self, other):
        return (
            isinstance(other, StellarParams)
            and self.star_id == other.star_id
            and self.theta.tobytes() == other.theta.tobytes()
        )


@dataclass(frozen=True)
class InstrumentParams:
    instrument_id: int
    beta: np.ndarray  # (n_inst_terms,) scale coefficients
    gamma: np.ndarray  # (n_inst_terms,) offset coefficients

    def __eq__(self, other):
        return (
            isinstance(other, InstrumentParams)
            and self.instrument_id == other.instrument_id
            and self.beta.tobytes() == other.beta.tobytes()
            and self.gamma.tobytes() == other.gamma.tobytes()
        )


@dataclass(frozen=True)
class LightCurve:
    obs_id: int
    star_id: int
    instrument_id: int
    flux: np.ndarray  # (n_timesteps,)
    times: np.ndarray  # (n_timesteps,), shared uniform grid
    phases: np.ndarray  # (n_star_params - 1,), this observation's harmonic phases

    def __eq__(self, other):
        return (
            isinstance(other, LightCurve)
            and self.obs_id == other.obs_id
            and self.star_id == other.star_id
            and self.instrument_id == other.instrument_id
            and self.flux.tobytes() == other.flux.tobytes()
            and self.times.tobytes() == other.times.tobytes()
            and self.phases.tobytes() == other.phases.tobytes()
        )


@dataclass(frozen=True)
class Triplet:
    anchor: int
    same_star: int
    same_inst: int


@dataclass
class Dataset:
    config: SimConfig
    stars: list
    instruments: list
    observations: list
    index_by_star: dict = field(default_factory=dict)
    index_by_instrument: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.index_by_star:
            self.rebuild_indexes()

    def rebuild_indexes(self) -> None:
        by_star = {s.star_id: [] for s in self.stars}
        by_inst = {i.instrument_id: [] for i in self.instruments}
        for obs in self.observations:
            by_star[obs.star_id].append(obs.obs_id)
            by_inst[obs.instrument_id].append(obs.obs_id)
        self.index_by_star = by_star
        self.index_by_instrument = by_inst

    @property
    def n_obs(self) -> int:
        return len(self.observations)

    def obs(self, obs_id: int) -> LightCurve:
        return self.observations[obs_id]

    def star_of(self, obs_id: int) -> int:
        return self.observations[obs_id].star_id

    def instrument_of(self, obs_id: int) -> int:
        return self.observations[obs_id].instrument_id

    def theta0_of_star(self, star_id: int) -> float:
        return float(self.stars[star_id].theta[0])

    def flux_rows(self, obs_ids) -> np.ndarray:
        return np.stack([self.observations[i].flux for i in obs_ids])

    def check_invariants(self) -> None:
        """Raise DataError if the observation graph is malformed."""
        for star_id, obs_ids in self.index_by_star.items():
            insts = {self.instrument_of(o) for o in obs_ids}
            if len(obs_ids) < 2 or len(insts) < 2:
                raise DataError(
                    f"star {star_id} needs >=2 observations under >=2 instruments "
                    f"(has {len(obs_ids)} obs, {len(insts)} instruments)"
                )
        for inst_id, obs_ids in self.index_by_instrument.items():
            stars = {self.star_of(o) for o in obs_ids}
            if len(stars) < 2:
                raise DataError(f"instrument {inst_id} observes {len(stars)} stars, needs >=2")
        seen = set()
        for obs in self.observations:
            if obs.obs_id in seen:
                raise DataError(f"duplicate obs_id {obs.obs_id}")
            seen.add(obs.obs_id)

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.config == other.config
            and self.stars == other.stars
            and self.instruments == other.instruments
            and self.observations == other.observations
            and self.index_by_star == other.index_by_star
            and self.index_by_instrument == other.index_by_instrument
        )


def time_grid(config: SimConfig) -> np.ndarray:
    return np.arange(config.n_timesteps, dtype=np.float64)


def period_of(star: StellarParams, config: SimConfig) -> float:
    """Fundamental period: n_timesteps * exp(theta[0]) * lambda_reduction."""
    if config.lambda_reduction <= 0:
        raise DataError("lambda_reduction must be > 0 (degenerate period)")
    return config.n_timesteps * float(np.exp(star.theta[0])) * config.lambda_reduction


def sample_star(rng: np.random.Generator, config: SimConfig, star_id: int = 0) -> StellarParams:
    """theta[0] ~ U(-1, 1) so periods span [T*lam/e, T*lam*e]; theta[k>=1] ~ N(0, 1)."""
    theta = np.empty(config.n_star_params, dtype=np.float64)
    theta[0] = rng.uniform(-1.0, 1.0)
    theta[1:] = rng.standard_normal(config.n_star_params - 1)
    theta.flags.writeable = False
    return StellarParams(star_id=star_id, theta=theta)


def sample_instrument(
    rng: np.random.Generator, config: SimConfig, instrument_id: int = 0
) -> InstrumentParams:
    beta = rng.standard_normal(config.n_inst_terms)
    gamma = rng.standard_normal(config.n_inst_terms)
    beta.flags.writeable = False
    gamma.flags.writeable = False
    return InstrumentParams(instrument_id=instrument_id, beta=beta, gamma=gamma)


def stellar_signal(
    star: StellarParams, phases: np.ndarray, times: np.ndarray, config: SimConfig
) -> np.ndarray:
    """Intrinsic flux: Re[sum_k theta_k e^{i phase_{k-1}} / k^alpha * e^{i 2 pi k t / L}].

    The sum runs over harmonics k = 1..n_star_params-1; phases has one
    entry per harmonic.
    """
    if config.lambda_reduction <= 0:
        raise DataError("lambda_reduction must be > 0 (degenerate period)")
    n_harm = config.n_star_params - 1
    if len(phases) != n_harm:
        raise DataError(f"expected {n_harm} phases, got {len(phases)}")
    period = period_of(star, config)
    k = np.arange(1, config.n_star_params, dtype=np.float64)
    coeff = star.theta[1:] * np.exp(1j * phases) / k**config.alpha
    basis = np.exp(2j * np.pi * np.outer(times, k) / period)
    return np.real(basis @ coeff)


def _instrument_basis(times: np.ndarray, config: SimConfig) -> np.ndarray:
    j = np.arange(config.n_inst_terms, dtype=np.float64)
    return np.exp(1j * np.pi * np.outer(times, j) / config.n_timesteps)


def instrument_scale(inst: InstrumentParams, times: np.ndarray, config: SimConfig) -> np.ndarray:
    """Multiplicative distortion: 1 + 0.05 * Re[sum_j beta_j e^{i pi j t / T}]."""
    return 1.0 + SCALE_AMPLITUDE * np.real(_instrument_basis(times, config) @ inst.beta.astype(complex))


def instrument_offset(inst: InstrumentParams, times: np.ndarray, config: SimConfig) -> np.ndarray:
    """Additive distortion: 0.05 * Re[sum_j gamma_j e^{i pi j t / T}]."""
    return OFFSET_AMPLITUDE * np.real(_instrument_basis(times, config) @ inst.gamma.astype(complex))


def observe(
    star: StellarParams,
    inst: InstrumentParams,
    phases: np.ndarray,
    rng: np.random.Generator,
    config: SimConfig,
    obs_id: int = 0,
    times: np.ndarray | None = None,
) -> LightCurve:
    """One observation: clip(scale * signal + offset) + noise. Clip precedes noise."""
    if times is None:
        times = time_grid(config)
    signal = stellar_signal(star, phases, times, config)
    scaled = instrument_scale(inst, times, config) * signal + instrument_offset(inst, times, config)
    flux = np.clip(scaled, config.clip_lo, config.clip_hi)
    if config.noise_std > 0:
        flux = flux + config.noise_std * rng.standard_normal(config.n_timesteps)
    flux = np.ascontiguousarray(flux)
    flux.flags.writeable = False
    phases = np.ascontiguousarray(phases)
    phases.flags.writeable = False
    return LightCurve(
        obs_id=obs_id,
        star_id=star.star_id,
        instrument_id=inst.instrument_id,
        flux=flux,
        times=times,
        phases=phases,
    )


def _repair_assignments(
    obs_star: np.ndarray, obs_inst: np.ndarray, n_instruments: int, rng: np.random.Generator
) -> None:
    """Re-draw instrument assignments until the observation graph invariants hold.

    In-place on obs_inst. Two passes alternate: give every one-instrument
    star a second instrument, then feed every under-covered instrument a
    donor observation whose move cannot break other invariants.
    """
    n_obs = len(obs_star)
    star_ids = np.unique(obs_star)
    for _ in range(200):
        changed = False
        # pass 1: stars stuck on a single instrument
        for s in star_ids:
            idx = np.flatnonzero(obs_star == s)
            insts = set(obs_inst[idx].tolist())
            if len(insts) >= 2:
                continue
            pick = idx[rng.integers(len(idx))]
            current = obs_inst[pick]
            alt = rng.integers(n_instruments - 1)
            obs_inst[pick] = alt if alt < current else alt + 1
            changed = True
        # pass 2: instruments seeing fewer than two distinct stars
        pair_counts = {}
        for o in range(n_obs):
            key = (obs_star[o], obs_inst[o])
            pair_counts[key] = pair_counts.get(key, 0) + 1
        for m in range(n_instruments):
            idx = np.flatnonzero(obs_inst == m)
            stars_here = set(obs_star[idx].tolist())
            if len(stars_here) >= 2:
                continue
            # donor: different star, and its (star, inst) pair has a duplicate,
            # so moving it keeps both its star's and its instrument's coverage
            donors = [
                o
                for o in range(n_obs)
                if obs_star[o] not in stars_here
                and pair_counts[(obs_star[o], obs_inst[o])] >= 2
            ]
            if not donors:
                donors = [o for o in range(n_obs) if obs_star[o] not in stars_here]
            if not donors:
                raise DataError("cannot satisfy instrument coverage: too few stars")
            pick = donors[rng.integers(len(donors))]
            pair_counts[(obs_star[pick], obs_inst[pick])] -= 1
            obs_inst[pick] = m
            pair_counts[(obs_star[pick], m)] = pair_counts.get((obs_star[pick], m), 0) + 1
            changed = True
        if not changed:
            return
    raise DataError("observation graph repair did not converge; increase n_obs or reduce n_instruments")


def build_dataset(config: SimConfig, rng: np.random.Generator | None = None) -> Dataset:
    """Generate the full star/instrument observation graph.

    Stars are assigned round-robin (each gets n_obs // n_stars
    observations), instruments uniformly per observation with repair
    passes to guarantee the graph invariants. All randomness is drawn
    from per-entity streams keyed by config.seed, so output is identical
    regardless of generation order; the optional rng argument is unused
    and accepted only for call-site symmetry.
    """
    del rng
    config.validate()
    if config.n_obs // config.n_stars < 2:
        raise DataError("need n_obs/n_stars >= 2 for triplet structure")
    if config.n_instruments < 2:
        raise DataError("need n_instruments >= 2 for triplet structure")
    seed = config.seed

    stars = [sample_star(stream(seed, "star", i), config, star_id=i) for i in range(config.n_stars)]
    instruments = [
        sample_instrument(stream(seed, "instrument", m), config, instrument_id=m)
        for m in range(config.n_instruments)
    ]

    obs_star = np.array([n % config.n_stars for n in range(config.n_obs)], dtype=np.int64)
    obs_inst = stream(seed, "assign").integers(config.n_instruments, size=config.n_obs).astype(np.int64)
    _repair_assignments(obs_star, obs_inst, config.n_instruments, stream(seed, "repair"))

    times = time_grid(config)
    times.flags.writeable = False
    observations = []
    for n in range(config.n_obs):
        obs_rng = stream(seed, "obs", n)
        phases = obs_rng.uniform(0.0, 2.0 * np.pi, size=config.n_star_params - 1)
        observations.append(
            observe(
                stars[obs_star[n]],
                instruments[obs_inst[n]],
                phases,
                obs_rng,
                config,
                obs_id=n,
                times=times,
            )
        )

    dataset = Dataset(config=config, stars=stars, instruments=instruments, observations=observations)
    dataset.check_invariants()
    return dataset


def same_star_candidates(dataset: Dataset, anchor_obs_id: int, allowed=None) -> list:
    """Observations of the anchor's star taken with a different instrument."""
    anchor = dataset.obs(anchor_obs_id)
    out = [
        o
        for o in dataset.index_by_star[anchor.star_id]
        if dataset.instrument_of(o) != anchor.instrument_id and (allowed is None or o in allowed)
    ]
    return out


def same_inst_candidates(dataset: Dataset, anchor_obs_id: int, allowed=None) -> list:
    """Observations of a different star taken with the anchor's instrument."""
    anchor = dataset.obs(anchor_obs_id)
    out = [
        o
        for o in dataset.index_by_instrument[anchor.instrument_id]
        if dataset.star_of(o) != anchor.star_id and (allowed is None or o in allowed)
    ]
    return out


def sample_triplet(
    dataset: Dataset, anchor_obs_id: int, rng: np.random.Generator, allowed=None
) -> Triplet:
    """Draw (anchor, same-star, same-instrument) uniformly over candidates.

    ``allowed`` optionally restricts members to a subset of observation
    ids (used for split-side sampling so validation stars never leak
    into training batches).
    """
    star_pool = same_star_candidates(dataset, anchor_obs_id, allowed)
    if not star_pool:
        raise DataError(f"anchor {anchor_obs_id}: no same-star observation under another instrument")
    inst_pool = same_inst_candidates(dataset, anchor_obs_id, allowed)
    if not inst_pool:
        raise DataError(f"anchor {anchor_obs_id}: no same-instrument observation of another star")
    return Triplet(
        anchor=anchor_obs_id,
        same_star=star_pool[rng.integers(len(star_pool))],
        same_inst=inst_pool[rng.integers(len(inst_pool))],
    )


def save_dataset(dataset: Dataset, path) -> None:
    cfg = asdict(dataset.config)
    arrays = {
        "theta": np.stack([s.theta for s in dataset.stars]),
        "beta": np.stack([i.beta for i in dataset.instruments]),
        "gamma": np.stack([i.gamma for i in dataset.instruments]),
        "times": dataset.observations[0].times,
        "obs_star": np.array([o.star_id for o in dataset.observations], dtype=np.int64),
        "obs_inst": np.array([o.instrument_id for o in dataset.observations], dtype=np.int64),
        "obs_ids": np.array([o.obs_id for o in dataset.observations], dtype=np.int64),
        "flux": np.stack([o.flux for o in dataset.observations]),
        "phases": np.stack([o.phases for o in dataset.observations]),
    }
    storage.save_container(path, DATASET_MAGIC, DATASET_VERSION, {"config": cfg}, arrays)


def load_dataset(path) -> Dataset:
    header, arrays = storage.load_container(path, DATASET_MAGIC, DATASET_VERSION)
    try:
        config = SimConfig(**header["config"])
    except TypeError as exc:
        raise FormatError(f"{path}: unrecognized config fields ({exc})") from exc
    stars = []
    for i in range(config.n_stars):
        theta = np.ascontiguousarray(arrays["theta"][i])
        theta.flags.writeable = False
        stars.append(StellarParams(star_id=i, theta=theta))
    instruments = []
    for m in range(config.n_instruments):
        beta = np.ascontiguousarray(arrays["beta"][m])
        gamma = np.ascontiguousarray(arrays["gamma"][m])
        beta.flags.writeable = False
        gamma.flags.writeable = False
        instruments.append(InstrumentParams(instrument_id=m, beta=beta, gamma=gamma))
    times = np.ascontiguousarray(arrays["times"])
    times.flags.writeable = False
    observations = []
    for n in range(config.n_obs):
        flux = np.ascontiguousarray(arrays["flux"][n])
        phases = np.ascontiguousarray(arrays["phases"][n])
        flux.flags.writeable = False
        phases.flags.writeable = False
        observations.append(
            LightCurve(
                obs_id=int(arrays["obs_ids"][n]),
                star_id=int(arrays["obs_star"][n]),
                instrument_id=int(arrays["obs_inst"][n]),
                flux=flux,
                times=times,
                phases=phases,
            )
        )
    return Dataset(config=config, stars=stars, instruments=instruments, observations=observations)


def export_dataset_json(dataset: Dataset, path) -> None:
    """Lossless JSON dump for debugging; floats keep full precision via repr."""
    doc = {
        "config": asdict(dataset.config),
        "stars": [{"star_id": s.star_id, "theta": s.theta.tolist()} for s in dataset.stars],
        "instruments": [
            {"instrument_id": i.instrument_id, "beta": i.beta.tolist(), "gamma": i.gamma.tolist()}
            for i in dataset.instruments
        ],
        "times": dataset.observations[0].times.tolist(),
        "observations": [
            {
                "obs_id": o.obs_id,
                "star_id": o.star_id,
                "instrument_id": o.instrument_id,
                "flux": o.flux.tolist(),
                "phases": o.phases.tolist(),
            }
            for o in dataset.observations
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
