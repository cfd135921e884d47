"""Training loop for the dual and baseline models.

Splits are by star so validation stars are never seen during encoder
training. Training triplets are resampled every epoch (fresh positive
pairings), validation triplets are frozen once per run for a
low-variance stopping signal. All randomness is keyed by
(config.seed, purpose, epoch), which makes resumed runs bit-identical
to uninterrupted ones.
"""

from __future__ import annotations

import json
import sys
import time
from collections import defaultdict
from dataclasses import dataclass, field, asdict

import numpy as np

from . import storage
from .errors import DataError, FormatError, NumericError
from .model import (
    DualModel,
    LossWeights,
    ModelConfig,
    arch_hash,
    assemble_pair_batch,
    assemble_triplet_batch,
    baseline_loss_and_grads,
    baseline_losses,
    build_model,
    dual_loss_and_grads,
    total_loss,
)
from .nncore import AdamState, adam_step
from .rng import stream
from .simgen import Dataset, sample_triplet

CHECKPOINT_MAGIC = b"CDCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 200
    lr: float = 0.001
    patience: int = 10
    min_delta: float = 1e-4
    val_fraction: float = 0.1
    seed: int = 777
    lambda_recon: float = 1.0
    lambda_star: float = 1.0
    lambda_instr: float = 1.0

    def validate(self):
        if self.batch_size < 2:
            raise DataError("batch_size must be >= 2")
        if not 0.0 < self.val_fraction < 0.5:
            raise DataError("val_fraction must lie in (0, 0.5)")
        if self.patience < 1:
            raise DataError("patience must be >= 1")
        if self.max_epochs < 1:
            raise DataError("max_epochs must be >= 1")
        if self.min_delta < 0:
            raise DataError("min_delta must be >= 0")

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_recon, self.lambda_star, self.lambda_instr)


@dataclass
class TrainLogRecord:
    epoch: int
    train_total: float
    train_recon: float
    train_star: float
    train_instr: float
    val_total: float
    val_recon: float
    val_star: float
    val_instr: float
    lr: float
    wall_time: float  # seconds since run start; stderr only, never persisted

    def to_persistable(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")  # keeps rerun logs byte-identical
        return d


def write_log_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            d = rec.to_persistable() if isinstance(rec, TrainLogRecord) else dict(rec)
            fh.write(json.dumps(d, sort_keys=True, separators=(",", ":")) + "\n")


class EarlyStopper:
    """Stops after `patience` consecutive epochs without a min_delta improvement."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.since_improve = 0

    def update(self, value: float) -> bool:
        """Feed one epoch's validation loss; returns True when training should stop."""
        if value < self.best - self.min_delta:
            self.best = value
            self.since_improve = 0
        else:
            self.since_improve += 1
        return self.since_improve >= self.patience


def split_dataset(dataset: Dataset, val_fraction: float, seed: int):
    """Star-level split into (train_ids, val_ids); both sides stay triplet-feasible."""
    if not 0.0 < val_fraction < 0.5:
        raise DataError("val_fraction must lie in (0, 0.5)")
    star_ids = sorted(dataset.index_by_star)
    perm = stream(seed, "split").permutation(len(star_ids))
    n_val = max(1, int(round(val_fraction * len(star_ids))))
    val_stars = {star_ids[i] for i in perm[:n_val]}
    train_ids = sorted(
        o for s in star_ids if s not in val_stars for o in dataset.index_by_star[s]
    )
    val_ids = sorted(o for s in val_stars for o in dataset.index_by_star[s])
    for name, side in (("train", train_ids), ("val", val_ids)):
        problem = _side_infeasibility(dataset, side)
        if problem:
            raise DataError(f"{name} side loses triplet feasibility: {problem}")
    return train_ids, val_ids


def _side_infeasibility(dataset: Dataset, side_ids) -> str | None:
    stars_by_inst = defaultdict(set)
    for o in side_ids:
        stars_by_inst[dataset.instrument_of(o)].add(dataset.star_of(o))
    for inst, stars in stars_by_inst.items():
        if len(stars) < 2:
            return f"instrument {inst} observes only {len(stars)} star(s) on this side"
    # star-side diversity is inherited from the dataset invariant because
    # a star's observations are never divided across sides
    return None


def make_epoch_batches(dataset: Dataset, side_ids, batch_size: int, rng, kind: str = "dual"):
    """One pass over the side: each anchor once, members freshly sampled.

    Final ragged batch is kept when it still has >= 2 anchors, else dropped.
    """
    side = frozenset(side_ids)
    anchors = np.array(sorted(side_ids), dtype=np.int64)
    anchors = anchors[rng.permutation(len(anchors))]
    triplets = [sample_triplet(dataset, int(a), rng, allowed=side) for a in anchors]
    batches = []
    for start in range(0, len(triplets), batch_size):
        chunk = triplets[start : start + batch_size]
        if len(chunk) < 2:
            continue
        if kind == "dual":
            batches.append(assemble_triplet_batch(dataset, chunk))
        else:
            batches.append(assemble_pair_batch(dataset, chunk))
    return batches


@dataclass
class TrainState:
    """Everything needed to resume training bit-exactly or to serve the best model."""

    model_kind: str
    arch: dict
    train_config: dict
    dataset_config: dict
    epoch: int
    params: dict  # name -> ndarray (latest)
    best_params: dict  # name -> ndarray (argmin val)
    adam_moments_m: dict
    adam_moments_v: dict
    adam_step_count: int
    best_val: float
    best_epoch: int
    es_best: float
    es_since_improve: int
    log: list = field(default_factory=list)

    def spec_hash(self) -> str:
        return arch_hash(self.arch)


@dataclass
class TrainResult:
    model: object  # best-validation parameters installed
    log: list  # TrainLogRecord per epoch (epoch 0 = pre-training evaluation)
    best_epoch: int
    best_val: float
    stopped_early: bool
    state: TrainState


def _snapshot_params(named) -> dict:
    return {name: p.values.copy() for name, p in named.items()}


def _install_params(named, snapshot) -> None:
    for name, p in named.items():
        p.values[...] = snapshot[name]


def _model_from_state(state: TrainState):
    arch = dict(state.arch)
    kind = arch.pop("kind")
    baseline_z = arch.pop("baseline_z_dim")
    cfg = ModelConfig(
        t_len=arch["t_len"],
        z_dim=arch["z_dim"],
        fuse_dim=arch["fuse_dim"],
        enc_hidden=tuple(arch["enc_hidden"]),
        dec_hidden=tuple(arch["dec_hidden"]),
        proj_hidden=tuple(arch["proj_hidden"]),
        proj_dim=arch["proj_dim"],
        tau=arch["tau"],
        activation=arch["activation"],
        decoder_final=arch["decoder_final"],
        fuse_final=arch["fuse_final"],
        baseline_z_dim=baseline_z,
    )
    model = build_model(kind, cfg, rng=None)
    _install_params(model.named_params(), state.params)
    return model


def _evaluate(model, batches, weights):
    """Anchor-weighted mean loss components over fixed batches."""
    sums = {"total": 0.0, "recon": 0.0, "star": 0.0, "instr": 0.0}
    n = 0
    for batch in batches:
        if isinstance(model, DualModel):
            total, comps = total_loss(model, batch, weights)
        else:
            total, comps = baseline_losses(model, batch, weights)
        w = batch.n_anchors
        sums["total"] += total * w
        for key in ("recon", "star", "instr"):
            sums[key] += comps[key] * w
        n += w
    return {k: v / n for k, v in sums.items()}


def train_model(
    model_kind: str,
    dataset: Dataset,
    config: TrainConfig,
    model_cfg: ModelConfig | None = None,
    *,
    resume: TrainState | None = None,
    epochs_limit: int | None = None,
    progress: bool = True,
) -> TrainResult:
    """Optimize the objective with Adam and best-validation early stopping.

    ``epochs_limit`` pauses after that absolute epoch (for checkpointed
    restarts); pass the state back through ``resume`` to continue.
    """
    config.validate()
    if model_kind not in ("dual", "baseline"):
        raise DataError(f"unknown model kind {model_kind!r}")
    t_len = dataset.config.n_timesteps
    if model_cfg is None:
        model_cfg = ModelConfig(t_len=t_len)
    if model_cfg.t_len != t_len:
        raise DataError(f"model t_len {model_cfg.t_len} != dataset n_timesteps {t_len}")

    weights = config.weights()
    train_ids, val_ids = split_dataset(dataset, config.val_fraction, config.seed)
    val_rng = stream(config.seed, "valtrip")
    val_set = frozenset(val_ids)
    val_triplets = [sample_triplet(dataset, a, val_rng, allowed=val_set) for a in val_ids]
    val_batches = []
    for start in range(0, len(val_triplets), config.batch_size):
        chunk = val_triplets[start : start + config.batch_size]
        if model_kind == "dual":
            val_batches.append(assemble_triplet_batch(dataset, chunk))
        else:
            val_batches.append(assemble_pair_batch(dataset, chunk))

    adam = AdamState(lr=config.lr)
    records = []
    t_start = time.monotonic()

    if resume is not None:
        if resume.model_kind != model_kind:
            raise DataError("resume state is for a different model kind")
        if resume.train_config != asdict(config):
            raise DataError("resume state was produced under a different train config")
        model = _model_from_state(resume)
        named = model.named_params()
        adam.step_count = resume.adam_step_count
        adam.first_moment = {k: v.copy() for k, v in resume.adam_moments_m.items()}
        adam.second_moment = {k: v.copy() for k, v in resume.adam_moments_v.items()}
        best_params = {k: v.copy() for k, v in resume.best_params.items()}
        best_val = resume.best_val
        best_epoch = resume.best_epoch
        stopper = EarlyStopper(config.patience, config.min_delta)
        stopper.best = resume.es_best
        stopper.since_improve = resume.es_since_improve
        records = [TrainLogRecord(**r, wall_time=0.0) for r in resume.log]
        start_epoch = resume.epoch + 1
    else:
        model = build_model(model_kind, model_cfg, stream(config.seed, "init"))
        named = model.named_params()
        val0 = _evaluate(model, val_batches, weights)
        train0_batches = make_epoch_batches(
            dataset, train_ids, config.batch_size, stream(config.seed, "epoch", 0), model_kind
        )
        train0 = _evaluate(model, train0_batches, weights)
        if not (np.isfinite(val0["total"]) and np.isfinite(train0["total"])):
            raise NumericError("non-finite loss at epoch 0 (pre-training evaluation)")
        rec0 = TrainLogRecord(
            epoch=0,
            train_total=train0["total"],
            train_recon=train0["recon"],
            train_star=train0["star"],
            train_instr=train0["instr"],
            val_total=val0["total"],
            val_recon=val0["recon"],
            val_star=val0["star"],
            val_instr=val0["instr"],
            lr=config.lr,
            wall_time=time.monotonic() - t_start,
        )
        records.append(rec0)
        best_params = _snapshot_params(named)
        best_val = val0["total"]
        best_epoch = 0
        stopper = EarlyStopper(config.patience, config.min_delta)
        start_epoch = 1
        if progress:
            print(
                f"epoch 0: val_total={val0['total']:.6f} (pre-training)",
                file=sys.stderr,
                flush=True,
            )

    grad_fn = dual_loss_and_grads if model_kind == "dual" else baseline_loss_and_grads
    stopped_early = stopper.since_improve >= config.patience
    last_epoch = start_epoch - 1
    end_epoch = config.max_epochs if epochs_limit is None else min(epochs_limit, config.max_epochs)

    for epoch in range(start_epoch, end_epoch + 1):
        if stopped_early:
            break
        batches = make_epoch_batches(
            dataset, train_ids, config.batch_size, stream(config.seed, "epoch", epoch), model_kind
        )
        sums = {"total": 0.0, "recon": 0.0, "star": 0.0, "instr": 0.0}
        n_anchors = 0
        for bi, batch in enumerate(batches):
            total, comps = grad_fn(model, batch, weights)
            if not np.isfinite(total):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch}, batch {bi} "
                    f"(batch stream: seed={config.seed}, path=('epoch', {epoch}))"
                )
            adam_step(adam, named)
            w = batch.n_anchors
            sums["total"] += total * w
            for key in ("recon", "star", "instr"):
                sums[key] += comps[key] * w
            n_anchors += w
        train_means = {k: v / n_anchors for k, v in sums.items()}
        val_means = _evaluate(model, val_batches, weights)
        if not np.isfinite(val_means["total"]):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")

        rec = TrainLogRecord(
            epoch=epoch,
            train_total=train_means["total"],
            train_recon=train_means["recon"],
            train_star=train_means["star"],
            train_instr=train_means["instr"],
            val_total=val_means["total"],
            val_recon=val_means["recon"],
            val_star=val_means["star"],
            val_instr=val_means["instr"],
            lr=config.lr,
            wall_time=time.monotonic() - t_start,
        )
        records.append(rec)
        last_epoch = epoch
        if val_means["total"] < best_val:
            best_val = val_means["total"]
            best_epoch = epoch
            best_params = _snapshot_params(named)
        stopped_early = stopper.update(val_means["total"])
        if progress:
            print(
                f"epoch {epoch}: train_total={train_means['total']:.6f} "
                f"val_total={val_means['total']:.6f} best={best_val:.6f}@{best_epoch} "
                f"[{rec.wall_time:.1f}s]",
                file=sys.stderr,
                flush=True,
            )

    state = TrainState(
        model_kind=model_kind,
        arch=model.arch(),
        train_config=asdict(config),
        dataset_config=asdict(dataset.config),
        epoch=last_epoch,
        params=_snapshot_params(named),
        best_params={k: v.copy() for k, v in best_params.items()},
        adam_moments_m={k: v.copy() for k, v in adam.first_moment.items()},
        adam_moments_v={k: v.copy() for k, v in adam.second_moment.items()},
        adam_step_count=adam.step_count,
        best_val=best_val,
        best_epoch=best_epoch,
        es_best=stopper.best,
        es_since_improve=stopper.since_improve,
        log=[r.to_persistable() for r in records],
    )
    _install_params(named, best_params)
    return TrainResult(
        model=model,
        log=records,
        best_epoch=best_epoch,
        best_val=best_val,
        stopped_early=stopped_early,
        state=state,
    )


def save_checkpoint(state: TrainState, path) -> None:
    header = {
        "model_kind": state.model_kind,
        "arch": state.arch,
        "spec_hash": state.spec_hash(),
        "train_config": state.train_config,
        "dataset_config": state.dataset_config,
        "epoch": state.epoch,
        "adam_step_count": state.adam_step_count,
        "best_val": state.best_val,
        "best_epoch": state.best_epoch,
        "es_best": None if np.isinf(state.es_best) else state.es_best,
        "es_since_improve": state.es_since_improve,
        # streams are counter-based functions of (seed, purpose, epoch), so
        # this descriptor is the complete RNG state for bit-exact resume
        "rng_state": {
            "scheme": "philox-keyed",
            "train_seed": state.train_config["seed"],
            "next_epoch": state.epoch + 1,
        },
        "log": state.log,
    }
    arrays = {}
    for name, values in state.params.items():
        arrays[f"param.{name}"] = values
    for name, values in state.best_params.items():
        arrays[f"best.{name}"] = values
    for name, values in state.adam_moments_m.items():
        arrays[f"adam.m.{name}"] = values
    for name, values in state.adam_moments_v.items():
        arrays[f"adam.v.{name}"] = values
    storage.save_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, arrays)


def load_checkpoint(path, expected_arch: dict | None = None) -> TrainState:
    header, arrays = storage.load_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    if header["spec_hash"] != arch_hash(header["arch"]):
        raise FormatError(f"{path}: stored spec hash does not match stored architecture")
    if expected_arch is not None and arch_hash(expected_arch) != header["spec_hash"]:
        raise FormatError(
            f"{path}: architecture spec hash mismatch "
            f"(checkpoint {header['spec_hash'][:12]}, expected {arch_hash(expected_arch)[:12]})"
        )
    params = {}
    best_params = {}
    moments_m = {}
    moments_v = {}
    for name, arr in arrays.items():
        if name.startswith("param."):
            params[name[len("param.") :]] = arr
        elif name.startswith("best."):
            best_params[name[len("best.") :]] = arr
        elif name.startswith("adam.m."):
            moments_m[name[len("adam.m.") :]] = arr
        elif name.startswith("adam.v."):
            moments_v[name[len("adam.v.") :]] = arr
    es_best = header["es_best"]
    return TrainState(
        model_kind=header["model_kind"],
        arch=header["arch"],
        train_config=header["train_config"],
        dataset_config=header["dataset_config"],
        epoch=header["epoch"],
        params=params,
        best_params=best_params,
        adam_moments_m=moments_m,
        adam_moments_v=moments_v,
        adam_step_count=header["adam_step_count"],
        best_val=header["best_val"],
        best_epoch=header["best_epoch"],
        es_best=np.inf if es_best is None else es_best,
        es_since_improve=header["es_since_improve"],
        log=header["log"],
    )


def best_model_from_checkpoint(path) -> tuple:
    """Rebuild the best-validation model stored in a checkpoint."""
    state = load_checkpoint(path)
    restored = TrainState(**{**state.__dict__, "params": state.best_params})
    model = _model_from_state(restored)
    return model, state
