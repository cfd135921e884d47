"""Command-line pipeline: simulate, train, embed, probe, report.

Configuration is one strict TOML document; unknown sections or keys are
rejected (with the offending line when it can be located) so a typo can
never silently fall back to a default. Every command echoes the fully
resolved configuration beside its outputs and is byte-deterministic
given identical inputs.

Exit codes: 2 config, 3 data, 4 numeric, 5 io/format.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, asdict

import numpy as np
import tomli

from . import evaluation, simgen, train as train_mod
from .errors import CausadisError, ConfigError, DataError
from .model import ModelConfig
from .simgen import SimConfig
from .train import TrainConfig

log = logging.getLogger("causadis.cli")

FORMAT_VERSION = 1

_REQUIRED = object()

# section -> key -> (kind, default); kind in {int, float, bool, str, int_list}
_SCHEMA = {
    "sim": {
        "n_stars": ("int", 200),
        "n_instruments": ("int", 17),
        "n_obs": ("int", 4000),
        "n_star_params": ("int", 13),
        "n_inst_terms": ("int", 17),
        "n_timesteps": ("int", 100),
        "alpha": ("float", 1.0),
        "lambda_reduction": ("float", 0.5),
        "noise_std": ("float", 0.03),
        "clip_lo": ("float", -1.0),
        "clip_hi": ("float", 1.0),
        "seed": ("int", _REQUIRED),
    },
    "model": {
        "z_dim": ("int", 20),
        "fuse_dim": ("int", 64),
        "enc_hidden": ("int_list", [256, 128]),
        "dec_hidden": ("int_list", [128]),
        "proj_hidden": ("int_list", [32]),
        "proj_dim": ("int", 16),
        "tau": ("float", 0.1),
        "activation": ("str", "relu"),
        "decoder_final": ("str", "tanh"),
        "fuse_final": ("str", "tanh"),
        "baseline_z_dim": ("int", None),
    },
    "train": {
        "batch_size": ("int", 128),
        "max_epochs": ("int", 200),
        "lr": ("float", 0.001),
        "patience": ("int", 10),
        "min_delta": ("float", 1e-4),
        "val_fraction": ("float", 0.1),
        "seed": ("int", _REQUIRED),
        "lambda_recon": ("float", 1.0),
        "lambda_star": ("float", 1.0),
        "lambda_instr": ("float", 1.0),
    },
    "eval": {
        "train_sizes": ("int_list", [10, 30, 100, 300, 1000]),
        "n_runs": ("int", 5),
        "seed": ("int", _REQUIRED),
        "probe_hidden": ("int", 32),
        "probe_epochs": ("int", 200),
        "probe_lr": ("float", 0.001),
        "leakage_runs": ("int", 5),
        "leakage_train_fraction": ("float", 0.7),
        "leakage_epochs": ("int", 400),
        "leakage_lr": ("float", 0.05),
        "write_svg": ("bool", True),
    },
}


@dataclass(frozen=True)
class EvalSettings:
    train_sizes: tuple
    n_runs: int
    seed: int
    probe_hidden: int
    probe_epochs: int
    probe_lr: float
    leakage_runs: int
    leakage_train_fraction: float
    leakage_epochs: int
    leakage_lr: float
    write_svg: bool


@dataclass(frozen=True)
class RunConfig:
    format_version: int
    sim: SimConfig
    model_args: dict
    train: TrainConfig
    eval: EvalSettings

    def model_config(self, t_len: int) -> ModelConfig:
        args = dict(self.model_args)
        for key in ("enc_hidden", "dec_hidden", "proj_hidden"):
            args[key] = tuple(args[key])
        return ModelConfig(t_len=t_len, **args)


def _line_hint(raw_text: str, key: str) -> str:
    for lineno, line in enumerate(raw_text.splitlines(), start=1):
        stripped = line.split("#")[0].strip()
        if stripped.startswith(f"{key}") and "=" in stripped:
            name = stripped.split("=")[0].strip()
            if name == key:
                return f" (line {lineno})"
        if stripped == f"[{key}]":
            return f" (line {lineno})"
    return ""


def _coerce(section: str, key: str, kind: str, value, raw_text: str):
    where = f"[{section}].{key}{_line_hint(raw_text, key)}"
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected number, got {value!r}")
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected boolean, got {value!r}")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected string, got {value!r}")
        return value
    if kind == "int_list":
        if not isinstance(value, list) or not value or any(
            isinstance(v, bool) or not isinstance(v, int) for v in value
        ):
            raise ConfigError(f"{where}: expected non-empty list of integers, got {value!r}")
        return list(value)
    raise AssertionError(kind)


def load_run_config(path, seed_override: int | None = None, seed_stage: str | None = None) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw_text = fh.read().decode("utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = tomli.loads(raw_text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: TOML syntax error: {exc}") from exc

    known_top = {"format_version"} | set(_SCHEMA)
    for key in doc:
        if key not in known_top:
            raise ConfigError(f"{path}: unknown key or section {key!r}{_line_hint(raw_text, key)}")
    if "format_version" not in doc:
        raise ConfigError(f"{path}: missing required key 'format_version'")
    if doc["format_version"] != FORMAT_VERSION:
        raise ConfigError(
            f"{path}: format_version {doc['format_version']!r} unsupported, expected {FORMAT_VERSION}"
        )

    sections = {}
    for section, fields in _SCHEMA.items():
        given = doc.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{path}: [{section}] must be a table")
        for key in given:
            if key not in fields:
                raise ConfigError(
                    f"{path}: unknown key {key!r} in [{section}]{_line_hint(raw_text, key)}"
                )
        resolved = {}
        for key, (kind, default) in fields.items():
            if key in given:
                resolved[key] = _coerce(section, key, kind, given[key], raw_text)
            elif default is _REQUIRED:
                raise ConfigError(f"{path}: missing required key 'seed' in [{section}]")
            else:
                resolved[key] = default
        sections[section] = resolved

    if seed_override is not None and seed_stage is not None:
        sections[seed_stage]["seed"] = seed_override

    try:
        sim = SimConfig(**sections["sim"])
        sim.validate()
        train_cfg = TrainConfig(**sections["train"])
        train_cfg.validate()
        eval_cfg = EvalSettings(
            **{
                **sections["eval"],
                "train_sizes": tuple(sections["eval"]["train_sizes"]),
            }
        )
    except DataError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return RunConfig(
        format_version=FORMAT_VERSION,
        sim=sim,
        model_args=sections["model"],
        train=train_cfg,
        eval=eval_cfg,
    )


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if value is None:
        raise ValueError("None is not representable in TOML")
    raise ValueError(f"cannot serialize {value!r}")


def resolved_config_toml(cfg: RunConfig) -> str:
    lines = [f"format_version = {cfg.format_version}", ""]
    payload = {
        "sim": asdict(cfg.sim),
        "model": dict(cfg.model_args),
        "train": asdict(cfg.train),
        "eval": asdict(cfg.eval),
    }
    for section in ("sim", "model", "train", "eval"):
        lines.append(f"[{section}]")
        for key, value in payload[section].items():
            if value is None:
                continue  # omitted optional key keeps round-trip parseable
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _write_resolved(cfg: RunConfig, target: str) -> None:
    with open(target, "w") as fh:
        fh.write(resolved_config_toml(cfg))


def _echo_path_for(out: str) -> str:
    if os.path.isdir(out) or out.endswith(os.sep):
        return os.path.join(out, "resolved_config.toml")
    return out + ".resolved.toml"


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = load_run_config(args.config, args.seed, "sim")
    dataset = simgen.build_dataset(cfg.sim)
    simgen.save_dataset(dataset, args.out)
    _write_resolved(cfg, _echo_path_for(args.out))
    per_star = sorted(len(v) for v in dataset.index_by_star.values())
    counts = {}
    for c in per_star:
        counts[c] = counts.get(c, 0) + 1
    flux = np.concatenate([o.flux for o in dataset.observations])
    print(f"observations: {dataset.n_obs}")
    print(f"stars: {len(dataset.stars)}")
    print(f"instruments: {len(dataset.instruments)}")
    print(f"obs-per-star histogram: {counts}")
    print(f"flux range: [{flux.min():.6f}, {flux.max():.6f}]")
    print(f"dataset written to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.seed, "train")
    dataset = simgen.load_dataset(args.dataset)
    os.makedirs(args.out, exist_ok=True)
    model_cfg = cfg.model_config(dataset.config.n_timesteps)
    result = train_mod.train_model(args.model_kind, dataset, cfg.train, model_cfg)
    ckpt_path = os.path.join(args.out, f"checkpoint_{args.model_kind}.bin")
    log_path = os.path.join(args.out, f"train_log_{args.model_kind}.jsonl")
    train_mod.save_checkpoint(result.state, ckpt_path)
    train_mod.write_log_jsonl(result.log, log_path)
    _write_resolved(cfg, os.path.join(args.out, "resolved_config.toml"))
    print(f"best epoch: {result.best_epoch} (val_total={result.best_val:.6f})")
    print(f"early stopped: {result.stopped_early}")
    print(f"checkpoint written to {ckpt_path}")
    print(f"log written to {log_path}")
    return 0


def cmd_embed(args) -> int:
    dataset = simgen.load_dataset(args.dataset)
    model, state = train_mod.best_model_from_checkpoint(args.checkpoint)
    table = evaluation.embed_dataset(model, dataset)
    evaluation.save_embeddings(table, args.out)
    echo = {
        "checkpoint": os.path.abspath(args.checkpoint),
        "checkpoint_spec_hash": state.spec_hash(),
        "dataset": os.path.abspath(args.dataset),
        "model_kind": state.model_kind,
        "n_rows": table.n_rows,
    }
    with open(args.out + ".resolved.json", "w") as fh:
        json.dump(echo, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"embedded {table.n_rows} observations -> {args.out}")
    return 0


def _labels_theta0(dataset) -> np.ndarray:
    return np.array(
        [dataset.theta0_of_star(o.star_id) for o in dataset.observations], dtype=np.float64
    )


def _probe_features(representation, dataset, table):
    if representation == "raw":
        return dataset.flux_rows(range(dataset.n_obs))
    if table is None:
        raise ConfigError(f"representation {representation!r} requires --embeddings")
    return table.representation(representation)


def _run_probe(cfg: RunConfig, dataset, table, representations):
    """Few-shot probes with test stars = the training split's validation stars."""
    _train_ids, val_ids = train_mod.split_dataset(
        dataset, cfg.train.val_fraction, cfg.train.seed
    )
    test_stars = sorted({dataset.star_of(o) for o in val_ids})
    labels = _labels_theta0(dataset)
    star_ids = np.array([o.star_id for o in dataset.observations], dtype=np.int64)
    results = []
    for rep in representations:
        feats = _probe_features(rep, dataset, table)
        results.extend(
            evaluation.probe_regression(
                feats,
                labels,
                star_ids,
                representation=rep,
                test_stars=test_stars,
                train_sizes=cfg.eval.train_sizes,
                n_runs=cfg.eval.n_runs,
                seed=cfg.eval.seed,
                hidden=cfg.eval.probe_hidden,
                epochs=cfg.eval.probe_epochs,
                lr=cfg.eval.probe_lr,
            )
        )
    return results


def cmd_probe(args) -> int:
    cfg = load_run_config(args.config, args.seed, "eval")
    dataset = simgen.load_dataset(args.dataset)
    table = evaluation.load_embeddings(args.embeddings) if args.embeddings else None
    representations = args.representation or ["raw"]
    os.makedirs(args.out, exist_ok=True)
    results = _run_probe(cfg, dataset, table, representations)
    out_csv = os.path.join(args.out, "probe_results.csv")
    evaluation.write_probe_csv(results, out_csv)
    _write_resolved(cfg, os.path.join(args.out, "resolved_config.toml"))
    for r in results:
        print(
            f"{r.representation} @ {r.train_size}: R2 = {r.r2_mean:.4f} +/- {r.r2_std:.4f} "
            f"({r.n_runs} runs)"
        )
    print(f"probe CSV written to {out_csv}")
    return 0


def cmd_report(args) -> int:
    cfg = load_run_config(args.config, args.seed, "eval")
    dataset = simgen.load_dataset(args.dataset)
    model, _state = train_mod.best_model_from_checkpoint(args.checkpoint)
    if model.kind != "dual":
        raise DataError("--checkpoint must be a dual-model checkpoint")
    table = evaluation.embed_dataset(model, dataset)
    representations = ["raw", "z_star", "z_instr"]
    if args.baseline_checkpoint:
        base_model, _ = train_mod.best_model_from_checkpoint(args.baseline_checkpoint)
        if base_model.kind != "baseline":
            raise DataError("--baseline-checkpoint must be a baseline-model checkpoint")
        table = table.merged_with(evaluation.embed_dataset(base_model, dataset))
        representations.append("z_baseline")

    probe_results = _run_probe(cfg, dataset, table, representations)
    leakage = []
    spaces = ["z_star", "z_instr"] + (["z_baseline"] if args.baseline_checkpoint else [])
    for space in spaces:
        leakage.append(
            evaluation.instrument_leakage_probe(
                table.representation(space),
                table.instrument_ids,
                representation=space,
                seed=cfg.eval.seed,
                n_runs=cfg.eval.leakage_runs,
                train_fraction=cfg.eval.leakage_train_fraction,
                epochs=cfg.eval.leakage_epochs,
                lr=cfg.eval.leakage_lr,
            )
        )
    pca_by_space = {space: evaluation.pca_2d(table.representation(space)) for space in spaces}
    theta0 = _labels_theta0(dataset)
    evaluation.report(
        probe_results,
        leakage,
        pca_by_space,
        table,
        args.out,
        theta0_by_obs=theta0,
        write_svg=cfg.eval.write_svg,
    )
    _write_resolved(cfg, os.path.join(args.out, "resolved_config.toml"))
    for l in leakage:
        print(f"instrument-id probe accuracy from {l.representation}: {l.mean_accuracy:.4f}")
    print(f"report bundle written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causadis",
        description="Simulate star/instrument light curves, train the dual-latent "
        "autoencoder, and evaluate few-shot probes.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="cap BLAS/worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate and save a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override [sim].seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="train the dual or baseline model")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--model-kind", choices=["dual", "baseline"], default="dual")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override [train].seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", parents=[common], help="write embeddings for every observation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser(
        "probe", parents=[common], help="few-shot regression probe on one or more representations"
    )
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--embeddings", default=None)
    p.add_argument(
        "--representation",
        action="append",
        choices=["raw", "z_star", "z_instr", "z_baseline"],
        help="repeatable; default raw (raw bypasses embeddings)",
    )
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override [eval].seed")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser(
        "report", parents=[common], help="full evaluation bundle from trained checkpoints"
    )
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True, help="dual-model checkpoint")
    p.add_argument("--baseline-checkpoint", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override [eval].seed")
    p.set_defaults(func=cmd_report)
    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("CAUSADIS_LOG", "info").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.INFO
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    limiter = None
    if args.threads is not None:
        import threadpoolctl

        limiter = threadpoolctl.threadpool_limits(limits=args.threads)
    try:
        return args.func(args)
    except CausadisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 5
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
