"""Command-line entry point.

Subcommands cover the full workflow: gen-data, pretrain, train, eval,
parse, ablate. Settings resolve in three layers (defaults, then a
`key = value` config file, then flags), and every run writes a
run.txt manifest holding the fully resolved settings; feeding that
manifest back through --config reproduces the run.

Exit codes: 0 on success, 2 on any validation or input failure, with a
single `error: ...` line on stderr. DOPM_LOG selects the log level
(error, info, or debug).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .backbone import BackboneConfig
from .model import (Model, ModelConfig, VARIANTS, build_model, load_model,
                    save_model)
from .parsing import ParserConfig, parse
from .seeding import derive_rng, derive_seed
from .synth import SyntheticConfig, generate_dataset, load_dataset, sample_episode, save_dataset
from .tensorio import write_pgm
from .trainer import PretrainConfig, TrainConfig, evaluate, pretrain, train

log = logging.getLogger("dopm.cli")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

AXES = ("reweight", "parse", "scales", "parts")


class _Parser(argparse.ArgumentParser):
    """Argument parser whose failures match the CLI error contract."""

    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(2)


# -- option tables ---------------------------------------------------------
# (flag, kind, default, help); kind one of int/float/str/csv/flag/negflag.
# Flags default to the sentinel None so a config file can fill the gap;
# the stated default applies last.

_DATA = ("--data", "str", None, "dataset directory (required)")
_OUT = ("--out", "str", None, "output directory for artifacts (required)")
_SEED = ("--seed", "int", 0, "base seed; all rng streams derive from it (default: 0)")

GEN_OPTS = [
    _OUT, _SEED,
    ("--classes", "int", 35, "number of classes (default: 35)"),
    ("--splits", "csv", (20, 5, 10), "train,val,test class counts (default: 20,5,10)"),
    ("--samples", "int", 20, "samples per class (default: 20)"),
    ("--grid", "int", 10, "feature map side length (default: 10)"),
    ("--channels", "int", 16, "feature channels (default: 16)"),
    ("--parts", "int", 3, "planted parts per class (default: 3)"),
    ("--scales", "csv", (1, 3, 5), "template side lengths (default: 1,3,5)"),
    ("--bank", "int", 64, "template bank size (default: 64)"),
    ("--noise", "float", 0.05, "additive feature noise sigma (default: 0.05)"),
    ("--loc-jitter", "float", 0.7, "location jitter sigma in cells (default: 0.7)"),
    ("--coef-jitter", "float", 0.02, "coefficient jitter sigma (default: 0.02)"),
    ("--swap", "float", 0.0, "per-part scale swap probability (default: 0.0)"),
    ("--threshold", "float", 0.05, "expression threshold the jitter floor respects (default: 0.05)"),
    ("--mode", "str", "feature", "feature or image rendering (default: feature)"),
    ("--image-size", "int", 32, "image side length in image mode (default: 32)"),
    ("--force", "flag", False, "overwrite a non-empty output directory"),
]

MODEL_OPTS = [
    ("--scales", "csv", None, "parser scales override (default: dataset scales)"),
    ("--parts", "int", None, "parser part count override (default: dataset parts)"),
    ("--temperature", "float", 0.01, "location softmax temperature (default: 0.01)"),
    ("--threshold", "float", None, "expression threshold (default: dataset threshold)"),
    ("--sparsity", "float", 0.0, "score sparsity penalty lambda (default: 0.0)"),
    ("--delta-variance", "float", 0.5, "readout bump variance (default: 0.5)"),
    ("--beta", "float", 0.01, "geometry term weight (default: 0.01)"),
    ("--no-rho", "negflag", True, "disable support-example reweighting"),
    ("--no-alpha", "negflag", True, "disable part reweighting"),
    ("--widths", "csv", (16, 32, 16), "backbone widths for image datasets (default: 16,32,16)"),
]

EPISODE_OPTS = [
    ("--n", "int", 5, "classes per episode (default: 5)"),
    ("--m", "int", 1, "support samples per class (default: 1)"),
    ("--q", "int", 5, "query samples per class (default: 5)"),
]

TRAIN_OPTS = [_DATA, _OUT, _SEED] + MODEL_OPTS + EPISODE_OPTS + [
    ("--variant", "str", "dopm", "dopm, baseline1, or baseline2 (default: dopm)"),
    ("--episodes", "int", 2000, "training episodes (default: 2000)"),
    ("--lr", "float", 1e-3, "initial learning rate (default: 0.001)"),
    ("--decay-factor", "float", 0.1, "lr step decay factor (default: 0.1)"),
    ("--decay-period", "int", 600, "episodes per lr step (default: 600)"),
    ("--eta", "float", 1.0, "divergence loss weight; 0 disables it (default: 1.0)"),
    ("--clip", "float", 10.0, "global gradient norm clip (default: 10.0)"),
    ("--checkpoint-every", "int", 500, "episodes between checkpoints (default: 500)"),
    ("--init", "str", None, "checkpoint directory to warm-start from"),
]

PRETRAIN_OPTS = [_DATA, _OUT, _SEED] + MODEL_OPTS + [
    ("--variant", "str", "dopm", "dopm or baseline2 (default: dopm)"),
    ("--epochs", "int", 10, "pretraining epochs (default: 10)"),
    ("--batch", "int", 16, "batch size (default: 16)"),
    ("--lr", "float", 1e-3, "initial learning rate (default: 0.001)"),
    ("--decay-factor", "float", 0.5, "lr epoch decay factor (default: 0.5)"),
    ("--decay-period", "int", 4, "epochs per lr step (default: 4)"),
    ("--eta", "float", 1.0, "divergence loss weight (default: 1.0)"),
]

EVAL_OPTS = [
    _DATA, _OUT,
    ("--model", "str", None, "checkpoint directory (required)"),
    _SEED,
    ("--split", "str", "test", "dataset split to evaluate (default: test)"),
    ("--episodes", "int", 600, "evaluation episodes (default: 600)"),
    ("--n", "int", 5, "classes per episode (default: 5)"),
    ("--m", "int", 1, "support samples per class (default: 1)"),
    ("--q", "int", 15, "query samples per class (default: 15)"),
    ("--jobs", "int", 1, "episode evaluation threads (default: 1)"),
    ("--explain", "flag", False, "print per-query distance breakdowns instead of the bulk report"),
    ("--limit", "int", 1, "episodes to explain (default: 1)"),
]

PARSE_OPTS = [
    _DATA, _OUT,
    ("--model", "str", None, "checkpoint directory holding the dictionary"),
    ("--oracle", "flag", False, "use the dataset's planted templates instead of a checkpoint"),
    ("--class-id", "int", None, "class of the sample to parse (required)"),
    ("--sample", "int", 0, "sample index within the class (default: 0)"),
]

ABLATE_OPTS = [_DATA, _OUT, _SEED] + MODEL_OPTS + EPISODE_OPTS + [
    ("--axis", "str", None, "one of reweight, parse, scales, parts (required)"),
    ("--values", "str", None, "semicolon-separated cell values for the scales/parts axes"),
    ("--episodes", "int", 2000, "training episodes per cell (default: 2000)"),
    ("--eval-episodes", "int", 600, "evaluation episodes per cell (default: 600)"),
    ("--eval-q", "int", 15, "query samples per class at evaluation (default: 15)"),
    ("--lr", "float", 1e-3, "initial learning rate (default: 0.001)"),
    ("--decay-factor", "float", 0.1, "lr step decay factor (default: 0.1)"),
    ("--decay-period", "int", 600, "episodes per lr step (default: 600)"),
    ("--eta", "float", 1.0, "divergence loss weight (default: 1.0)"),
    ("--clip", "float", 10.0, "global gradient norm clip (default: 10.0)"),
    ("--jobs", "int", 1, "cells trained in parallel (default: 1)"),
]


def _parse_csv(text: str):
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ValueError(f"expected comma-separated integers, got {text!r}")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected true or false, got {text!r}")


_FILE_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "csv": _parse_csv,
    "flag": _parse_bool,
    "negflag": _parse_bool,
}


def _dest(flag: str, kind: str) -> str:
    name = flag.lstrip("-").replace("-", "_")
    if kind == "negflag":
        name = name[len("no_"):]
    return name


def _add_options(sub: argparse.ArgumentParser, opts) -> None:
    sub.add_argument("--config", type=str, default=None,
                     help="key = value settings file; flags override it")
    for flag, kind, _default, help_ in opts:
        if kind in ("flag", "negflag"):
            sub.add_argument(flag, action="store_true", default=None, help=help_)
        else:
            sub.add_argument(flag, type=_FILE_PARSERS[kind], default=None,
                             help=help_, metavar=kind.upper())


def _load_config_file(path: str) -> dict:
    lines = Path(path).read_text().splitlines()
    out = {}
    for i, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if i == 1 and line.startswith("dopm-") and "=" not in line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{i}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _resolve(args: argparse.Namespace, opts) -> dict:
    """Apply the defaults < config file < flags precedence."""
    file_cfg = {}
    if args.config is not None:
        file_cfg = _load_config_file(args.config)
    known = {_dest(flag, kind) for flag, kind, _d, _h in opts}
    for key in file_cfg:
        if key not in known and not key.startswith("run."):
            raise ValueError(f"unknown config key {key!r} in {args.config}")
    resolved = {}
    for flag, kind, default, _help in opts:
        key = _dest(flag, kind)
        value = getattr(args, flag.lstrip("-").replace("-", "_"))
        if kind == "negflag":
            value = False if value else None
        if value is None and key in file_cfg:
            try:
                value = _FILE_PARSERS[kind](file_cfg[key])
            except ValueError as exc:
                raise ValueError(f"config key {key!r}: {exc}")
        if value is None:
            value = default
        resolved[key] = value
    return resolved


def _require(cfg: dict, command: str, *keys) -> None:
    for key in keys:
        if cfg.get(key) is None:
            raise ValueError(f"{command} needs --{key.replace('_', '-')}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_run_manifest(out_dir: Path, command: str, cfg: dict,
                        artifacts, started: float) -> None:
    lines = ["dopm-run v1",
             f"run.command = {command}",
             f"run.version = {__version__}",
             f"run.duration_s = {time.perf_counter() - started:.3f}"]
    for art in artifacts:
        lines.append(f"run.artifact = {art}")
    for key in sorted(cfg):
        if cfg[key] is None:
            continue
        lines.append(f"{key} = {_format_value(cfg[key])}")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.txt").write_text("\n".join(lines) + "\n")


# -- dataset/model assembly ------------------------------------------------


def _parser_config(dataset, cfg: dict) -> ParserConfig:
    dc = dataset.config
    threshold = cfg["threshold"] if cfg["threshold"] is not None else dc.threshold
    return ParserConfig(
        k_parts=cfg["parts"] if cfg["parts"] is not None else dc.k_parts,
        channels=dc.channels,
        grid=dc.grid,
        scales=cfg["scales"] if cfg["scales"] is not None else dc.scales,
        temperature=cfg["temperature"],
        threshold=threshold,
        sparsity=cfg["sparsity"],
        delta_variance=cfg["delta_variance"],
    )


def _model_config(dataset, cfg: dict, variant: str, support_size: int) -> ModelConfig:
    pc = _parser_config(dataset, cfg)
    backbone = None
    if dataset.config.mode == "image":
        backbone = BackboneConfig(input_size=dataset.config.image_size,
                                  input_channels=1,
                                  widths=tuple(cfg["widths"]),
                                  grid=dataset.config.grid)
    return ModelConfig(parser=pc, variant=variant, support_size=support_size,
                       use_rho=cfg["rho"], use_alpha=cfg["alpha"],
                       beta=cfg["beta"], backbone=backbone)


def _warm_start(init_dir: str, config: ModelConfig, seed: int) -> Model:
    """Fresh model with parsing parameters grafted from a checkpoint."""
    warm = load_model(init_dir)
    if warm.dictionary is None or config.variant == "baseline1":
        raise ValueError("warm start needs parsing variants on both sides")
    model = build_model(config, derive_seed(seed, "init"))
    if len(warm.dictionary.kernels) != len(model.dictionary.kernels):
        raise ValueError(
            f"checkpoint has {len(warm.dictionary.kernels)} dictionary scales, "
            f"config expects {len(model.dictionary.kernels)}")
    for mine, theirs in zip(model.dictionary.kernels, warm.dictionary.kernels):
        if mine.data.shape != theirs.data.shape:
            raise ValueError(
                f"checkpoint dictionary shape {theirs.data.shape} does not "
                f"match config {mine.data.shape}")
        mine.data[...] = theirs.data
    if model.backbone_params is not None:
        if warm.backbone_params is None:
            raise ValueError("config expects a backbone the checkpoint lacks")
        if len(warm.backbone_params) != len(model.backbone_params):
            raise ValueError("checkpoint backbone depth does not match config")
        for mine, theirs in zip(model.backbone_params, warm.backbone_params):
            if mine.data.shape != theirs.data.shape:
                raise ValueError("checkpoint backbone shapes do not match config")
            mine.data[...] = theirs.data
    if (model.reweight is not None and warm.reweight is not None
            and warm.reweight.alpha_weight.data.shape
            == model.reweight.alpha_weight.data.shape):
        for mine, theirs in zip(model.reweight.parameters(),
                                warm.reweight.parameters()):
            mine.data[...] = theirs.data
    return model


def _prepare_out(cfg: dict, command: str) -> Path:
    out = Path(cfg["out"])
    if out.exists() and any(out.iterdir()) and not cfg.get("force", False):
        raise ValueError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands -----------------------------------------------------------


def cmd_gen_data(args) -> int:
    started = time.perf_counter()
    cfg = _resolve(args, GEN_OPTS)
    _require(cfg, "gen-data", "out")
    out = _prepare_out(cfg, "gen-data")
    sc = SyntheticConfig(
        grid=cfg["grid"], channels=cfg["channels"], k_parts=cfg["parts"],
        scales=cfg["scales"], bank_size=cfg["bank"], n_classes=cfg["classes"],
        splits=cfg["splits"], samples_per_class=cfg["samples"],
        noise_sigma=cfg["noise"], loc_sigma=cfg["loc_jitter"],
        coef_sigma=cfg["coef_jitter"], scale_swap_prob=cfg["swap"],
        threshold=cfg["threshold"], mode=cfg["mode"],
        image_size=cfg["image_size"])
    dataset = generate_dataset(sc, cfg["seed"])
    save_dataset(dataset, out)
    tr, va, te = (len(dataset.split_classes(s)) for s in ("train", "val", "test"))
    print(f"dataset: {sc.n_classes} classes x {sc.samples_per_class} samples, "
          f"grid {sc.grid}, channels {sc.channels}, parts {sc.k_parts}, "
          f"scales {_format_value(sc.scales)}, mode {sc.mode}")
    print(f"splits: train {tr} / val {va} / test {te}")
    print(f"wrote {out}")
    _write_run_manifest(out, "gen-data", cfg, ["manifest.txt"], started)
    return 0


def cmd_train(args) -> int:
    started = time.perf_counter()
    cfg = _resolve(args, TRAIN_OPTS)
    _require(cfg, "train", "data", "out")
    dataset = load_dataset(cfg["data"])
    mc = _model_config(dataset, cfg, cfg["variant"], cfg["m"])
    tc = TrainConfig(model=mc, episodes=cfg["episodes"], n_way=cfg["n"],
                     m_support=cfg["m"], q_query=cfg["q"], lr=cfg["lr"],
                     decay_factor=cfg["decay_factor"],
                     decay_period=cfg["decay_period"], eta=cfg["eta"],
                     clip_norm=cfg["clip"], seed=cfg["seed"],
                     checkpoint_every=cfg["checkpoint_every"])
    model = None
    if cfg["init"] is not None:
        model = _warm_start(cfg["init"], mc, cfg["seed"])
    out = Path(cfg["out"])
    model, trace = train(dataset, tc, model=model, run_dir=out)
    window = min(50, len(trace))
    print(f"train: {cfg['episodes']} episodes; "
          f"loss {trace[:window, 1].mean():.4f} -> {trace[-window:, 1].mean():.4f}; "
          f"episode accuracy {trace[:window, 4].mean():.3f} -> "
          f"{trace[-window:, 4].mean():.3f}")
    print(f"saved {out / 'model'}")
    _write_run_manifest(out, "train", cfg, ["model", "metrics.csv"], started)
    return 0


def cmd_pretrain(args) -> int:
    started = time.perf_counter()
    cfg = _resolve(args, PRETRAIN_OPTS)
    _require(cfg, "pretrain", "data", "out")
    dataset = load_dataset(cfg["data"])
    mc = _model_config(dataset, cfg, cfg["variant"], support_size=1)
    pc = PretrainConfig(model=mc, epochs=cfg["epochs"], batch_size=cfg["batch"],
                        lr=cfg["lr"], decay_factor=cfg["decay_factor"],
                        decay_period=cfg["decay_period"], eta=cfg["eta"],
                        seed=cfg["seed"])
    model, losses = pretrain(dataset, pc)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model")
    with open(out / "pretrain.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(losses):
            fh.write(f"{epoch},{loss!r}\n")
    print(f"pretrain: {cfg['epochs']} epochs; loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    print(f"saved {out / 'model'}")
    _write_run_manifest(out, "pretrain", cfg, ["model", "pretrain.csv"], started)
    return 0


def cmd_eval(args) -> int:
    started = time.perf_counter()
    cfg = _resolve(args, EVAL_OPTS)
    _require(cfg, "eval", "data", "model", "out")
    dataset = load_dataset(cfg["data"])
    try:
        model = load_model(cfg["model"])
    except FileNotFoundError:
        raise ValueError(f"checkpoint not found at {cfg['model']}")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    if cfg["explain"]:
        lines = _explain_lines(dataset, model, cfg)
        print("\n".join(lines))
        (out / "explain.txt").write_text("\n".join(lines) + "\n")
        _write_run_manifest(out, "eval", cfg, ["explain.txt"], started)
        return 0
    report = evaluate(dataset, model, split=cfg["split"], episodes=cfg["episodes"],
                      n_way=cfg["n"], m_support=cfg["m"], q_query=cfg["q"],
                      seed=cfg["seed"], jobs=cfg["jobs"])
    line = (f"{cfg['split']} {cfg['n']}-way {cfg['m']}-shot, "
            f"{report.episodes} episodes: {report.formatted()}")
    print(line)
    (out / "report.txt").write_text(line + "\n")
    with open(out / "eval.csv", "w") as fh:
        fh.write("episode,accuracy\n")
        for e, acc in enumerate(report.per_episode):
            fh.write(f"{e},{float(acc)!r}\n")
    _write_run_manifest(out, "eval", cfg, ["report.txt", "eval.csv"], started)
    return 0


def _explain_lines(dataset, model, cfg: dict) -> list:
    lines = []
    with ad.no_grad():
        for e in range(cfg["limit"]):
            rng = derive_rng(cfg["seed"], "eval", e)
            episode = sample_episode(dataset, cfg["split"], cfg["n"], cfg["m"],
                                     cfg["q"], rng)
            records = model.explain_episode(episode)
            lines.append(f"episode {e}: classes "
                         + " ".join(str(c) for c in episode.class_ids))
            for qi, (true_idx, pred, breakdowns) in enumerate(records):
                verdict = "ok" if true_idx == pred else "miss"
                lines.append(f"  query {qi}: true {true_idx} predicted {pred} ({verdict})")
                for ci, bd in enumerate(breakdowns):
                    lines.append(f"    class {ci}:")
                    for bl in bd.lines():
                        lines.append(f"      {bl}")
    return lines


def cmd_parse(args) -> int:
    started = time.perf_counter()
    cfg = _resolve(args, PARSE_OPTS)
    _require(cfg, "parse", "data", "out", "class_id")
    if cfg["oracle"] == bool(cfg["model"]):
        raise ValueError("parse needs exactly one of --model or --oracle")
    dataset = load_dataset(cfg["data"])
    if cfg["class_id"] not in dataset.samples:
        raise ValueError(f"class {cfg['class_id']} not in dataset "
                         f"(0..{dataset.config.n_classes - 1})")
    row = dataset.samples[cfg["class_id"]]
    if not 0 <= cfg["sample"] < len(row):
        raise ValueError(f"sample index {cfg['sample']} out of range (0..{len(row) - 1})")
    sample = row[cfg["sample"]]
    with ad.no_grad():
        if cfg["oracle"]:
            if dataset.config.mode != "feature":
                raise ValueError("oracle parsing needs a feature-mode dataset")
            record = parse(ad.tensor(sample.data), dataset.oracle_dictionary(),
                           dataset.oracle_parser_config())
        else:
            try:
                model = load_model(cfg["model"])
            except FileNotFoundError:
                raise ValueError(f"checkpoint not found at {cfg['model']}")
            record = model.parse_sample(sample.data)
            if not hasattr(record, "distribution"):
                raise ValueError("parse export needs a parsing variant")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    k_parts = record.distribution.data.shape[0]
    artifacts = []
    for p in range(k_parts):
        name = f"part{p}.pgm"
        write_pgm(out / name, record.distribution.data[p])
        artifacts.append(name)
    lines = [f"class {cfg['class_id']} sample {cfg['sample']}"]
    for p in range(k_parts):
        y, x = record.location.data[p]
        ent = float(record.entropy.data[p])
        line = f"part {p}: location = ({y:.3f}, {x:.3f}); entropy = {ent:.4f}"
        if hasattr(record, "hard_location"):
            hy, hx = record.hard_location[p]
            line += f"; hard = ({int(hy)}, {int(hx)})"
        lines.append(line)
        z = record.expression.data[p]
        for idx in np.argwhere(z != 0.0):
            if z.ndim == 2:
                slot = f"scale {int(idx[0])} channel {int(idx[1])}"
            else:
                slot = f"channel {int(idx[0])}"
            lines.append(f"  expression {slot} = {float(z[tuple(idx)]):.6f}")
    (out / "parse.txt").write_text("\n".join(lines) + "\n")
    artifacts.append("parse.txt")
    print("\n".join(lines))
    print(f"wrote {k_parts} heatmaps and parse.txt to {out}")
    _write_run_manifest(out, "parse", cfg, artifacts, started)
    return 0


# -- ablation ---------------------------------------------------------------


def _ablate_cells(cfg: dict) -> list:
    """(label, override dict) pairs for the requested axis."""
    axis = cfg["axis"]
    values = cfg["values"]
    if axis in ("reweight", "parse"):
        if values is not None:
            raise ValueError(f"axis {axis} takes no --values")
        if axis == "reweight":
            return [("none", {"rho": False, "alpha": False}),
                    ("rho", {"rho": True, "alpha": False}),
                    ("alpha", {"rho": False, "alpha": True}),
                    ("rho+alpha", {"rho": True, "alpha": True})]
        return [("baseline1", {"variant": "baseline1"}),
                ("baseline2", {"variant": "baseline2"}),
                ("dopm", {"variant": "dopm"})]
    if axis == "scales":
        if values is None:
            raise ValueError("axis scales needs --values, e.g. \"3;5;3,5;1,3,5\"")
        return [(v.strip(), {"scales": _parse_csv(v)}) for v in values.split(";")]
    if axis == "parts":
        if values is None:
            raise ValueError("axis parts needs --values, e.g. \"1;2;3;5\"")
        return [(v.strip(), {"parts": int(v)}) for v in values.split(";")]
    raise ValueError(f"unknown axis {axis!r}; expected one of {', '.join(AXES)}")


def _ablate_cell(payload: dict):
    """Train and evaluate one ablation cell (runs in a worker process)."""
    cfg = dict(payload["base"])
    cfg.update(payload["overrides"])
    dataset = load_dataset(cfg["data"])
    mc = _model_config(dataset, cfg, cfg.get("variant", "dopm"), cfg["m"])
    tc = TrainConfig(model=mc, episodes=cfg["episodes"], n_way=cfg["n"],
                     m_support=cfg["m"], q_query=cfg["q"], lr=cfg["lr"],
                     decay_factor=cfg["decay_factor"],
                     decay_period=cfg["decay_period"], eta=cfg["eta"],
                     clip_norm=cfg["clip"], seed=cfg["seed"],
                     checkpoint_every=0)
    model, _trace = train(dataset, tc, run_dir=payload["cell_dir"])
    report = evaluate(dataset, model, split="test", episodes=cfg["eval_episodes"],
                      n_way=cfg["n"], m_support=cfg["m"], q_query=cfg["eval_q"],
                      seed=cfg["seed"])
    return payload["label"], report.mean, report.ci


def cmd_ablate(args) -> int:
    started = time.perf_counter()
    cfg = _resolve(args, ABLATE_OPTS)
    _require(cfg, "ablate", "data", "out", "axis")
    cells = _ablate_cells(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    payloads = [{"label": label, "overrides": overrides, "base": cfg,
                 "cell_dir": str(out / "cells" / label)}
                for label, overrides in cells]
    if cfg["jobs"] > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            rows = list(pool.map(_ablate_cell, payloads))
    else:
        rows = [_ablate_cell(p) for p in payloads]
    with open(out / "ablate.csv", "w", newline="") as fh:
        # scales labels like "1,3" need quoting
        writer = csv.writer(fh)
        writer.writerow(["cell", "accuracy", "ci"])
        for label, mean, ci in rows:
            writer.writerow([label, f"{mean:.2f}", f"{ci:.2f}"])
    width = max(len("cell"), max(len(r[0]) for r in rows))
    table = [f"{'cell':<{width}}  accuracy"]
    for label, mean, ci in rows:
        table.append(f"{label:<{width}}  {mean:.2f} ± {ci:.2f}")
    text = "\n".join(table)
    print(text)
    (out / "ablate.txt").write_text(text + "\n")
    _write_run_manifest(out, "ablate", cfg, ["ablate.csv", "ablate.txt", "cells"],
                        started)
    return 0


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="dopm",
                   description="Part-parsing few-shot recognition workbench.")
    root.add_argument("--version", action="version", version=f"dopm {__version__}")
    subs = root.add_subparsers(dest="command", metavar="COMMAND")
    specs = [
        ("gen-data", "generate a planted-parts dataset", GEN_OPTS, cmd_gen_data),
        ("pretrain", "warm up parsing parameters with a linear head", PRETRAIN_OPTS,
         cmd_pretrain),
        ("train", "train a model episodically", TRAIN_OPTS, cmd_train),
        ("eval", "evaluate a checkpoint on few-shot episodes", EVAL_OPTS, cmd_eval),
        ("parse", "export one sample's part heatmaps and expressions", PARSE_OPTS,
         cmd_parse),
        ("ablate", "train and compare cells along one ablation axis", ABLATE_OPTS,
         cmd_ablate),
    ]
    for name, help_, opts, fn in specs:
        sub = subs.add_parser(name, help=help_, description=help_)
        _add_options(sub, opts)
        sub.set_defaults(func=fn)
    return root


def _configure_logging() -> None:
    name = os.environ.get("DOPM_LOG", "error")
    if name not in _LOG_LEVELS:
        raise ValueError(
            f"DOPM_LOG must be one of {', '.join(sorted(_LOG_LEVELS))}, got {name!r}")
    logging.basicConfig(level=_LOG_LEVELS[name],
                        format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return 2
    try:
        _configure_logging()
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
