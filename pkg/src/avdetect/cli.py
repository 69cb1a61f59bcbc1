"""Command-line entry point: ``avdetect {synth,train,eval,localize,ablate,gradcheck}``.

Every command reads one ``key = value`` config file (``--config``); command
line flags override the file. Keys are the fields of :class:`ModelConfig`,
:class:`TrainConfig` and :class:`SyntheticSpec` (widths and window timing are
shared between the model and the generator) plus the run keys listed in
``RUN_KEYS``. The generator seed is ``synth_seed``; ``seed`` seeds training.
``--seed`` sets whichever of the two the command uses.

Exit codes: 0 success, 1 runtime failure, 2 configuration error,
3 missing input file, 4 corrupt or malformed input.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .data import SPLITS, SyntheticSpec, load_split, synth_generate, write_dataset
from .errors import ConfigError, DataError, FormatError
from .fileio import atomic_write_text
from .localize import localize_video, write_predictions
from .metrics import AR_IOU_GRID, MetricsReport, detection_metrics, localization_metrics
from .model import (
    ModelConfig,
    _coerce,
    load_checkpoint,
    parse_key_values,
    predict,
    save_checkpoint,
    video_score,
)
from .trainer import TrainConfig, format_log, train

log = logging.getLogger("avdetect")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING, EXIT_FORMAT = 0, 1, 2, 3, 4

# run-level keys and their defaults
RUN_KEYS = {
    "data": "",
    "synth_seed": 7,
    "threshold": 0.5,
    "fpr_max": 0.1,
    "nms_mode": "gaussian",
    "nms_iou": 0.5,
    "nms_sigma": 0.5,
    "nms_min_score": 0.001,
    "ablate_seeds": "0,1,2",
    "ablate_epochs": 0,
}
SHARED_KEYS = ("d_v", "d_l", "d_a", "seq_duration", "seq_stride")
ABLATION_ROWS = (
    ("MMMS-BA", "V+A"), ("MMMS-BA", "V+L"), ("MMMS-BA", "L+A"), ("MMMS-BA", "V+L+A"),
    ("MMUS-SA", "V+L+A"), ("MS-SA", "V+L+A"),
)


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    synth: SyntheticSpec
    run: dict = field(default_factory=dict)
    text: str = ""

    @property
    def data(self) -> Path:
        if not self.run["data"]:
            raise ConfigError("no dataset directory: set 'data' in the config or pass --data")
        return Path(self.run["data"])


def _split_mapping(mapping: dict):
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    synth_keys = {f.name for f in fields(SyntheticSpec)} - {"seed"}
    parts = {"model": {}, "train": {}, "synth": {}, "run": {}}
    for key, value in mapping.items():
        hit = False
        if key in model_keys:
            parts["model"][key] = value
            hit = True
        if key in train_keys:
            parts["train"][key] = value
            hit = True
        if key in synth_keys:
            parts["synth"][key] = value
            hit = True
        if key in RUN_KEYS:
            parts["run"][key] = value
            hit = True
        if not hit:
            raise ConfigError(f"unknown config key {key!r}")
    return parts


def _synth_spec(values: dict, seed) -> SyntheticSpec:
    kwargs = {}
    for key, value in values.items():
        default = getattr(SyntheticSpec, key)
        if key == "split_fractions" and isinstance(value, str):
            try:
                value = tuple(float(x) for x in value.split(","))
            except ValueError:
                raise ConfigError(f"split_fractions: cannot parse {value!r}") from None
        kwargs[key] = _coerce(key, value, default)
    spec = SyntheticSpec(seed=int(seed), **kwargs)
    spec.validate()
    return spec


def build_config(mapping: dict) -> RunConfig:
    """Resolve a flat key/value mapping into a :class:`RunConfig`."""
    parts = _split_mapping(mapping)
    run = dict(RUN_KEYS)
    for key, value in parts["run"].items():
        run[key] = _coerce(key, value, RUN_KEYS[key])
    model = ModelConfig.from_mapping(parts["model"])
    train_cfg = TrainConfig.from_mapping(parts["train"])
    synth = _synth_spec(parts["synth"], run["synth_seed"])
    text = "".join(f"{k} = {v}\n" for k, v in mapping.items())
    return RunConfig(model, train_cfg, synth, run, text)


def load_run_config(path, overrides: dict) -> RunConfig:
    mapping = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            mapping = parse_key_values(fh.read())
    mapping.update(overrides)
    return build_config(mapping)


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_config(out: Path, cfg: RunConfig) -> None:
    atomic_write_text(out / "config.txt", cfg.text)


def _check_exists(path: Path) -> None:
    if not Path(path).exists():
        raise FileNotFoundError(f"no such file or directory: {path}")


def _load_checkpoint(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for this command")
    _check_exists(Path(args.checkpoint))
    return load_checkpoint(args.checkpoint)


def _load(cfg: RunConfig, split: str):
    root = cfg.data
    _check_exists(root / split)
    return load_split(root, split)


# -- commands -----------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    write_dataset(out, synth_generate(cfg.synth))
    _save_config(out, cfg)
    print(f"wrote {cfg.synth.n_videos} videos to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    train_split, val_split = _load(cfg, "train"), _load(cfg, "val")
    _save_config(out, cfg)
    result = train(cfg.model, train_split, val_split, cfg.train,
                   progress=lambda e: print(e.line(), flush=True))
    save_checkpoint(out / "checkpoint.mmba", cfg.model, result.params)
    atomic_write_text(out / "train_log.csv", format_log(result.log))
    print(f"best epoch {result.best_epoch} val_auc {result.best_metric:.6f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    model_cfg, params = _load_checkpoint(args)
    split = _load(cfg, args.split)
    preds = predict(params, model_cfg, split.features)
    scores = [video_score(preds[f.video_id]) for f in split.features]
    labels = [int(r.is_fake) for r in split.labels]
    values = detection_metrics(scores, labels, cfg.run["threshold"], cfg.run["fpr_max"])
    report = MetricsReport(values, [
        f"split {args.split}; video score = max sequence p_fake; fake when score > {cfg.run['threshold']}",
        f"pAUC is normalized by fpr_max = {cfg.run['fpr_max']}",
    ])
    _save_config(out, cfg)
    report.write(out / f"metrics_{args.split}.txt")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_localize(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    model_cfg, params = _load_checkpoint(args)
    split = _load(cfg, args.split)
    preds = predict(params, model_cfg, split.features)
    r = cfg.run
    segments = {
        f.video_id: localize_video(preds[f.video_id], f.seq_stride, f.video_duration, r["threshold"],
                                   r["nms_mode"], r["nms_iou"], r["nms_sigma"], r["nms_min_score"])
        for f in split.features
    }
    gts = {rec.video_id: list(rec.segments) for rec in split.labels}
    values = localization_metrics(segments, gts)
    grid = f"{AR_IOU_GRID[0]}:{AR_IOU_GRID[1] - AR_IOU_GRID[0]:.2f}:{AR_IOU_GRID[-1]}"
    report = MetricsReport(values, [
        f"split {args.split}; {r['nms_mode']} NMS (iou {r['nms_iou']}, sigma {r['nms_sigma']})",
        "AP pools predictions across videos; greedy matching by descending score",
        f"AR@k averages recall over IoU thresholds {grid}, then over videos with ground truth",
    ])
    _save_config(out, cfg)
    write_predictions(out / f"predictions_{args.split}.tsv", segments)
    report.write(out / f"localization_{args.split}.txt")
    print(report.to_text(), end="")
    return EXIT_OK


def parse_seeds(text) -> list:
    try:
        seeds = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"ablate_seeds: cannot parse {text!r}") from None
    if not seeds:
        raise ConfigError("ablate_seeds must list at least one seed")
    return seeds


def run_ablation(model_cfg: ModelConfig, train_cfg: TrainConfig, splits: dict, seeds, progress=None) -> list:
    """Test-split AUC for every defined (variant, modality subset) row and seed.

    Returns ``[(variant, modalities, [auc per seed]), ...]`` in ``ABLATION_ROWS`` order.
    """
    from .trainer import validation_auc

    rows = []
    for variant, mods in ABLATION_ROWS:
        mc = replace(model_cfg, variant=variant, modalities=mods)
        aucs = []
        for seed in seeds:
            res = train(mc, splits["train"], splits["val"], replace(train_cfg, seed=seed))
            aucs.append(validation_auc(res.params, mc, splits["test"]))
            if progress is not None:
                progress(variant, mods, seed, aucs[-1])
        rows.append((variant, mods, aucs))
    return rows


def format_ablation(rows) -> str:
    lines = ["variant,modalities,auc_mean,auc_std,auc_per_seed"]
    for variant, mods, aucs in rows:
        per = ";".join(f"{a:.6f}" for a in aucs)
        lines.append(f"{variant},{mods},{np.mean(aucs):.6f},{np.std(aucs):.6f},{per}")
    return "\n".join(lines) + "\n"


def cmd_ablate(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    splits = {name: _load(cfg, name) for name in SPLITS}
    seeds = parse_seeds(cfg.run["ablate_seeds"])
    tc = cfg.train
    if cfg.run["ablate_epochs"]:
        tc = replace(tc, max_epochs=int(cfg.run["ablate_epochs"]))
    _save_config(out, cfg)
    rows = run_ablation(cfg.model, tc, splits, seeds,
                        progress=lambda v, m, s, a: print(f"{v} {m} seed {s}: auc {a:.4f}", flush=True))
    table = format_ablation(rows)
    atomic_write_text(out / "ablation.csv", table)
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    results, seconds = gc.run_suite(args.seed if args.seed is not None else 0)
    lines = ["check,max_rel_error"] + [f"{name},{err:.3e}" for name, err in results.items()]
    text = "\n".join(lines) + "\n"
    if args.out:
        out = _out_dir(args)
        _save_config(out, cfg)
        atomic_write_text(out / "gradcheck.csv", text)
    print(text, end="")
    worst = max(results.values())
    print(f"worst {worst:.3e} (rtol {gc.RTOL}) in {seconds:.1f}s")
    return EXIT_OK if worst < gc.RTOL else EXIT_RUNTIME


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "localize": cmd_localize,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avdetect", description=__doc__.split("\n", 1)[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="generator seed (synth) or training seed")
    parser.add_argument("--checkpoint", help="checkpoint file (eval, localize)")
    parser.add_argument("--split", choices=SPLITS, default="test", help="split to evaluate")
    parser.add_argument("--data", help="dataset directory written by 'synth'")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _overrides(args) -> dict:
    over = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        over[key.strip()] = value.strip()
    if args.data:
        over["data"] = args.data
    if args.seed is not None:
        over["synth_seed" if args.command == "synth" else "seed"] = str(args.seed)
    return over


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            _check_exists(Path(args.config))
        cfg = load_run_config(args.config, _overrides(args))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except FileNotFoundError as exc:
        code, msg = EXIT_MISSING, f"missing file: {exc}"
    except (FormatError, DataError) as exc:
        code, msg = EXIT_FORMAT, f"bad input: {exc}"
    except (ArithmeticError, ValueError, RuntimeError, OSError) as exc:
        code, msg = EXIT_RUNTIME, f"{type(exc).__name__}: {exc}"
    print(f"avdetect: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
