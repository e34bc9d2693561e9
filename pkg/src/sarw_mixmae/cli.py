"""Command-line driver: ``sarw <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .checkpoint import Checkpoint, load_module_state
from .config import CLASSIFY_EPOCHS, FLOOD_EPOCHS, PRETRAIN_EPOCHS, ModelConfig, TrainSchedule, preset
from .data import (
    LoadCounters,
    build_flood_pairs,
    load_patch,
    read_tile,
    sanitize_db,
    resize_patch,
    scan_manifest,
    stats_from_patches,
    write_tile,
)
from .errors import CheckpointError, ConfigError, DataLoadError, NumericDivergenceError, SarwError, ShapeError
from .radiometry import SarPatch, compute_weight_map
from .synthetic import (
    FloodBenchmarkSpec,
    SyntheticSceneSpec,
    synthetic_flood_pairs,
    synthetic_scenes,
    write_synthetic_dataset,
)
from . import training
from .network import FLOOD_TILES, FloodPairClassifier, MultiLabelClassifier

log = logging.getLogger("sarw")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
DATA_ROOT_ENV = "SARW_DATA_ROOT"


@dataclass
class RunConfig:
    preset: str = "desk"
    model: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    data_root: Optional[str] = None
    synthetic: Optional[dict] = None
    synthetic_count: int = 0
    flood_benchmark: Optional[dict] = None
    flood_train: int = 0
    flood_test: int = 0
    pretrained: Optional[str] = None
    checkpoint: Optional[str] = None
    task: Optional[str] = None
    output: str = "runs/out"
    deterministic: bool = True
    weight_mode: str = "sar"
    seed: int = 0
    head_only: bool = False
    mix_ratio: float = 0.5

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        try:
            if path.suffix == ".toml":
                try:
                    import tomllib
                except ModuleNotFoundError:
                    import tomli as tomllib
                doc = tomllib.loads(text)
            else:
                doc = json.loads(text)
        except ValueError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a mapping")
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown run config keys {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.weight_mode not in training.WEIGHT_MODES:
            raise ConfigError(f"weight_mode must be one of {training.WEIGHT_MODES}")
        if self.task not in (None, "classify", "flood"):
            raise ConfigError("task must be 'classify' or 'flood'")
        self.model_config()
        TrainSchedule.from_json({**self.schedule, "seed": self.seed})

    def model_config(self) -> ModelConfig:
        return preset(self.preset, **self.model)

    def train_schedule(self, epochs) -> TrainSchedule:
        total, warm = epochs
        base = {"total_epochs": total, "warmup_epochs": warm, **self.schedule, "seed": self.seed}
        return TrainSchedule.from_json(base)

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def root(self) -> Path:
        root = self.data_root or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise ConfigError(f"no data_root in config and {DATA_ROOT_ENV} is unset")
        return Path(root)


# --------------------------------------------------------------------------
# commands


def cmd_weightmap(args) -> int:
    vh, vv = read_tile(args.vh), read_tile(args.vv)
    if vh.shape != vv.shape:
        raise DataLoadError(f"{args.vh} and {args.vv} differ in shape")
    w = compute_weight_map(SarPatch(Path(args.vh).stem, sanitize_db(vh), sanitize_db(vv)))
    write_tile(args.output, w)
    stats = {"min": float(w.min()), "max": float(w.max()), "mean": float(w.mean())}
    stats_path = Path(args.stats) if args.stats else Path(str(args.output) + ".json")
    stats_path.write_text(json.dumps(stats, sort_keys=True) + "\n")
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    doc = json.loads(Path(args.spec).read_text()) if args.spec else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = SyntheticSceneSpec.from_json(doc)
    manifest = write_synthetic_dataset(spec, args.count, args.output)
    print(json.dumps({"output": str(args.output), **manifest.counts()}))
    return 0


def _pretrain_inputs(rc: RunConfig, cfg: ModelConfig):
    if rc.synthetic is not None:
        spec = SyntheticSceneSpec.from_json({"size": cfg.input_size, **rc.synthetic})
        if rc.synthetic_count < 2:
            raise ConfigError("synthetic_count must be at least 2")
        patches = [s.patch for s in synthetic_scenes(spec, rc.synthetic_count)]
        n_val = len(patches) // 10
        return patches[: len(patches) - n_val], patches[len(patches) - n_val:]
    manifest = scan_manifest(rc.root())
    counters = LoadCounters()
    train = [load_patch(e, manifest.root, counters) for e in manifest.split("train")]
    val = [load_patch(e, manifest.root, counters) for e in manifest.split("val")]
    if counters.nan_replaced:
        log.warning("replaced %d NaN pixels with the dB floor", counters.nan_replaced)
    return train, val


def cmd_pretrain(rc: RunConfig) -> int:
    cfg = rc.model_config()
    train, val = _pretrain_inputs(rc, cfg)
    data = training.prepare_pretrain_data(train, cfg.input_size, rc.weight_mode)
    val_data = training.prepare_pretrain_data(val, cfg.input_size, rc.weight_mode, data.stats) if val else None
    out = Path(rc.output)
    ck, report = training.pretrain(data, cfg, rc.train_schedule(PRETRAIN_EPOCHS), val_data=val_data, out_dir=out,
                                   deterministic=rc.deterministic, ratio=rc.mix_ratio, weight_mode=rc.weight_mode)
    ck.save(out / "final.swck")
    report.config["run"] = rc.to_json()
    report.write(out)
    (out / "stats.json").write_text(json.dumps(data.stats.to_json(), sort_keys=True) + "\n")
    print(json.dumps(report.summary()["final_loss"]))
    return 0


def _pretrained(rc: RunConfig, cfg: ModelConfig) -> Optional[Checkpoint]:
    return Checkpoint.load(rc.pretrained, cfg) if rc.pretrained else None


def _classify_data(rc: RunConfig, cfg: ModelConfig):
    manifest = scan_manifest(rc.root())
    counters = LoadCounters()

    def load(split):
        entries = manifest.split(split)
        if not entries:
            raise DataLoadError(f"split {split!r} is empty")
        if any(e.labels is None for e in entries):
            raise DataLoadError(f"split {split!r} has entries without labels")
        return [load_patch(e, manifest.root, counters) for e in entries], [e.labels for e in entries]

    tr_p, tr_l = load("train")
    te_p, te_l = load("test")
    stats = stats_from_patches(resize_patch(p, cfg.input_size) for p in tr_p)
    return training.prepare_labeled(tr_p, tr_l, cfg, stats), training.prepare_labeled(te_p, te_l, cfg, stats)


def _flood_data(rc: RunConfig, cfg: ModelConfig):
    if rc.flood_benchmark is not None:
        try:
            spec = FloodBenchmarkSpec(**rc.flood_benchmark)
        except TypeError as exc:
            raise ConfigError(f"flood_benchmark: {exc}") from exc
        pairs = synthetic_flood_pairs(spec, rc.flood_train + rc.flood_test)
        train_pairs, test_pairs = pairs[: rc.flood_train], pairs[rc.flood_train:]
    else:
        manifest = scan_manifest(rc.root())
        side = cfg.input_size * FLOOD_TILES

        def sized(pairs):
            return [replace(p, reference=resize_patch(p.reference, side), query=resize_patch(p.query, side))
                    for p in pairs]

        train_pairs = sized(build_flood_pairs(manifest, "train"))
        test_pairs = sized(build_flood_pairs(manifest, "test"))
    train, stats = training.prepare_pairs(train_pairs)
    test, _ = training.prepare_pairs(test_pairs, stats)
    return train, test


def _write_metrics(out: Path, metrics) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(metrics.dumps() + "\n")
    print(metrics.dumps())


def cmd_finetune_classify(rc: RunConfig) -> int:
    cfg = rc.model_config()
    train, test = _classify_data(rc, cfg)
    out = Path(rc.output)
    ck, metrics, report = training.finetune_classify(
        _pretrained(rc, cfg), train, test, cfg, rc.train_schedule(CLASSIFY_EPOCHS),
        head_only=rc.head_only, deterministic=rc.deterministic, out_dir=out)
    ck.save(out / "final.swck")
    report.config["run"] = rc.to_json()
    report.write(out)
    _write_metrics(out, metrics)
    return 0


def cmd_finetune_flood(rc: RunConfig) -> int:
    cfg = rc.model_config()
    train, test = _flood_data(rc, cfg)
    out = Path(rc.output)
    ck, metrics, report = training.finetune_flood(
        _pretrained(rc, cfg), train, test, cfg, rc.train_schedule(FLOOD_EPOCHS),
        head_only=rc.head_only, deterministic=rc.deterministic, out_dir=out)
    ck.save(out / "final.swck")
    report.config["run"] = rc.to_json()
    report.write(out)
    _write_metrics(out, metrics)
    return 0


def cmd_eval(rc: RunConfig) -> int:
    if rc.task is None or rc.checkpoint is None:
        raise ConfigError("eval needs 'task' and 'checkpoint'")
    cfg = rc.model_config()
    training.set_determinism(rc.seed, rc.deterministic)
    ck = Checkpoint.load(rc.checkpoint, cfg)
    if rc.task == "classify":
        _, test = _classify_data(rc, cfg)
        model = MultiLabelClassifier(cfg)
        load_module_state(model, ck.params)
        metrics = training.evaluate_multilabel(model, test)
    else:
        _, test = _flood_data(rc, cfg)
        model = FloodPairClassifier(cfg)
        load_module_state(model, ck.params)
        metrics = training.evaluate_flood(model, test)
    _write_metrics(Path(rc.output) / "eval", metrics)
    return 0


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON or TOML)")
    common.add_argument("--seed", type=int, help="override the configured seed (unsigned 64-bit)")
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="single-threaded deterministic kernels (bit-identical reruns)")
    common.add_argument("--preset", choices=["desk", "paper", "tiny"], help="model size preset")
    common.add_argument("--weight-mode", choices=list(training.WEIGHT_MODES),
                        help="sar: backscatter-weighted loss; uniform: unweighted baseline")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="sarw", description="Backscatter-weighted mixed masked autoencoder for SAR")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("weightmap", parents=[common], help="write the loss-weight raster of a VH/VV tile pair")
    p.add_argument("vh", help="VH tile (.sarw)")
    p.add_argument("vv", help="VV tile (.sarw)")
    p.add_argument("-o", "--output", required=True, help="output weight tile")
    p.add_argument("--stats", help="stats JSON path (default: <output>.json)")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic speckled dataset with manifest")
    p.add_argument("--spec", help="synthetic scene spec JSON")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("-o", "--output", required=True, help="output dataset directory")

    for name, text in (("pretrain", "self-supervised pretraining"),
                       ("finetune-classify", "multi-label classification fine-tuning"),
                       ("finetune-flood", "pairwise flood detection fine-tuning"),
                       ("eval", "evaluate a fine-tuned checkpoint on the test split")):
        sub.add_parser(name, parents=[common], help=text)
    return parser


def _run_config(args) -> RunConfig:
    if not args.config:
        raise ConfigError(f"{args.command} requires --config")
    rc = RunConfig.load(args.config)
    if args.seed is not None:
        rc.seed = args.seed
    if args.deterministic:
        rc.deterministic = True
    if args.preset:
        rc.preset = args.preset
    if args.weight_mode:
        rc.weight_mode = args.weight_mode
    rc.validate()
    return rc


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune-classify": cmd_finetune_classify,
    "finetune-flood": cmd_finetune_flood,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "weightmap":
            return cmd_weightmap(args)
        if args.command == "synth":
            return cmd_synth(args)
        return COMMANDS[args.command](_run_config(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataLoadError, ShapeError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericDivergenceError as exc:
        where = f" (last good checkpoint: {exc.last_checkpoint})" if exc.last_checkpoint else ""
        print(f"numeric divergence: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except SarwError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
