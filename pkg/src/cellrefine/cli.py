"""Command-line entry point: ``cellrefine <command> ...``.

Exit codes are 0 on success, 1 on a runtime or domain error and 2 on a
usage or configuration error. Every command that writes files also writes a
``manifest.json`` run manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import yaml

from .checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .datagen import GeneratorConfig, generate, read_dataset, write_dataset
from .errors import CellRefineError, ConfigError, InvalidConfig
from .evaluation import (
    export_embeddings,
    format_table,
    identity_eval,
    imputation_eval,
    out_of_domain_eval,
    perturbation_eval,
)
from .longtail import fit_tail_exponent, load_counts
from .training import TrainConfig, fine_tune, post_pretrain, pretrain

log = logging.getLogger("cellrefine")

SEED_ENV = "CELLREFINE_SEED"
MANIFEST_FILE = "manifest.json"
CHECKPOINT_FILE = "model.npz"
RECORD_FILE = "run_record.json"
STAGE_FLAGS = {"pretrain": "pretrain", "post-pretrain": "post_pretrain", "fine-tune": "fine_tune"}
TASK_FLAGS = {"identity": "cell_identity", "imputation": "imputation", "perturbation": "perturbation"}


class UsageError(ConfigError):
    pass


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config: dict
    config_text: str | None
    inputs: dict[str, str]
    outputs: list[str]
    seed: int | None
    duration_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST_FILE
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def default_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise InvalidConfig(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def read_config(path: str | None) -> tuple[dict, str | None]:
    """Parse a YAML or JSON mapping; a missing path yields an empty config."""
    if path is None:
        return {}, None
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config not found: {path}")
    text = p.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InvalidConfig(f"config is not valid YAML/JSON: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise InvalidConfig("config must be a mapping of field names to values")
    return data, text


def _with_seed(config: dict) -> dict:
    seed = default_seed()
    if "seed" not in config and seed is not None:
        return {**config, "seed": seed}
    return config


def _data_hashes(data_dir: Path) -> dict[str, str]:
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory not found: {data_dir}")
    return {str(p): file_sha256(p) for p in sorted(data_dir.iterdir()) if p.is_file() and p.name != MANIFEST_FILE}


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands -----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    start = time.perf_counter()
    raw, text = read_config(args.config)
    cfg = GeneratorConfig.from_mapping(_with_seed(raw))
    out = _out_dir(args.out)
    data, ontology, catalog = generate(cfg)
    written = write_dataset(out, data, ontology, catalog)
    RunManifest(
        "gen-data", args.config, cfg.to_dict(), text, {}, [str(p) for p in written], cfg.seed,
        time.perf_counter() - start,
    ).write(out)
    print(f"wrote {len(data)} cells x {len(data.genes)} genes to {out}")
    return 0


def cmd_train(args) -> int:
    start = time.perf_counter()
    raw, text = read_config(args.config)
    stage = STAGE_FLAGS[args.stage]
    raw = _with_seed(raw)
    if raw.get("stage", stage) != stage:
        raise InvalidConfig(f"config stage {raw['stage']!r} disagrees with --stage {args.stage}")
    cfg = TrainConfig.from_mapping(raw, stage=stage)
    data_dir = Path(args.data)
    inputs = _data_hashes(data_dir)
    data, ontology, catalog = read_dataset(data_dir)

    init = None
    if args.init is not None:
        allowed = {"pretrain": ("pt",), "post_pretrain": ("pt",), "fine_tune": ("pt", "pp")}[stage]
        init = load_checkpoint(args.init, allowed_stages=allowed)
        inputs[str(args.init)] = file_sha256(args.init)
    elif stage != "pretrain":
        raise UsageError(f"--stage {args.stage} needs --init CHECKPOINT")

    if stage == "pretrain":
        model, record = pretrain(init, data, cfg)
    elif stage == "post_pretrain":
        model, record = post_pretrain(init, data, ontology, catalog, cfg)
    else:
        model, record = fine_tune(init, cfg.task, data, cfg)

    out = _out_dir(args.out)
    ckpt = save_checkpoint(model, out / CHECKPOINT_FILE)
    rec_path = out / RECORD_FILE
    rec_path.write_text(json.dumps(record.to_json(), indent=2, sort_keys=True) + "\n")
    RunManifest(
        "train", args.config, cfg.to_dict(), text, inputs, [str(ckpt), str(rec_path)], cfg.seed,
        time.perf_counter() - start, {"stage": stage, "stop_reason": record.stop_reason},
    ).write(out)
    print(f"{args.stage}: {record.stopping_epoch} epochs ({record.stop_reason}); checkpoint {ckpt}")
    return 0


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks:
        raise argparse.ArgumentTypeError("--k needs at least one value")
    return ks


def cmd_evaluate(args) -> int:
    start = time.perf_counter()
    seed = default_seed() or 0
    data_dir = Path(args.data)
    inputs = _data_hashes(data_dir)
    data, _, _ = read_dataset(data_dir)
    model = load_checkpoint(args.checkpoint)
    digest = file_sha256(args.checkpoint)
    inputs[str(args.checkpoint)] = digest
    ks = args.k or ()

    if args.few_shot is not None:
        if args.task not in ("identity", "ood"):
            raise UsageError("--few-shot applies to the identity and ood tasks")
        if model.stage not in ("pt", "pp"):
            raise UsageError("--few-shot fits a fresh linear probe and needs a pt or pp checkpoint")
        cfg = TrainConfig(stage="fine_tune", mode="LP", few_shot_n=args.few_shot, seed=seed)
        model, _ = fine_tune(model, "cell_identity", data, cfg)

    if args.task == "identity":
        report = identity_eval(model, data, split=args.split, ks=ks, seed=seed, checkpoint_hash=digest)
    elif args.task == "ood":
        report = out_of_domain_eval(model, data.split("ood"), ks=ks or (1, 3), seed=seed, checkpoint_hash=digest)
    elif args.task == "imputation":
        report = imputation_eval(model, data, seed=seed, split=args.split, checkpoint_hash=digest)
    else:
        report = perturbation_eval(model, data, seed=seed, checkpoint_hash=digest)
    if args.few_shot is not None:
        report.extra["few_shot_n"] = args.few_shot

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out)
    RunManifest(
        "evaluate", None, {"task": args.task, "k": list(ks), "few_shot": args.few_shot, "split": args.split},
        None, inputs, [str(out)], seed, time.perf_counter() - start,
    ).write(out.parent)
    print(format_table([(Path(args.checkpoint).name, report)]))
    return 0


def cmd_tail_fit(args) -> int:
    if args.counts is not None:
        counts = load_counts(args.counts)
    else:
        data, _, _ = read_dataset(args.data)
        counts = data.type_counts()
    fit = fit_tail_exponent(list(counts.values()), args.fraction, ccdf=args.ccdf)
    text = json.dumps(fit.to_json(), indent=2, sort_keys=True)
    if args.out is not None:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_export_embeddings(args) -> int:
    data, _, _ = read_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_embeddings(model, data, out)
    print(f"wrote {len(data)} embeddings to {out}")
    return 0


# --- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellrefine", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic long-tailed dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True, choices=sorted(STAGE_FLAGS))
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a downstream task")
    p.add_argument("--task", required=True, choices=["identity", "imputation", "perturbation", "ood"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=_parse_ks, help="comma-separated recall@k cutoffs, e.g. 1,3")
    p.add_argument("--few-shot", type=int, dest="few_shot", help="fit a linear probe on N cells per type first")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("tail-fit", help="estimate the power-law tail exponent of type counts")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--counts")
    src.add_argument("--data")
    p.add_argument("--fraction", type=float, default=0.30)
    p.add_argument("--ccdf", choices=["tail", "full"], default="tail")
    p.add_argument("--out")
    p.set_defaults(func=cmd_tail_fit)

    p = sub.add_parser("export-embeddings", help="write per-cell embeddings as TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "evaluate" and args.few_shot is not None and args.few_shot < 1:
        print("error: --few-shot must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CellRefineError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
