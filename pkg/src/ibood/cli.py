"""Command-line orchestration of the leave-one-class-out experiments.

Verbs:
  run                 execute ood_class × repetition cells from a YAML config
  report              re-derive the aggregate report from persisted cell reports
  eval                score an existing checkpoint on one task
  export-embeddings   dump test-set embeddings of a checkpoint as CSV

Exit codes: 0 success, 1 validation failure, 2 runtime failure. The
IBOOD_OUTPUT_ROOT environment variable overrides the configured output
directory. Repetition r of ood_class c uses seed = base_seed + 1000*c + r.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import nets, score_eval, train
from .data_ingest import build_task, parse_idx
from .ib_loss import IBLossConfig
from .score_eval import ScoreReport
from .train import GanTrainConfig, IBTrainConfig

AGGREGATE_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Raised with field-level messages when a config fails validation."""


@dataclass
class ExperimentConfig:
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    output_dir: str
    ood_classes: list[int] = field(default_factory=lambda: list(range(10)))
    n_support: int = 10
    repetitions: int = 10
    base_seed: int = 0
    head_mode: str = "projected"
    d_proj: int = 128
    kde_bandwidth: object = "scott"  # "scott" or a positive float
    gan: GanTrainConfig = field(default_factory=GanTrainConfig)
    ib: IBTrainConfig = field(default_factory=IBTrainConfig)

    def validate(self, check_paths: bool = True) -> None:
        problems = []
        if self.repetitions < 1:
            problems.append(f"repetitions: must be >= 1, got {self.repetitions}")
        if self.n_support < 1:
            problems.append(f"n_support: must be >= 1, got {self.n_support}")
        if not self.ood_classes:
            problems.append("ood_classes: must be nonempty")
        if self.head_mode not in ("projected", "flatten"):
            problems.append(f"head_mode: unknown mode {self.head_mode!r}")
        if self.kde_bandwidth != "scott":
            try:
                if float(self.kde_bandwidth) <= 0:
                    problems.append("kde_bandwidth: fixed bandwidth must be positive")
            except (TypeError, ValueError):
                problems.append(f"kde_bandwidth: expected 'scott' or a number")
        if check_paths:
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                path = getattr(self, name)
                if not Path(path).exists():
                    problems.append(f"{name}: path does not exist: {path}")
        if problems:
            raise ConfigError("\n".join(problems))

    def to_dict(self) -> dict:
        data = asdict(self)
        data["gan"]["adam_betas"] = list(self.gan.adam_betas)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = copy.deepcopy(data)
        try:
            gan = data.pop("gan", {})
            if "adam_betas" in gan:
                gan["adam_betas"] = tuple(gan["adam_betas"])
            ib = data.pop("ib", {})
            loss = ib.pop("loss", {})
            return cls(
                gan=GanTrainConfig(**gan),
                ib=IBTrainConfig(loss=IBLossConfig(**loss), **ib),
                **data,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            data = yaml.safe_load(f)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        return cls.from_dict(data)

    def save(self, path) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=True)


def cell_seed(base_seed: int, ood_class: int, repetition: int) -> int:
    return base_seed + 1000 * ood_class + repetition


def _cell_dir(output_dir: Path, ood_class: int, repetition: int) -> Path:
    return output_dir / "cells" / f"ood{ood_class}_rep{repetition}"


def run_cell(train_ds, test_ds, cfg: ExperimentConfig, ood_class: int, repetition: int):
    """Run one task cell end to end and persist all artifacts to its directory."""
    seed = cell_seed(cfg.base_seed, ood_class, repetition)
    out = _cell_dir(Path(cfg.output_dir), ood_class, repetition)
    out.mkdir(parents=True, exist_ok=True)

    task = build_task(train_ds, test_ds, ood_class, cfg.n_support, seed)
    gan_cfg = copy.deepcopy(cfg.gan)
    gan_cfg.seed = seed
    generator, discriminator, gan_log = train.pretrain_gan(task, gan_cfg)

    import torch

    torch.manual_seed(seed)
    head = nets.EmbeddingHead(cfg.head_mode, cfg.d_proj)
    nets.init_dcgan_weights(head)
    head.eval()

    nets.save_params(generator, out / "generator.params")
    nets.save_params(discriminator, out / "discriminator_phase1.params")
    nets.save_params(head, out / "head_phase1.params")
    gan_log.write(out / "gan_log.jsonl")

    report_before = score_eval.evaluate_task(discriminator, head, task, cfg.kde_bandwidth)
    (out / "report_phase1.json").write_text(report_before.to_json())

    ib_cfg = copy.deepcopy(cfg.ib)
    ib_cfg.seed = seed
    discriminator, head, protos, ib_log = train.retrain_ib(discriminator, head, task, ib_cfg)
    nets.save_params(discriminator, out / "discriminator_phase2.params")
    nets.save_params(head, out / "head_phase2.params")
    nets.save_params(protos, out / "prototypes.params")
    ib_log.write(out / "ib_log.jsonl")

    report_after = score_eval.evaluate_task(discriminator, head, task, cfg.kde_bandwidth)
    (out / "report_phase2.json").write_text(report_after.to_json())

    audit = {"ood_label_hits": gan_log.ood_label_hits + ib_log.ood_label_hits}
    (out / "audit.json").write_text(json.dumps(audit, sort_keys=True))
    return report_before, report_after


def aggregate(results_dir) -> dict:
    """Fold persisted cell reports into per-class AUPRC/separation statistics."""
    results_dir = Path(results_dir)
    cells = sorted((results_dir / "cells").glob("ood*_rep*")) if (results_dir / "cells").exists() else []
    per_class: dict[int, dict] = {}
    n_reports = 0
    for cell in cells:
        reports = {}
        for phase in (1, 2):
            path = cell / f"report_phase{phase}.json"
            if not path.exists():
                continue
            reports[phase] = ScoreReport.from_json(path.read_text(), source=str(path))
            n_reports += 1
        if set(reports) != {1, 2}:
            continue  # incomplete cell, e.g. interrupted mid-run
        c = reports[1].ood_class
        entry = per_class.setdefault(
            c,
            {
                "auprc_phase1": [],
                "auprc_phase2": [],
                "separation_phase1": [],
                "separation_phase2": [],
            },
        )
        entry["auprc_phase1"].append(reports[1].auprc)
        entry["auprc_phase2"].append(reports[2].auprc)
        entry["separation_phase1"].append(reports[1].separation)
        entry["separation_phase2"].append(reports[2].separation)
    if n_reports == 0:
        raise FileNotFoundError(f"no score reports found under {results_dir}")

    table = {}
    for c, entry in sorted(per_class.items()):
        table[str(c)] = {
            "repetitions": len(entry["auprc_phase1"]),
            "auprc_phase1_mean": float(np.mean(entry["auprc_phase1"])),
            "auprc_phase1_std": float(np.std(entry["auprc_phase1"])),
            "auprc_phase2_mean": float(np.mean(entry["auprc_phase2"])),
            "auprc_phase2_std": float(np.std(entry["auprc_phase2"])),
            "auprc_phase1_raw": entry["auprc_phase1"],
            "auprc_phase2_raw": entry["auprc_phase2"],
            "separation_phase1_raw": entry["separation_phase1"],
            "separation_phase2_raw": entry["separation_phase2"],
        }
    return {"schema_version": AGGREGATE_SCHEMA_VERSION, "per_ood_class": table}


def write_aggregate(results_dir) -> dict:
    """Emit aggregate.json and a plot-ready aggregate.csv; returns the report."""
    results_dir = Path(results_dir)
    report = aggregate(results_dir)
    (results_dir / "aggregate.json").write_text(json.dumps(report, sort_keys=True))
    lines = ["ood_class,phase,mean_auprc,std_auprc"]
    for c, entry in report["per_ood_class"].items():
        for phase in (1, 2):
            lines.append(
                f"{c},{phase},{entry[f'auprc_phase{phase}_mean']!r},"
                f"{entry[f'auprc_phase{phase}_std']!r}"
            )
    (results_dir / "aggregate.csv").write_text("\n".join(lines) + "\n")
    return report


def _resolve_output_dir(cfg: ExperimentConfig) -> None:
    root = os.environ.get("IBOOD_OUTPUT_ROOT")
    if root:
        cfg.output_dir = str(Path(root) / Path(cfg.output_dir).name)


def cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.ood_class is not None:
        cfg.ood_classes = [args.ood_class]
    if args.repetitions is not None:
        cfg.repetitions = args.repetitions
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    _resolve_output_dir(cfg)
    cfg.validate()

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")  # resolved copy for provenance

    train_ds = parse_idx(cfg.train_images, cfg.train_labels, split="train")
    test_ds = parse_idx(cfg.test_images, cfg.test_labels, split="test")

    for c in cfg.ood_classes:
        for r in range(cfg.repetitions):
            cell = _cell_dir(out, c, r)
            if args.resume and (cell / "report_phase2.json").exists():
                print(f"[skip] ood={c} rep={r} (already complete)")
                continue
            before, after = run_cell(train_ds, test_ds, cfg, c, r)
            print(
                f"[done] ood={c} rep={r} auprc {before.auprc:.4f} -> {after.auprc:.4f}"
            )
    write_aggregate(out)
    return 0


def cmd_report(args) -> int:
    report = write_aggregate(args.results_dir)
    print(json.dumps(report, sort_keys=True, indent=2))
    return 0


def _load_checkpoint_task(args):
    cfg = ExperimentConfig.load(args.config)
    _resolve_output_dir(cfg)
    cfg.validate()
    train_ds = parse_idx(cfg.train_images, cfg.train_labels, split="train")
    test_ds = parse_idx(cfg.test_images, cfg.test_labels, split="test")
    task = build_task(train_ds, test_ds, args.ood_class, cfg.n_support, args.seed)
    discriminator = nets.Discriminator()
    nets.load_params(discriminator, args.discriminator)
    head = nets.EmbeddingHead(cfg.head_mode, cfg.d_proj)
    nets.load_params(head, args.head)
    discriminator.eval()
    head.eval()
    return cfg, task, discriminator, head


def cmd_eval(args) -> int:
    cfg, task, discriminator, head = _load_checkpoint_task(args)
    report = score_eval.evaluate_task(discriminator, head, task, cfg.kde_bandwidth)
    print(report.to_json())
    return 0


def cmd_export_embeddings(args) -> int:
    _, task, discriminator, head = _load_checkpoint_task(args)
    score_eval.export_embeddings(discriminator, head, task, args.output)
    print(f"wrote {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ibood",
        description="Leave-one-class-out OOD detection with IB embedding re-training",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run ood_class × repetition cells")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--ood-class", type=int, default=None)
    run_p.add_argument("--repetitions", type=int, default=None)
    run_p.add_argument("--output-dir", default=None)
    run_p.add_argument("--resume", action="store_true")
    run_p.set_defaults(func=cmd_run)

    report_p = sub.add_parser("report", help="aggregate persisted score reports")
    report_p.add_argument("results_dir")
    report_p.set_defaults(func=cmd_report)

    for name, func in (("eval", cmd_eval), ("export-embeddings", cmd_export_embeddings)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--discriminator", required=True)
        p.add_argument("--head", required=True)
        p.add_argument("--ood-class", type=int, required=True)
        p.add_argument("--seed", type=int, default=0)
        if name == "export-embeddings":
            p.add_argument("--output", required=True)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
