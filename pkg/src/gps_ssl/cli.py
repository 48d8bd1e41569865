"""``gps-ssl`` command line: synth, split, bank, train, eval, sweep, report.

Every subcommand reads an optional ``--config`` file (YAML or JSON) and
accepts one flag per config key in dotted form (``--train.lr 0.03``,
``--gps.k 9``); flags win over file values.  Outputs land under ``--out``::

    data/dataset.jsonl  data/split.json
    banks/prior.gpsbank banks/prior.json
    runs/<name>/{config.json, params.bin, metrics.jsonl, summary.json}
    reports/sweep-<name>.jsonl  reports/report.md  reports/report.json
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml

from . import config as cfgmod
from .data import (
    Dataset,
    SplitSpec,
    generate_synthetic,
    holdout_split,
    load_bank,
    read_manifest,
    save_bank,
    split_hierarchical,
    write_manifest,
)
from .errors import ArgumentError, ConfigError, GPSError, MissingArtifactError
from .evaluate import knn_accuracy, linear_probe, recall_at_1
from .model import load_params, save_params
from .sampler import bank_from_matrix
from .train import train

log = logging.getLogger("gps_ssl")

COMMANDS = ("synth", "split", "bank", "train", "eval", "sweep", "report")
_PRODUCER = {"data/dataset.jsonl": "synth", "data/split.json": "split", "banks/prior.gpsbank": "bank"}


# -- layout helpers ---------------------------------------------------------

class Layout:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def require(self, rel: str) -> Path:
        p = self.path(rel)
        if not p.is_file():
            raise MissingArtifactError(p, f"gps-ssl {_PRODUCER.get(rel, rel.split('/')[0])}")
        return p

    def run_dir(self, name: str) -> Path:
        return self.root / "runs" / name

    def write_json(self, rel_or_path, obj) -> Path:
        p = rel_or_path if isinstance(rel_or_path, Path) else self.path(rel_or_path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        return p


def _load_dataset(out: Layout) -> Dataset:
    return read_manifest(out.require("data/dataset.jsonl"))


def _load_split(out: Layout) -> dict:
    return json.loads(out.require("data/split.json").read_text())


# -- subcommands ------------------------------------------------------------

def cmd_synth(exp: cfgmod.ExperimentConfig, out: Layout) -> dict:
    d = exp.dataset
    if d.kind == "manifest":
        if not d.path:
            raise ConfigError("dataset.path: required when dataset.kind is 'manifest'")
        if not Path(d.path).is_file():
            raise MissingArtifactError(d.path, "an external manifest")
        ds = read_manifest(d.path)
    else:
        ds = generate_synthetic(d.num_chains, d.branches_per_chain, d.per_branch, d.image_hw, d.noise_std,
                                d.flip_closed, exp.dataset_seed(), channels=d.channels,
                                branch_spread=d.branch_spread)
    path = out.path("data/dataset.jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(ds, path)
    return {"dataset": str(path), "samples": len(ds)}


def cmd_split(exp: cfgmod.ExperimentConfig, out: Layout) -> dict:
    ds = _load_dataset(out)
    s = exp.split
    if s.mode == "holdout":
        train_ids, test_ids = holdout_split(ds, s.test_fraction, exp.split_seed())
        rec = {"mode": "holdout", "train_ids": sorted(train_ids), "test_ids": sorted(test_ids),
               "retrieval_ids": sorted(test_ids)}
    else:
        spec = split_hierarchical(ds, s.chain_fraction, s.branch_fraction, s.sample_fraction, exp.split_seed())
        # probe/kNN on held-out samples of seen branches, retrieval on unseen classes
        rec = {"mode": "hierarchical", "train_ids": spec.sorted("train"), "test_ids": spec.sorted("dss"),
               "retrieval_ids": sorted(spec.dsu_ids | spec.duu_ids), "tiers": spec.to_dict()}
    out.write_json("data/split.json", rec)
    return {"split": str(out.path("data/split.json")), "train": len(rec["train_ids"]), "test": len(rec["test_ids"])}


def cmd_bank(exp: cfgmod.ExperimentConfig, out: Layout) -> dict:
    ds = _load_dataset(out)
    split = _load_split(out)
    train_ds = ds.subset(split["train_ids"])
    emb = exp.prior_encoder().encode(train_ds)
    out.path("banks").mkdir(parents=True, exist_ok=True)
    save_bank(out.path("banks/prior.gpsbank"), emb)
    out.write_json("banks/prior.json", {"kind": exp.prior.kind, "params": exp.prior.params,
                                        "rows": len(train_ds), "dim": int(emb.shape[1])})
    return {"bank": str(out.path("banks/prior.gpsbank")), "rows": len(train_ds), "dim": int(emb.shape[1])}


def _bank_for(exp: cfgmod.ExperimentConfig, out: Layout, ks: Sequence[int]):
    if exp.train.pair_mode != "gps":
        return None
    matrix = load_bank(out.require("banks/prior.gpsbank"))
    extra = 0 if exp.gps.include_self_in_knn else 1
    need = max(ks) - 1 + extra if exp.gps.mode == "knn_random" else 1
    k_max = max(1, min(len(matrix) - 1, need))
    return bank_from_matrix(matrix, k_max)


def evaluate_params(exp: cfgmod.ExperimentConfig, params, ds: Dataset, split: dict) -> dict:
    e = exp.eval
    res = {}
    for metric in e.metrics:
        if metric == "knn_accuracy":
            res[metric] = knn_accuracy(params, ds, split["train_ids"], split["test_ids"], e.knn_k)
        elif metric == "linear_probe":
            res[metric] = linear_probe(params, ds, split["train_ids"], split["test_ids"], e.classifier_lr,
                                       e.probe_epochs, exp.train_seed())
        else:
            res[metric] = recall_at_1(params, ds, split["retrieval_ids"])
    return res


def _run_one(exp: cfgmod.ExperimentConfig, out: Layout, ds: Dataset, split: dict, bank, name: str) -> dict:
    tc = exp.train_config(ds[0].image.shape[0], ds[0].image.shape[2])
    spec = SplitSpec(train_ids=frozenset(split["train_ids"]))
    if tc.init != "random" and not tc.init.startswith("from_file("):
        raise ConfigError(f"train.init: expected 'random' or 'from_file(<path>)', got {tc.init!r}")
    params, mlog = train(tc, ds, spec, bank=bank)
    metrics = evaluate_params(exp, params, ds, split)
    run = out.run_dir(name)
    run.mkdir(parents=True, exist_ok=True)
    save_params(params, run / "params.bin")
    mlog.final = {**metrics, "median_step_seconds": float(np.median(mlog.step_seconds)) if mlog.steps else None}
    mlog.write_jsonl(run / "metrics.jsonl")
    out.write_json(run / "config.json", exp.model_dump(mode="json"))
    summary = {
        "name": name,
        "objective": exp.train.objective,
        "pair_mode": exp.train.pair_mode,
        "prior": exp.prior.kind if exp.train.pair_mode == "gps" else None,
        "k": exp.gps.k if exp.train.pair_mode == "gps" and exp.gps.mode == "knn_random" else None,
        "tau": exp.gps.tau if exp.train.pair_mode == "gps" and exp.gps.mode == "tau_ball" else None,
        "lr": exp.train.lr,
        "epochs": exp.train.epochs,
        "seed": exp.train_seed(),
        "steps": len(mlog.steps),
        "final_loss": mlog.losses[-1] if mlog.steps else None,
        "metrics": metrics,
    }
    out.write_json(run / "summary.json", summary)
    return summary


def cmd_train(exp: cfgmod.ExperimentConfig, out: Layout) -> dict:
    ds = _load_dataset(out)
    split = _load_split(out)
    bank = _bank_for(exp, out, [exp.gps.k])
    return _run_one(exp, out, ds, split, bank, exp.name)


def cmd_eval(exp: cfgmod.ExperimentConfig, out: Layout) -> dict:
    ds = _load_dataset(out)
    split = _load_split(out)
    run = out.run_dir(exp.name)
    params_path = run / "params.bin"
    if not params_path.is_file():
        raise MissingArtifactError(params_path, "gps-ssl train")
    metrics = evaluate_params(exp, load_params(params_path), ds, split)
    summary_path = run / "summary.json"
    summary = json.loads(summary_path.read_text()) if summary_path.is_file() else {"name": exp.name}
    summary["metrics"] = {**summary.get("metrics", {}), **metrics}
    out.write_json(summary_path, summary)
    return summary


def _fmt(v: float) -> str:
    return f"{v:g}"


def cmd_sweep(exp: cfgmod.ExperimentConfig, out: Layout) -> list[dict]:
    ds = _load_dataset(out)
    split = _load_split(out)
    gps_knn = exp.train.pair_mode == "gps" and exp.gps.mode == "knn_random"
    ks = list(exp.sweep.ks) if gps_knn else [None]
    bank = _bank_for(exp, out, [k for k in ks if k is not None] or [exp.gps.k])
    records = []
    for lr in exp.sweep.lrs:
        for k in ks:
            cell = exp.model_copy(deep=True)
            cell.train.lr = lr
            name = f"{exp.name}-lr{_fmt(lr)}"
            if k is not None:
                cell.gps.k = k
                name += f"-k{k}"
            records.append(_run_one(cell, out, ds, split, bank, name))
            log.info("sweep cell %s: %s", name, records[-1]["metrics"])
    path = out.path(f"reports/sweep-{exp.name}.jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return records


_DISPLAY = {"simclr": "SimCLR", "byol": "BYOL", "barlow": "Barlow Twins", "vicreg": "VICReg", "nnclr": "NNCLR"}


def row_label(rec: dict) -> str:
    base = _DISPLAY.get(rec.get("objective"), str(rec.get("objective")))
    label = f"GPS-{base}" if rec.get("pair_mode") == "gps" else base
    return f"{label} ({rec['name']})" if rec.get("name") else label


def read_summaries(paths: Sequence[Path]) -> list[dict]:
    records = []
    for p in paths:
        text = Path(p).read_text()
        if str(p).endswith(".jsonl"):
            records.extend(json.loads(line) for line in text.splitlines() if line.strip())
        else:
            records.append(json.loads(text))
    return records


def render_table(records: list[dict]) -> tuple[str, dict]:
    """Markdown table with one row per record; the best value in each metric column is starred."""
    records = sorted(records, key=lambda r: (r.get("objective", ""), r.get("pair_mode") == "gps", r.get("name", "")))
    cols = sorted({m for r in records for m in r.get("metrics", {})})
    best = {}
    for c in cols:
        vals = [r["metrics"][c] for r in records if c in r.get("metrics", {})]
        best[c] = max(vals) if vals else None
    lines = ["| method | " + " | ".join(cols) + " |", "|---" * (len(cols) + 1) + "|"]
    for r in records:
        cells = []
        for c in cols:
            v = r.get("metrics", {}).get(c)
            cells.append("-" if v is None else f"{v:.2f}" + (" *" if v == best[c] else ""))
        lines.append(f"| {row_label(r)} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n", best


def cmd_report(exp: cfgmod.ExperimentConfig, out: Layout, inputs: Optional[Sequence[str]] = None) -> dict:
    if inputs:
        paths = [Path(p) for p in inputs]
        for p in paths:
            if not p.is_file():
                raise MissingArtifactError(p, "gps-ssl train or sweep")
    else:
        paths = sorted((out.root / "runs").glob("*/summary.json"))
    if not paths:
        raise MissingArtifactError(out.root / "runs" / "*" / "summary.json", "gps-ssl train or sweep")
    records = read_summaries(paths)
    table, best = render_table(records)
    md = out.path("reports/report.md")
    md.parent.mkdir(parents=True, exist_ok=True)
    md.write_text(table)
    out.write_json("reports/report.json", {"rows": len(records), "best": best})
    return {"report": str(md), "rows": len(records), "table": table}


# -- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gps-ssl", description="Guided positive sampling experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config")
    common.add_argument("--out", default="out", help="output root (default: ./out)")
    keys = common.add_argument_group("config keys (override the file)")
    for dotted in cfgmod.leaf_paths():
        keys.add_argument(f"--{dotted}", dest=f"cfg:{dotted}", metavar="VALUE", default=None)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "report":
            p.add_argument("inputs", nargs="*", help="summary .json/.jsonl files (default: runs/*/summary.json)")
    return parser


def resolve_config(args: argparse.Namespace) -> cfgmod.ExperimentConfig:
    raw = cfgmod.load_config(args.config) if args.config else {}
    for key, value in vars(args).items():
        if key.startswith("cfg:") and value is not None:
            try:
                parsed = yaml.safe_load(value)
            except yaml.YAMLError:
                parsed = value
            cfgmod.set_path(raw, key[4:], parsed)
    return cfgmod.validate_config(raw)


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        exp = resolve_config(args)
        out = Layout(args.out)
        if args.command == "report":
            result = cmd_report(exp, out, args.inputs)
            sys.stdout.write(result["table"])
            return 0
        fn = {"synth": cmd_synth, "split": cmd_split, "bank": cmd_bank, "train": cmd_train,
              "eval": cmd_eval, "sweep": cmd_sweep}[args.command]
        result = fn(exp, out)
    except (ConfigError, ArgumentError, MissingArtifactError) as exc:
        print(f"gps-ssl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except GPSError as exc:
        print(f"gps-ssl {args.command}: error: {exc}", file=sys.stderr)
        return 1
    if isinstance(result, list):
        for rec in result:
            print(json.dumps(rec, sort_keys=True))
    else:
        print(json.dumps(result, sort_keys=True))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
