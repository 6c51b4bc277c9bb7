#!/usr/bin/env python3
"""
Command line for the acoustic/vibration fault-diagnosis experiments:
synth, featurize, pretrain, finetune, eval, ablate.
"""

import argparse
import hashlib
import itertools
import json
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor

from dotenv import load_dotenv

from utils.checkpoint import load_checkpoint, save_checkpoint
from utils.config import (
    FULL_EPOCHS,
    apply_overrides,
    config_from_dict,
    load_config,
    worker_count,
    write_effective_config,
)
from utils.datasets import (
    FusionDataset,
    class_counts,
    load_manifest,
    mgram_key,
    split_finetune,
    write_manifest,
)
from utils.errors import ConfigError, MavgramError
from utils.features import read_feature_cache, write_feature_cache
from utils.pipeline import (
    TIMING_NAME,
    append_curve_row,
    evaluate,
    finetune,
    grid_of,
    pretrain,
)
from utils.synth import MANIFEST_NAME, PROFILES, synth_dataset, uo_shaped_counts

load_dotenv()

DEFAULT_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), "config.yaml")
RUN_FILE = "run.json"


# --- run directory / provenance ---

def prepare_out(out, force):
    if os.path.isdir(out) and os.listdir(out):
        if not force:
            raise FileExistsError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    os.makedirs(out, exist_ok=True)


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_run_file(out, argv, cfg):
    """Seed, fingerprint and a hash of every artifact; written last, so it marks a complete run"""
    artifacts = {}
    for root, _, files in os.walk(out):
        for name in sorted(files):
            path = os.path.join(root, name)
            rel = os.path.relpath(path, out)
            if rel != RUN_FILE and name != TIMING_NAME:
                artifacts[rel.replace(os.sep, "/")] = file_sha256(path)
    run = {
        "argv": list(argv),
        "seed": cfg.seed,
        "fingerprint": cfg.fingerprint(),
        "artifacts": dict(sorted(artifacts.items())),
    }
    with open(os.path.join(out, RUN_FILE), "w", encoding="utf-8") as fh:
        json.dump(run, fh, indent=2, sort_keys=True)
        fh.write("\n")


def collect_overrides(args):
    """--set values plus the shortcut flags, in that order (later wins)"""
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.variant:
        overrides.append(f"variant={args.variant}")
    if args.full:
        overrides.append(f"epochs={FULL_EPOCHS}")
    if getattr(args, "percent", None) is not None:
        overrides.append(f"data.percent={args.percent}")
    return overrides


def effective_config(args, base=None):
    """
    Config file + overrides. When `base` (a checkpoint's config) is given and no
    --config was passed, the checkpoint's own config is the starting point.
    """
    overrides = collect_overrides(args)
    if base is not None and args.config is None:
        try:
            return config_from_dict(apply_overrides(base, overrides)), overrides, None
        except TypeError as e:
            raise ConfigError(str(e)) from e
    path = args.config or DEFAULT_CONFIG
    return load_config(path, overrides), overrides, path


def records_for(cfg, manifest, role, out):
    """Records from a manifest, or a freshly generated synthetic profile"""
    manifest = manifest or (cfg.data.source_manifest if role == "source" else cfg.data.target_manifest)
    if manifest:
        records = load_manifest(manifest)
        print(f"📂 {len(records)} records from {manifest} {class_counts(records)}")
        return records
    if cfg.data.source != "synth":
        raise ConfigError(f"no {role} manifest given and data.source is {cfg.data.source!r}")
    per_class = cfg.data.per_class if role == "source" else cfg.data.target_per_class
    return synth_dataset(PROFILES[role], os.path.join(out, "data", role), per_class, cfg.seed, verbose=True)


def mgram_cache_from(args):
    if not args.cache:
        return None
    cache = read_feature_cache(args.cache)
    print(f"📦 {len(cache)} cached Mgrams from {args.cache}")
    return cache


# --- subcommands ---

def cmd_synth(args, argv):
    cfg, overrides, path = effective_config(args)
    prepare_out(args.out, args.force)
    write_effective_config(cfg, args.out, path, overrides)
    per_class = args.per_class or cfg.data.per_class
    counts = uo_shaped_counts(per_class) if args.uo_shaped else None
    synth_dataset(PROFILES[args.profile], args.out, per_class, cfg.seed, counts=counts, verbose=True)
    write_run_file(args.out, argv, cfg)
    return 0


def cmd_featurize(args, argv):
    cfg, overrides, path = effective_config(args)
    records = load_manifest(args.manifest)
    prepare_out(args.out, args.force)
    write_effective_config(cfg, args.out, path, overrides)

    dataset = FusionDataset(records, cfg.features, grid_of(cfg), augment=True)
    items = {}
    for i, (ri, si) in enumerate(dataset.items):
        key = mgram_key(records[ri].id, dataset.grid.factors[si])
        items[key] = dataset[i]["mgram"].numpy()
    write_feature_cache(os.path.join(args.out, "features.mavf"), items)
    print(f"✅ {len(items)} Mgrams cached ({len(records)} records x {cfg.speed.n} speeds)")
    write_run_file(args.out, argv, cfg)
    return 0


def cmd_pretrain(args, argv):
    cfg, overrides, path = effective_config(args)
    prepare_out(args.out, args.force)
    write_effective_config(cfg, args.out, path, overrides)
    records = records_for(cfg, args.manifest, "source", args.out)
    ckpt = pretrain(cfg, records, args.out, mgram_cache_from(args), verbose=True)
    save_checkpoint(ckpt, os.path.join(args.out, "model.ckpt"))
    print(f"✅ checkpoint saved (best epoch {ckpt.epoch}, loss {ckpt.meta['train_loss']:.4f})")
    write_run_file(args.out, argv, cfg)
    return 0


def cmd_finetune(args, argv):
    ckpt = load_checkpoint(args.ckpt)
    cfg, overrides, path = effective_config(args, base=ckpt.meta.get("config"))
    prepare_out(args.out, args.force)
    write_effective_config(cfg, args.out, path, overrides)
    records = records_for(cfg, args.manifest, "target", args.out)

    tune_set, test_set = split_finetune(records, cfg.data.percent, cfg.seed)
    write_manifest(tune_set, os.path.join(args.out, "finetune.jsonl"))
    write_manifest(test_set, os.path.join(args.out, "test.jsonl"))
    print(f"✂️ {len(tune_set)} fine-tune / {len(test_set)} test records ({cfg.data.percent:g} %)")

    cache = mgram_cache_from(args)
    tuned = finetune(ckpt, cfg, tune_set, args.out, cache, verbose=True, percent=cfg.data.percent)
    save_checkpoint(tuned, os.path.join(args.out, "finetuned.ckpt"))
    report = evaluate(tuned, cfg, test_set, cache, verbose=True)
    report.write(os.path.join(args.out, "report.txt"))
    append_curve_row(os.path.join(args.out, "curve.csv"), report)
    write_run_file(args.out, argv, cfg)
    return 0


def cmd_eval(args, argv):
    ckpt = load_checkpoint(args.ckpt)
    cfg, overrides, path = effective_config(args, base=ckpt.meta.get("config"))
    records = load_manifest(args.manifest)
    tests = [r for r in records if r.split == "test"]
    records = tests or records

    prepare_out(args.out, args.force)
    write_effective_config(cfg, args.out, path, overrides)
    report = evaluate(ckpt, cfg, records, mgram_cache_from(args), verbose=True)
    report.write(os.path.join(args.out, "report.txt"))
    append_curve_row(os.path.join(args.out, "curve.csv"), report)
    write_run_file(args.out, argv, cfg)
    return 0


def run_cell(cfg_dict, source_manifest, target_manifest, percents, cell_dir):
    """One (row, seed) cell: pretrain once, then fine-tune and evaluate per percent"""
    cfg = config_from_dict(cfg_dict)
    source = load_manifest(source_manifest)
    target = load_manifest(target_manifest)
    ckpt = pretrain(cfg, source, cell_dir)
    scores = {}
    for percent in percents:
        tune_set, test_set = split_finetune(target, percent, cfg.seed)
        tuned = finetune(ckpt, cfg, tune_set, cell_dir, percent=percent)
        report = evaluate(tuned, cfg, test_set)
        report.write(os.path.join(cell_dir, f"report-{percent:g}.txt"))
        scores[percent] = report.macro_accuracy
    return scores


def _single_process_loading():
    # cells already run in parallel; no nested loader workers
    os.environ["MAVGRAM_WORKERS"] = "0"


def format_table(rows, percents, cells):
    """(text, csv) with rows x percents of mean macro accuracy"""
    header = ["setting"] + [f"{p:g}%" for p in percents]
    body = [[row] + [f"{cells[row][p]:.4f}" for p in percents] for row in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    text = "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + body) + "\n"
    csv = "\n".join(",".join(r) for r in [header] + body) + "\n"
    return text, csv


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def ablation_rows(cfg, variants, speed_n, speed_s):
    """Row label -> config dict for every (variant, n, s) combination"""
    rows = {}
    for variant, n, s in itertools.product(variants, speed_n, speed_s):
        if len(speed_n) * len(speed_s) == 1:
            label = variant
        elif len(variants) == 1:
            label = f"n={n} s={s:g}"
        else:
            label = f"{variant} n={n} s={s:g}"
        raw = apply_overrides(cfg.to_dict(), [f"variant={variant}", f"speed.n={n}", f"speed.s={s}"])
        rows[label] = config_from_dict(raw).to_dict()
    return rows


def cmd_ablate(args, argv):
    cfg, overrides, path = effective_config(args)
    variants = args.variants.split(",") if args.variants else [cfg.variant]
    percents = _floats(args.percents)
    seeds = _ints(args.seeds) if args.seeds else [cfg.seed]
    speed_n = _ints(args.speed_n) if args.speed_n else [cfg.speed.n]
    speed_s = _floats(args.speed_s) if args.speed_s else [cfg.speed.s]
    rows = ablation_rows(cfg, variants, speed_n, speed_s)

    prepare_out(args.out, args.force)
    write_effective_config(cfg, args.out, path, overrides)

    data = {}
    for seed in seeds:
        if args.manifest and args.target_manifest:
            data[seed] = (args.manifest, args.target_manifest)
            continue
        seeded = config_from_dict(apply_overrides(cfg.to_dict(), [f"seed={seed}"]))
        base = os.path.join(args.out, "data", f"seed-{seed}")
        records_for(seeded, args.manifest, "source", base)
        records_for(seeded, args.target_manifest, "target", base)
        data[seed] = (
            args.manifest or os.path.join(base, "data", "source", MANIFEST_NAME),
            args.target_manifest or os.path.join(base, "data", "target", MANIFEST_NAME),
        )

    jobs = []
    for label, row_cfg in rows.items():
        for seed in seeds:
            cell_cfg = apply_overrides(row_cfg, [f"seed={seed}"])
            cell_dir = os.path.join(args.out, "cells", f"{label.replace(' ', '_')}-seed-{seed}")
            jobs.append((label, seed, (cell_cfg, *data[seed], percents, cell_dir)))

    workers = worker_count()
    print(f"🚀 ablation: {len(rows)} rows x {len(seeds)} seeds x {len(percents)} percents "
          f"({workers or 'no'} worker processes)")
    if workers:
        with ProcessPoolExecutor(max_workers=workers, initializer=_single_process_loading) as pool:
            futures = [pool.submit(run_cell, *job) for _, _, job in jobs]
            results = [f.result() for f in futures]
    else:
        results = [run_cell(*job) for _, _, job in jobs]

    cells = {label: {p: 0.0 for p in percents} for label in rows}
    for (label, _, _), scores in zip(jobs, results):
        for p in percents:
            cells[label][p] += scores[p] / len(seeds)

    text, csv = format_table(list(rows), percents, cells)
    with open(os.path.join(args.out, "ablation.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    with open(os.path.join(args.out, "ablation.csv"), "w", encoding="utf-8") as fh:
        fh.write(csv)
    print(text)
    write_run_file(args.out, argv, cfg)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "featurize": cmd_featurize,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"YAML config file (default {DEFAULT_CONFIG})")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. --set speed.n=5 (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", required=True, help="run directory")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty run directory")
    common.add_argument("--variant", choices=["MAV", "ST", "MV", "AV"])
    common.add_argument("--full", action="store_true", help=f"train for the full {FULL_EPOCHS} epochs")
    common.add_argument("--cache", help="feature cache written by featurize")

    parser = argparse.ArgumentParser(prog="app.py", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--profile", required=True, choices=sorted(PROFILES))
    p.add_argument("--per-class", type=int)
    p.add_argument("--uo-shaped", action="store_true", help="double the healthy class like the UO corpus")

    p = sub.add_parser("featurize", parents=[common], help="dump Mgrams of every record and speed")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="train on the source domain")
    p.add_argument("--manifest", help="source manifest (default: synthesize)")

    p = sub.add_parser("finetune", parents=[common], help="adapt a checkpoint to the target domain")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", help="target manifest (default: synthesize)")
    p.add_argument("--percent", type=float, help="share of the target data used for fine-tuning (max 25)")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True, help="records to score (split=test ones if tagged)")

    p = sub.add_parser("ablate", parents=[common], help="variant / speed-grid x percent matrix")
    p.add_argument("--manifest", help="source manifest (default: synthesize per seed)")
    p.add_argument("--target-manifest", help="target manifest (default: synthesize per seed)")
    p.add_argument("--variants", help="comma list, e.g. MAV,ST,MV,AV")
    p.add_argument("--percents", default="5,10,15,20,25")
    p.add_argument("--seeds", help="comma list of seeds")
    p.add_argument("--speed-n", help="comma list of speed category counts")
    p.add_argument("--speed-s", help="comma list of speed steps")
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args, argv)
    except (MavgramError, ValueError, OSError, RuntimeError) as e:
        print(f"❌ {args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
