#!/usr/bin/env python3
"""Desk-scale directional study on seeded phantoms.

Trains v3 at L in {4}, {5}, {6} with plain and shuffled reconstruction input, and the
PET-only unimodal baseline, for several seeds; evaluates each on a held-out phantom set.
One JSON line per finished run is appended to ``runs.jsonl`` so an interrupted study can
be resumed by re-running the same command.

    python scripts/desk_study.py --out results/desk_study
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from mirror_unet.config import ModelConfig, TrainConfig, format_shared
from mirror_unet.data import generate_phantom, make_phantom_specs
from mirror_unet.training import evaluate_model, train_model

log = logging.getLogger("desk_study")

SHARED = ({4}, {5}, {6})
CORRUPTIONS = ("none", "shuffle")
WIDTHS = (8, 16, 32, 64, 128)
TRAIN_DATA_SEED = 1000
TEST_DATA_SEED = 2000


def planned_runs(seeds):
    for seed in seeds:
        for shared in SHARED:
            for corr in CORRUPTIONS:
                yield {"kind": "v3", "shared": format_shared(frozenset(shared)), "corruption": corr, "seed": seed}
        yield {"kind": "unimodal_pet", "shared": "", "corruption": "none", "seed": seed}


def run_key(r) -> tuple:
    return (r["kind"], r["shared"], r["corruption"], int(r["seed"]))


def make_config(run, epochs, size) -> TrainConfig:
    patch = (size, size, size)
    if run["kind"] == "v3":
        model = ModelConfig(version="v3", shared=run["shared"], stage_widths=WIDTHS, in_patch=patch, seed=run["seed"])
        return TrainConfig(model=model, epochs=epochs, corruption=run["corruption"], seed=run["seed"])
    # baselines reuse the model config for widths/patch; version is ignored
    model = ModelConfig(version="v1", shared=(), stage_widths=WIDTHS, in_patch=patch, seed=run["seed"])
    return TrainConfig(model=model, epochs=epochs, baseline=run["kind"], seed=run["seed"])


def datasets(n_train, n_test, size):
    shape = (size, size, size)
    train = [generate_phantom(s) for s in make_phantom_specs(n_train, TRAIN_DATA_SEED, shape=shape)]
    test = [generate_phantom(s) for s in make_phantom_specs(n_test, TEST_DATA_SEED, shape=shape)]
    return train, test


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results/desk_study"))
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--n-train", type=int, default=40)
    ap.add_argument("--n-test", type=int, default=10)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))

    args.out.mkdir(parents=True, exist_ok=True)
    runs_path = args.out / "runs.jsonl"
    settings = {"epochs": args.epochs, "n_train": args.n_train, "n_test": args.n_test, "size": args.size,
                "widths": list(WIDTHS), "train_data_seed": TRAIN_DATA_SEED, "test_data_seed": TEST_DATA_SEED}
    settings_path = args.out / "settings.json"
    if settings_path.exists() and json.loads(settings_path.read_text()) != settings:
        raise SystemExit(f"{settings_path} was written with different settings; use another --out")
    settings_path.write_text(json.dumps(settings, indent=1))

    done = set()
    if runs_path.exists():
        done = {run_key(json.loads(line)) for line in runs_path.read_text().splitlines() if line.strip()}
    train, test = datasets(args.n_train, args.n_test, args.size)
    log.info("train: %d cases (%d lesion-bearing), test: %d cases (%d lesion-bearing)",
             len(train), sum(s.c for s in train), len(test), sum(s.c for s in test))

    for run in planned_runs(int(s) for s in args.seeds.split(",")):
        if run_key(run) in done:
            continue
        cfg = make_config(run, args.epochs, args.size)
        log.info("start %s", run)
        t0, c0 = time.perf_counter(), time.process_time()
        ckpt, hist = train_model(cfg, train)
        agg, records = evaluate_model(ckpt, test)
        row = {**run, "dice": agg.dice, "fpv_ml": agg.fpv_ml, "fnv_ml": agg.fnv_ml,
               "case_dice": [r.dice for r in records], "steps": len(hist.rows),
               "final_loss": float(np.median(hist.losses()[-10:])),
               "wall_seconds": time.perf_counter() - t0, "cpu_seconds": time.process_time() - c0}
        with open(runs_path, "a") as fh:
            fh.write(json.dumps(row) + "\n")
        log.info("done %s dice=%.4f fpv=%.3f fnv=%.3f (%.0f s)", run, agg.dice, agg.fpv_ml, agg.fnv_ml,
                 row["wall_seconds"])


if __name__ == "__main__":
    main()
