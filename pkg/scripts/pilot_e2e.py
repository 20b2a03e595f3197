#!/usr/bin/env python3
"""Pilot the end-to-end phantom pipeline at a chosen model scale.

Times every stage and reports validation DSC after pretraining and after
pseudo-label fine-tuning. Used to fix the acceptance-suite preset.
"""

import argparse
import json
import os
import shutil
import sys
import tempfile
import time

from swinseg.cli import main as segctl


def run(argv):
    rc = segctl(argv)
    if rc != 0:
        raise SystemExit(f"segctl {argv[0]} failed with exit code {rc}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--embed-dim", type=int, default=12)
    ap.add_argument("--depths", type=int, nargs="+", default=[1, 1])
    ap.add_argument("--heads", type=int, nargs="+", default=[2, 4])
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--finetune-steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--keep", default=None, help="keep artifacts in this directory")
    args = ap.parse_args()

    root = args.keep or tempfile.mkdtemp(prefix="pilot_")
    os.makedirs(root, exist_ok=True)
    t_all = time.perf_counter()

    def stage(name, fn):
        t0 = time.perf_counter()
        out = fn()
        print(f"[{time.perf_counter() - t_all:7.1f}s] {name}: {time.perf_counter() - t0:.1f}s")
        return out

    data = os.path.join(root, "data")
    stage("phantom", lambda: run([
        "phantom", "--labeled", "8", "--unlabeled", "4", "--val", "2",
        "--out", data, "--seed", str(args.seed), "--classes", "4", "--dim", "64"]))

    cfg_path = os.path.join(root, "config.json")
    with open(cfg_path, "w") as f:
        json.dump({
            "model": {"num_classes": 4, "embed_dim": args.embed_dim,
                      "depths": args.depths, "heads": args.heads, "window": 4},
            "train": {"steps": args.steps, "patch_size": 32, "batch_size": 2,
                      "lr": args.lr, "seed": args.seed},
        }, f)

    run1 = os.path.join(root, "run_pretrain")
    stage("pretrain", lambda: run([
        "train", "--data", os.path.join(data, "manifest.json"),
        "--out", run1, "--config", cfg_path]))
    ckpt1 = os.path.join(run1, "checkpoints", "final.mckp")

    def infer_val(ckpt, tag):
        pred = os.path.join(root, f"preds_{tag}")
        gt = os.path.join(root, f"gt_{tag}")
        os.makedirs(pred, exist_ok=True)
        os.makedirs(gt, exist_ok=True)
        manifest = json.load(open(os.path.join(data, "manifest.json")))
        for case in manifest["cases"]:
            if case["split"] != "val":
                continue
            name = case["id"] + ".mvol"
            run(["infer", "--ckpt", ckpt, "--in", os.path.join(data, case["image"]),
                 "--out", os.path.join(pred, name)])
            shutil.copy(os.path.join(data, case["label"]), os.path.join(gt, name))
        report = os.path.join(root, f"report_{tag}.json")
        run(["evaluate", "--pred", pred, "--gt", gt, "--nsd-tol", "1.0",
             "--report", report])
        return json.load(open(report))

    rep1 = stage("eval pretrain", lambda: infer_val(ckpt1, "pretrain"))

    pseudo = os.path.join(root, "pseudo")
    stage("pseudolabel", lambda: run([
        "pseudolabel", "--ckpt", ckpt1, "--data", os.path.join(data, "manifest.json"),
        "--out", pseudo, "--config", cfg_path]))

    run2 = os.path.join(root, "run_finetune")
    stage("finetune", lambda: run([
        "finetune", "--ckpt", ckpt1, "--data", os.path.join(pseudo, "manifest.json"),
        "--out", run2, "--config", cfg_path, "--steps", str(args.finetune_steps)]))
    ckpt2 = os.path.join(run2, "checkpoints", "final.mckp")

    rep2 = stage("eval finetune", lambda: infer_val(ckpt2, "final"))

    print(f"pretrain mean DSC={rep1['mean_dsc']:.4f} NSD={rep1['mean_nsd']:.4f}")
    print(f"final    mean DSC={rep2['mean_dsc']:.4f} NSD={rep2['mean_nsd']:.4f}")
    print(f"total {time.perf_counter() - t_all:.1f}s; artifacts in {root}")
    if not args.keep:
        shutil.rmtree(root)


if __name__ == "__main__":
    sys.exit(main())
