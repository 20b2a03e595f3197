"""segctl: single executable orchestrating the pipeline end-to-end.

Subcommands: phantom | preprocess | train | pseudolabel | finetune | infer
| postprocess | evaluate. Exit codes: 0 success, 2 usage, 3 config,
4 data, 5 runtime. Heavy imports happen after --threads is applied so the
BLAS thread cap actually takes effect.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_RUNTIME = 5


def _apply_threads(argv):
    n = os.environ.get("SEGCTL_THREADS")
    if "--threads" in argv:
        i = argv.index("--threads")
        if i + 1 < len(argv):
            n = argv[i + 1]
    if n is not None:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segctl",
                                description="Phantom segmentation pipeline driver")
    p.add_argument("--threads", type=int, default=None,
                   help="cap worker/BLAS threads (1 gives the determinism guarantee); "
                        "env fallback SEGCTL_THREADS")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    sp.add_argument("--labeled", type=int, default=4, help="number of labeled cases")
    sp.add_argument("--unlabeled", type=int, default=2, help="number of unlabeled cases")
    sp.add_argument("--val", type=int, default=2, help="number of validation cases")
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.add_argument("--seed", type=int, default=0, help="generation seed")
    sp.add_argument("--classes", type=int, default=5, help="number of foreground classes J")
    sp.add_argument("--dim", type=int, default=64, help="cubic volume extent")
    sp.add_argument("--partial-prob", type=float, default=0.5,
                    help="probability a labeled case is partialized")

    sp = sub.add_parser("preprocess", help="crop non-zero, resample, z-score one volume")
    sp.add_argument("--in", dest="inp", required=True, help="input image .mvol")
    sp.add_argument("--out", required=True, help="output image .mvol")
    sp.add_argument("--spacing", type=float, nargs=3, default=None,
                    help="target spacing (sz sy sx) in mm; default keeps source")
    sp.add_argument("--no-crop", action="store_true", help="skip non-zero cropping")
    sp.add_argument("--no-zscore", action="store_true", help="skip z-score normalization")

    for name, descr in (("train", "pretrain on the labeled split"),
                        ("finetune", "fine-tune on labeled + pseudo splits")):
        sp = sub.add_parser(name, help=descr)
        sp.add_argument("--data", required=True, help="dataset manifest JSON")
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--config", default=None, help="run config JSON (model/train sections)")
        sp.add_argument("--steps", type=int, default=None, help="override training steps")
        sp.add_argument("--patch", type=int, default=None, help="override patch size")
        sp.add_argument("--lr", type=float, default=None, help="override learning rate")
        sp.add_argument("--seed", type=int, default=None, help="override seed")
        if name == "finetune":
            sp.add_argument("--ckpt", required=True, help="pretrained checkpoint")

    sp = sub.add_parser("pseudolabel", help="predict labels for the unlabeled split")
    sp.add_argument("--ckpt", required=True, help="trained checkpoint")
    sp.add_argument("--data", required=True, help="dataset manifest JSON")
    sp.add_argument("--out", required=True, help="directory for pseudo labels + manifest")
    sp.add_argument("--config", default=None, help="run config JSON")
    sp.add_argument("--connectivity", type=int, choices=(6, 26), default=26,
                    help="component adjacency for post-processing")
    sp.add_argument("--min-size", type=int, default=0, help="drop components below this size")

    sp = sub.add_parser("infer", help="segment one volume with a checkpoint")
    sp.add_argument("--ckpt", required=True, help="trained checkpoint")
    sp.add_argument("--in", dest="inp", required=True, help="input image .mvol")
    sp.add_argument("--out", required=True, help="output label .mvol")
    sp.add_argument("--patch", type=int, default=32, help="sliding window patch size")
    sp.add_argument("--overlap", type=float, default=0.5, help="window overlap in [0,1)")
    sp.add_argument("--no-normalize", action="store_true", help="skip z-score on the input")
    sp.add_argument("--no-postprocess", action="store_true",
                    help="skip keep-largest-component post-processing")
    sp.add_argument("--connectivity", type=int, choices=(6, 26), default=26,
                    help="component adjacency for post-processing")
    sp.add_argument("--min-size", type=int, default=0, help="drop components below this size")

    sp = sub.add_parser("postprocess", help="keep largest connected component per label")
    sp.add_argument("--in", dest="inp", required=True, help="input label .mvol")
    sp.add_argument("--out", required=True, help="output label .mvol")
    sp.add_argument("--connectivity", type=int, choices=(6, 26), default=26,
                    help="component adjacency")
    sp.add_argument("--min-size", type=int, default=0, help="drop components below this size")

    sp = sub.add_parser("evaluate", help="DSC/NSD report for prediction vs reference labels")
    sp.add_argument("--pred", required=True, help="directory of predicted label .mvol files")
    sp.add_argument("--gt", required=True, help="directory of reference label .mvol files")
    sp.add_argument("--nsd-tol", type=float, default=1.0, help="NSD tolerance tau in mm")
    sp.add_argument("--report", required=True, help="output report JSON path")
    return p


def _load_run_config(path, args):
    """Merge config file sections with CLI flag overrides."""
    from .model import ModelConfig
    from .training import TrainConfig

    raw = {}
    if path is not None:
        with open(path) as f:
            raw = json.load(f)
    mdl = dict(raw.get("model", {}))
    trn = dict(raw.get("train", {}))
    for key, attr in (("steps", "steps"), ("patch", "patch_size"),
                      ("lr", "lr"), ("seed", "seed")):
        v = getattr(args, key, None)
        if v is not None:
            trn[attr] = v
    if "num_classes" not in mdl:
        mdl["num_classes"] = raw.get("num_classes", 5)
    return ModelConfig.from_dict(mdl), TrainConfig.from_dict(trn)


def _write_run_config(out_dir, model_cfg, tcfg):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump({"model": model_cfg.to_dict(), "train": tcfg.to_dict()},
                  f, indent=2, sort_keys=True)
        f.write("\n")


def _jsonl_logger(path):
    f = open(path, "w")

    def log(rec):
        f.write(json.dumps(rec, sort_keys=True) + "\n")
        f.flush()

    return log, f


def cmd_phantom(args):
    from .phantom import PhantomConfig, build_dataset
    cfg = PhantomConfig(dims=(args.dim,) * 3, num_classes=args.classes, seed=args.seed)
    build_dataset(args.labeled, args.unlabeled, args.val, cfg, args.out,
                  partial_prob=args.partial_prob)
    print(f"wrote {args.labeled + args.unlabeled + args.val} cases to {args.out}")


def cmd_preprocess(args):
    from .preprocess import crop_nonzero, resample, zscore
    from .volio import read_mvol, write_mvol
    vol = read_mvol(args.inp)
    if not args.no_crop:
        vol, _ = crop_nonzero(vol)
    if args.spacing is not None:
        vol = resample(vol, tuple(args.spacing))
    if not args.no_zscore:
        vol, _ = zscore(vol)
    write_mvol(vol, args.out)
    print(f"wrote {args.out} dims={vol.dims} spacing={vol.spacing_mm}")


def cmd_train(args):
    from .training import train
    from .volio import load_manifest
    manifest = load_manifest(args.data)
    model_cfg, tcfg = _load_run_config(args.config, args)
    _write_run_config(args.out, model_cfg, tcfg)
    log, fh = _jsonl_logger(os.path.join(args.out, "logs.jsonl"))
    try:
        ckpt = train(manifest, model_cfg, tcfg, log_fn=log, out_dir=args.out)
    finally:
        fh.close()
    print(f"trained {ckpt.step} steps -> {os.path.join(args.out, 'checkpoints/final.mckp')}")


def cmd_finetune(args):
    from .model import load_checkpoint
    from .training import finetune_mixed
    from .volio import load_manifest
    manifest = load_manifest(args.data)
    init = load_checkpoint(args.ckpt)
    _, tcfg = _load_run_config(args.config, args)
    _write_run_config(args.out, init.cfg, tcfg)
    log, fh = _jsonl_logger(os.path.join(args.out, "logs.jsonl"))
    try:
        ckpt = finetune_mixed(init, manifest, tcfg, log_fn=log, out_dir=args.out)
    finally:
        fh.close()
    print(f"fine-tuned {ckpt.step} steps -> {os.path.join(args.out, 'checkpoints/final.mckp')}")


def cmd_pseudolabel(args):
    from .model import load_checkpoint
    from .training import generate_pseudo_labels
    from .volio import load_manifest, save_manifest
    manifest = load_manifest(args.data)
    if not manifest.split("unlabeled"):
        print("warning: no unlabeled cases; manifest unchanged", file=sys.stderr)
    ckpt = load_checkpoint(args.ckpt)
    _, tcfg = _load_run_config(args.config, args)
    updated = generate_pseudo_labels(ckpt, manifest, args.out, tcfg,
                                     connectivity=args.connectivity,
                                     min_size=args.min_size)
    out_manifest = os.path.join(args.out, "manifest.json")
    # keep paths resolvable relative to the new manifest location
    rebased = _rebase_manifest(updated, args.out)
    save_manifest(rebased, out_manifest)
    print(f"wrote pseudo labels + manifest to {args.out}")


def _rebase_manifest(manifest, new_root):
    from .volio import CaseEntry, DatasetManifest
    cases = []
    for c in manifest.cases:
        img = os.path.relpath(os.path.join(manifest.root, c.image), new_root)
        lab = (os.path.relpath(os.path.join(manifest.root, c.label), new_root)
               if c.label else None)
        cases.append(CaseEntry(c.case_id, img, lab, c.split))
    return DatasetManifest(cases, root=str(new_root))


def cmd_infer(args):
    from .model import load_checkpoint, predict_labels
    from .postprocess import keep_largest_per_label
    from .preprocess import zscore
    from .training import sliding_window_infer
    from .volio import read_mvol, write_mvol
    ckpt = load_checkpoint(args.ckpt)
    vol = read_mvol(args.inp)
    if not args.no_normalize:
        vol, _ = zscore(vol)
    probs = sliding_window_infer(ckpt.to_model(), vol, args.patch, args.overlap)
    lab = predict_labels(probs, vol.spacing_mm, ckpt.cfg.num_classes)
    if not args.no_postprocess:
        lab = keep_largest_per_label(lab, connectivity=args.connectivity,
                                     min_size=args.min_size)
    write_mvol(lab, args.out)
    print(f"wrote {args.out}")


def cmd_postprocess(args):
    from .postprocess import keep_largest_per_label
    from .volio import read_mvol, write_mvol
    lab = read_mvol(args.inp)
    lab = keep_largest_per_label(lab, connectivity=args.connectivity,
                                 min_size=args.min_size)
    write_mvol(lab, args.out)
    print(f"wrote {args.out}")


def cmd_evaluate(args):
    from .lossmetrics import evaluate_pair
    from .volio import read_mvol
    names = sorted(n for n in os.listdir(args.gt) if n.endswith(".mvol"))
    if not names:
        raise FileNotFoundError(f"no .mvol label files in {args.gt}")
    reports = []
    for name in names:
        pred_path = os.path.join(args.pred, name)
        if not os.path.exists(pred_path):
            raise FileNotFoundError(f"missing prediction {pred_path}")
        ref = read_mvol(os.path.join(args.gt, name))
        pred = read_mvol(pred_path)
        reports.append(evaluate_pair(pred, ref, case_id=name, tau_mm=args.nsd_tol))
    agg = {
        "cases": [r.to_dict() for r in reports],
        "mean_dsc": sum(r.mean_dsc for r in reports) / len(reports),
        "mean_nsd": sum(r.mean_nsd for r in reports) / len(reports),
        "tau_mm": args.nsd_tol,
    }
    with open(args.report, "w") as f:
        json.dump(agg, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"mean_dsc={agg['mean_dsc']:.4f} mean_nsd={agg['mean_nsd']:.4f} -> {args.report}")


COMMANDS = {
    "phantom": cmd_phantom,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "pseudolabel": cmd_pseudolabel,
    "infer": cmd_infer,
    "postprocess": cmd_postprocess,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors

    from .model import ConfigError
    from .phantom import GenerationError
    from .training import TrainingError
    from .volio import FormatError, ValidationError

    try:
        COMMANDS[args.command](args)
        return 0
    except (ConfigError, ValueError) as e:
        if isinstance(e, (FormatError, ValidationError)):
            print(f"error: data: {e}", file=sys.stderr)
            return EXIT_DATA
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, FormatError, ValidationError, OSError) as e:
        print(f"error: data: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, GenerationError, Exception) as e:  # noqa: BLE001
        print(f"error: runtime: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
