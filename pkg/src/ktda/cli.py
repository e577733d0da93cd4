"""Command-line entry point: dataset generation, training, evaluation,
ablation sweeps, and the gradient-check audit.

Exit codes: 0 success, 1 validation error, 2 runtime failure,
3 gradcheck failure.
"""

from __future__ import annotations

import argparse
import os
import sys


def _setup_threads():
    """KTDA_THREADS caps kernel parallelism; must run before numpy loads."""
    n = os.environ.get("KTDA_THREADS", "1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, n)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ktda",
        description="knowledge-transfer + domain-adaptation segmentation kit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic KSEG dataset")
    gen.add_argument("--out", required=True, help="output dataset directory")
    gen.add_argument("--num", type=int, default=64, help="number of samples")
    gen.add_argument("--size", type=int, default=256, help="patch size in pixels")
    gen.add_argument("--classes", type=int, default=5, help="number of classes K")
    gen.add_argument("--seed", type=int, default=0)

    tr = sub.add_parser("train", help="train a model on a generated dataset")
    tr.add_argument("--config", help="key=value config file")
    tr.add_argument("--data", required=True, help="dataset directory from 'gen'")
    tr.add_argument("--out", required=True, help="run output directory")
    tr.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config key (repeatable)")
    tr.add_argument("--fmm-blocks", type=int, help="override model.fmm_blocks")
    tr.add_argument("--disable-kl", action="store_true", help="drop the feature KL term")
    tr.add_argument("--disable-mse", action="store_true", help="drop the feature MSE term")
    tr.add_argument("--disable-aux", action="store_true", help="drop the auxiliary CE term")
    tr.add_argument("--resume", help="checkpoint to resume from")
    tr.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", help="report directory (default: checkpoint dir)")
    ev.add_argument("--split", default="test", choices=["train", "test"])
    ev.add_argument("--export-masks", action="store_true",
                    help="write predicted masks as class-indexed palette PNGs")
    ev.add_argument("--no-figures", action="store_true")

    ab = sub.add_parser("ablate", help="run an ablation grid")
    ab.add_argument("--grid", required=True,
                    help="builtin grid (tab2|tab3|tab4) or a grid file")
    ab.add_argument("--data", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--config", help="base config applied to every row")
    ab.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ab.add_argument("--no-figures", action="store_true")

    gc = sub.add_parser("gradcheck", help="finite-difference audit of all ops")
    gc.add_argument("--seed", type=int, default=0)

    sub.add_parser("defaults", help="print every config key with its default")
    return parser


def cmd_gen(args):
    from .config import ConfigError
    from .data import DatasetSpec, generate_dataset

    try:
        spec = DatasetSpec(
            num_samples=args.num, patch=args.size, classes=args.classes, seed=args.seed
        )
        train, test = generate_dataset(spec, args.out)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    print(f"wrote {len(train)} train / {len(test)} test samples to {args.out}")
    return 0


def _resolved_config(args):
    from .config import apply_overrides, resolve

    cfg = resolve(args.config, args.set)
    extra = []
    if getattr(args, "fmm_blocks", None) is not None:
        extra.append(f"model.fmm_blocks={args.fmm_blocks}")
    if getattr(args, "disable_kl", False):
        extra.append("loss.enable_kl=false")
    if getattr(args, "disable_mse", False):
        extra.append("loss.enable_mse=false")
    if getattr(args, "disable_aux", False):
        extra.append("loss.enable_aux=false")
    return apply_overrides(cfg, extra)


def _run_training(cfg, data_dir, out_dir, resume=None, figures=True, quiet=False):
    from . import tensor as T
    from .config import (
        serialize,
        to_loss_toggles,
        to_loss_weights,
        to_model_config,
        to_optim_config,
        to_train_settings,
    )
    from .data import Dataset
    from .model import Segmenter
    from .train import train_loop

    os.makedirs(out_dir, exist_ok=True)
    config_text = serialize(cfg)
    with open(os.path.join(out_dir, "config.resolved"), "w") as f:
        f.write(config_text)
    dataset = Dataset(data_dir)
    with T.precision(cfg["engine.dtype"]):
        model = Segmenter(to_model_config(cfg))
        optim_cfg = to_optim_config(cfg)
        state, history = train_loop(
            model,
            dataset,
            to_loss_weights(cfg),
            to_loss_toggles(cfg),
            optim_cfg,
            to_train_settings(cfg),
            out_dir,
            resume_from=resume,
            config_text=config_text,
            quiet=quiet,
        )
    if figures:
        from .report import render_training_report

        render_training_report(out_dir, optim_cfg, with_alignment=cfg["model.use_fam"])
    return model, dataset, state, history


def cmd_train(args):
    cfg = _resolved_config(args)
    _run_training(cfg, args.data, args.out, resume=args.resume, figures=not args.no_figures)
    print(f"run artifacts in {args.out}")
    return 0


def cmd_eval(args):
    from . import tensor as T
    from .config import ConfigError, parse_config_text, to_model_config
    from .data import Dataset
    from .model import Segmenter
    from .tensor import Tensor
    from .train import checkpoint_config_text, evaluate, load_checkpoint

    config_text = checkpoint_config_text(args.checkpoint)
    if not config_text:
        raise ConfigError(f"{args.checkpoint} carries no embedded config")
    cfg = parse_config_text(config_text)
    dataset = Dataset(args.data)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)

    with T.precision(cfg["engine.dtype"]):
        model = Segmenter(to_model_config(cfg))
        try:
            load_checkpoint(args.checkpoint, model)
        except (KeyError, ValueError) as e:
            raise ConfigError(f"checkpoint/config mismatch: {e}") from None
        ids = dataset.ids(args.split)
        cm = evaluate(model, dataset, ids, cfg["train.batch_size"], cfg["loss.ignore_index"])

        if args.export_masks:
            from .report import save_mask_png

            mask_dir = os.path.join(out_dir, f"masks_{args.split}")
            os.makedirs(mask_dir, exist_ok=True)
            with T.no_grad():
                for sid in ids:
                    images, _ = dataset.batch_arrays([sid])
                    pred = model.forward(Tensor(images)).logits.data.argmax(axis=1)[0]
                    save_mask_png(pred, os.path.join(mask_dir, f"{sid}.png"),
                                  model.cfg.num_classes)

    summary = cm.summary()
    ious = cm.per_class_iou()
    print(f"split={args.split}  samples={len(ids)}")
    print(f"mIoU: {summary['miou'] * 100:.2f}%")
    print(f"OA:   {summary['oa'] * 100:.2f}%")
    print(f"F1:   {summary['f1'] * 100:.2f}%")
    print("per-class IoU:")
    for c, v in enumerate(ious):
        print(f"  class {c}: {v * 100:.2f}%")

    report_csv = os.path.join(out_dir, f"eval_{args.split}.csv")
    with open(report_csv, "w") as f:
        f.write("metric,value\n")
        for name in ("miou", "oa", "f1"):
            f.write(f"{name},{summary[name] * 100:.2f}\n")
        for c, v in enumerate(ious):
            f.write(f"iou_class_{c},{v * 100:.2f}\n")
    if not args.no_figures:
        from .report import plot_confusion, plot_per_class_iou

        plot_per_class_iou(ious, os.path.join(out_dir, f"per_class_iou_{args.split}.png"))
        plot_confusion(cm.counts, os.path.join(out_dir, f"confusion_{args.split}.png"))
    return 0


BUILTIN_GRIDS = {
    # loss-term presence: (kl, mse, aux, ce)
    "tab2": [
        ("all_terms", {}),
        ("no_aux", {"loss.enable_aux": "false"}),
        ("no_mse", {"loss.enable_mse": "false"}),
        ("no_kl", {"loss.enable_kl": "false"}),
    ],
    # alignment module variants
    "tab3": [
        ("single_scale", {"model.fam_multi_scale": "false"}),
        ("multi_scale", {"model.fam_multi_scale": "true"}),
        ("no_fam", {"model.use_fam": "false"}),
        ("fam_no_loss", {"loss.enable_mse": "false", "loss.enable_kl": "false"}),
        ("fam_with_loss", {}),
    ],
    # modulation depth sweep
    "tab4": [(f"fmm_n{n}", {"model.fmm_blocks": str(n)}) for n in range(5)],
}


def _load_grid(spec):
    from .config import ConfigError

    if spec in BUILTIN_GRIDS:
        return BUILTIN_GRIDS[spec]
    if not os.path.exists(spec):
        raise ConfigError(
            f"unknown grid '{spec}': not a builtin ({', '.join(BUILTIN_GRIDS)}) or file"
        )
    rows = []
    with open(spec) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, *items = line.split()
            overrides = {}
            for item in items:
                key, _, val = item.partition("=")
                overrides[key] = val
            rows.append((name, overrides))
    return rows


def cmd_ablate(args):
    from .config import ConfigError, apply_overrides, config_hash, resolve

    rows = _load_grid(args.grid)
    names = [name for name, _ in rows]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate run names in grid: {names}")
    base = resolve(args.config, args.set)
    os.makedirs(args.out, exist_ok=True)
    summary_path = os.path.join(args.out, f"summary_{os.path.basename(args.grid)}.csv")

    results = []
    for row_idx, (name, overrides) in enumerate(rows):
        cfg = apply_overrides(base, [f"{k}={v}" for k, v in overrides.items()])
        cfg = apply_overrides(cfg, [f"run.seed={base['run.seed'] + row_idx}"])
        run_dir = os.path.join(args.out, name)
        print(f"[{row_idx + 1}/{len(rows)}] {name}")
        model, dataset, state, history = _run_training(
            cfg, args.data, run_dir, figures=False, quiet=True
        )
        from . import tensor as T
        from .train import evaluate

        with T.precision(cfg["engine.dtype"]):
            cm = evaluate(
                model, dataset, dataset.ids("test"), cfg["train.batch_size"],
                cfg["loss.ignore_index"],
            )
        s = cm.summary()
        results.append(
            {
                "name": name,
                "config_hash": config_hash(cfg),
                "seed": cfg["run.seed"],
                "fmm_blocks": cfg["model.fmm_blocks"],
                "use_fam": int(cfg["model.use_fam"]),
                "multi_scale": int(cfg["model.fam_multi_scale"]),
                "mse": int(cfg["loss.enable_mse"]),
                "kl": int(cfg["loss.enable_kl"]),
                "ce": int(cfg["loss.enable_ce"]),
                "aux": int(cfg["loss.enable_aux"]),
                "miou": f"{s['miou']:.6f}",
                "oa": f"{s['oa']:.6f}",
                "f1": f"{s['f1']:.6f}",
            }
        )

    import csv as csvmod

    with open(summary_path, "w", newline="") as f:
        writer = csvmod.DictWriter(f, fieldnames=list(results[0].keys()))
        writer.writeheader()
        writer.writerows(results)
    print(f"summary: {summary_path}")
    if not args.no_figures:
        from .report import plot_ablation_summary

        plot_ablation_summary(
            summary_path, os.path.join(args.out, f"summary_{os.path.basename(args.grid)}.png")
        )
    return 0


def cmd_gradcheck(args):
    from .audit import run_audit

    print("gradient audit (64-bit, central differences, step 1e-6):")
    reports = run_audit(seed=args.seed, verbose=True)
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return 3 if failed else 0


def cmd_defaults(_args):
    from .config import describe_defaults

    print(describe_defaults())
    return 0


def main(argv=None):
    _setup_threads()
    args = build_parser().parse_args(argv)
    from .config import ConfigError

    handlers = {
        "gen": cmd_gen,
        "train": cmd_train,
        "eval": cmd_eval,
        "ablate": cmd_ablate,
        "gradcheck": cmd_gradcheck,
        "defaults": cmd_defaults,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, IOError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
