"""Command-line front end.

Subcommands: gen-data, train, groups, explain, eval, report, selftest.
Exit codes: 0 success, 1 usage or runtime error, 2 evaluation had no data,
3 evaluation exceeded the per-image failure budget.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, ConfigError, load_config
from .core import ImageTensor, top_alpha_mask, curve_auc, PerturbationCurve
from .dataset import SyntheticTaxonomy, generate_dataset, export_dataset, load_dataset
from .explainers import explain_random, write_explanation
from .formats import read_pnm, write_pnm
from .harness import (
    run_experiment, parse_query, compute_saliency, render_overlay,
)
from .metrics import cgs
from .model import ToyConvNet, train, save_checkpoint, load_checkpoint
from .ontology import read_hierarchy, build_groups, write_group_table

__all__ = ["main"]


def _log(msg):
    print(msg, file=sys.stderr)


def _cmd_gen_data(args):
    tax = SyntheticTaxonomy(side=args.side)
    data = generate_dataset(tax, args.n_per_class, seed=args.seed)
    out = Path(args.out)
    export_dataset(data, out)
    (out / "hierarchy.tsv").write_text(tax.hierarchy_text(), encoding="utf-8")
    _log(f"wrote {len(data)} images to {out}")
    return 0


def _cmd_train(args):
    if args.data == "synthetic":
        tax = SyntheticTaxonomy()
        data = generate_dataset(tax, args.n_per_class, seed=args.seed)
        side = tax.side
    else:
        data = load_dataset(Path(args.data))
        if not data:
            _log("dataset is empty")
            return 1
        side = data[0][0].height
    model = ToyConvNet(height=side, width=side, channels=3, seed=args.seed)
    history = train(model, data, epochs=args.epochs, batch=args.batch,
                    lr=args.lr, seed=args.seed)
    for ep in history:
        _log(f"epoch {ep.epoch}: loss {ep.loss:.4f} "
             f"train {ep.train_accuracy:.3f} val {ep.val_accuracy:.3f}")
    save_checkpoint(model, args.out)
    _log(f"saved checkpoint to {args.out}")
    return 0


def _cmd_groups(args):
    h = read_hierarchy(args.hierarchy)
    table = build_groups(h, min_size=args.min_size)
    write_group_table(table, args.out)
    _log(f"wrote {len(table.groups)} groups over {table.num_classes} classes")
    return 0


def _cmd_explain(args):
    model = load_checkpoint(args.checkpoint)
    image = read_pnm(args.image)
    query = parse_query(args.query, model.num_classes)
    cfg = ExperimentConfig(seed=args.seed, ig_steps=args.ig_steps,
                           occlusion_patch=args.patch,
                           occlusion_stride=args.stride)
    sal = compute_saliency(args.explainer, model, image, query, cfg, 0)
    params = [("model", model.descriptor())]
    if args.explainer == "integrated-gradients":
        params.append(("steps", str(args.ig_steps)))
    elif args.explainer == "occlusion":
        params.append(("patch", str(args.patch)))
        params.append(("stride", str(args.stride)))
    elif args.explainer == "random":
        params.append(("seed", str(args.seed)))
    write_explanation(sal, args.out, query, args.explainer, params)
    if args.overlay:
        write_pnm(render_overlay(image, sal), args.overlay)
    _log(f"wrote {args.out}")
    return 0


def _cmd_eval(args):
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        _log(f"config error: {exc}")
        return 1
    if args.remote:
        from dataclasses import replace
        cfg = replace(cfg, model=f"remote:{args.remote}")
    if args.output:
        from dataclasses import replace
        cfg = replace(cfg, output=args.output)
    outcome = run_experiment(cfg, log=_log if not args.quiet else None)
    if outcome.status == "no-data":
        _log("no images to evaluate")
        return 2
    if outcome.status == "too-many-failures":
        _log(f"{outcome.failed} of {outcome.total} images failed")
        return 3
    return 0


def _cmd_report(args):
    from .report import write_report

    path = write_report(args.eval_dir, args.out)
    _log(f"wrote {path}")
    return 0


def _selftest_checks():
    # ranking: clear saliency ordering must pick exactly the top cell
    sal = np.array([[0.9, 0.5], [0.1, 0.3]])
    mask = top_alpha_mask(sal, 0.25)
    yield "mask-ranking", bool(mask.bits[0, 0]) and int(mask.bits.sum()) == 1

    # trapezoid area of a step curve, scaled by the alpha span
    curve = PerturbationCurve((0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
                              (1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0))
    yield "curve-area", abs(curve_auc(curve) - 0.5625) < 1e-12

    # group swap must negate the score exactly
    model = ToyConvNet(height=16, width=16, channels=3,
                       layers=(("conv", 4, 3), ("pool", 2), ("dense", 6)),
                       seed=3)
    rng = np.random.default_rng(11)
    image = ImageTensor(rng.random((16, 16, 3)))
    sal = explain_random(16, 16, seed=5)
    a = cgs(model, image, sal, frozenset({0, 1}), frozenset({4, 5}))
    b = cgs(model, image, sal, frozenset({4, 5}), frozenset({0, 1}))
    yield "swap-antisymmetry", a.score == -b.score

    # gradients must track a finite difference through the smooth head
    x = image.data.copy()
    w = np.zeros(6)
    w[2] = 1.0
    g = model.input_gradients(x[None], w, on_logits=False)[0]
    h = 1e-3
    coord = (4, 7, 1)
    xp, xm = x.copy(), x.copy()
    xp[coord] += h
    xm[coord] -= h
    fd = (model.probs_batch(xp[None])[0, 2] - model.probs_batch(xm[None])[0, 2]) / (2 * h)
    denom = max(abs(fd), abs(g[coord]), 1e-6)
    yield "gradient-check", abs(fd - g[coord]) / denom < 1e-3

    # checkpoint round trip preserves behavior bit for bit at f32 precision
    import tempfile, os
    fd_, tmp = tempfile.mkstemp(suffix=".net")
    os.close(fd_)
    try:
        save_checkpoint(model, tmp)
        clone = load_checkpoint(tmp)
        pa = model.probs_batch(x[None])
        pb = clone.probs_batch(x[None])
        yield "checkpoint-roundtrip", bool(np.max(np.abs(pa - pb)) < 1e-5)
    finally:
        os.unlink(tmp)


def _cmd_selftest(_args):
    failed = 0
    for name, ok in _selftest_checks():
        print(f"{'ok' if ok else 'FAIL'} {name}")
        if not ok:
            failed += 1
    return 1 if failed else 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="rfxg",
        description="Train a toy scorer, explain its outputs, and score the "
                    "explanations with perturbation metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic shape dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--side", type=int, default=32)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train the toy convnet")
    p.add_argument("--data", default="synthetic",
                   help="'synthetic' or a dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-per-class", type=int, default=40)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("groups", help="build the class group table")
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--min-size", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_groups)

    p = sub.add_parser("explain", help="explain one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--query", required=True,
                   help="e.g. 'contrastive-class 3 5' or 'pointwise-group 5,6,7'")
    p.add_argument("--explainer", required=True,
                   choices=["gradient", "integrated-gradients", "gradcam",
                            "occlusion", "random"])
    p.add_argument("--out", required=True)
    p.add_argument("--overlay")
    p.add_argument("--ig-steps", type=int, default=64)
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("eval", help="run a full evaluation from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--remote", help="score through this bridge command")
    p.add_argument("--output", help="override the configured output directory")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="render figures from an eval directory")
    p.add_argument("--eval-dir", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("selftest", help="quick internal consistency checks")
    p.set_defaults(func=_cmd_selftest)

    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        _log(f"error: {type(exc).__name__}: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
