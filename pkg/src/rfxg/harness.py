"""Experiment orchestration: case selection, batch evaluation, output files.

A run walks an ordered image list, picks the evaluation cast per image from
the scorer's own predictions (target class, runner-up inside its group, and
a disjoint contrast group), renders one saliency map per configured explainer
and query, scores each map with the matching metric, then writes delimited
tables, mean curves, overlays, and a markdown summary into the output
directory. Everything is seeded; rerunning a config must reproduce every
output byte for byte.
"""

import csv
import io
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ImageTensor, SaliencyMap, as_schedule, MaskFill
from .dataset import SyntheticTaxonomy, generate_dataset, load_dataset
from .explainers import (
    PointwiseClass, ContrastiveClass, ClassVsGroup, PointwiseGroup,
    ContrastiveGroup, query_to_objective, explain_gradient,
    explain_integrated_gradients, explain_gradcam, explain_occlusion,
    explain_random,
)
from .formats import write_pnm
from .metrics import ccs, cgc, pgs, cgs, deletion, paired_t_test
from .model import ToyConvNet, train, save_checkpoint, load_checkpoint
from .ontology import parse_hierarchy, read_hierarchy, build_groups, write_group_table
from .remote import RemoteScorer

__all__ = [
    "CaseSelection", "select_cases", "render_overlay", "run_experiment",
    "RunOutcome", "METRIC_QUERY", "parse_query",
]

# Which query feeds which metric.
METRIC_QUERY = {
    "deletion": "pointwise-class",
    "ccs": "contrastive-class",
    "cgc": "class-vs-group",
    "pgs": "pointwise-group",
    "cgs": "contrastive-group",
}


@dataclass(frozen=True)
class CaseSelection:
    """Cast of one evaluation image, derived from the scorer's predictions."""

    class_a: int                # top prediction
    class_b: int                # runner-up inside A's group
    contrast: frozenset         # group of A minus A itself
    group_a: frozenset
    group_b: frozenset          # disjoint group led by the best outside class
    label_a: str
    label_b: str

    def __post_init__(self):
        if self.class_b not in self.group_a or self.class_b == self.class_a:
            raise ValueError("runner-up must be a different member of group A")
        if self.group_a & self.group_b:
            raise ValueError("contrast groups must be disjoint")
        if self.contrast != self.group_a - {self.class_a}:
            raise ValueError("contrast set must be group A without A")


def select_cases(probs, table):
    """Choose the evaluation cast for one image.

    probs is the scorer's probability vector, table the group table. Returns
    (CaseSelection, "") or (None, reason) when the image cannot support the
    full query set: a singleton group leaves no runner-up, and a group table
    whose groups overlap everywhere leaves no disjoint contrast group.

    Ties always resolve to the lower class index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or len(probs) != table.num_classes:
        raise ValueError(
            f"probs length {probs.shape} does not match {table.num_classes} classes"
        )
    class_a = int(np.argmax(probs))  # argmax takes the first maximum
    group_a = table.primary_group(class_a).members
    label_a = table.primary_group(class_a).label
    contrast = frozenset(group_a) - {class_a}
    if not contrast:
        return None, f"group {label_a!r} has no member besides class {class_a}"
    class_b = min(contrast, key=lambda c: (-probs[c], c))
    outside = [c for c in range(table.num_classes) if c not in group_a]
    if not outside:
        return None, f"group {label_a!r} covers every class"
    lead = min(outside, key=lambda c: (-probs[c], c))
    raw_b = table.primary_group(lead)
    group_b = frozenset(raw_b.members) - frozenset(group_a)
    if not group_b:
        return None, (
            f"group {raw_b.label!r} has no member outside group {label_a!r}"
        )
    return CaseSelection(
        class_a=class_a,
        class_b=class_b,
        contrast=contrast,
        group_a=frozenset(group_a),
        group_b=group_b,
        label_a=label_a,
        label_b=raw_b.label,
    ), ""


def queries_for(selection):
    """The five evaluation queries implied by a case selection."""
    return {
        "pointwise-class": PointwiseClass(selection.class_a),
        "contrastive-class": ContrastiveClass(selection.class_a, selection.class_b),
        "class-vs-group": ClassVsGroup(selection.class_a, selection.contrast),
        "pointwise-group": PointwiseGroup(selection.group_a),
        "contrastive-group": ContrastiveGroup(selection.group_a, selection.group_b),
    }


def render_overlay(image, saliency):
    """Blend a saliency map over its image for eyeballing.

    The map is min-max normalized (a constant map becomes all 0.5), sent
    through a fixed blue-to-red ramp, and alpha-blended at 0.5. Returns an
    ImageTensor ready for P6 export.
    """
    img = image.data if isinstance(image, ImageTensor) else np.asarray(image, dtype=np.float64)
    sal = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency, dtype=np.float64)
    if img.ndim != 3 or sal.shape != img.shape[:2]:
        raise ValueError(f"map {sal.shape} does not cover image {img.shape}")
    lo, hi = float(sal.min()), float(sal.max())
    if hi > lo:
        v = (sal - lo) / (hi - lo)
    else:
        v = np.full_like(sal, 0.5)
    ramp = np.stack([v, np.zeros_like(v), 1.0 - v], axis=2)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return ImageTensor(0.5 * img + 0.5 * ramp)


def parse_query(text, num_classes):
    """Parse the query mini-language used on the command line.

    Forms: "pointwise-class 3", "contrastive-class 3 5",
    "class-vs-group 3 5,6,7", "pointwise-group 5,6,7",
    "contrastive-group 0,1 5,6".
    """
    def group(token):
        return frozenset(int(v) for v in token.split(","))

    parts = text.split()
    if not parts:
        raise ValueError("empty query")
    kind, args = parts[0], parts[1:]
    try:
        if kind == "pointwise-class" and len(args) == 1:
            q = PointwiseClass(int(args[0]))
        elif kind == "contrastive-class" and len(args) == 2:
            q = ContrastiveClass(int(args[0]), int(args[1]))
        elif kind == "class-vs-group" and len(args) == 2:
            q = ClassVsGroup(int(args[0]), group(args[1]))
        elif kind == "pointwise-group" and len(args) == 1:
            q = PointwiseGroup(group(args[0]))
        elif kind == "contrastive-group" and len(args) == 2:
            q = ContrastiveGroup(group(args[0]), group(args[1]))
        else:
            raise ValueError(f"unrecognized query {text!r}")
    except ValueError:
        raise
    query_to_objective(q, num_classes)  # bounds check against the model
    return q


def compute_saliency(name, scorer, image, query, cfg, image_index):
    """Dispatch one explainer. The random baseline ignores the query."""
    if name == "random":
        return explain_random(image.height, image.width,
                              [cfg.seed, 7, image_index])
    w = query_to_objective(query, scorer.num_classes)
    if name == "gradient":
        return explain_gradient(scorer, image, w)
    if name == "integrated-gradients":
        return explain_integrated_gradients(scorer, image, w, steps=cfg.ig_steps)
    if name == "gradcam":
        relu = query.reference_frame == "pointwise"
        return explain_gradcam(scorer, image, w, apply_relu=relu)
    if name == "occlusion":
        return explain_occlusion(scorer, image, w, patch=cfg.occlusion_patch,
                                 stride=cfg.occlusion_stride)
    raise ValueError(f"unknown explainer {name!r}")


def compute_metric(name, scorer, image, sal, sel, schedule, fill):
    if name == "deletion":
        return deletion(scorer, image, sal, sel.class_a, schedule=schedule, fill=fill)
    if name == "ccs":
        return ccs(scorer, image, sal, sel.class_a, sel.class_b,
                   schedule=schedule, fill=fill)
    if name == "cgc":
        return cgc(scorer, image, sal, sel.class_a, sel.contrast,
                   schedule=schedule, fill=fill)
    if name == "pgs":
        return pgs(scorer, image, sal, sel.group_a, schedule=schedule, fill=fill)
    if name == "cgs":
        return cgs(scorer, image, sal, sel.group_a, sel.group_b,
                   schedule=schedule, fill=fill)
    raise ValueError(f"unknown metric {name!r}")


@dataclass(frozen=True)
class RunOutcome:
    """What happened, for exit-code mapping and tests."""

    status: str          # "ok" | "no-data" | "too-many-failures"
    total: int
    processed: int
    skipped: int
    failed: int
    output: str
    notes: tuple = ()


def _fmt(x):
    return f"{float(x):.10g}"


def _load_group_table(cfg, tax):
    if cfg.hierarchy == "synthetic":
        h = parse_hierarchy(tax.hierarchy_text())
    else:
        h = read_hierarchy(cfg.hierarchy)
    return build_groups(h, min_size=cfg.min_group_size)


def _build_scorer(cfg, tax, out, notes, log):
    """Returns (scorer, gradient model or None, cleanup callable)."""
    if cfg.model.startswith("remote:"):
        command = cfg.model[len("remote:"):]
        scorer = RemoteScorer(command)
        return scorer, scorer if scorer.supports_gradients else None, scorer.close
    if cfg.model.startswith("checkpoint:"):
        model = load_checkpoint(cfg.model[len("checkpoint:"):])
        return model, model, lambda: None
    model = ToyConvNet(height=tax.side, width=tax.side, channels=3,
                       seed=cfg.seed)
    train_set = generate_dataset(tax, cfg.train_images_per_class, seed=cfg.seed)
    log(f"training on {len(train_set)} images")
    history = train(model, train_set, epochs=cfg.train_epochs,
                    batch=cfg.train_batch, lr=cfg.train_lr, seed=cfg.seed)
    last = history[-1]
    log(f"trained: val accuracy {last.val_accuracy:.3f}")
    notes.append(f"trained model, final val accuracy {_fmt(last.val_accuracy)}")
    save_checkpoint(model, out / "model.net")
    with open(out / "training.csv", "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "loss", "train-accuracy", "val-accuracy"])
        for ep in history:
            wr.writerow([ep.epoch, _fmt(ep.loss), _fmt(ep.train_accuracy),
                         _fmt(ep.val_accuracy)])
    return model, model, lambda: None


def _usable_explainers(cfg, grad_model, notes):
    names = []
    for name in cfg.explainers:
        if name in ("gradient", "integrated-gradients") and grad_model is None:
            notes.append(f"dropped {name}: scorer offers no gradients")
        elif name == "gradcam" and not hasattr(grad_model, "activations_batch"):
            notes.append("dropped gradcam: scorer exposes no internal activations")
        else:
            names.append(name)
    if not names:
        raise RuntimeError("no configured explainer works with this scorer")
    return names


def _eval_images(cfg, tax):
    if cfg.dataset.startswith("dir:"):
        data = load_dataset(Path(cfg.dataset[4:]))
        return [img for img, _ in data[: cfg.eval_images]]
    per_class = -(-cfg.eval_images // tax.num_classes) if cfg.eval_images else 0
    if per_class == 0:
        return []
    pool = generate_dataset(tax, per_class, seed=cfg.seed + 1)
    # interleave classes so a truncated list still covers all of them
    ordered = []
    for i in range(per_class):
        for c in range(tax.num_classes):
            ordered.append(pool[c * per_class + i][0])
    return ordered[: cfg.eval_images]


def run_experiment(cfg, log=None):
    """Execute a config end to end; returns a RunOutcome.

    Per-image errors are recorded and the run continues; more than 10% of
    images failing flips the outcome to "too-many-failures". An empty image
    list short-circuits to "no-data" after writing empty tables.
    """
    log = log or (lambda msg: None)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "overlays").mkdir(exist_ok=True)
    (out / "curves").mkdir(exist_ok=True)

    notes = []
    tax = SyntheticTaxonomy()
    table = _load_group_table(cfg, tax)
    write_group_table(table, out / "group-table.tsv")

    scorer, grad_model, cleanup = _build_scorer(cfg, tax, out, notes, log)
    try:
        if scorer.num_classes != table.num_classes:
            raise RuntimeError(
                f"scorer has {scorer.num_classes} classes but the group "
                f"table covers {table.num_classes}"
            )
        explainers = _usable_explainers(cfg, grad_model, notes)
        images = _eval_images(cfg, tax)
        log(f"evaluating {len(images)} images with {explainers}")
        return _run_loop(cfg, scorer, grad_model, table, explainers, images,
                         out, notes, log)
    finally:
        cleanup()


def _run_loop(cfg, scorer, grad_model, table, explainers, images, out, notes, log):
    schedule = as_schedule(cfg.schedule)
    fill = cfg.fill if isinstance(cfg.fill, MaskFill) else MaskFill.parse(cfg.fill)
    variants = sorted({METRIC_QUERY[m] for m in cfg.metrics})

    rows = []          # metrics.csv records
    skips = []
    failures = []
    selections = []    # (image_id, CaseSelection)
    prob_rows = []
    scores = {}        # (metric, explainer) -> [score per processed image]
    curve_sums = {}    # (metric, explainer) -> np array
    processed = 0

    for idx, image in enumerate(images):
        image_id = f"img-{idx:05d}"
        try:
            arr = image.data if isinstance(image, ImageTensor) else np.asarray(image)
            probs = scorer.probs_batch(arr[None])[0]
            prob_rows.append((image_id, probs))
            selection, reason = select_cases(probs, table)
            if selection is None:
                skips.append((image_id, reason))
                log(f"{image_id}: skipped ({reason})")
                continue
            overlay_due = idx < cfg.overlays
            needed = set(variants) | ({"pointwise-class"} if overlay_due else set())
            queries = queries_for(selection)
            if overlay_due:
                write_pnm(image, out / "overlays" / f"{image_id}.ppm")
            for explainer in explainers:
                maps = {v: compute_saliency(explainer, grad_model or scorer,
                                            image, queries[v], cfg, idx)
                        for v in sorted(needed)}
                if overlay_due:
                    overlay = render_overlay(image, maps["pointwise-class"])
                    write_pnm(overlay,
                              out / "overlays" / f"{image_id}-{explainer}.ppm")
                for metric in cfg.metrics:
                    variant = METRIC_QUERY[metric]
                    outcome = compute_metric(metric, scorer, image,
                                             maps[variant], selection,
                                             schedule, fill)
                    rows.append((image_id, metric, explainer,
                                 queries[variant].describe(), outcome.score))
                    scores.setdefault((metric, explainer), []).append(outcome.score)
                    key = (metric, explainer)
                    cur = np.asarray(outcome.curve.scores, dtype=np.float64)
                    curve_sums[key] = curve_sums.get(key, 0.0) + cur
            selections.append((image_id, selection))
            processed += 1
        except Exception as exc:  # noqa: BLE001 - the budget check needs them all
            failures.append((image_id, f"{type(exc).__name__}: {exc}"))
            log(f"{image_id}: failed ({exc})")

    _write_metrics_csv(out / "metrics.csv", rows)
    _write_probs_csv(out / "probs.csv", prob_rows, table.num_classes)
    _write_selection_csv(out / "selection.csv", selections)
    _write_pairs_csv(out / "skips.csv", ["image-id", "reason"], skips)
    _write_pairs_csv(out / "failures.csv", ["image-id", "error"], failures)
    _write_curves(out / "curves", curve_sums, scores, schedule)
    tests = _significance(cfg, explainers, scores)
    _write_significance(out / "significance.csv", tests)

    total = len(images)
    if total == 0:
        status = "no-data"
    elif len(failures) > 0.10 * total:
        status = "too-many-failures"
    else:
        status = "ok"
    outcome = RunOutcome(status=status, total=total, processed=processed,
                         skipped=len(skips), failed=len(failures),
                         output=str(out), notes=tuple(notes))
    _write_summary(out / "summary.md", cfg, outcome, explainers, scores,
                   tests, skips)
    log(f"done: {processed}/{total} processed, {len(skips)} skipped, "
        f"{len(failures)} failed")
    return outcome


def _write_metrics_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["image-id", "metric", "explainer", "query", "score"])
        for image_id, metric, explainer, query, score in rows:
            wr.writerow([image_id, metric, explainer, query, _fmt(score)])


def _write_probs_csv(path, prob_rows, num_classes):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["image-id"] + [f"p{c}" for c in range(num_classes)])
        for image_id, probs in prob_rows:
            wr.writerow([image_id] + [_fmt(p) for p in probs])


def _members(group):
    return "|".join(str(c) for c in sorted(group))


def _write_selection_csv(path, selections):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["image-id", "class-a", "class-b", "group-a", "group-b",
                     "label-a", "label-b"])
        for image_id, sel in selections:
            wr.writerow([image_id, sel.class_a, sel.class_b,
                         _members(sel.group_a), _members(sel.group_b),
                         sel.label_a, sel.label_b])


def _write_pairs_csv(path, header, pairs):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for a, b in pairs:
            wr.writerow([a, b])


def _write_curves(directory, curve_sums, scores, schedule):
    for (metric, explainer), total in sorted(curve_sums.items()):
        n = len(scores[(metric, explainer)])
        mean = np.asarray(total, dtype=np.float64) / n
        with open(directory / f"{metric}-{explainer}.csv", "w",
                  encoding="utf-8", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["alpha", "score"])
            for alpha, value in zip(schedule.alphas, mean):
                wr.writerow([_fmt(alpha), _fmt(value)])


def _significance(cfg, explainers, scores):
    """Paired t-tests for every explainer pair within each metric."""
    tests = []
    for metric in cfg.metrics:
        for a, b in itertools.combinations(explainers, 2):
            sa = scores.get((metric, a))
            sb = scores.get((metric, b))
            if not sa or not sb or len(sa) < 2:
                continue
            result = paired_t_test(sa, sb)
            tests.append((metric, a, b, float(np.mean(sa)), float(np.mean(sb)),
                          result))
    return tests


def _write_significance(path, tests):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["metric", "explainer-a", "explainer-b", "mean-a",
                     "mean-b", "t", "p", "dof"])
        for metric, a, b, ma, mb, res in tests:
            wr.writerow([metric, a, b, _fmt(ma), _fmt(mb), _fmt(res.t),
                         _fmt(res.p), res.dof])


def _write_summary(path, cfg, outcome, explainers, scores, tests, skips):
    buf = io.StringIO()
    buf.write("# Evaluation summary\n\n")
    buf.write(f"Processed {outcome.processed} of {outcome.total} images "
              f"({outcome.skipped} skipped, {outcome.failed} failed); "
              f"status: {outcome.status}.\n\n")
    if outcome.total:
        buf.write("## Mean scores\n\n")
        buf.write("| metric | " + " | ".join(explainers) + " |\n")
        buf.write("|---" * (len(explainers) + 1) + "|\n")
        for metric in cfg.metrics:
            cells = []
            for explainer in explainers:
                vals = scores.get((metric, explainer))
                cells.append(_fmt(np.mean(vals)) if vals else "-")
            buf.write(f"| {metric} | " + " | ".join(cells) + " |\n")
        buf.write("\n")
    if tests:
        buf.write("## Paired comparisons\n\n")
        buf.write("| metric | a | b | mean a | mean b | t | p |\n")
        buf.write("|---|---|---|---|---|---|---|\n")
        for metric, a, b, ma, mb, res in tests:
            buf.write(f"| {metric} | {a} | {b} | {_fmt(ma)} | {_fmt(mb)} | "
                      f"{_fmt(res.t)} | {_fmt(res.p)} |\n")
        buf.write("\n")
    if skips:
        buf.write("## Skipped images\n\n")
        for image_id, reason in skips:
            buf.write(f"- {image_id}: {reason}\n")
        buf.write("\n")
    if outcome.notes:
        buf.write("## Notes\n\n")
        for note in outcome.notes:
            buf.write(f"- {note}\n")
        buf.write("\n")
    path.write_text(buf.getvalue(), encoding="utf-8")
