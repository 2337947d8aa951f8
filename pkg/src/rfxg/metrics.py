"""Faithfulness metrics over perturbation curves, plus significance testing.

Every metric follows the same protocol: mask the top-alpha fraction of the
saliency map for each alpha in the schedule, fill the masked pixels, read
class probabilities from the scorer, assemble a per-alpha curve, and report
100 times the normalized trapezoidal area. Lower is better only for the
plain deletion baseline; the four question-aligned metrics are
higher-is-better gap measures.
"""

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core import (
    ImageTensor,
    PerturbationCurve,
    SaliencyMap,
    MaskFill,
    as_schedule,
    curve_auc,
    top_alpha_mask,
    apply_mask,
)

__all__ = [
    "MetricOutcome",
    "MetricResult",
    "PairedTest",
    "ccs",
    "cgc",
    "pgs",
    "cgs",
    "deletion",
    "paired_t_test",
]


@dataclass(frozen=True)
class MetricOutcome:
    """One metric evaluation: scaled score, raw area, and the scaled curve."""

    score: float
    raw_auc: float
    curve: PerturbationCurve


@dataclass(frozen=True)
class MetricResult:
    """Per-image scores of one metric/explainer cell and their mean."""

    metric: str
    explainer: str
    scores: tuple
    partner: str = ""

    def __post_init__(self):
        scores = tuple(float(s) for s in self.scores)
        if not scores:
            raise ValueError("metric result needs at least one score")
        if not all(np.isfinite(scores)):
            raise ValueError("metric scores must be finite")
        object.__setattr__(self, "scores", scores)

    @property
    def mean(self):
        return float(np.mean(self.scores))

    @property
    def count(self):
        return len(self.scores)


def _perturbed_probs(scorer, image, saliency, schedule, fill):
    """Probabilities for the clean image and for each per-alpha masked image."""
    image = image if isinstance(image, ImageTensor) else ImageTensor(image)
    saliency = saliency if isinstance(saliency, SaliencyMap) else SaliencyMap(saliency)
    if (saliency.height, saliency.width) != (image.height, image.width):
        raise ValueError(
            f"saliency {saliency.height}x{saliency.width} does not match image "
            f"{image.height}x{image.width}"
        )
    schedule = as_schedule(schedule)
    fill = fill if fill is not None else MaskFill.black()
    masked = [
        apply_mask(image, top_alpha_mask(saliency, alpha), fill).data
        for alpha in schedule
    ]
    batch = np.stack(masked + [image.data])
    probs = scorer.probs_batch(batch)
    return schedule, probs[:-1], probs[-1]


def _finish(schedule, values):
    curve = PerturbationCurve(tuple(schedule), tuple(100.0 * v for v in values))
    raw = curve_auc(PerturbationCurve(tuple(schedule), tuple(values)))
    return MetricOutcome(score=100.0 * raw, raw_auc=raw, curve=curve)


def ccs(scorer, image, saliency, target, alternative, schedule=None, fill=None):
    """Contrastive class score: how masking target-over-alternative evidence
    moves the probability gap toward the alternative."""
    if target == alternative:
        raise ValueError("target and alternative must differ")
    schedule, masked, _ = _perturbed_probs(scorer, image, saliency, schedule, fill)
    values = masked[:, alternative] - masked[:, target]
    return _finish(schedule, values)


def cgc(scorer, image, saliency, target, rest, schedule=None, fill=None):
    """Class-vs-group score: target suppression paired with the rise of the
    remaining group members."""
    rest = sorted(set(int(r) for r in rest))
    if not rest:
        raise ValueError("rest group must be nonempty")
    if target in rest:
        raise ValueError("rest must exclude the target class")
    schedule, masked, clean = _perturbed_probs(scorer, image, saliency, schedule, fill)
    rise = (masked[:, rest] - clean[rest]).mean(axis=1)
    drop = clean[target] - masked[:, target]
    return _finish(schedule, 0.5 * (rise + drop))


def pgs(scorer, image, saliency, group, schedule=None, fill=None):
    """Pointwise group score: mean confidence drop across the group."""
    group = sorted(set(int(g) for g in group))
    if not group:
        raise ValueError("group must be nonempty")
    schedule, masked, clean = _perturbed_probs(scorer, image, saliency, schedule, fill)
    values = (clean[group] - masked[:, group]).mean(axis=1)
    return _finish(schedule, values)


def cgs(scorer, image, saliency, group_a, group_b, schedule=None, fill=None):
    """Contrastive group score: suppression of group A paired with promotion
    of group B; exactly antisymmetric under swapping the groups."""
    group_a = sorted(set(int(g) for g in group_a))
    group_b = sorted(set(int(g) for g in group_b))
    if not group_a or not group_b:
        raise ValueError("both groups must be nonempty")
    if set(group_a) & set(group_b):
        raise ValueError("groups must be disjoint")
    schedule, masked, clean = _perturbed_probs(scorer, image, saliency, schedule, fill)
    drop_a = (clean[group_a] - masked[:, group_a]).mean(axis=1)
    rise_b = (masked[:, group_b] - clean[group_b]).mean(axis=1)
    return _finish(schedule, 0.5 * (drop_a + rise_b))


def deletion(scorer, image, saliency, target, schedule=None, fill=None):
    """Deletion baseline: area under the target probability as pixels go;
    lower means the map found the evidence sooner."""
    schedule, masked, _ = _perturbed_probs(scorer, image, saliency, schedule, fill)
    return _finish(schedule, masked[:, target])


@dataclass(frozen=True)
class PairedTest:
    t: float
    p: float
    dof: int

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0,1], got {self.p}")


def paired_t_test(a, b):
    """Two-sided paired Student t-test on score lists.

    Identical inputs give t=0, p=1. Zero-variance nonzero-mean differences
    are degenerate (the statistic diverges); reported as infinite t with p=0,
    which callers should read as p < 1e-12.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length vectors, "
                         f"got {a.shape} and {b.shape}")
    n = len(a)
    if n < 2:
        raise ValueError("paired test needs at least 2 pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    dof = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return PairedTest(t=0.0, p=1.0, dof=dof)
        return PairedTest(t=float(np.sign(mean)) * float("inf"), p=0.0, dof=dof)
    t = mean / (sd / np.sqrt(n))
    p = 2.0 * float(stats.t.sf(abs(t), dof))
    return PairedTest(t=float(t), p=min(p, 1.0), dof=dof)
