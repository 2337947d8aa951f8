"""Questions about model behavior, their objectives, and saliency generators.

A Query names what a map should explain: a single class or a class group,
either on its own (pointwise) or against an alternative (contrastive). Every
query reduces to a linear functional over class scores, so each gradient
explainer just differentiates that functional; occlusion probes it with
forward passes only.
"""

from dataclasses import dataclass

import numpy as np

from .core import ImageTensor, MaskFill, SaliencyMap, bilinear_resize, fill_pixels
from .formats import write_saliency, write_sidecar

__all__ = [
    "Query",
    "PointwiseClass",
    "ContrastiveClass",
    "ClassVsGroup",
    "PointwiseGroup",
    "ContrastiveGroup",
    "ObjectiveVector",
    "query_to_objective",
    "explain_gradient",
    "explain_integrated_gradients",
    "explain_gradcam",
    "explain_occlusion",
    "explain_random",
    "write_explanation",
]


class Query:
    """Base for the five question variants; carries naming and validation."""

    variant = None
    reference_frame = None
    granularity = None

    def describe(self):
        raise NotImplementedError


def _check_group(name, members):
    members = frozenset(int(m) for m in members)
    if not members:
        raise ValueError(f"{name} must be nonempty")
    return members


@dataclass(frozen=True)
class PointwiseClass(Query):
    target: int

    variant = "pointwise-class"
    reference_frame = "pointwise"
    granularity = "class"

    def describe(self):
        return f"{self.variant} target={self.target}"


@dataclass(frozen=True)
class ContrastiveClass(Query):
    target: int
    alternative: int

    variant = "contrastive-class"
    reference_frame = "contrastive"
    granularity = "class"

    def __post_init__(self):
        if self.target == self.alternative:
            raise ValueError("target and alternative must differ")

    def describe(self):
        return f"{self.variant} target={self.target} alternative={self.alternative}"


@dataclass(frozen=True)
class ClassVsGroup(Query):
    target: int
    group: frozenset

    variant = "class-vs-group"
    reference_frame = "contrastive"
    granularity = "group"

    def __post_init__(self):
        object.__setattr__(self, "group", _check_group("group", self.group))
        if self.target in self.group:
            raise ValueError("target must not belong to the contrast group")

    def describe(self):
        return (
            f"{self.variant} target={self.target} "
            f"group={','.join(map(str, sorted(self.group)))}"
        )


@dataclass(frozen=True)
class PointwiseGroup(Query):
    group: frozenset

    variant = "pointwise-group"
    reference_frame = "pointwise"
    granularity = "group"

    def __post_init__(self):
        object.__setattr__(self, "group", _check_group("group", self.group))

    def describe(self):
        return f"{self.variant} group={','.join(map(str, sorted(self.group)))}"


@dataclass(frozen=True)
class ContrastiveGroup(Query):
    group_a: frozenset
    group_b: frozenset

    variant = "contrastive-group"
    reference_frame = "contrastive"
    granularity = "group"

    def __post_init__(self):
        object.__setattr__(self, "group_a", _check_group("group_a", self.group_a))
        object.__setattr__(self, "group_b", _check_group("group_b", self.group_b))
        if self.group_a & self.group_b:
            raise ValueError("groups must be disjoint")

    def describe(self):
        return (
            f"{self.variant} "
            f"group_a={','.join(map(str, sorted(self.group_a)))} "
            f"group_b={','.join(map(str, sorted(self.group_b)))}"
        )


class ObjectiveVector:
    """Per-class weights of a linear functional over class scores."""

    __slots__ = ("weights",)

    def __init__(self, weights):
        arr = np.array(weights, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("objective must be a vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("objective contains non-finite weights")
        if not np.any(arr):
            raise ValueError("objective must not be all zero")
        arr.setflags(write=False)
        self.weights = arr


def query_to_objective(query, num_classes):
    """Weights of the score functional the query asks about.

    Target side gets +1, contrast side -1, everything else 0.
    """
    w = np.zeros(num_classes)

    def put(index, value):
        if not 0 <= index < num_classes:
            raise ValueError(f"class index {index} out of range 0..{num_classes - 1}")
        w[index] += value

    if isinstance(query, PointwiseClass):
        put(query.target, 1.0)
    elif isinstance(query, ContrastiveClass):
        put(query.target, 1.0)
        put(query.alternative, -1.0)
    elif isinstance(query, ClassVsGroup):
        put(query.target, 1.0)
        for c in query.group:
            put(c, -1.0)
    elif isinstance(query, PointwiseGroup):
        for c in query.group:
            put(c, 1.0)
    elif isinstance(query, ContrastiveGroup):
        for c in query.group_a:
            put(c, 1.0)
        for c in query.group_b:
            put(c, -1.0)
    else:
        raise TypeError(f"not a Query: {query!r}")
    return ObjectiveVector(w)


def _image_array(image):
    if isinstance(image, ImageTensor):
        return image.data
    return ImageTensor(image).data


def _objective_weights(w):
    if isinstance(w, ObjectiveVector):
        return w.weights
    return ObjectiveVector(w).weights


def explain_gradient(model, image, w, on_logits=True):
    """Per-pixel mean absolute gradient of the objective."""
    x = _image_array(image)
    w = _objective_weights(w)
    grad = model.input_gradients(x[np.newaxis], w, on_logits)[0]
    return SaliencyMap(np.abs(grad).mean(axis=2))


def explain_integrated_gradients(model, image, w, baseline=None, steps=64,
                                 on_logits=True):
    """Path-integrated gradients from a baseline, midpoint rule.

    Channel attributions are (x - baseline) times the averaged gradients; the
    spatial map is their signed channel sum so the total mass keeps the
    completeness identity sum = s(x) - s(baseline).
    """
    if steps < 8:
        raise ValueError(f"steps must be >= 8, got {steps}")
    x = _image_array(image)
    w = _objective_weights(w)
    base = np.zeros_like(x) if baseline is None else _image_array(baseline)
    if base.shape != x.shape:
        raise ValueError(f"baseline shape {base.shape} != image shape {x.shape}")
    delta = x - base
    ts = (np.arange(steps) + 0.5) / steps
    points = base[np.newaxis] + ts[:, np.newaxis, np.newaxis, np.newaxis] * delta
    grads = model.input_gradients(points, w, on_logits)
    attribution = delta * grads.mean(axis=0)
    return SaliencyMap(attribution.sum(axis=2))


def ig_channel_attributions(model, image, w, baseline=None, steps=64, on_logits=True):
    """The full H×W×C attribution tensor behind explain_integrated_gradients."""
    x = _image_array(image)
    w = _objective_weights(w)
    base = np.zeros_like(x) if baseline is None else _image_array(baseline)
    delta = x - base
    ts = (np.arange(steps) + 0.5) / steps
    points = base[np.newaxis] + ts[:, np.newaxis, np.newaxis, np.newaxis] * delta
    grads = model.input_gradients(points, w, on_logits)
    return delta * grads.mean(axis=0)


def explain_gradcam(model, image, w, apply_relu=True):
    """Activation-map explanation: kernels weighted by pooled logit gradients.

    Weights are the spatial means of d(w . logits)/dA^k; the weighted map is
    rectified on the activation grid only for pointwise questions, then
    bilinearly resized to the input. Without the rectifier the map is exactly
    linear in the objective, which contrastive questions rely on.
    """
    x = _image_array(image)
    w = _objective_weights(w)
    batch = x[np.newaxis]
    acts = model.activations_batch(batch)[0]
    grads = model.activation_gradients(batch, w, on_logits=True)[0]
    alphas = grads.mean(axis=(0, 1))
    grid = (acts * alphas).sum(axis=2)
    if apply_relu:
        grid = np.maximum(grid, 0.0)
    return bilinear_resize(SaliencyMap(grid), x.shape[0], x.shape[1])


def explain_occlusion(scorer, image, w, patch=4, stride=2, fill=None):
    """Forward-only sensitivity: score drop when a sliding patch is filled.

    Each placement's s(x) - s(x_patched) accrues to the covered pixels and is
    normalized by coverage. The objective reads probabilities, the one output
    every scorer (remote ones included) provides.
    """
    if patch < 1 or stride < 1:
        raise ValueError("patch and stride must be >= 1")
    if fill is None:
        fill = MaskFill.black()
    image = image if isinstance(image, ImageTensor) else ImageTensor(image)
    x = image.data
    h, w_img = x.shape[0], x.shape[1]
    if patch > h or patch > w_img:
        raise ValueError(f"patch {patch} exceeds image {h}x{w_img}")
    weights = _objective_weights(w)

    def positions(size):
        pos = list(range(0, size - patch + 1, stride))
        if pos[-1] != size - patch:
            pos.append(size - patch)  # flush final placement keeps full coverage
        return pos

    ys, xs = positions(h), positions(w_img)
    patched = []
    for py in ys:
        for px in xs:
            bits = np.zeros((h, w_img), dtype=bool)
            bits[py : py + patch, px : px + patch] = True
            patched.append(fill_pixels(image, bits, fill).data)
    batch = np.stack(patched + [x])
    all_scores = scorer.probs_batch(batch) @ weights
    base_score = all_scores[-1]
    drops = base_score - all_scores[:-1]

    acc = np.zeros((h, w_img))
    coverage = np.zeros((h, w_img))
    i = 0
    for py in ys:
        for px in xs:
            acc[py : py + patch, px : px + patch] += drops[i]
            coverage[py : py + patch, px : px + patch] += 1.0
            i += 1
    return SaliencyMap(acc / coverage)


def explain_random(height, width, seed):
    """Uninformed baseline: seeded uniform values in [0, 1)."""
    rng = np.random.default_rng(seed)
    return SaliencyMap(rng.random((int(height), int(width))))


def write_explanation(saliency, path, query, explainer, params=()):
    """Write the map plus a `<path>.meta` sidecar recording its provenance."""
    write_saliency(saliency, path)
    records = [("query", query.describe()), ("explainer", explainer)]
    records.extend(params)
    write_sidecar(records, str(path) + ".meta")
