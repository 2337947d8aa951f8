"""Synthetic hierarchical shape dataset.

Classes come in shape families (the semantic groups): every class in a family
renders the same shape in the family's base color, and the five classes inside
a family differ only by fill pattern. Sibling classes therefore share most of
their low-level features, which is exactly the regime where class-level and
group-level questions come apart.
"""

from dataclasses import dataclass

import numpy as np

from .core import ImageTensor
from .formats import read_pnm, write_pnm

__all__ = [
    "SyntheticTaxonomy",
    "generate_dataset",
    "export_dataset",
    "load_dataset",
]

_FAMILIES = ("round", "polygon", "stripe", "cross")
_PATTERNS = ("solid", "outline", "hstripe", "vstripe", "checker")
_COLORS = {
    "round": (0.85, 0.15, 0.15),
    "polygon": (0.15, 0.75, 0.20),
    "stripe": (0.20, 0.35, 0.90),
    "cross": (0.90, 0.80, 0.15),
}


@dataclass(frozen=True)
class SyntheticTaxonomy:
    """4 shape families x 5 fill patterns = 20 classes by default."""

    families: tuple = _FAMILIES
    patterns: tuple = _PATTERNS
    side: int = 32
    seed: int = 0

    def __post_init__(self):
        if len(self.families) < 2 or len(self.patterns) < 5:
            raise ValueError("need >= 2 families and >= 5 patterns per family")
        unknown = set(self.families) - set(_FAMILIES)
        if unknown:
            raise ValueError(f"unknown shape families {sorted(unknown)}")
        unknown = set(self.patterns) - set(_PATTERNS)
        if unknown:
            raise ValueError(f"unknown fill patterns {sorted(unknown)}")

    @property
    def num_classes(self):
        return len(self.families) * len(self.patterns)

    def class_name(self, index):
        g, p = divmod(index, len(self.patterns))
        return f"{self.families[g]}_{self.patterns[p]}"

    def class_params(self, index):
        g, p = divmod(index, len(self.patterns))
        return self.families[g], self.patterns[p]

    def hierarchy_text(self):
        """Hierarchy file content matching this taxonomy: one node per family."""
        lines = []
        for g, family in enumerate(self.families):
            for p in range(len(self.patterns)):
                lines.append(f"{family}\t{self.class_name(g * len(self.patterns) + p)}")
        for idx in range(self.num_classes):
            lines.append(f"leaf\t{self.class_name(idx)}\t{idx}")
        return "\n".join(lines) + "\n"


def _shape_distance(family, u, v):
    # normalized signed containment: inside where the value is <= 1
    if family == "round":
        return np.sqrt(u * u + v * v)
    if family == "polygon":
        return np.maximum(np.abs(u), np.abs(v)) / 0.82
    if family == "stripe":
        return np.maximum(np.abs(v) / 0.38, np.abs(u))
    if family == "cross":
        arm_a = np.maximum(np.abs(u) / 0.34, np.abs(v))
        arm_b = np.maximum(np.abs(v) / 0.34, np.abs(u))
        return np.minimum(arm_a, arm_b)
    raise ValueError(f"unknown family {family!r}")


def _pattern_select(pattern, inside, dist, ys, xs):
    if pattern == "solid":
        return inside
    if pattern == "outline":
        return inside & (dist >= 0.55)
    if pattern == "hstripe":
        return inside & ((ys // 2) % 2 == 0)
    if pattern == "vstripe":
        return inside & ((xs // 2) % 2 == 0)
    if pattern == "checker":
        return inside & (((ys // 2) + (xs // 2)) % 2 == 0)
    raise ValueError(f"unknown pattern {pattern!r}")


def render_class(tax, class_index, rng):
    """One image of the class: jittered shape placement, axis-aligned fill
    pattern, noisy background."""
    side = tax.side
    family, pattern = tax.class_params(class_index)

    background = 0.5 + rng.uniform(-0.15, 0.15, size=(side, side, 3))
    cx = side / 2 + rng.uniform(-0.12, 0.12) * side
    cy = side / 2 + rng.uniform(-0.12, 0.12) * side
    radius = rng.uniform(0.28, 0.38) * side
    theta = rng.uniform(0.0, 2.0 * np.pi)

    ys, xs = np.mgrid[0:side, 0:side]
    dx = (xs + 0.5) - cx
    dy = (ys + 0.5) - cy
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / radius
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / radius

    dist = _shape_distance(family, u, v)
    inside = dist <= 1.0
    select = _pattern_select(pattern, inside, dist, ys, xs)

    color = np.array(_COLORS[family]) + rng.uniform(-0.05, 0.05, size=3)
    img = background
    img[select] = color
    return ImageTensor(np.clip(img, 0.0, 1.0))


def generate_dataset(tax, n_per_class, seed):
    """Deterministic list of (ImageTensor, class index), grouped by class."""
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    if tax.side < 16:
        raise ValueError(f"image side {tax.side} too small to render (< 16)")
    out = []
    for c in range(tax.num_classes):
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, c, i])
            out.append((render_class(tax, c, rng), c))
    return out


def export_dataset(dataset, directory):
    """Write P6 pixmaps plus a labels.tsv mapping file name to class index."""
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (image, label) in enumerate(dataset):
        name = f"img-{i:05d}.ppm"
        write_pnm(image, directory / name)
        lines.append(f"{name}\t{label}")
    (directory / "labels.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(directory):
    out = []
    with open(directory / "labels.tsv", "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line:
                continue
            name, label = line.split("\t")
            out.append((read_pnm(directory / name), int(label)))
    return out
