"""Class hierarchies and semantic group construction.

A hierarchy file declares `parent<TAB>child` edges plus `leaf<TAB>name<TAB>index`
lines flagging classifier classes. Groups are built per class by taking the
leaf set under its superordinate and, when that set is too small, merging in
neighboring sibling subtrees (smallest first) until the minimum size is met.
"""

from dataclasses import dataclass, field

__all__ = [
    "Hierarchy",
    "Group",
    "GroupTable",
    "parse_hierarchy",
    "read_hierarchy",
    "build_groups",
    "contrast_group",
    "write_group_table",
    "read_group_table",
]


class Hierarchy:
    """A forest (or DAG) of named nodes whose flagged leaves carry class indices."""

    def __init__(self, children, leaf_index):
        self.children = {n: tuple(sorted(set(c))) for n, c in children.items()}
        nodes = set(self.children)
        for cs in self.children.values():
            nodes.update(cs)
        self.nodes = tuple(sorted(nodes))
        for n in self.nodes:
            self.children.setdefault(n, ())

        self.parents = {n: [] for n in self.nodes}
        for parent, cs in self.children.items():
            for c in cs:
                self.parents[c].append(parent)
        for n in self.nodes:
            self.parents[n] = tuple(sorted(self.parents[n]))

        self._check_acyclic()

        self.leaf_index = dict(leaf_index)
        for name, idx in self.leaf_index.items():
            if name not in self.parents:
                raise ValueError(f"leaf line references unknown node {name!r}")
            if self.children[name]:
                raise ValueError(f"class node {name!r} has children")
        indices = sorted(self.leaf_index.values())
        if indices != list(range(len(indices))):
            raise ValueError(f"class indices must cover 0..C-1, got {indices}")
        self.class_names = {i: n for n, i in self.leaf_index.items()}
        self.num_classes = len(indices)

        self.roots = tuple(n for n in self.nodes if not self.parents[n])
        self._leaf_sets = {}
        self._descendants = {}

    def _check_acyclic(self):
        state = {}  # 0 visiting, 1 done
        for start in self.children:
            if start in state:
                continue
            stack = [(start, iter(self.children.get(start, ())))]
            state[start] = 0
            while stack:
                node, it = stack[-1]
                advanced = False
                for child in it:
                    if state.get(child) == 0:
                        raise ValueError(f"cycle detected involving {child!r}")
                    if child not in state:
                        state[child] = 0
                        stack.append((child, iter(self.children.get(child, ()))))
                        advanced = True
                        break
                if not advanced:
                    state[node] = 1
                    stack.pop()

    def leaf_set(self, node):
        """Class indices of all flagged-leaf descendants (the node included)."""
        cached = self._leaf_sets.get(node)
        if cached is not None:
            return cached
        acc = set()
        if node in self.leaf_index:
            acc.add(self.leaf_index[node])
        for child in self.children[node]:
            acc.update(self.leaf_set(child))
        result = frozenset(acc)
        self._leaf_sets[node] = result
        return result

    def leaf_count(self, node):
        return len(self.leaf_set(node))

    def descendants(self, node):
        cached = self._descendants.get(node)
        if cached is not None:
            return cached
        acc = set()
        for child in self.children[node]:
            acc.add(child)
            acc.update(self.descendants(child))
        result = frozenset(acc)
        self._descendants[node] = result
        return result

    def chosen_parent(self, node):
        """The single parent used when ascending: smallest subtree first, then name."""
        ps = self.parents[node]
        if not ps:
            return None
        return min(ps, key=lambda p: (self.leaf_count(p), p))


def parse_hierarchy(source):
    """Parse hierarchy lines: `parent<TAB>child` edges, `leaf<TAB>name<TAB>index`
    class flags, `#` comments.
    """
    if isinstance(source, str):
        lines = source.splitlines()
    else:
        lines = list(source)
    children = {}
    leaf_index = {}
    seen_indices = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].rstrip("\n").strip()
        if not line:
            continue
        fields = line.split("\t")
        if fields[0] == "leaf":
            if len(fields) != 3:
                raise ValueError(f"line {lineno}: leaf line needs name and index")
            name = fields[1]
            try:
                idx = int(fields[2])
            except ValueError:
                raise ValueError(f"line {lineno}: bad class index {fields[2]!r}")
            if idx in seen_indices:
                raise ValueError(
                    f"line {lineno}: duplicate class index {idx} "
                    f"({seen_indices[idx]!r} and {name!r})"
                )
            if name in leaf_index:
                raise ValueError(f"line {lineno}: node {name!r} flagged twice")
            seen_indices[idx] = name
            leaf_index[name] = idx
        elif len(fields) == 2:
            parent, child = fields
            if not parent or not child:
                raise ValueError(f"line {lineno}: empty node name")
            children.setdefault(parent, set()).add(child)
        else:
            raise ValueError(f"line {lineno}: cannot parse {raw!r}")
    return Hierarchy(children, leaf_index)


def read_hierarchy(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_hierarchy(fh.read())


@dataclass(frozen=True)
class Group:
    label: str
    members: frozenset
    residual: bool = False


@dataclass(frozen=True)
class GroupTable:
    groups: tuple
    primary: dict = field(compare=False)
    class_names: dict = field(compare=False)

    def primary_group(self, class_index):
        if class_index not in self.primary:
            raise KeyError(f"unknown class index {class_index}")
        return self.groups[self.primary[class_index]]

    @property
    def num_classes(self):
        return len(self.primary)


def _most_specific_cover(h, members):
    # a node whose leaf-descendant set equals the merged members names the
    # group; prefer the most specific such node (no candidate below it)
    candidates = [n for n in h.nodes if h.leaf_set(n) == members]
    if not candidates:
        return None
    keep = [
        x
        for x in candidates
        if not any(y != x and y in h.descendants(x) for y in candidates)
    ]
    return sorted(keep or candidates)[0]


def _group_for_class(h, class_name, min_size):
    base = h.chosen_parent(class_name)
    if base is None:
        base = class_name
    members = set(h.leaf_set(base))
    contributors = [base]
    while len(members) < min_size:
        parent = h.chosen_parent(base)
        siblings = (
            [r for r in h.roots if r != base]
            if parent is None
            else [c for c in h.children[parent] if c != base]
        )
        for sib in sorted(siblings, key=lambda s: (h.leaf_count(s), s)):
            gain = h.leaf_set(sib) - members
            if not gain:
                continue
            members.update(gain)
            contributors.append(sib)
            if len(members) >= min_size:
                break
        if len(members) >= min_size:
            break
        if parent is None:
            break  # whole forest merged and still short
        base = parent
        members = set(h.leaf_set(base))
        contributors = [base]
    members = frozenset(members)
    label = _most_specific_cover(h, members) or "+".join(contributors)
    return label, members


def build_groups(h, min_size=5):
    """Construct semantic groups of at least `min_size` classes.

    Each class contributes the group built from its superordinate; identical
    member sets are recorded once, and a class's primary group is the first
    constructed group that contains it. If the hierarchy has fewer classes
    than `min_size` the single all-class group is flagged residual.
    """
    if min_size < 2:
        raise ValueError(f"min_size must be >= 2, got {min_size}")
    if h.num_classes == 0:
        raise ValueError("hierarchy has no classes")

    if h.num_classes < min_size:
        members = frozenset(range(h.num_classes))
        label = _most_specific_cover(h, members) or "+".join(
            sorted(h.roots, key=lambda r: (h.leaf_count(r), r))
        )
        groups = (Group(label, members, residual=True),)
        primary = {i: 0 for i in range(h.num_classes)}
        return GroupTable(groups, primary, dict(h.class_names))

    groups = []
    seen = {}
    for idx in range(h.num_classes):
        label, members = _group_for_class(h, h.class_names[idx], min_size)
        if members not in seen:
            seen[members] = len(groups)
            groups.append(Group(label, members))
    primary = {}
    for idx in range(h.num_classes):
        for ordinal, g in enumerate(groups):
            if idx in g.members:
                primary[idx] = ordinal
                break
    return GroupTable(tuple(groups), primary, dict(h.class_names))


def contrast_group(gt, class_a):
    """Members of class_a's primary group, class_a itself excluded."""
    group = gt.primary_group(class_a)
    return frozenset(group.members - {class_a})


def write_group_table(gt, path):
    """Export `class-index<TAB>class-name<TAB>group-label`, sorted by index."""
    lines = []
    for idx in sorted(gt.primary):
        label = gt.groups[gt.primary[idx]].label
        lines.append(f"{idx}\t{gt.class_names[idx]}\t{label}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_group_table(path):
    """Rebuild a GroupTable from its export.

    The export carries primary assignments only, so reconstructed groups are
    the label partition; overlapping full member lists do not survive the
    round trip.
    """
    groups = []
    label_ordinal = {}
    members_acc = []
    primary = {}
    class_names = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ValueError(f"bad group table line {line!r}")
            idx, name, label = int(fields[0]), fields[1], fields[2]
            if idx in primary:
                raise ValueError(f"duplicate class index {idx}")
            if label not in label_ordinal:
                label_ordinal[label] = len(members_acc)
                members_acc.append(set())
            ordinal = label_ordinal[label]
            members_acc[ordinal].add(idx)
            primary[idx] = ordinal
            class_names[idx] = name
    if not primary:
        raise ValueError("empty group table")
    groups = tuple(
        Group(label, frozenset(members_acc[ordinal]))
        for label, ordinal in sorted(label_ordinal.items(), key=lambda kv: kv[1])
    )
    return GroupTable(groups, primary, class_names)
