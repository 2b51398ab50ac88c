"""Label spaces over the semantic head: flat softmax and binary-tree modes.

The semantic head always has a fixed width. In flat mode the first
``num_classes`` entries are softmax logits over the classes created so far;
the remaining slots receive no supervision and are ignored by every read.
In hierarchical mode entry l is the logit of taking the right branch at
tree level l, and a label is a root path supervising only the levels it
covers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_FLAT_CLASSES = 16
DEFAULT_TREE_DEPTH = 8
PROB_FLOOR = 1e-12

# Qualitative palette, one entry per flat class or tree node colour slot.
PALETTE = np.array(
    [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [220, 190, 255],
        [170, 110, 40],
        [255, 250, 200],
        [128, 0, 0],
        [170, 255, 195],
    ],
    dtype=np.uint8,
)


def class_colour(index: int) -> np.ndarray:
    return PALETTE[index % len(PALETTE)]


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def entropy(probs: np.ndarray, axis: int = -1) -> np.ndarray:
    p = np.clip(probs, PROB_FLOOR, 1.0)
    return -np.sum(probs * np.log(p), axis=axis)


def binary_entropy(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return -(p * np.log(p) + (1.0 - p) * np.log1p(-p))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class FlatClass:
    class_id: int
    name: str


@dataclass
class ClassRegistry:
    """Flat label space; class ids are dense and assigned in creation order."""

    max_classes: int = MAX_FLAT_CLASSES
    classes: list = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def create_class(self, name: str) -> int:
        if self.num_classes >= self.max_classes:
            raise ValueError(f"label space is full ({self.max_classes} classes)")
        if any(c.name == name for c in self.classes):
            raise ValueError(f"class name {name!r} already exists")
        cid = self.num_classes
        self.classes.append(FlatClass(class_id=cid, name=name))
        return cid

    def name_of(self, class_id: int) -> str:
        return self.classes[class_id].name

    def has(self, name: str) -> bool:
        return any(c.name == name for c in self.classes)

    def id_by_name(self, name: str) -> int:
        for c in self.classes:
            if c.name == name:
                return c.class_id
        raise KeyError(f"unknown class {name!r}")

    def __len__(self) -> int:
        return self.num_classes

    def colour_of(self, class_id: int) -> np.ndarray:
        return class_colour(class_id)

    def as_dict(self) -> dict:
        return {
            "mode": "flat",
            "max_classes": self.max_classes,
            "classes": [
                {"id": c.class_id, "name": c.name, "colour": class_colour(c.class_id).tolist()}
                for c in self.classes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassRegistry":
        reg = cls(max_classes=int(d.get("max_classes", MAX_FLAT_CLASSES)))
        for entry in sorted(d.get("classes", []), key=lambda e: e["id"]):
            got = reg.create_class(entry["name"])
            if got != entry["id"]:
                raise ValueError("class ids must be dense and start at 0")
        return reg


def flat_probs(logits: np.ndarray, num_classes: int) -> np.ndarray:
    """Softmax over the first ``num_classes`` logit slots (axis -1)."""
    if num_classes < 1:
        raise ValueError("need at least one class")
    return softmax(np.asarray(logits, dtype=np.float64)[..., :num_classes])


def flat_loss(
    logits: np.ndarray, target: np.ndarray, num_classes: int
) -> tuple[np.ndarray, np.ndarray]:
    """Cross-entropy against integer targets.

    Returns per-example losses (...,) and the gradient wrt the full logit
    vector; slots past num_classes get zero gradient so they stay untrained.
    """
    logits = np.asarray(logits)
    target = np.asarray(target)
    active = np.asarray(logits, dtype=np.float64)[..., :num_classes]
    shifted = active - np.max(active, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1))
    t_logit = np.take_along_axis(shifted, target[..., None], axis=-1)[..., 0]
    loss = lse - t_logit

    probs = np.exp(shifted - lse[..., None])
    grad_active = probs.copy()
    np.put_along_axis(grad_active, target[..., None], np.take_along_axis(grad_active, target[..., None], axis=-1) - 1.0, axis=-1)
    grad = np.zeros(logits.shape, dtype=np.float64)
    grad[..., :num_classes] = grad_active
    return loss, grad


def cross_entropy_from_probs(probs: np.ndarray, target: np.ndarray) -> np.ndarray:
    p = np.take_along_axis(np.asarray(probs), np.asarray(target)[..., None], axis=-1)[..., 0]
    return -np.log(np.maximum(p, PROB_FLOOR))


@dataclass(frozen=True)
class TreeNode:
    path: str  # branch bits from the root, e.g. "01"
    name: str
    colour_index: int

    @property
    def level(self) -> int:
        return len(self.path)

    @property
    def heap_index(self) -> int:
        """Stable integer id: root would be 1, children 2i and 2i+1."""
        return int("1" + self.path, 2)


def path_from_heap_index(index: int) -> str:
    if index < 1:
        raise ValueError("heap indices start at 1")
    return bin(index)[3:]  # strip "0b1"


@dataclass
class LabelTree:
    """User-built binary tree; labels are node paths of branch bits."""

    max_depth: int = DEFAULT_TREE_DEPTH
    nodes: dict = field(default_factory=dict)  # path -> TreeNode

    def _validate_path(self, path: str):
        if not path or any(ch not in "01" for ch in path):
            raise ValueError(f"path must be a non-empty bit string, got {path!r}")
        if len(path) > self.max_depth:
            raise ValueError(f"path deeper than max_depth={self.max_depth}")

    def create_node(self, path: str, name: str) -> TreeNode:
        self._validate_path(path)
        if path in self.nodes:
            raise ValueError(f"node {path!r} already exists")
        if len(path) > 1 and path[:-1] not in self.nodes:
            raise ValueError(f"parent {path[:-1]!r} must exist first")
        node = TreeNode(path=path, name=name, colour_index=len(self.nodes) % len(PALETTE))
        self.nodes[path] = node
        return node

    @property
    def depth(self) -> int:
        return max((len(p) for p in self.nodes), default=0)

    def children(self, path: str) -> list:
        return [p for p in (path + "0", path + "1") if p in self.nodes]

    def colour_of(self, path: str) -> np.ndarray:
        return class_colour(self.nodes[path].colour_index)

    def as_dict(self) -> dict:
        ordered = sorted(self.nodes.values(), key=lambda n: n.heap_index)
        return {
            "mode": "hierarchical",
            "max_depth": self.max_depth,
            "nodes": [
                {"path": n.path, "name": n.name, "colour_index": n.colour_index} for n in ordered
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelTree":
        tree = cls(max_depth=int(d.get("max_depth", DEFAULT_TREE_DEPTH)))
        for entry in sorted(d.get("nodes", []), key=lambda e: len(e["path"])):
            tree._validate_path(entry["path"])
            if len(entry["path"]) > 1 and entry["path"][:-1] not in tree.nodes:
                raise ValueError(f"parent {entry['path'][:-1]!r} missing")
            tree.nodes[entry["path"]] = TreeNode(
                path=entry["path"],
                name=entry["name"],
                colour_index=int(entry["colour_index"]),
            )
        return tree


def encode_hier_label(path: str, max_depth: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-level branch targets and supervision mask for a node path.

    Levels past the node's depth are masked out: a label at an inner node
    says nothing about how its subtree splits.
    """
    if len(path) > max_depth:
        raise ValueError("path deeper than the semantic head")
    targets = np.zeros(max_depth, dtype=np.float64)
    mask = np.zeros(max_depth, dtype=np.float64)
    for i, ch in enumerate(path):
        targets[i] = 1.0 if ch == "1" else 0.0
        mask[i] = 1.0
    return targets, mask


def hier_loss(
    logits: np.ndarray, targets: np.ndarray, mask: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Masked per-level binary cross-entropy, summed over levels.

    Uses the logit form t*softplus(-x) + (1-t)*softplus(x), so no
    probability floor is needed. Returns (loss (...,), grad on logits).
    """
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    per_level = t * np.logaddexp(0.0, -x) + (1.0 - t) * np.logaddexp(0.0, x)
    loss = np.sum(m * per_level, axis=-1)
    grad = m * (sigmoid(x) - t)
    return loss, grad


def decode_hier(logits: np.ndarray, tree: LabelTree) -> str:
    """Walk the tree by thresholded branch probabilities.

    Descends while the preferred child exists; a branch probability of
    exactly 0.5 is treated as undecided and stops the walk, so labels at
    inner nodes survive an encode/decode round trip.
    """
    probs = sigmoid(np.asarray(logits, dtype=np.float64))
    path = ""
    for level in range(min(tree.max_depth, len(probs))):
        p = probs[level]
        if p == 0.5:
            break
        candidate = path + ("1" if p > 0.5 else "0")
        if candidate not in tree.nodes:
            break
        path = candidate
    return path


def decode_hier_batch(logits: np.ndarray, tree: LabelTree) -> np.ndarray:
    """Vectorised decode to heap indices (0 where the walk stops at the root)."""
    probs = sigmoid(np.asarray(logits, dtype=np.float64))
    flat = probs.reshape(-1, probs.shape[-1])
    out = np.zeros(flat.shape[0], dtype=np.int32)
    paths = np.full(flat.shape[0], "", dtype=object)
    alive = np.ones(flat.shape[0], dtype=bool)
    for level in range(min(tree.max_depth, flat.shape[-1])):
        if not alive.any():
            break
        p = flat[:, level]
        bits = np.where(p > 0.5, "1", "0")
        undecided = p == 0.5
        for i in np.nonzero(alive & ~undecided)[0]:
            candidate = paths[i] + bits[i]
            if candidate in tree.nodes:
                paths[i] = candidate
            else:
                alive[i] = False
        alive &= ~undecided
    for i, path in enumerate(paths):
        out[i] = int("1" + path, 2) if path else 0
    return out.reshape(probs.shape[:-1])


def hier_uncertainty(logits: np.ndarray, tree: LabelTree) -> np.ndarray:
    """Mean binary entropy over the levels the tree actually uses."""
    depth = max(tree.depth, 1)
    probs = sigmoid(np.asarray(logits, dtype=np.float64)[..., :depth])
    return np.mean(binary_entropy(probs), axis=-1)


def hier_blend_colour(logits: np.ndarray, tree: LabelTree) -> np.ndarray:
    """Expected node colour under the per-level branch distribution.

    Probability mass flows down existing children; mass stopped at a node
    (missing child, or the node's own share when a child is absent) takes
    that node's colour. Shapes: logits (..., L) -> float colours (..., 3).
    """
    probs = sigmoid(np.asarray(logits, dtype=np.float64))
    lead = probs.shape[:-1]
    colour = np.zeros(lead + (3,), dtype=np.float64)
    if not tree.nodes:
        return colour

    def visit(path: str, mass: np.ndarray):
        level = len(path)
        stopped = mass.copy()
        if level < min(tree.max_depth, probs.shape[-1]):
            p1 = probs[..., level]
            for bit, share in (("0", 1.0 - p1), ("1", p1)):
                child = path + bit
                if child in tree.nodes:
                    visit(child, mass * share)
                    stopped = stopped - mass * share
        if path:
            colour_arr = tree.colour_of(path).astype(np.float64) / 255.0
            colour[...] += stopped[..., None] * colour_arr

    visit("", np.ones(lead, dtype=np.float64))
    return np.clip(colour, 0.0, 1.0)


def schema_to_dict(mode: str, registry: ClassRegistry | None, tree: LabelTree | None) -> dict:
    if mode == "flat":
        return registry.as_dict()
    if mode == "hierarchical":
        return tree.as_dict()
    raise ValueError(f"unknown label mode {mode!r}")


def schema_from_dict(d: dict) -> tuple[str, ClassRegistry | None, LabelTree | None]:
    mode = d.get("mode")
    if mode == "flat":
        return "flat", ClassRegistry.from_dict(d), None
    if mode == "hierarchical":
        return "hierarchical", None, LabelTree.from_dict(d)
    raise ValueError(f"unknown label mode {mode!r}")
