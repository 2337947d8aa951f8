"""A small convolutional classifier with hand-written forward and backward passes.

The network is described by a one-line architecture descriptor, e.g.
`input 32 32 3 conv 8 3 pool 2 conv 16 3 pool 2 dense 20`: conv stages are
same-padded 3x3 kernels followed by a rectifier, pooling is average, and a
single dense head maps the flattened (row, column, channel) activations to
class logits. The tensor entering the dense head is the named target layer
whose maps feed activation-space explainers.

Everything runs in float64 on the CPU; checkpoints store float32.
"""

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ToyConvNet",
    "ForwardRecord",
    "TrainingDiverged",
    "EpochStats",
    "forward",
    "backward_input",
    "backward_activations",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"RFXG-NET 1"

DEFAULT_LAYERS = (("conv", 8, 3), ("pool", 2), ("conv", 16, 3), ("pool", 2), ("dense", 20))


@dataclass(frozen=True)
class ForwardRecord:
    """Logits, their softmax, and the target-layer activation maps."""

    logits: np.ndarray
    probs: np.ndarray
    activations: np.ndarray


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"loss became non-finite ({loss}) in epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    train_accuracy: float
    val_accuracy: float


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sliding(x, k):
    # (N, H+pad, W+pad, C) -> (N, H, W, C, k, k) windows over the spatial axes
    return np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))


class ToyConvNet:
    """Conv/pool stages plus a dense head, parameters in declaration order."""

    def __init__(self, height=32, width=32, channels=3, layers=DEFAULT_LAYERS, seed=0):
        self.height, self.width, self.channels = int(height), int(width), int(channels)
        self.layers = tuple(tuple(l) for l in layers)
        if not self.layers or self.layers[-1][0] != "dense":
            raise ValueError("architecture must end with a dense layer")
        if any(l[0] == "dense" for l in self.layers[:-1]):
            raise ValueError("only one dense layer, at the end, is supported")

        rng = np.random.default_rng(seed)
        self.params = []
        h, w, c = self.height, self.width, self.channels
        for kind, *args in self.layers:
            if kind == "conv":
                out, k = args
                if k % 2 != 1:
                    raise ValueError(f"conv kernel must be odd, got {k}")
                fan_in, fan_out = c * k * k, out * k * k
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                self.params.append(rng.uniform(-bound, bound, size=(out, c, k, k)))
                self.params.append(np.zeros(out))
                c = out
            elif kind == "pool":
                (p,) = args
                if h % p or w % p:
                    raise ValueError(f"pool {p} does not divide {h}x{w}")
                h, w = h // p, w // p
            elif kind == "dense":
                (out,) = args
                flat = h * w * c
                bound = math.sqrt(6.0 / (flat + out))
                self.params.append(rng.uniform(-bound, bound, size=(out, flat)))
                self.params.append(np.zeros(out))
                self.num_classes = out
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        self.activation_shape = (h, w, c)

    @property
    def parameter_count(self):
        return sum(p.size for p in self.params)

    def descriptor(self):
        parts = [f"input {self.height} {self.width} {self.channels}"]
        for kind, *args in self.layers:
            parts.append(" ".join([kind] + [str(a) for a in args]))
        return " ".join(parts)

    # -- forward ---------------------------------------------------------

    def _check_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != (self.height, self.width, self.channels):
            raise ValueError(
                f"batch shape {x.shape} does not match model input "
                f"{(self.height, self.width, self.channels)}"
            )
        return x

    def _forward_cache(self, x):
        """Run the net, keeping what backward needs: per-conv padded inputs and
        pre-activation sign masks, plus the flattened head input."""
        x = self._check_batch(x)
        cache = {"conv": []}
        cur = x
        pi = 0
        for kind, *args in self.layers:
            if kind == "conv":
                out, k = args
                kern, bias = self.params[pi], self.params[pi + 1]
                pad = k // 2
                xp = np.pad(cur, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
                z = np.einsum(
                    "nhwcij,ocij->nhwo", _sliding(xp, k), kern, optimize=True
                ) + bias
                cache["conv"].append({"xp": xp, "mask": z > 0, "k": k, "pos": pi})
                cur = np.maximum(z, 0.0)
                pi += 2
            elif kind == "pool":
                (p,) = args
                n, h, w, c = cur.shape
                cur = cur.reshape(n, h // p, p, w // p, p, c).mean(axis=(2, 4))
            elif kind == "dense":
                wd, bd = self.params[pi], self.params[pi + 1]
                pi += 2
                cache["activations"] = cur
                flat = cur.reshape(cur.shape[0], -1)
                cache["flat"] = flat
                cache["logits"] = flat @ wd.T + bd
        cache["probs"] = _softmax(cache["logits"])
        return cache

    def probs_batch(self, x):
        return self._forward_cache(x)["probs"]

    def logits_batch(self, x):
        return self._forward_cache(x)["logits"]

    def activations_batch(self, x):
        return self._forward_cache(x)["activations"]

    # -- backward --------------------------------------------------------

    def _objective_dz(self, cache, w, on_logits):
        w = np.asarray(w, dtype=np.float64)
        n, c = cache["logits"].shape
        if w.shape == (c,):
            w = np.broadcast_to(w, (n, c))
        if w.shape != (n, c):
            raise ValueError(f"objective shape {w.shape} does not match classes {c}")
        if on_logits:
            return w.copy()
        p = cache["probs"]
        # d(w.p)/dz_j = p_j (w_j - w.p)
        return p * (w - (w * p).sum(axis=1, keepdims=True))

    def _head_to_activations(self, cache, dz):
        wd = self.params[-2]
        dflat = dz @ wd
        return dflat.reshape(cache["activations"].shape)

    def _backprop_convs(self, cache, dact):
        cur = dact
        convs = list(cache["conv"])
        for kind, *args in reversed(self.layers[:-1]):
            if kind == "pool":
                (p,) = args
                cur = np.repeat(np.repeat(cur, p, axis=1), p, axis=2) / (p * p)
            elif kind == "conv":
                entry = convs.pop()
                k = entry["k"]
                pad = k // 2
                dz = cur * entry["mask"]
                kern = self.params[entry["pos"]]
                dzp = np.pad(dz, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
                cur = np.einsum(
                    "nhwoij,ocij->nhwc",
                    _sliding(dzp, k),
                    kern[:, :, ::-1, ::-1],
                    optimize=True,
                )
        return cur

    def input_gradients(self, x, w, on_logits=True):
        """Gradient of s = w . logits (or w . probs) with respect to the input batch."""
        cache = self._forward_cache(x)
        dz = self._objective_dz(cache, w, on_logits)
        dact = self._head_to_activations(cache, dz)
        return self._backprop_convs(cache, dact)

    def activation_gradients(self, x, w, on_logits=True):
        """Gradient of the same objective with respect to the target-layer maps."""
        cache = self._forward_cache(x)
        dz = self._objective_dz(cache, w, on_logits)
        return self._head_to_activations(cache, dz)

    def head_logits_from_activations(self, activations):
        """Re-run just the dense head on externally supplied activation maps."""
        act = np.asarray(activations, dtype=np.float64)
        if act.shape[1:] != self.activation_shape:
            raise ValueError(
                f"activation shape {act.shape[1:]} != {self.activation_shape}"
            )
        wd, bd = self.params[-2], self.params[-1]
        return act.reshape(act.shape[0], -1) @ wd.T + bd

    # -- training --------------------------------------------------------

    def _parameter_gradients(self, cache, dz):
        grads = [None] * len(self.params)
        grads[-2] = dz.T @ cache["flat"]
        grads[-1] = dz.sum(axis=0)
        cur = self._head_to_activations(cache, dz)
        convs = list(cache["conv"])
        for kind, *args in reversed(self.layers[:-1]):
            if kind == "pool":
                (p,) = args
                cur = np.repeat(np.repeat(cur, p, axis=1), p, axis=2) / (p * p)
            elif kind == "conv":
                entry = convs.pop()
                k = entry["k"]
                pad = k // 2
                dzc = cur * entry["mask"]
                pos = entry["pos"]
                grads[pos] = np.einsum(
                    "nhwo,nhwcij->ocij", dzc, _sliding(entry["xp"], k), optimize=True
                )
                grads[pos + 1] = dzc.sum(axis=(0, 1, 2))
                kern = self.params[pos]
                dzp = np.pad(dzc, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
                cur = np.einsum(
                    "nhwoij,ocij->nhwc",
                    _sliding(dzp, k),
                    kern[:, :, ::-1, ::-1],
                    optimize=True,
                )
        return grads


def forward(model, image):
    """Logits, probabilities, and target-layer activations for one image."""
    from .core import ImageTensor

    if isinstance(image, ImageTensor):
        image = image.data
    cache = model._forward_cache(image[np.newaxis])
    return ForwardRecord(
        logits=cache["logits"][0],
        probs=cache["probs"][0],
        activations=cache["activations"][0],
    )


def _single(model, image):
    from .core import ImageTensor

    if isinstance(image, ImageTensor):
        image = image.data
    return np.asarray(image, dtype=np.float64)[np.newaxis]


def backward_input(model, image, w, on_logits=True):
    """Exact gradient of sum_c w_c z_c (or w_c p_c) with respect to each input value."""
    return model.input_gradients(_single(model, image), w, on_logits)[0]


def backward_activations(model, image, w, on_logits=True):
    """The same objective differentiated to the target-layer activation maps."""
    return model.activation_gradients(_single(model, image), w, on_logits)[0]


def _accuracy(model, images, labels, batch=256):
    hits = 0
    for start in range(0, len(images), batch):
        probs = model.probs_batch(images[start : start + batch])
        hits += int((probs.argmax(axis=1) == labels[start : start + batch]).sum())
    return hits / len(images)


def train(model, dataset, epochs=12, batch=32, lr=0.1, seed=0, val_split=0.2):
    """Plain SGD on cross-entropy with seeded shuffling; returns per-epoch stats.

    The split and every epoch's order come from the seed, so the same seed
    always yields bit-identical parameters.
    """
    from .core import ImageTensor

    if not dataset:
        raise ValueError("dataset is empty")
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    images = np.stack(
        [im.data if isinstance(im, ImageTensor) else np.asarray(im) for im, _ in dataset]
    )
    labels = np.array([lab for _, lab in dataset], dtype=int)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    n_val = int(round(val_split * len(images)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        raise ValueError("validation split leaves no training data")
    x_train, y_train = images[train_idx], labels[train_idx]
    x_val, y_val = images[val_idx], labels[val_idx]

    history = []
    n = len(x_train)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch):
            sel = perm[start : start + batch]
            xb, yb = x_train[sel], y_train[sel]
            cache = model._forward_cache(xb)
            probs = cache["probs"]
            eps = 1e-12
            loss = float(-np.log(probs[np.arange(len(sel)), yb] + eps).mean())
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            epoch_loss += loss * len(sel)
            dz = probs.copy()
            dz[np.arange(len(sel)), yb] -= 1.0
            dz /= len(sel)
            grads = model._parameter_gradients(cache, dz)
            if lr:
                for p, g in zip(model.params, grads):
                    p -= lr * g
        history.append(
            EpochStats(
                epoch=epoch,
                loss=epoch_loss / n,
                train_accuracy=_accuracy(model, x_train, y_train),
                val_accuracy=_accuracy(model, x_val, y_val) if len(x_val) else float("nan"),
            )
        )
    return history


def save_checkpoint(model, path):
    """Magic line, architecture descriptor line, then parameters as LE f32."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(model.descriptor().encode("ascii") + b"\n")
        for p in model.params:
            fh.write(p.astype("<f4").tobytes())


def parse_descriptor(text):
    tokens = text.split()
    if len(tokens) < 4 or tokens[0] != "input":
        raise ValueError(f"bad architecture descriptor {text!r}")
    height, width, channels = (int(t) for t in tokens[1:4])
    layers = []
    i = 4
    while i < len(tokens):
        kind = tokens[i]
        if kind == "conv":
            layers.append(("conv", int(tokens[i + 1]), int(tokens[i + 2])))
            i += 3
        elif kind == "pool":
            layers.append(("pool", int(tokens[i + 1])))
            i += 2
        elif kind == "dense":
            layers.append(("dense", int(tokens[i + 1])))
            i += 2
        else:
            raise ValueError(f"unknown layer token {kind!r} in descriptor")
    return height, width, channels, tuple(layers)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        descriptor = fh.readline().decode("ascii").strip()
        height, width, channels, layers = parse_descriptor(descriptor)
        model = ToyConvNet(height, width, channels, layers, seed=0)
        for i, p in enumerate(model.params):
            raw = fh.read(4 * p.size)
            if len(raw) != 4 * p.size:
                raise ValueError(f"checkpoint truncated at parameter {i}")
            model.params[i] = (
                np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(p.shape)
            )
        extra = fh.read(1)
        if extra:
            raise ValueError("trailing bytes after parameters")
    return model
