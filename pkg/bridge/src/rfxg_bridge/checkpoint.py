"""RFXG-NET checkpoint loading into a torch module.

File layout: an ASCII magic line, an architecture descriptor line
("input H W C" followed by "conv OUT K", "pool P", and a final
"dense OUT"), then every parameter tensor as little-endian float32 in
declaration order: conv kernel (out, in, k, k) and bias per conv stage,
dense weight (out, flat) and bias last.

The network runs in float64. Convolutions are cross-correlations with
zero same-padding, pools average, activations are ReLU, and the tensor
entering the dense head is flattened in row, column, channel order.
"""

import numpy as np
import torch
from torch import nn

MAGIC = b"RFXG-NET 1"

__all__ = ["MAGIC", "parse_descriptor", "load_model", "BridgeNet"]


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
    if not layers or layers[-1][0] != "dense":
        raise ValueError("descriptor must end with a dense layer")
    if any(l[0] == "dense" for l in layers[:-1]):
        raise ValueError("only one dense layer, at the end, is supported")
    return height, width, channels, tuple(layers)


class BridgeNet(nn.Module):
    """The checkpoint architecture, NHWC at the interface, float64 inside."""

    def __init__(self, height, width, channels, layers):
        super().__init__()
        self.height, self.width, self.channels = height, width, channels
        stages = []
        h, w, c = height, width, channels
        for kind, *args in layers:
            if kind == "conv":
                out, k = args
                if k % 2 != 1:
                    raise ValueError(f"conv kernel must be odd, got {k}")
                stages.append(nn.Conv2d(c, out, k, padding=k // 2))
                stages.append(nn.ReLU())
                c = out
            elif kind == "pool":
                (p,) = args
                if h % p or w % p:
                    raise ValueError(f"pool {p} does not divide {h}x{w}")
                stages.append(nn.AvgPool2d(p))
                h, w = h // p, w // p
            elif kind == "dense":
                (out,) = args
                self.head = nn.Linear(h * w * c, out)
                self.num_classes = out
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        self.stages = nn.Sequential(*stages)
        self.double()

    def forward(self, x):
        """x: (N, H, W, C) float64 -> logits (N, classes)."""
        z = self.stages(x.permute(0, 3, 1, 2))
        # back to NHWC before flattening so the weight layout matches
        flat = z.permute(0, 2, 3, 1).reshape(x.shape[0], -1)
        return self.head(flat)

    def probs(self, x):
        return torch.softmax(self.forward(x), dim=1)


def _read_param(fh, shape, index):
    count = int(np.prod(shape))
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise ValueError(f"checkpoint truncated at parameter {index}")
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    return torch.from_numpy(arr.copy())


def load_model(path):
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        descriptor = fh.readline().decode("ascii").strip()
        height, width, channels, layers = parse_descriptor(descriptor)
        net = BridgeNet(height, width, channels, layers)

        index = 0
        c = channels
        convs = [m for m in net.stages if isinstance(m, nn.Conv2d)]
        conv_iter = iter(convs)
        with torch.no_grad():
            for kind, *args in layers:
                if kind == "conv":
                    out, k = args
                    conv = next(conv_iter)
                    conv.weight.copy_(_read_param(fh, (out, c, k, k), index))
                    conv.bias.copy_(_read_param(fh, (out,), index + 1))
                    index += 2
                    c = out
                elif kind == "dense":
                    (out,) = args
                    flat = net.head.in_features
                    net.head.weight.copy_(_read_param(fh, (out, flat), index))
                    net.head.bias.copy_(_read_param(fh, (out,), index + 1))
                    index += 2
        if fh.read(1):
            raise ValueError("trailing bytes after parameters")
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net
