"""Checkpoint parsing and the numerical behavior of the loaded network."""

import numpy as np
import pytest
import torch

from rfxg_bridge.checkpoint import load_model, parse_descriptor

from conftest import write_checkpoint, small_params, SMALL_DESCRIPTOR


def _reference_forward(image, params):
    """Independent numpy implementation of the small fixture architecture."""
    k1, b1, wd, bd = [np.asarray(p, dtype="<f4").astype(np.float64) for p in params]
    x = image.astype(np.float64)
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    conv = np.zeros((8, 8, 4))
    for h in range(8):
        for w in range(8):
            window = padded[h:h + 3, w:w + 3, :]  # (i, j, c)
            for o in range(4):
                conv[h, w, o] = np.sum(window * k1[o].transpose(1, 2, 0)) + b1[o]
    conv = np.maximum(conv, 0.0)
    pooled = conv.reshape(4, 2, 4, 2, 4).mean(axis=(1, 3))
    flat = pooled.reshape(-1)  # row, column, channel order
    logits = wd @ flat + bd
    e = np.exp(logits - logits.max())
    return logits, e / e.sum()


def test_descriptor_parses_every_layer_kind():
    h, w, c, layers = parse_descriptor("input 32 32 3 conv 8 3 pool 2 dense 20")
    assert (h, w, c) == (32, 32, 3)
    assert layers == (("conv", 8, 3), ("pool", 2), ("dense", 20))


def test_descriptor_must_end_with_dense():
    with pytest.raises(ValueError, match="dense"):
        parse_descriptor("input 8 8 3 conv 4 3")


def test_descriptor_rejects_unknown_tokens():
    with pytest.raises(ValueError, match="unknown layer"):
        parse_descriptor("input 8 8 3 blur 2 dense 4")


def test_load_reports_model_shape(small_checkpoint):
    net = load_model(small_checkpoint)
    assert (net.height, net.width, net.channels) == (8, 8, 3)
    assert net.num_classes == 5


def test_forward_matches_independent_reference(small_checkpoint):
    net = load_model(small_checkpoint)
    rng = np.random.default_rng(5)
    for _ in range(4):
        image = rng.random((8, 8, 3))
        x = torch.from_numpy(image[None])
        with torch.no_grad():
            probs = net.probs(x)[0].numpy()
        _, expected = _reference_forward(image, small_params())
        assert np.max(np.abs(probs - expected)) < 1e-12


def test_probabilities_sum_to_one(small_checkpoint):
    net = load_model(small_checkpoint)
    x = torch.rand((3, 8, 8, 3), dtype=torch.float64)
    with torch.no_grad():
        probs = net.probs(x).numpy()
    assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-12


def test_gradients_match_finite_differences(small_checkpoint):
    net = load_model(small_checkpoint)
    rng = np.random.default_rng(9)
    image = rng.random((8, 8, 3))
    w = torch.zeros(5, dtype=torch.float64)
    w[2] = 1.0
    x = torch.from_numpy(image[None]).requires_grad_(True)
    value = (w * net.probs(x)).sum()
    (grad,) = torch.autograd.grad(value, x)
    grad = grad[0].numpy()

    h = 1e-4
    for coord in [(0, 0, 0), (3, 5, 1), (7, 7, 2)]:
        xp, xm = image.copy(), image.copy()
        xp[coord] += h
        xm[coord] -= h
        with torch.no_grad():
            fp = float(net.probs(torch.from_numpy(xp[None]))[0, 2])
            fm = float(net.probs(torch.from_numpy(xm[None]))[0, 2])
        fd = (fp - fm) / (2 * h)
        denom = max(abs(fd), abs(grad[coord]), 1e-6)
        assert abs(fd - grad[coord]) / denom < 1e-3


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.net"
    path.write_bytes(b"SOMETHING 9\ninput 8 8 3 dense 5\n" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_model(path)


def test_truncated_checkpoint_rejected(tmp_path):
    path = tmp_path / "short.net"
    params = small_params()
    write_checkpoint(path, SMALL_DESCRIPTOR, params)
    data = path.read_bytes()
    path.write_bytes(data[:-40])
    with pytest.raises(ValueError, match="truncated"):
        load_model(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "long.net"
    write_checkpoint(path, SMALL_DESCRIPTOR, small_params())
    with open(path, "ab") as fh:
        fh.write(b"\x00\x00\x00\x00")
    with pytest.raises(ValueError, match="trailing"):
        load_model(path)


def test_dense_only_architecture_loads(tmp_path):
    rng = np.random.default_rng(3)
    wd = rng.normal(size=(4, 8 * 8 * 3))
    bd = rng.normal(size=4)
    path = tmp_path / "linear.net"
    write_checkpoint(path, "input 8 8 3 dense 4", [wd, bd])
    net = load_model(path)
    image = rng.random((8, 8, 3))
    with torch.no_grad():
        logits = net(torch.from_numpy(image[None]))[0].numpy()
    expected = wd.astype("<f4").astype(np.float64) @ image.reshape(-1) \
        + bd.astype("<f4").astype(np.float64)
    assert np.max(np.abs(logits - expected)) < 1e-12
