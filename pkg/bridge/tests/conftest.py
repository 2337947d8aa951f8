import numpy as np
import pytest


def write_checkpoint(path, descriptor, params):
    """Emit the documented file format: magic, descriptor, LE f32 params."""
    with open(path, "wb") as fh:
        fh.write(b"RFXG-NET 1\n")
        fh.write(descriptor.encode("ascii") + b"\n")
        for p in params:
            fh.write(np.asarray(p, dtype="<f4").tobytes())


def small_params(seed=0):
    """Parameters for "input 8 8 3 conv 4 3 pool 2 dense 5"."""
    rng = np.random.default_rng(seed)
    k1 = rng.normal(0.0, 0.4, size=(4, 3, 3, 3))
    b1 = rng.normal(0.0, 0.1, size=4)
    wd = rng.normal(0.0, 0.2, size=(5, 4 * 4 * 4))
    bd = rng.normal(0.0, 0.1, size=5)
    return [k1, b1, wd, bd]


SMALL_DESCRIPTOR = "input 8 8 3 conv 4 3 pool 2 dense 5"


@pytest.fixture(scope="session")
def small_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "small.net"
    write_checkpoint(path, SMALL_DESCRIPTOR, small_params())
    return path
