"""Line-delimited JSON scorer service over stdio.

One request, one reply, strictly in order. Ops: hello, forward, grad, bye.
Images and gradients travel as base64 little-endian float32 in row, column,
channel order. Error replies carry a code instead of crashing the process:
BAD_FRAME for unparseable or malformed input, SHAPE for size mismatches,
UNSUPPORTED_OP for unknown operations, MODEL_FAILURE for anything that goes
wrong inside the network.
"""

import argparse
import base64
import binascii
import json
import sys

import numpy as np
import torch

from .checkpoint import load_model

__all__ = ["serve", "main"]


class FrameError(Exception):
    def __init__(self, code, detail=""):
        super().__init__(detail or code)
        self.code = code
        self.detail = detail


def _error(code, detail=""):
    reply = {"error": code}
    if detail:
        reply["detail"] = detail
    return reply


def _decode_image(net, frame):
    payload = frame.get("image")
    if not isinstance(payload, str):
        raise FrameError("BAD_FRAME", "image must be a base64 string")
    try:
        raw = base64.b64decode(payload.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as exc:
        raise FrameError("BAD_FRAME", f"image payload: {exc}")
    expected = net.height * net.width * net.channels
    if len(raw) != 4 * expected:
        raise FrameError(
            "SHAPE",
            f"image holds {len(raw)} bytes, expected {4 * expected}",
        )
    for key, value in (("height", net.height), ("width", net.width),
                       ("channels", net.channels)):
        if key in frame and frame[key] != value:
            raise FrameError("SHAPE", f"{key} {frame[key]} != model {value}")
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return torch.from_numpy(
        arr.reshape(1, net.height, net.width, net.channels)
    )


def _encode(arr):
    return base64.b64encode(
        np.asarray(arr, dtype="<f4").tobytes()
    ).decode("ascii")


def _checked_probs(probs):
    vec = probs.detach().numpy().reshape(-1)
    if not np.all(np.isfinite(vec)):
        raise FrameError("MODEL_FAILURE", "non-finite probabilities")
    total = float(vec.sum())
    if abs(total - 1.0) > 1e-5:
        raise FrameError("MODEL_FAILURE", f"probabilities sum to {total!r}")
    return vec


def _handle_hello(net, _frame):
    return {
        "classes": net.num_classes,
        "caps": ["forward", "grad"],
        "height": net.height,
        "width": net.width,
        "channels": net.channels,
        "protocol": 1,
    }


def _handle_forward(net, frame):
    x = _decode_image(net, frame)
    with torch.no_grad():
        probs = net.probs(x)[0]
    return {"probs": _encode(_checked_probs(probs))}


def _handle_grad(net, frame):
    x = _decode_image(net, frame)
    weights = frame.get("weights")
    if not isinstance(weights, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in weights
    ):
        raise FrameError("BAD_FRAME", "weights must be a list of numbers")
    if len(weights) != net.num_classes:
        raise FrameError(
            "SHAPE", f"{len(weights)} weights for {net.num_classes} classes"
        )
    on_logits = frame.get("on_logits", True)
    if not isinstance(on_logits, bool):
        raise FrameError("BAD_FRAME", "on_logits must be a boolean")
    w = torch.tensor(weights, dtype=torch.float64)
    x = x.requires_grad_(True)
    with torch.enable_grad():
        logits = net(x)
        value = (w * (logits if on_logits else torch.softmax(logits, 1))).sum()
        (grad,) = torch.autograd.grad(value, x)
    flat = grad[0].detach().numpy().reshape(-1)
    if not np.all(np.isfinite(flat)):
        raise FrameError("MODEL_FAILURE", "non-finite gradient")
    return {"grad": _encode(flat)}


_HANDLERS = {
    "hello": _handle_hello,
    "forward": _handle_forward,
    "grad": _handle_grad,
}


def handle_line(net, line):
    """One request line to one reply dict; None means shut down."""
    try:
        text = line.decode("utf-8") if isinstance(line, bytes) else line
    except UnicodeDecodeError:
        return _error("BAD_FRAME", "not valid utf-8")
    try:
        frame = json.loads(text)
    except json.JSONDecodeError as exc:
        return _error("BAD_FRAME", f"not valid json: {exc.msg}")
    if not isinstance(frame, dict):
        return _error("BAD_FRAME", "frame must be a json object")
    op = frame.get("op")
    if op == "bye":
        return None
    if not isinstance(op, str):
        return _error("BAD_FRAME", "missing op")
    handler = _HANDLERS.get(op)
    if handler is None:
        return _error("UNSUPPORTED_OP", op)
    try:
        return handler(net, frame)
    except FrameError as exc:
        return _error(exc.code, exc.detail)
    except Exception as exc:  # noqa: BLE001 - the process must survive
        return _error("MODEL_FAILURE", f"{type(exc).__name__}: {exc}")


def serve(net, lines, out):
    """Run the request loop until bye or end of input."""
    for line in lines:
        reply = handle_line(net, line)
        if reply is None:
            break
        out.write(json.dumps(reply) + "\n")
        out.flush()


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="rfxg-bridge",
        description="Serve an RFXG-NET checkpoint over stdio JSON frames.",
    )
    parser.add_argument("checkpoint")
    args = parser.parse_args(argv)
    try:
        net = load_model(args.checkpoint)
    except (OSError, ValueError) as exc:
        print(f"cannot load checkpoint: {exc}", file=sys.stderr)
        return 1
    serve(net, sys.stdin.buffer, sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
