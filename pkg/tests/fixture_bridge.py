"""Minimal scorer bridge used by the remote-client tests.

Speaks the line-delimited JSON protocol over stdio. The first argument
selects a behavior:

  ok         linear-softmax scorer, honest replies (default)
  no-grad    same but only the forward capability
  bad-probs  forward replies with probabilities that sum to 2
  garbage    answers every frame with unparseable text
  silent     reads frames but never answers (handshake timeout)
  die        exits right after the hello reply
  error      answers post-hello frames with a MODEL_FAILURE error frame
  big        honest scorer shaped like the synthetic task (20 classes, 32x32)
  big-die    same, but the process exits after 25 replies
"""

import base64
import json
import sys

import numpy as np


def _params(mode):
    if mode.startswith("big"):
        h = w = 32
    else:
        h = w = 8
    c = 3
    classes = 20 if mode.startswith("big") else 6
    rng = np.random.default_rng(2024)
    weights = rng.normal(0.0, 0.05, size=(classes, h * w * c))
    bias = rng.normal(0.0, 0.01, size=classes)
    return h, w, c, classes, weights, bias


def _softmax(z):
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _decode(text):
    raw = base64.b64decode(text)
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def _encode(arr):
    return base64.b64encode(np.asarray(arr, dtype="<f4").tobytes()).decode("ascii")


def _reply(obj):
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def main():
    mode = sys.argv[1] if len(sys.argv) > 1 else "ok"
    height, width, channels, classes, weights, bias = _params(mode)
    replies = 0
    for line in sys.stdin:
        if mode == "big-die" and replies >= 25:
            return
        if mode == "silent":
            continue
        if mode == "garbage":
            sys.stdout.write("}{ not json\n")
            sys.stdout.flush()
            continue
        try:
            frame = json.loads(line)
        except json.JSONDecodeError:
            _reply({"error": "BAD_FRAME"})
            replies += 1
            continue
        op = frame.get("op")
        if op == "hello":
            caps = ["forward"] if mode == "no-grad" else ["forward", "grad"]
            _reply({"classes": classes, "caps": caps, "height": height,
                    "width": width, "channels": channels, "protocol": 1})
            if mode == "die":
                return
        elif op == "bye":
            return
        elif mode == "error":
            _reply({"error": "MODEL_FAILURE", "detail": "synthetic failure"})
        elif op == "forward":
            flat = _decode(frame["image"])
            probs = _softmax(weights @ flat + bias)
            if mode == "bad-probs":
                probs = probs * 2.0
            _reply({"probs": _encode(probs)})
        elif op == "grad":
            flat = _decode(frame["image"])
            w = np.asarray(frame["weights"], dtype=np.float64)
            if frame.get("on_logits", True):
                grad = weights.T @ w
            else:
                p = _softmax(weights @ flat + bias)
                dz = p * (w - float(w @ p))
                grad = weights.T @ dz
            _reply({"grad": _encode(grad)})
        else:
            _reply({"error": "UNSUPPORTED_OP", "detail": str(op)})
        replies += 1


if __name__ == "__main__":
    main()
