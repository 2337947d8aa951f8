"""Client for out-of-process scorers speaking line-delimited JSON.

The bridge is any child process that answers `hello`, `forward`, `grad`, and
`bye` frames on its standard input/output. Images and gradients travel as
base64-encoded little-endian float32 in row, column, channel order. The
channel is exclusive-access: exactly one request is in flight at a time.
"""

import base64
import json
import shlex
import subprocess
import threading
import time
import queue

import numpy as np

__all__ = [
    "RemoteScorer",
    "BridgeError",
    "HandshakeTimeout",
    "MalformedReply",
    "BridgeTransportError",
    "BridgeRemoteError",
    "ProbabilityValidationError",
]


class BridgeError(RuntimeError):
    """Base for everything that can go wrong with a remote scorer."""


class HandshakeTimeout(BridgeError):
    pass


class MalformedReply(BridgeError):
    pass


class BridgeTransportError(BridgeError):
    pass


class BridgeRemoteError(BridgeError):
    """The bridge answered with a structured error frame."""

    def __init__(self, code, detail=""):
        super().__init__(f"bridge error {code}: {detail}" if detail else
                         f"bridge error {code}")
        self.code = code


class ProbabilityValidationError(BridgeError):
    pass


def _encode_f32(arr):
    return base64.b64encode(np.asarray(arr, dtype="<f4").tobytes()).decode("ascii")


def _decode_f32(text, count):
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    if len(raw) != 4 * count:
        raise MalformedReply(
            f"payload holds {len(raw)} bytes, expected {4 * count}"
        )
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


class RemoteScorer:
    """Scorer backed by a bridge child process.

    Exposes the same probs_batch / input_gradients surface as the local model,
    so forward-only explainers and metrics work unchanged; gradient service
    depends on the capabilities the bridge advertises.
    """

    def __init__(self, command, handshake_timeout=10.0, request_timeout=60.0):
        if isinstance(command, str):
            command = shlex.split(command)
        self._proc = subprocess.Popen(
            command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )
        self._lines = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()
        self._lock = threading.Lock()
        self._request_timeout = request_timeout
        self._closed = False
        self._dead = False

        reply = self._request({"op": "hello"}, timeout=handshake_timeout,
                              timeout_error=HandshakeTimeout)
        try:
            self.num_classes = int(reply["classes"])
            self.capabilities = tuple(reply["caps"])
            self.height = int(reply["height"])
            self.width = int(reply["width"])
            self.channels = int(reply["channels"])
        except (KeyError, TypeError, ValueError) as exc:
            self.close()
            raise MalformedReply(f"bad hello reply {reply!r}") from exc
        if self.num_classes < 2:
            self.close()
            raise MalformedReply(f"bridge reports {self.num_classes} classes")

    def _pump(self):
        try:
            for line in self._proc.stdout:
                self._lines.put(line)
        except ValueError:
            pass  # stream closed under the reader
        self._lines.put(None)

    def _request(self, frame, timeout=None, timeout_error=BridgeTransportError):
        limit = timeout if timeout is not None else self._request_timeout
        with self._lock:
            if self._closed or self._dead:
                raise BridgeTransportError("scorer is closed")
            try:
                self._proc.stdin.write(json.dumps(frame) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                self._dead = True
                raise BridgeTransportError("bridge pipe closed") from exc
            line = self._await_reply(frame, limit, timeout_error)
            if line is None:
                self._dead = True
                raise BridgeTransportError("bridge closed the connection")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedReply(f"unparseable reply {line!r}") from exc
        if not isinstance(reply, dict):
            raise MalformedReply(f"reply is not an object: {reply!r}")
        if "error" in reply:
            raise BridgeRemoteError(str(reply["error"]), str(reply.get("detail", "")))
        return reply

    def _await_reply(self, frame, limit, timeout_error):
        """Poll for the reply line, watching for the child dying under us.

        A write into the pipe of an already-exiting child can succeed, so a
        plain blocking read would wait out the whole timeout for a reply that
        cannot come. Returns the reply line, or None for a closed stream.
        """
        deadline = time.monotonic() + limit
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise timeout_error(
                    f"no reply to {frame.get('op')!r} within {limit}s"
                )
            try:
                return self._lines.get(timeout=min(0.05, remaining))
            except queue.Empty:
                if self._proc.poll() is not None:
                    # one last grab for a reply flushed just before exit
                    try:
                        return self._lines.get(timeout=0.2)
                    except queue.Empty:
                        self._dead = True
                        raise BridgeTransportError(
                            f"bridge exited with code {self._proc.returncode}"
                        )

    def _check_image(self, image):
        arr = np.asarray(image, dtype=np.float64)
        if arr.shape != (self.height, self.width, self.channels):
            raise ValueError(
                f"image shape {arr.shape} does not match bridge "
                f"{(self.height, self.width, self.channels)}"
            )
        return arr

    def _validate_probs(self, probs):
        if len(probs) != self.num_classes:
            raise ProbabilityValidationError(
                f"probs length {len(probs)} != classes {self.num_classes}"
            )
        if np.any(probs < 0):
            raise ProbabilityValidationError("negative probability in reply")
        total = float(probs.sum())
        if abs(total - 1.0) > 1e-4:
            raise ProbabilityValidationError(f"probs sum to {total!r}")
        return probs

    def probs_single(self, image):
        arr = self._check_image(image)
        reply = self._request({
            "op": "forward",
            "image": _encode_f32(arr),
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
        })
        if "probs" not in reply:
            raise MalformedReply(f"forward reply lacks probs: {reply!r}")
        return self._validate_probs(_decode_f32(reply["probs"], self.num_classes))

    def probs_batch(self, batch):
        batch = np.asarray(batch, dtype=np.float64)
        return np.stack([self.probs_single(img) for img in batch])

    @property
    def supports_gradients(self):
        return "grad" in self.capabilities

    def grad_single(self, image, w, on_logits=True):
        if not self.supports_gradients:
            raise BridgeRemoteError("UNSUPPORTED_OP", "bridge lacks grad capability")
        arr = self._check_image(image)
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.num_classes,):
            raise ValueError(f"objective shape {w.shape} != ({self.num_classes},)")
        reply = self._request({
            "op": "grad",
            "image": _encode_f32(arr),
            "weights": [float(v) for v in w],
            "on_logits": bool(on_logits),
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
        })
        if "grad" not in reply:
            raise MalformedReply(f"grad reply lacks grad: {reply!r}")
        flat = _decode_f32(reply["grad"], self.height * self.width * self.channels)
        return flat.reshape(self.height, self.width, self.channels)

    def input_gradients(self, batch, w, on_logits=True):
        batch = np.asarray(batch, dtype=np.float64)
        w = np.asarray(w, dtype=np.float64)
        if w.ndim == 1:
            return np.stack([self.grad_single(img, w, on_logits) for img in batch])
        return np.stack([
            self.grad_single(img, wi, on_logits) for img, wi in zip(batch, w)
        ])

    def close(self):
        with self._lock:
            if self._closed:
                return
            self._closed = True
            try:
                self._proc.stdin.write(json.dumps({"op": "bye"}) + "\n")
                self._proc.stdin.flush()
                self._proc.stdin.close()
            except (BrokenPipeError, OSError, ValueError):
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
