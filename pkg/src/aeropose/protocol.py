"""Length-prefixed binary protocol for out-of-process model backends.

Every message is ``uint32 little-endian length`` followed by that many bytes.

Request body::

    b"APRQ" | kind:u8 (1 detect, 2 pose) | ref:u32 | width:u32 | height:u32
    | channels:u32 | uint8 pixels, row-major HxWxC

Response body::

    b"APRS" | status:u8 (0 ok, 1 error) | payload

with payload ``n:u32`` then ``n`` records of five float32 ``(x, y, w, h,
score)`` for detect, a serialized HeatmapStack for pose, or a UTF-8 message
when status is 1.
"""
from __future__ import annotations

import shlex
import struct
import subprocess
import threading
from typing import BinaryIO, Callable, List, Optional, Tuple

import numpy as np

from .geometry import Box
from .heatmap import HeatmapStack
from .pipeline import BackendError, Frame, PatchContext, letterbox

KIND_DETECT = 1
KIND_POSE = 2

_LEN = struct.Struct("<I")
_REQ = struct.Struct("<4sBIIII")
_RESP = struct.Struct("<4sB")
_BOX = struct.Struct("<5f")
REQ_MAGIC = b"APRQ"
RESP_MAGIC = b"APRS"
MAX_MESSAGE = 1 << 30


class ProtocolError(BackendError):
    pass


def write_message(stream: BinaryIO, body: bytes) -> None:
    stream.write(_LEN.pack(len(body)))
    stream.write(body)
    stream.flush()


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            break
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_message(stream: BinaryIO) -> Optional[bytes]:
    """Next message body, or None on a clean end of stream."""
    head = _read_exact(stream, _LEN.size)
    if not head:
        return None
    if len(head) < _LEN.size:
        raise ProtocolError("truncated length prefix")
    (n,) = _LEN.unpack(head)
    if n > MAX_MESSAGE:
        raise ProtocolError(f"message length {n} exceeds limit")
    body = _read_exact(stream, n)
    if len(body) != n:
        raise ProtocolError(f"truncated message: wanted {n} bytes, got {len(body)}")
    return body


def encode_request(kind: int, ref: int, pixels: np.ndarray) -> bytes:
    px = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = px.shape[:2]
    c = px.shape[2] if px.ndim == 3 else 1
    return _REQ.pack(REQ_MAGIC, kind, ref & 0xFFFFFFFF, w, h, c) + px.tobytes()


def decode_request(body: bytes) -> Tuple[int, int, np.ndarray]:
    if len(body) < _REQ.size:
        raise ProtocolError("request shorter than header")
    magic, kind, ref, w, h, c = _REQ.unpack_from(body)
    if magic != REQ_MAGIC:
        raise ProtocolError(f"bad request magic {magic!r}")
    data = body[_REQ.size :]
    if len(data) != w * h * c:
        raise ProtocolError(f"pixel payload {len(data)} bytes, expected {w * h * c}")
    px = np.frombuffer(data, dtype=np.uint8).reshape(h, w, c)
    return kind, ref, px


def encode_boxes(boxes: List[Box]) -> bytes:
    parts = [_RESP.pack(RESP_MAGIC, 0), _LEN.pack(len(boxes))]
    for b in boxes:
        parts.append(_BOX.pack(b.x, b.y, b.w, b.h, 1.0 if b.score is None else b.score))
    return b"".join(parts)


def encode_heatmaps(hm: HeatmapStack) -> bytes:
    return _RESP.pack(RESP_MAGIC, 0) + hm.to_bytes()


def encode_error(msg: str) -> bytes:
    return _RESP.pack(RESP_MAGIC, 1) + msg.encode("utf-8")


def _response_payload(body: bytes) -> bytes:
    if len(body) < _RESP.size:
        raise ProtocolError("response shorter than header")
    magic, status = _RESP.unpack_from(body)
    if magic != RESP_MAGIC:
        raise ProtocolError(f"bad response magic {magic!r}")
    payload = body[_RESP.size :]
    if status != 0:
        raise BackendError(f"backend reported: {payload.decode('utf-8', 'replace')}")
    return payload


def decode_boxes(body: bytes) -> List[Box]:
    payload = _response_payload(body)
    (n,) = _LEN.unpack_from(payload)
    if len(payload) != _LEN.size + n * _BOX.size:
        raise ProtocolError("box payload length mismatch")
    out = []
    for i in range(n):
        x, y, w, h, s = _BOX.unpack_from(payload, _LEN.size + i * _BOX.size)
        out.append(Box(x, y, max(w, 0.0), max(h, 0.0), min(max(s, 0.0), 1.0)))
    return out


def decode_heatmaps(body: bytes) -> HeatmapStack:
    return HeatmapStack.from_bytes(_response_payload(body))


def serve(
    stdin: BinaryIO,
    stdout: BinaryIO,
    detect: Optional[Callable[[np.ndarray], List[Box]]] = None,
    estimate: Optional[Callable[[np.ndarray], HeatmapStack]] = None,
) -> int:
    """Answer requests until EOF; returns the number handled.

    Handler exceptions are reported to the client as error responses.
    """
    handled = 0
    while True:
        body = read_message(stdin)
        if body is None:
            return handled
        try:
            kind, _ref, px = decode_request(body)
            if kind == KIND_DETECT and detect is not None:
                reply = encode_boxes(list(detect(px)))
            elif kind == KIND_POSE and estimate is not None:
                reply = encode_heatmaps(estimate(px))
            else:
                reply = encode_error(f"unsupported request kind {kind}")
        except Exception as e:  # report, keep serving
            reply = encode_error(repr(e))
        write_message(stdout, reply)
        handled += 1


class ExternalProcess:
    """A backend subprocess speaking the protocol over stdin/stdout."""

    def __init__(self, command):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        self._lock = threading.Lock()

    def call(self, body: bytes) -> bytes:
        with self._lock:
            if self.proc.poll() is not None:
                raise BackendError(f"backend process exited with {self.proc.returncode}")
            try:
                write_message(self.proc.stdin, body)
                reply = read_message(self.proc.stdout)
            except (BrokenPipeError, OSError) as e:
                raise BackendError(f"backend pipe failed: {e}") from e
        if reply is None:
            raise BackendError("backend closed its output")
        return reply

    def close(self):
        if self.proc.stdin and not self.proc.stdin.closed:
            self.proc.stdin.close()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()
        if self.proc.stdout:
            self.proc.stdout.close()


class ExternalDetector:
    """Letterboxes frames to ``input_long_side`` and maps boxes back."""

    def __init__(self, proc: ExternalProcess, input_long_side: int = 1280):
        self.proc = proc
        self.input_long_side = input_long_side

    def preprocess(self, frame: Frame):
        canvas, lb = letterbox(frame.image, self.input_long_side)
        return frame.id, canvas, lb

    def detect(self, prepared) -> List[Box]:
        fid, canvas, lb = prepared
        boxes = decode_boxes(self.proc.call(encode_request(KIND_DETECT, fid, canvas)))
        return [lb.to_frame(b) for b in boxes]


class ExternalPose:
    def __init__(self, proc: ExternalProcess):
        self.proc = proc

    def estimate(self, patch: np.ndarray, ctx: PatchContext) -> HeatmapStack:
        return decode_heatmaps(self.proc.call(encode_request(KIND_POSE, ctx.frame_id, patch)))
