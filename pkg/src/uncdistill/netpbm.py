"""Binary PPM (P6) and PGM (P5) readers/writers, maxval 255.

Strict parsers: malformed input raises ParseError naming the file and the
byte offset of the fault.
"""

from __future__ import annotations

import numpy as np


class ParseError(ValueError):
    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {message}")


def write_ppm(path, image: np.ndarray) -> None:
    """image: (H, W, 3) uint8."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w, c = image.shape
    if c != 3:
        raise ValueError(f"PPM needs 3 channels, got {c}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """gray: (H, W) uint8."""
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def read_ppm(path) -> np.ndarray:
    return _read(path, b"P6", channels=3)


def read_pgm(path) -> np.ndarray:
    return _read(path, b"P5", channels=1)


class _Cursor:
    def __init__(self, path, blob: bytes):
        self.path = path
        self.blob = blob
        self.pos = 0

    def fail(self, message: str):
        raise ParseError(self.path, self.pos, message)

    def skip_space(self):
        # whitespace and '#' comments separate header tokens
        blob = self.blob
        while self.pos < len(blob):
            ch = blob[self.pos:self.pos + 1]
            if ch == b"#":
                while self.pos < len(blob) and blob[self.pos:self.pos + 1] != b"\n":
                    self.pos += 1
            elif ch.isspace():
                self.pos += 1
            else:
                return
        self.fail("unexpected end of header")

    def int_token(self, what: str) -> int:
        self.skip_space()
        start = self.pos
        while self.pos < len(self.blob) and self.blob[self.pos:self.pos + 1].isdigit():
            self.pos += 1
        if self.pos == start:
            self.fail(f"expected integer {what}")
        return int(self.blob[start:self.pos])


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    cur = _Cursor(path, blob)
    if blob[:2] != magic:
        cur.fail(f"bad magic {blob[:2]!r}, expected {magic.decode()}")
    cur.pos = 2
    w = cur.int_token("width")
    h = cur.int_token("height")
    maxval = cur.int_token("maxval")
    if maxval != 255:
        cur.fail(f"unsupported maxval {maxval}, expected 255")
    if cur.pos >= len(blob) or not blob[cur.pos:cur.pos + 1].isspace():
        cur.fail("expected single whitespace after maxval")
    cur.pos += 1
    need = w * h * channels
    payload = blob[cur.pos:]
    if len(payload) < need:
        cur.pos += len(payload)
        cur.fail(f"truncated payload, need {need} bytes, have {len(payload)}")
    if len(payload) > need:
        cur.pos += need
        cur.fail(f"trailing bytes after {need}-byte payload")
    arr = np.frombuffer(payload, dtype=np.uint8, count=need)
    if channels == 1:
        return arr.reshape(h, w).copy()
    return arr.reshape(h, w, channels).copy()
