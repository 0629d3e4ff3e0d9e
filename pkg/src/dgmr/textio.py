"""Plain-text array sections shared by the template and dataset files.

Format: a section header ``[name] shape=d0,d1,...`` followed by the array
values in C order, eight per line, written with ``repr`` so float64
round-trips exactly.
"""

from __future__ import annotations

import io

import numpy as np


def write_array(out: io.TextIOBase, name: str, arr) -> None:
    arr = np.asarray(arr)
    out.write("[%s] shape=%s\n" % (name, ",".join(str(d) for d in arr.shape)))
    flat = arr.reshape(-1)
    if arr.dtype.kind in "iu":
        for i in range(0, flat.size, 16):
            out.write(" ".join(str(int(x)) for x in flat[i : i + 16]) + "\n")
    else:
        for i in range(0, flat.size, 8):
            out.write(" ".join(repr(float(x)) for x in flat[i : i + 8]) + "\n")


def read_array(
    lines: list[str], pos: int, name: str, dtype=np.float64
) -> tuple[np.ndarray, int]:
    header = lines[pos].strip()
    if not header.startswith("[%s] shape=" % name):
        raise ValueError("expected section %r, found %r" % (name, header))
    shape = tuple(int(x) for x in header.split("shape=")[1].split(",") if x)
    count = int(np.prod(shape)) if shape else 1
    vals: list = []
    pos += 1
    while len(vals) < count:
        vals.extend(lines[pos].split())
        pos += 1
    return np.array(vals, dtype=dtype).reshape(shape), pos
