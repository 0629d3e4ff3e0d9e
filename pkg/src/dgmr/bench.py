"""Benchmark the compiled kernels against the pure-numpy fallback.

Run as `python -m dgmr.bench`. Times each hot kernel with identical
inputs on both implementations, checks that outputs agree, and prints a
speedup table. Exits nonzero if the compiled extension is unavailable so
CI can notice a build regression.
"""

from __future__ import annotations

import json
import sys
import time

import numpy as np

from .backend import kernels_py


def _time(fn, *args, repeats: int = 30) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _cases(rng: np.random.Generator):
    n = 4096
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    p = rng.normal(size=(n, 4))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    v = rng.normal(size=(n, 3))
    aa = rng.normal(size=(n, 3))

    t_frames, joints, verts = 32, 16, 64
    w = rng.random(size=(verts, joints))
    w /= w.sum(axis=1, keepdims=True)
    rel = rng.normal(size=(verts, joints, 3))
    rot = rng.normal(size=(t_frames, joints, 3, 3))
    pos = rng.normal(size=(t_frames, joints, 3))

    qk = rng.normal(size=(8, 16, 32))
    kk = rng.normal(size=(8, 64, 32))
    vk = rng.normal(size=(8, 64, 32))

    cu = rng.random(size=512) * 8.0
    cv = rng.random(size=512) * 8.0

    return [
        ("quat_mul", "quat_mul", (q, p)),
        ("quat_rotate", "quat_rotate", (q, v)),
        ("quat_to_mat", "quat_to_mat", (q,)),
        ("aa_to_quat", "aa_to_quat", (aa,)),
        ("lbs_forward", "lbs_forward", (w, rel, rot, pos)),
        ("attention_forward", "attention_forward", (qk, kk, vk, 32.0 ** -0.5)),
        ("gauss_maps", "gauss_maps", (cu, cv, 0.8, 8, 8)),
    ]


def run(verbose: bool = True) -> dict:
    try:
        from .backend import _kernels as compiled
    except ImportError:
        if verbose:
            print("compiled extension not available; nothing to compare")
        return {"available": False}

    rng = np.random.default_rng(0)
    rows = []
    for name, attr, args in _cases(rng):
        py_fn = getattr(kernels_py, attr)
        c_fn = getattr(compiled, attr)
        ref = py_fn(*args)
        got = c_fn(*args)
        ref0 = ref[0] if isinstance(ref, tuple) else ref
        got0 = got[0] if isinstance(got, tuple) else got
        agree = float(np.max(np.abs(np.asarray(ref0) - np.asarray(got0))))
        t_py = _time(py_fn, *args)
        t_c = _time(c_fn, *args)
        rows.append(
            {
                "kernel": name,
                "python_ms": t_py * 1e3,
                "compiled_ms": t_c * 1e3,
                "speedup": t_py / t_c if t_c > 0 else float("inf"),
                "max_abs_diff": agree,
            }
        )
    if verbose:
        print("%-20s %12s %12s %9s %12s" % (
            "kernel", "python ms", "compiled ms", "speedup", "max |diff|"))
        for r in rows:
            print("%-20s %12.4f %12.4f %8.2fx %12.3e" % (
                r["kernel"], r["python_ms"], r["compiled_ms"],
                r["speedup"], r["max_abs_diff"]))
    return {"available": True, "rows": rows}


def main() -> int:
    result = run(verbose=True)
    if not result["available"]:
        return 1
    bad = [r for r in result["rows"] if r["max_abs_diff"] > 1e-9]
    if bad:
        print(json.dumps({"error": "backend mismatch", "rows": bad}))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
