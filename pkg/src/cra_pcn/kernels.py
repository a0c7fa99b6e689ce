"""Backend selection for the geometric hot loops.

The compiled extension is used when it imports; otherwise, or when
``CRA_PCN_PURE_PYTHON=1`` is set, the numpy implementation is used. Both
backends produce bit-identical results.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("CRA_PCN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        pass


def _points(a):
    return np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 3)


def use_backend(name):
    """Switch backends at runtime (``"cython"`` or ``"python"``); used by benchmarks and tests."""
    global _impl, BACKEND
    if name == "python":
        _impl = _pykernels
    elif name == "cython":
        from . import _ckernels

        _impl = _ckernels
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name


def available_backends():
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401

        names.append("cython")
    except ImportError:
        pass
    return names


def fps_indices(points, n_out, centroid):
    return _impl.fps(_points(points), int(n_out), tuple(float(c) for c in centroid))


def knn_indices(query, support, k):
    return _impl.knn(_points(query), _points(support), int(k))


def scatter_add_rows(out, index, src):
    """``out[index[r]] += src[r]`` row by row, in order. ``out`` is modified in place."""
    width = int(np.prod(out.shape[1:], dtype=np.int64))
    flat = out.reshape(out.shape[0], width)
    _impl.scatter_add_rows(
        flat,
        np.ascontiguousarray(index, dtype=np.int64).reshape(-1),
        np.ascontiguousarray(src, dtype=np.float64).reshape(-1, width),
    )
    return out
