"""Backend selection for the hot loops.

The compiled extension is preferred. Setting ``AVDETECT_PURE_PYTHON=1`` in the
environment before import forces the numpy implementation.
"""
import os

from . import _kernels_py

python_backend = _kernels_py
compiled_backend = None

if not os.environ.get("AVDETECT_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "compiled" if _active is compiled_backend else "python"


def get_backend(name=None):
    """Return the kernel module called ``name`` ("compiled" or "python"), or the active one."""
    if name is None:
        return _active
    if name == "python":
        return python_backend
    if name == "compiled":
        if compiled_backend is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return compiled_backend
    raise ValueError(f"unknown kernel backend {name!r}")


def gru_forward(gx, U):
    return _active.gru_forward(gx, U)


def gru_backward(dH, H, Z, R, C, U):
    return _active.gru_backward(dH, H, Z, R, C, U)


def soft_nms(starts, ends, scores, gaussian, iou_thresh, sigma, min_score):
    return _active.soft_nms(starts, ends, scores, gaussian, iou_thresh, sigma, min_score)


def interval_iou(s1, e1, s2, e2):
    return _active.interval_iou(s1, e1, s2, e2)
