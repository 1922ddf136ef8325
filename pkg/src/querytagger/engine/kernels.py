"""Row-kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementation in ``_pykernels`` is used. Setting the environment
variable ``QUERYTAGGER_PURE_PYTHON=1`` forces the fallback.

Every kernel accepts arrays of any rank and reduces over the last axis.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if not os.environ.get("QUERYTAGGER_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        pass


def use_backend(name):
    """Switch the active backend (``"cython"`` or ``"python"``); returns the previous name."""
    global _impl, BACKEND
    previous = BACKEND
    if name == "python":
        _impl = _pykernels
    elif name == "cython":
        from . import _ckernels
        _impl = _ckernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name
    return previous


def _rows(a):
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]), dtype=np.float64)


def softmax_fwd(x):
    return _impl.softmax_fwd(_rows(x)).reshape(x.shape)


def softmax_bwd(y, g):
    return _impl.softmax_bwd(_rows(y), _rows(g)).reshape(y.shape)


def log_softmax_fwd(x):
    return _impl.log_softmax_fwd(_rows(x)).reshape(x.shape)


def log_softmax_bwd(y, g):
    return _impl.log_softmax_bwd(_rows(y), _rows(g)).reshape(y.shape)


def layer_norm_fwd(x, gamma, beta, eps):
    y, xhat, rstd = _impl.layer_norm_fwd(
        _rows(x), np.ascontiguousarray(gamma), np.ascontiguousarray(beta), eps)
    return y.reshape(x.shape), xhat, rstd


def layer_norm_bwd(g, xhat, rstd, gamma):
    gx, gg, gb = _impl.layer_norm_bwd(_rows(g), xhat, rstd, np.ascontiguousarray(gamma))
    return gx.reshape(g.shape), gg, gb


def gelu_fwd(x):
    return _impl.gelu_fwd(_rows(x)).reshape(x.shape)


def gelu_bwd(x, g):
    return _impl.gelu_bwd(_rows(x), _rows(g)).reshape(x.shape)
