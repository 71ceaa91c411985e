"""Kernel backend selection.

Two interchangeable implementations of the convolution/pooling kernels: the
numpy im2col path (default; BLAS-bound and fastest at the batch sizes this
package runs, see benchmarks/bench_kernels.py) and an optional compiled
direct-loop core used as an independent cross-check of the im2col algebra.
`use_backend` pins a backend for a scope; `FEDRECON_KERNELS=compiled` flips
the process default when the extension is built.
"""
from __future__ import annotations

import contextlib
import os

from . import _conv_np

try:  # compiled extension is optional
    from . import _conv_cy
except ImportError:  # pragma: no cover - depends on build environment
    _conv_cy = None

_active = _conv_np
if os.environ.get("FEDRECON_KERNELS") == "compiled" and _conv_cy is not None:
    _active = _conv_cy


def available_backends() -> dict:
    out = {"numpy": _conv_np}
    if _conv_cy is not None:
        out["compiled"] = _conv_cy
    return out


def active_backend_name() -> str:
    return _active.NAME


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily pin the kernel backend ("numpy" or "compiled")."""
    global _active
    backends = available_backends()
    if name not in backends:
        raise ValueError(f"kernel backend {name!r} not available (have {sorted(backends)})")
    prev = _active
    _active = backends[name]
    try:
        yield
    finally:
        _active = prev


def conv2d_forward(x, w, sh, sw, ph, pw):
    return _active.conv2d_forward(x, w, sh, sw, ph, pw)


def conv2d_dinput(gy, w, sh, sw, ph, pw, h, wid):
    return _active.conv2d_dinput(gy, w, sh, sw, ph, pw, h, wid)


def conv2d_dweight(x, gy, sh, sw, ph, pw, kh, kw):
    return _active.conv2d_dweight(x, gy, sh, sw, ph, pw, kh, kw)


def maxpool_argmax(x, k, s):
    return _active.maxpool_argmax(x, k, s)


def pool_take(x, idx):
    return _active.pool_take(x, idx)


def pool_scatter(g, idx, h, w):
    return _active.pool_scatter(g, idx, h, w)
