"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise (or when
``TRIPLANE_SLAM_PURE=1`` is set) the numpy implementations take over.
"""

from __future__ import annotations

import os

from . import _pure

BACKEND = "python"
_impl = _pure

if os.environ.get("TRIPLANE_SLAM_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ext as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pure

adam_update = _impl.adam_update
hash2d_forward = _impl.hash2d_forward
hash2d_backward = _impl.hash2d_backward
hash3d_forward = _impl.hash3d_forward
hash3d_backward = _impl.hash3d_backward


def use_backend(name: str) -> None:
    """Switch kernels at runtime (``"cython"`` or ``"python"``); used by tests and benchmarks."""
    global BACKEND, _impl, adam_update, hash2d_forward, hash2d_backward, hash3d_forward, hash3d_backward
    if name == "cython":
        from . import _ext as impl
    elif name == "python":
        impl = _pure
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND, _impl = name, impl
    adam_update = impl.adam_update
    hash2d_forward = impl.hash2d_forward
    hash2d_backward = impl.hash2d_backward
    hash3d_forward = impl.hash3d_forward
    hash3d_backward = impl.hash3d_backward
