"""Rasterization kernel backend selection.

The compiled Cython kernels are used when the extension built; otherwise
the pure-numpy fallback takes over. Set ROPETRACK_PURE_PYTHON=1 to force
the fallback (used by the backend-parity tests and the benchmark).
Both backends expose forward_image / loss_forward / loss_backward with
identical signatures and per-pixel semantics.
"""

import os

from . import _rasterize_py

if os.environ.get("ROPETRACK_PURE_PYTHON", "") == "1":
    _impl = _rasterize_py
else:
    try:
        from . import _rasterize_cy as _impl
    except ImportError:
        _impl = _rasterize_py

BACKEND = _impl.BACKEND
forward_image = _impl.forward_image
loss_forward = _impl.loss_forward
loss_backward = _impl.loss_backward

Q_CUTOFF = _rasterize_py.Q_CUTOFF
ALPHA_MAX = _rasterize_py.ALPHA_MAX
T_STOP = _rasterize_py.T_STOP
