"""Autodiff engine: replayable scalar tape with twin sweep kernels.

The compiled core (``_kernels_c``, built from Cython at install time)
is preferred; the pure-Python twin is the fallback. Selection happens
once at import and can be forced with ``DUALCAST_ENGINE=python`` or
``DUALCAST_ENGINE=compiled`` (the latter raises if the extension is
missing rather than silently degrading).
"""

import os

_choice = os.environ.get("DUALCAST_ENGINE", "").strip().lower()

if _choice == "python":
    from . import _kernels_py as _kernels
    BACKEND = "python"
elif _choice == "compiled":
    from . import _kernels_c as _kernels
    BACKEND = "compiled"
else:
    try:
        from . import _kernels_c as _kernels
        BACKEND = "compiled"
    except ImportError:
        from . import _kernels_py as _kernels
        BACKEND = "python"

from .graph import (  # noqa: E402
    GraphError,
    Tape,
    Value,
    as_value,
    backward,
    derivative_node,
    exp,
    log,
    sigmoid,
    sqrt,
    tangent_nodes,
    tanh,
)

__all__ = [
    "BACKEND", "GraphError", "Tape", "Value", "as_value", "backward",
    "derivative_node", "exp", "log", "sigmoid", "sqrt", "tangent_nodes",
    "tanh",
]
