"""Convolution kernel backend selection.

The compiled extension is preferred when importable; the numpy fallback is
functionally identical.  Set TERRALIGN_KERNELS=numpy (or =cython) to force a
backend; forcing cython raises if the extension was not built.
"""

import os

_forced = os.environ.get("TERRALIGN_KERNELS", "").strip().lower()

if _forced in ("numpy", "python", "pure"):
    from terralign.kernels.numpy_backend import (  # noqa: F401
        conv1d_backward,
        conv1d_forward,
        conv2d_backward,
        conv2d_forward,
    )

    BACKEND = "numpy"
elif _forced in ("", "cython", "compiled"):
    try:
        from terralign.kernels._conv import (  # noqa: F401
            conv1d_backward,
            conv1d_forward,
            conv2d_backward,
            conv2d_forward,
        )

        BACKEND = "cython"
    except ImportError:
        if _forced:
            raise
        from terralign.kernels.numpy_backend import (  # noqa: F401
            conv1d_backward,
            conv1d_forward,
            conv2d_backward,
            conv2d_forward,
        )

        BACKEND = "numpy"
else:
    raise ValueError(f"unknown TERRALIGN_KERNELS value: {_forced!r}")
