"""Hot-loop kernels for 2D convolution lowering.

Two interchangeable backends provide ``im2col`` / ``col2im``:

* ``fedrecon._kernels`` -- Cython extension, built by setup.py.
* ``fedrecon.kernels.fallback`` -- pure numpy, always available.

The compiled backend is preferred when importable. Both produce
bit-identical results (same per-element accumulation order), so the
choice never affects numerics, only speed. Set ``FEDRECON_KERNELS`` to
``"numpy"`` or ``"cython"`` to force a backend (the benchmark does).
"""

import os

from . import fallback

_requested = os.environ.get("FEDRECON_KERNELS", "").strip().lower()

if _requested == "numpy":
    BACKEND = "numpy"
    im2col = fallback.im2col
    col2im = fallback.col2im
else:
    try:
        from fedrecon import _kernels as _cy
    except ImportError:
        _cy = None
    if _cy is None:
        if _requested == "cython":
            raise ImportError(
                "FEDRECON_KERNELS=cython but the fedrecon._kernels extension "
                "is not built; run `pip install -e .` or unset the variable"
            )
        BACKEND = "numpy"
        im2col = fallback.im2col
        col2im = fallback.col2im
    else:
        BACKEND = "cython"
        im2col = _cy.im2col
        col2im = _cy.col2im

__all__ = ["BACKEND", "im2col", "col2im", "fallback"]
