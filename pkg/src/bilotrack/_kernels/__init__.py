"""Hot assembly/linear-algebra kernels with a compiled core and NumPy fallback.

The compiled Cython extension ``_core`` is preferred when importable; the
pure NumPy module ``pure`` provides the identical API otherwise. Set the
environment variable ``BILOTRACK_KERNELS`` to ``pure`` or ``compiled`` to
force a backend (forcing ``compiled`` raises if the extension is missing).
"""

import os

_requested = os.environ.get("BILOTRACK_KERNELS", "").strip().lower()
if _requested not in ("", "pure", "compiled"):
    raise ImportError(
        "BILOTRACK_KERNELS must be 'pure' or 'compiled', got %r" % _requested
    )

if _requested == "pure":
    from . import pure as _impl

    BACKEND = "pure"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        from . import pure as _impl

        BACKEND = "pure"

weighted_mass_values = _impl.weighted_mass_values
weighted_load_values = _impl.weighted_load_values
scatter_add = _impl.scatter_add
matvec_plan = _impl.matvec_plan
csr_matvec = _impl.csr_matvec

__all__ = [
    "BACKEND",
    "weighted_mass_values",
    "weighted_load_values",
    "scatter_add",
    "matvec_plan",
    "csr_matvec",
]
