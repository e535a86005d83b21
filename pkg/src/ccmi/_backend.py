"""Pick the IRLS kernel: compiled extension if importable, numpy otherwise.

Set ``CCMI_PURE_PYTHON=1`` to force the numpy kernel.
"""
import os

from . import _kernels_py

if os.environ.get("CCMI_PURE_PYTHON", "") not in ("", "0"):
    _compiled = None
else:
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

if _compiled is not None:
    fit_irls = _compiled.fit_irls
    BACKEND = "cython"
else:
    fit_irls = _kernels_py.fit_irls
    BACKEND = "python"

python_fit_irls = _kernels_py.fit_irls
compiled_fit_irls = None if _compiled is None else _compiled.fit_irls

__all__ = ["fit_irls", "BACKEND", "python_fit_irls", "compiled_fit_irls"]
