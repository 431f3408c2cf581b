"""Backend selection for the hot kernels.

The compiled extension ``_ckernels`` is used when it is importable; the
pure-Python module ``_pykernels`` is the fallback.  Setting the environment
variable ``SPDFIELD_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _pykernels

backend = None
if os.environ.get("SPDFIELD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as backend  # noqa: F401
        BACKEND = "cython"
    except ImportError:
        backend = None
if backend is None:
    backend = _pykernels
    BACKEND = "python"

jacobi_eigh = backend.jacobi_eigh
chol_upper = backend.chol_upper
thomas = backend.thomas
gammainc = backend.gammainc
gammaincinv = backend.gammaincinv


def get_backend(name=None):
    """Return the kernel module called ``name`` ('cython' or 'python').

    ``None`` returns the active backend.
    """
    if name is None:
        return backend
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")
