"""Backend selection for the convolution kernels.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is used. Both produce bitwise-identical results.
"""
from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_active = _compiled if _compiled is not None else _kernels_py


def available_backends():
    names = ["python"]
    if _compiled is not None:
        names.insert(0, "cython")
    return names


def backend():
    return "cython" if _active is _compiled and _compiled is not None else "python"


def set_backend(name):
    """Switch kernels at runtime: ``"cython"`` or ``"python"``."""
    global _active
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built; reinstall with Cython available")
        _active = _compiled
    elif name == "python":
        _active = _kernels_py
    else:
        raise ValueError(f"unknown backend {name!r}")


def im2col(xp, k, stride, ho, wo):
    return _active.im2col(xp, k, stride, ho, wo)


def col2im(dcols, stride, hp, wp):
    return _active.col2im(dcols, stride, hp, wp)
