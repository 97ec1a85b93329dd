"""Pairwise filter backend selection.

The compiled extension (_filters_cy) is used when importable; the numpy
implementation is the fallback. SCRIBSEG_KERNELS=python|cython forces one.
"""

import os

import numpy as np

from . import _filters_py
from .errors import ConfigurationError

try:
    from . import _filters_cy
except ImportError:
    _filters_cy = None

_IMPLS = {"python": _filters_py}
if _filters_cy is not None:
    _IMPLS["cython"] = _filters_cy

_requested = os.environ.get("SCRIBSEG_KERNELS", "auto").lower()
if _requested == "auto":
    _active = "cython" if _filters_cy is not None else "python"
elif _requested in _IMPLS:
    _active = _requested
else:
    raise ConfigurationError(
        f"SCRIBSEG_KERNELS={_requested!r}: backend unavailable "
        f"(have {sorted(_IMPLS)})"
    )


def backend_name():
    return _active


def available_backends():
    return sorted(_IMPLS)


def pairwise_filters(values, image, sigma_alpha, sigma_beta, sigma_gamma,
                     radius, backend=None):
    """Bilateral and spatial-Gaussian neighbor sums, see _filters_py for the
    definition. Inputs are cast to float64; returns (bilateral, gauss)."""
    if sigma_alpha <= 0 or sigma_beta <= 0 or sigma_gamma <= 0:
        raise ConfigurationError("filter bandwidths must be positive")
    if radius <= 0:
        raise ConfigurationError("truncation radius must be positive")
    values = np.ascontiguousarray(values, dtype=np.float64)
    image = np.ascontiguousarray(image, dtype=np.float64)
    if values.ndim != 3 or image.shape != values.shape[1:]:
        raise ConfigurationError(
            f"pairwise_filters: values {values.shape} vs image {image.shape}"
        )
    impl = _IMPLS[backend or _active]
    return impl.pairwise_filters(values, image, float(sigma_alpha),
                                 float(sigma_beta), float(sigma_gamma),
                                 float(radius))
