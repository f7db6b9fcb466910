"""Fisheye warping, keypoint adaptation and matching benchmark toolkit."""

__version__ = "0.1.0"

from . import adapt, camera, errors, evalbench, features, image, warp  # noqa: F401
