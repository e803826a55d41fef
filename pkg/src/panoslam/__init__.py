"""Gaussian-splatting RGB-D SLAM with panoptic segmentation from noisy pseudo-labels."""
import numba as _numba

# the TBB layer warns on this platform; workqueue is always available
_numba.config.THREADING_LAYER = "workqueue"

__version__ = "0.1.0"
