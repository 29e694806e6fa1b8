"""Stereo image super-resolution with coarse-to-fine HR disparity and feedback,
built on a small numpy reverse-mode autodiff."""

__version__ = "0.1.0"
