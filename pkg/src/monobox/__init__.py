"""Monocular 3D box toolkit.

Estimates object orientation (multi-bin discrete-continuous representation)
and dimensions (deviation from per-class means) from opaque per-object
feature vectors, with KITTI-format file I/O, a synthetic scene oracle,
AP/AOS evaluation, and a FastAPI service plus thin CLI on top.
"""

__version__ = "0.1.0"
