"""stylefield: restyle 3D scenes through a spherical appearance space.

A voxel radiance field is split into geometry (density grid) and appearance
(a mapping from surface points onto the unit sphere plus a color network).
Restyling then happens entirely in 2D: a frozen stylizer paints a cubemap
over the sphere, steered by a single trainable prompt tensor at its
bottleneck, and the renderer shades the scene from that cubemap.
"""

__version__ = "0.1.0"

from .backend import HAS_NUMBA, backend_name

__all__ = ["HAS_NUMBA", "backend_name", "__version__"]
