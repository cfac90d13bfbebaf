"""morphfill: analysis-by-synthesis face completion at desk scale.

Factorizes a masked face image into 3D shape, pose, illumination and partial
UV albedo; inpaints the albedo with a symmetry-aware gated U-Net; re-renders
and blends; refines iteratively.
"""

__version__ = "0.1.0"
