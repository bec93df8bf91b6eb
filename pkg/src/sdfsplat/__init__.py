"""Relightable Gaussian splatting with SDF-prior regularization.

Gaussian primitives carry Disney BRDF attributes and are splatted into a
per-pixel G-buffer (deferred shading against a prefiltered environment
light); a tensorial SDF trained by mutual depth/normal supervision
regularizes the geometry and drives outlier pruning; the recovered scene
relights in real time under novel environment maps at desk scale.
"""

__version__ = "0.1.0"
