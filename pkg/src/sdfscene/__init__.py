"""Compositional 3D scene engine.

Scene graphs are decomposed into per-object/per-edge/global text prompts;
each object is a trainable signed distance field rendered by identity-aware
volume integration, and all fields are optimized under a scheduled mixture
of guidance residuals and geometric constraints.
"""

__version__ = "0.1.0"
