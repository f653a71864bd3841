"""Guidance residual service.

Serves POST /guidance for the scene engine's remote provider: requests
carry a rendered image (base64 little-endian float32), a prompt, and
schedule metadata; responses carry a weighted noise residual of the same
shape. Without model weights the service runs in stub mode.
"""

__version__ = "0.1.0"

from .service import BridgeConfig, create_app

__all__ = ["BridgeConfig", "create_app", "__version__"]
