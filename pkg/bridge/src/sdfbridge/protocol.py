"""Wire-level request parsing and payload codecs.

The contract (shared with the scene engine's remote provider):

    POST /guidance
    request  {"id": int, "prompt": str, "step": int,
              "stage": "coarse"|"fine", "cfg_weight": float,
              "t_min": float, "t_max": float, "shape": [H, W, 3],
              "image_b64": base64 of row-major little-endian float32}
    response {"id": int, "t_used": float, "weight": float,
              "residual_b64": base64, same layout and shape}
"""

import base64
from dataclasses import dataclass

import numpy as np


class PayloadError(ValueError):
    """Malformed or inconsistent request payload (HTTP 400)."""


def encode_array(arr: np.ndarray) -> str:
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_array(payload: str, shape) -> np.ndarray:
    try:
        raw = base64.b64decode(payload.encode("ascii"), validate=True)
    except Exception as e:
        raise PayloadError(f"invalid base64 image payload: {e}") from e
    n = int(np.prod(shape))
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != n:
        raise PayloadError(
            f"payload holds {arr.size} floats, shape {tuple(shape)} needs {n}")
    return arr.reshape(tuple(shape)).copy()


@dataclass
class ResidualRequest:
    request_id: int
    prompt: str
    step: int
    stage: str
    cfg_weight: float
    t_min: float
    t_max: float
    image: np.ndarray      # (H, W, 3) float32

    @property
    def shape(self) -> tuple:
        return tuple(self.image.shape)


_REQUIRED = ("id", "prompt", "step", "stage", "cfg_weight",
             "t_min", "t_max", "shape", "image_b64")


def parse_request(payload) -> ResidualRequest:
    if not isinstance(payload, dict):
        raise PayloadError("request body must be a JSON object")
    for key in _REQUIRED:
        if key not in payload:
            raise PayloadError(f"request missing field {key!r}")
    shape = payload["shape"]
    if (not isinstance(shape, (list, tuple)) or len(shape) != 3
            or any(not isinstance(s, int) or s <= 0 for s in shape)
            or shape[2] != 3):
        raise PayloadError(f"shape must be [H, W, 3] positive ints, "
                           f"got {shape!r}")
    stage = payload["stage"]
    if stage not in ("coarse", "fine"):
        raise PayloadError(f"stage must be 'coarse' or 'fine', got {stage!r}")
    try:
        t_min = float(payload["t_min"])
        t_max = float(payload["t_max"])
        cfg = float(payload["cfg_weight"])
        step = int(payload["step"])
        request_id = int(payload["id"])
    except (TypeError, ValueError) as e:
        raise PayloadError(f"malformed numeric field: {e}") from e
    if not 0.0 < t_min <= t_max < 1.0:
        raise PayloadError(f"need 0 < t_min <= t_max < 1, "
                           f"got [{t_min}, {t_max}]")
    if cfg <= 0.0:
        raise PayloadError(f"cfg_weight must be positive, got {cfg}")
    image = decode_array(payload["image_b64"], shape)
    if not np.all(np.isfinite(image)):
        raise PayloadError("image payload contains non-finite values")
    return ResidualRequest(request_id=request_id, prompt=str(payload["prompt"]),
                           step=step, stage=stage, cfg_weight=cfg,
                           t_min=t_min, t_max=t_max, image=image)


def build_response(request: ResidualRequest, residual: np.ndarray,
                   t_used: float, weight: float) -> dict:
    if tuple(residual.shape) != request.shape:
        raise PayloadError(f"residual shape {residual.shape} does not match "
                           f"request shape {request.shape}")
    return {
        "id": request.request_id,
        "t_used": float(t_used),
        "weight": float(weight),
        "residual_b64": encode_array(residual),
    }
