"""Guidance providers: the source of score-distillation residuals.

A provider is any callable mapping a GuidanceRequest to a GuidanceResponse
whose residual has the request's image shape. The trainer never looks past
this contract, so analytic mocks (photometric, noisy) and a remote diffusion
service are interchangeable.
"""

import base64
from dataclasses import dataclass

import numpy as np


class GuidanceError(RuntimeError):
    """Any provider failure; the trainer treats these as retryable."""


class UnknownPromptError(GuidanceError):
    pass


class GuidanceTimeout(GuidanceError):
    pass


class GuidanceProtocolError(GuidanceError):
    pass


class GuidanceShapeError(GuidanceError):
    pass


@dataclass
class GuidanceRequest:
    image: np.ndarray            # (H, W, 3) floats in [0, 1]
    prompt: str
    step: int = 0
    stage: str = "coarse"
    cfg_weight: float = 50.0
    noise_range: tuple = (0.02, 0.98)

    def validate(self) -> None:
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[-1] != 3:
            raise GuidanceShapeError(f"image must be (H, W, 3), got {img.shape}")
        if not np.all(np.isfinite(img)):
            raise GuidanceError("image contains non-finite values")
        if self.cfg_weight <= 0:
            raise GuidanceError("cfg_weight must be positive")
        t0, t1 = self.noise_range
        if not (0.0 < t0 <= t1 < 1.0):
            raise GuidanceError(f"noise_range must satisfy 0 < t_min <= t_max < 1, "
                                f"got ({t0}, {t1})")
        if self.stage not in ("coarse", "fine"):
            raise GuidanceError(f"stage must be coarse or fine, got {self.stage!r}")


@dataclass
class GuidanceResponse:
    residual: np.ndarray         # same shape as the request image
    weight_applied: float
    t_used: float

    def validate_against(self, request: GuidanceRequest) -> None:
        res = np.asarray(self.residual)
        img = np.asarray(request.image)
        if res.shape != img.shape:
            raise GuidanceShapeError(
                f"residual shape {res.shape} != image shape {img.shape}")
        if not np.all(np.isfinite(res)):
            raise GuidanceProtocolError("residual contains non-finite values")


def encode_array(arr: np.ndarray) -> str:
    """Base64 of the array as little-endian float32, row-major."""
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_array(payload: str, shape) -> np.ndarray:
    try:
        raw = base64.b64decode(payload.encode("ascii"), validate=True)
    except Exception as e:
        raise GuidanceProtocolError(f"invalid base64 payload: {e}") from e
    n = int(np.prod(shape))
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != n:
        raise GuidanceShapeError(
            f"payload holds {arr.size} floats, shape {tuple(shape)} needs {n}")
    return arr.reshape(tuple(shape)).copy()


def request_to_json(request: GuidanceRequest, request_id: int) -> dict:
    img = np.asarray(request.image)
    return {
        "id": int(request_id),
        "prompt": request.prompt,
        "step": int(request.step),
        "stage": request.stage,
        "cfg_weight": float(request.cfg_weight),
        "t_min": float(request.noise_range[0]),
        "t_max": float(request.noise_range[1]),
        "shape": [int(s) for s in img.shape],
        "image_b64": encode_array(img),
    }


def response_from_json(payload: dict, request: GuidanceRequest,
                       request_id: int) -> GuidanceResponse:
    for key in ("id", "t_used", "weight", "residual_b64"):
        if key not in payload:
            raise GuidanceProtocolError(f"response missing field {key!r}")
    if int(payload["id"]) != int(request_id):
        raise GuidanceProtocolError(
            f"response id {payload['id']} does not match request {request_id}")
    residual = decode_array(payload["residual_b64"],
                            np.asarray(request.image).shape)
    resp = GuidanceResponse(residual=residual,
                            weight_applied=float(payload["weight"]),
                            t_used=float(payload["t_used"]))
    resp.validate_against(request)
    return resp


class PhotometricProvider:
    """Deterministic mock: residual = image - target(prompt), w(t) = 1.

    The injected gradient then equals that of 0.5 * ||image - target||^2,
    which makes whole-pipeline fits verifiable without a diffusion model.
    A prompt may map to a single image or to a list of images at different
    resolutions (multi-stage training renders at stage-dependent sizes);
    the entry matching the request shape is used. When `default_value` is
    set, prompts without an entry resolve to a flat image of that value.
    """

    def __init__(self, targets: dict, default_value=None):
        self.targets = {}
        for k, v in targets.items():
            imgs = list(v) if isinstance(v, (list, tuple)) else [v]
            self.targets[k] = [np.asarray(im, dtype=np.float64)
                               for im in imgs]
        self.default_value = (None if default_value is None
                              else float(default_value))

    def _target(self, request: GuidanceRequest) -> np.ndarray:
        img = np.asarray(request.image)
        if request.prompt not in self.targets:
            if self.default_value is not None:
                return np.full(img.shape, self.default_value)
            raise UnknownPromptError(f"no target image for prompt "
                                     f"{request.prompt!r}")
        options = self.targets[request.prompt]
        for target in options:
            if target.shape == img.shape:
                return target
        raise GuidanceShapeError(
            f"no target matches image shape {img.shape} for prompt "
            f"{request.prompt!r} (have {[t.shape for t in options]})")

    def __call__(self, request: GuidanceRequest) -> GuidanceResponse:
        request.validate()
        target = self._target(request)
        residual = np.asarray(request.image, dtype=np.float64) - target
        t0, t1 = request.noise_range
        return GuidanceResponse(residual=residual, weight_applied=1.0,
                                t_used=0.5 * (t0 + t1))


class NoisyScoreProvider(PhotometricProvider):
    """Stochastic mock mimicking a one-draw score estimate.

    Noises the image with one Gaussian draw and subtracts an independent
    draw, so each call is noisy but the expectation equals the photometric
    residual: E[(image + s*e1 - target) - s*e2] = image - target.
    """

    def __init__(self, targets: dict, seed: int = 0, sigma_scale: float = 0.1,
                 default_value=None):
        super().__init__(targets, default_value=default_value)
        self.rng = np.random.default_rng(seed)
        self.sigma_scale = float(sigma_scale)

    def __call__(self, request: GuidanceRequest) -> GuidanceResponse:
        request.validate()
        target = self._target(request)
        img = np.asarray(request.image, dtype=np.float64)
        t0, t1 = request.noise_range
        t = float(self.rng.uniform(t0, t1))
        sigma = self.sigma_scale * t
        e1 = self.rng.standard_normal(img.shape)
        e2 = self.rng.standard_normal(img.shape)
        residual = (img + sigma * e1 - target) - sigma * e2
        return GuidanceResponse(residual=residual, weight_applied=1.0,
                                t_used=t)


class RemoteProvider:
    """HTTP client for an external guidance service.

    POSTs JSON requests (float32 image payload, base64) and decodes the
    residual; timeouts, malformed responses, and shape mismatches surface
    as distinct error types.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0):
        if endpoint.rstrip("/").endswith("/guidance"):
            self.url = endpoint.rstrip("/")
        else:
            self.url = endpoint.rstrip("/") + "/guidance"
        self.timeout = float(timeout)
        self._next_id = 0

    def __call__(self, request: GuidanceRequest) -> GuidanceResponse:
        import requests
        from requests.exceptions import RequestException, Timeout

        request.validate()
        rid = self._next_id
        self._next_id += 1
        body = request_to_json(request, rid)
        try:
            http = requests.post(self.url, json=body, timeout=self.timeout)
        except Timeout as e:
            raise GuidanceTimeout(f"guidance request timed out: {e}") from e
        except RequestException as e:
            raise GuidanceError(f"guidance request failed: {e}") from e
        if http.status_code != 200:
            raise GuidanceError(
                f"guidance service returned HTTP {http.status_code}")
        try:
            payload = http.json()
        except ValueError as e:
            raise GuidanceProtocolError(f"response is not JSON: {e}") from e
        if not isinstance(payload, dict):
            raise GuidanceProtocolError("response JSON must be an object")
        return response_from_json(payload, request, rid)
