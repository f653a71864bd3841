"""Identity-aware SDF volume renderer.

Rays march through the scene box; consecutive SDF samples convert to
per-interval opacities via the sigmoid-ratio transform, an identity vector
picks the owning object at every sample, and object / edge / scene images
composite the selected opacities and colors behind a uniform background.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import (
    Value,
    as_value,
    clip,
    cumsum,
    exp,
    log,
    relu,
    scatter_rows,
    softmax,
    softplus,
    stack,
    straight_through,
    vsum,
)

_T_CLIP = 1e-6   # floor on (1 - alpha) before the log-space cumulative product


@dataclass
class Camera:
    position: tuple
    target: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 0.0, 1.0)
    fov_y: float = 40.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        if not (0.0 < self.fov_y < 120.0):
            raise ValueError(f"fov_y must be in (0, 120), got {self.fov_y}")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be at least 1x1")

    def validate_outside(self, bound: float) -> None:
        if np.linalg.norm(self.position) <= bound:
            raise ValueError(
                "camera position must lie outside the scene's inscribed sphere")

    def ray_directions(self) -> np.ndarray:
        """(H*W, 3) unit directions through pixel centers, row-major."""
        fwd = self.target - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        nr = np.linalg.norm(right)
        if nr < 1e-9:
            raise ValueError("camera up vector is parallel to view direction")
        right /= nr
        up = np.cross(right, fwd)
        tan_half = np.tan(np.deg2rad(self.fov_y) * 0.5)
        aspect = self.width / self.height
        xs = (2.0 * (np.arange(self.width) + 0.5) / self.width - 1.0) * tan_half * aspect
        ys = (1.0 - 2.0 * (np.arange(self.height) + 0.5) / self.height) * tan_half
        gx, gy = np.meshgrid(xs, ys)
        dirs = (fwd[None, :]
                + gx.reshape(-1, 1) * right[None, :]
                + gy.reshape(-1, 1) * up[None, :])
        return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def camera_from_angles(azimuth_deg: float, elevation_deg: float,
                       radius: float = 2.5, fov_y: float = 40.0,
                       width: int = 64, height: int = 64) -> Camera:
    """Orbit camera on the z-up sphere, looking at the origin."""
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    pos = (radius * np.cos(el) * np.cos(az),
           radius * np.cos(el) * np.sin(az),
           radius * np.sin(el))
    return Camera(position=pos, fov_y=fov_y, width=width, height=height)


@dataclass
class RaySamples:
    origins: np.ndarray        # (R, 3)
    directions: np.ndarray     # (R, 3)
    t: np.ndarray              # (Rv, N) strictly increasing per ray
    points: np.ndarray         # (Rv, N, 3)
    hit_index: np.ndarray      # (Rv,) flat pixel index of each hit ray
    n_rays: int

    @property
    def n_hit(self) -> int:
        return self.t.shape[0]


def ray_box_intersection(origins, dirs, bound: float):
    """Slab intersection with [-bound, bound]^3: (t_near, t_far, hit)."""
    safe = np.where(dirs >= 0.0, np.maximum(dirs, 1e-12),
                    np.minimum(dirs, -1e-12))
    inv = 1.0 / safe
    t0 = (-bound - origins) * inv
    t1 = (bound - origins) * inv
    t_near = np.minimum(t0, t1).max(axis=1)
    t_far = np.maximum(t0, t1).min(axis=1)
    t_near = np.maximum(t_near, 0.0)
    hit = (t_near < t_far) & (t_far > 0.0)
    return t_near, t_far, hit


def sample_rays(camera: Camera, bound: float, n_samples: int,
                rng: Optional[np.random.Generator] = None) -> RaySamples:
    """Stratified samples along each pixel ray inside the scene box.

    One sample per equal sub-interval of [t_n, t_f]; jitter comes from `rng`
    when given, otherwise samples sit at interval midpoints. Rays missing
    the box produce no samples (their pixels stay background).
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    dirs = camera.ray_directions()
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    t_near, t_far, hit = ray_box_intersection(origins, dirs, bound)
    idx = np.flatnonzero(hit)
    tn = t_near[idx][:, None]
    tf = t_far[idx][:, None]
    edges = np.linspace(0.0, 1.0, n_samples + 1)[None, :-1]
    width = (tf - tn) / n_samples
    if rng is None:
        jitter = 0.5
    else:
        jitter = rng.random(size=(idx.size, n_samples))
    t = tn + edges * (tf - tn) + jitter * width
    points = origins[idx][:, None, :] + t[..., None] * dirs[idx][:, None, :]
    return RaySamples(origins=origins, directions=dirs, t=t, points=points,
                      hit_index=idx, n_rays=dirs.shape[0])


@dataclass
class RenderedImage:
    rgb: Value                 # (H, W, 3) in [0, 1]
    opacity: Value             # (H, W) accumulated alpha-weight sum
    tag: str
    aux: dict = field(default_factory=dict)

    @property
    def rgb_array(self) -> np.ndarray:
        return np.asarray(self.rgb.data)

    @property
    def opacity_array(self) -> np.ndarray:
        return np.asarray(self.opacity.data)


def neus_opacity(u_k: Value, u_k1: Value, kappa) -> Value:
    """Per-interval opacity from consecutive SDF samples.

    alpha = max((Phi(u_k) - Phi(u_k+1)) / Phi(u_k), 0) with Phi the logistic
    sigmoid of kappa*u. Computed as 1 - Phi(u_k+1)/Phi(u_k) in log-space so
    deeply negative SDFs cannot underflow to 0/0.
    """
    kappa = as_value(kappa)
    a = u_k * kappa
    b = u_k1 * kappa
    # log sigmoid(x) = -softplus(-x); ratio = exp(logsig(b) - logsig(a))
    ratio = exp(softplus(-a) - softplus(-b))
    return relu(1.0 - ratio)


def identity_vector(u_all: Value, mode: str = "hard") -> Value:
    """Owner weights for each point from the per-object SDFs (P, M).

    mode="hard": one-hot at the minimal SDF (ties to the lowest index) with
    straight-through softmax(-u) gradients; the rendering default.
    mode="soft": plain softmax(-u), a classically differentiable surrogate
    whose gradient equals the hard mode's backward (used so finite
    differences can verify the full pixel path).
    """
    soft = softmax(-u_all, axis=1)
    if mode == "soft":
        return soft
    u = u_all.data
    hard = np.zeros_like(u)
    hard[np.arange(u.shape[0]), np.argmin(u, axis=1)] = 1.0
    return straight_through(hard, soft)


def _transmittance(alpha: Value) -> Value:
    """Exclusive cumulative product of (1 - alpha) along axis 1, in
    log-space with a clipped ratio for numerical safety."""
    s = log(clip(1.0 - alpha, _T_CLIP, 1.0))
    cum = cumsum(s, axis=1)
    return exp(cum - s)


def _integrate(alpha: Value, colors: Value, samples: RaySamples,
               background, width: int, height: int, tag: str,
               want_aux: bool) -> RenderedImage:
    """Front-to-back compositing of per-interval (alpha, color) rows into an
    image over a uniform background."""
    trans = _transmittance(alpha)
    w = alpha * trans                                   # (Rv, N-1)
    acc = vsum(w, axis=1)                               # (Rv,)
    rgb_rows = vsum(w.reshape(w.data.shape + (1,)) * colors, axis=1)  # (Rv,3)
    bg = np.asarray(background, dtype=rgb_rows.data.dtype)
    rgb_rows = rgb_rows + (1.0 - acc).reshape((-1, 1)) * bg
    n_px = width * height
    base_rgb = np.broadcast_to(bg, (n_px, 3)).astype(rgb_rows.data.dtype).copy()
    img = scatter_rows(base_rgb, samples.hit_index, rgb_rows)
    base_acc = np.zeros((n_px, 1), dtype=acc.data.dtype)
    acc_img = scatter_rows(base_acc, samples.hit_index, acc.reshape((-1, 1)))
    out = RenderedImage(rgb=img.reshape((height, width, 3)),
                        opacity=acc_img.reshape((height, width)),
                        tag=tag)
    if want_aux:
        out.aux = {"weights": w, "t": samples.t, "hit_index": samples.hit_index,
                   "alpha": alpha, "transmittance": trans}
    return out


class SceneRenderer:
    """Renders object / edge / scene images from any field implementing
    sdf_all(points), color(i, points), and kappa()."""

    def __init__(self, fields, background=(1.0, 1.0, 1.0),
                 n_samples: int = 64, identity_mode: str = "hard"):
        if identity_mode not in ("hard", "soft"):
            raise ValueError("identity_mode must be 'hard' or 'soft'")
        self.fields = fields
        self.background = np.asarray(background, dtype=np.float64)
        self.n_samples = n_samples
        self.identity_mode = identity_mode

    @property
    def bound(self) -> float:
        return self.fields.config.bound

    def _prepare(self, camera: Camera, rng, n_samples, color_objects):
        camera.validate_outside(self.bound)
        n = n_samples or self.n_samples
        samples = sample_rays(camera, self.bound, n, rng=rng)
        flat = samples.points.reshape(-1, 3)
        u_rows, colors = self.fields.eval_all(flat, color_objects=color_objects)
        u_all = stack(u_rows, axis=1)                                     # (P, M)
        lam = identity_vector(u_all, self.identity_mode)
        return samples, u_rows, u_all, lam, colors

    def _object_alpha(self, u_rows, lam: Value, i: int,
                      samples: RaySamples) -> Value:
        """lambda_i * gamma_i at interval entry samples: (Rv, N-1)."""
        rv, n = samples.t.shape
        u_i = u_rows[i].reshape((rv, n))
        lam_i = _column(lam, i).reshape((rv, n))
        gamma = neus_opacity(_window(u_i, 0, n - 1), _window(u_i, 1, n),
                             self.fields.kappa())
        return _window(lam_i, 0, n - 1) * gamma

    def render_object(self, i: int, camera: Camera, rng=None,
                      n_samples=None, want_aux=False) -> RenderedImage:
        samples, u_rows, u_all, lam, colors = self._prepare(
            camera, rng, n_samples, (i,))
        rv, n = samples.t.shape
        alpha = self._object_alpha(u_rows, lam, i, samples)
        cols = colors[i].reshape((rv, n, 3))
        out = _integrate(alpha, _entry(cols), samples, self.background,
                         camera.width, camera.height, f"object({i})", want_aux)
        if want_aux:
            out.aux.update({"u": u_all, "lam": lam, "points": samples.points})
        return out

    def _composite(self, members, samples, u_rows, u_all, lam, colors, tag,
                   camera, want_aux) -> RenderedImage:
        rv, n = samples.t.shape
        alpha = None
        color = None
        for k in members:
            a_k = self._object_alpha(u_rows, lam, k, samples)
            lam_k = _column(lam, k).reshape((rv, n))
            c_k = colors[k].reshape((rv, n, 3))
            lc = _entry(lam_k.reshape((rv, n, 1)) * c_k)
            alpha = a_k if alpha is None else alpha + a_k
            color = lc if color is None else color + lc
        out = _integrate(alpha, color, samples, self.background,
                         camera.width, camera.height, tag, want_aux)
        if want_aux:
            out.aux.update({"u": u_all, "lam": lam, "points": samples.points})
        return out

    def render_edge(self, i: int, j: int, camera: Camera, rng=None,
                    n_samples=None, want_aux=False) -> RenderedImage:
        if i == j:
            raise ValueError("edge endpoints must differ")
        members = sorted((i, j))
        samples, u_rows, u_all, lam, colors = self._prepare(
            camera, rng, n_samples, members)
        return self._composite(members, samples, u_rows, u_all, lam, colors,
                               f"edge({members[0]},{members[1]})",
                               camera, want_aux)

    def render_scene(self, camera: Camera, rng=None, n_samples=None,
                     want_aux=False) -> RenderedImage:
        members = range(self.fields.m)
        samples, u_rows, u_all, lam, colors = self._prepare(
            camera, rng, n_samples, members)
        return self._composite(members, samples, u_rows, u_all, lam, colors,
                               "scene", camera, want_aux)

    def render(self, plan_kind: str, camera: Camera, object_index=None,
               edge=None, **kw) -> RenderedImage:
        if plan_kind == "global":
            return self.render_scene(camera, **kw)
        if edge is not None:
            return self.render_edge(edge[0], edge[1], camera, **kw)
        return self.render_object(object_index, camera, **kw)


def _column(x: Value, i: int) -> Value:
    """(P, M) -> (P,) column i, on tape."""
    from .autodiff import take_unique
    p, m = x.data.shape
    flat = x.reshape((p * m,))
    return take_unique(flat, np.arange(p) * m + i)


def _window(x: Value, lo: int, hi: int) -> Value:
    """Select columns [lo, hi) along axis 1 of a 2D or 3D Value."""
    from .autodiff import take_unique
    shape = x.data.shape
    rv, n = shape[0], shape[1]
    rest = int(np.prod(shape[2:], dtype=int)) if len(shape) > 2 else 1
    flat = x.reshape((rv * n * rest,))
    rows = ((np.arange(rv)[:, None, None] * n
             + np.arange(lo, hi)[None, :, None]) * rest
            + np.arange(rest)[None, None, :])
    out = take_unique(flat, rows.reshape(-1))
    return out.reshape((rv, hi - lo) + tuple(shape[2:]))


def _entry(x: Value) -> Value:
    """Drop the last sample along axis 1: values at interval entry points."""
    return _window(x, 0, x.data.shape[1] - 1)
