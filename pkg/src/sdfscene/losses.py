"""Training objective assembly.

Per step: score-distillation injections routed by the step plan (object +
incident-edge images on object steps, the scene image on global steps),
plus a penetration penalty keeping each point inside at most one object and
an Eikonal penalty keeping every field unit-gradient.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Value, as_value, inject_gradient, relu, slice1d, sqrt, vsum
from .guidance import GuidanceRequest, GuidanceResponse

DEFAULT_COEFFICIENTS = (1.0, 100.0, 10.0)

LOSS_CSV_COLUMNS = ("step", "kind", "sds_count", "penet", "eikonal", "total")


class LossError(RuntimeError):
    pass


@dataclass
class SdsTerm:
    image: object                # RenderedImage the residual was injected into
    prompt: str
    residual: np.ndarray
    response: GuidanceResponse


@dataclass
class LossBundle:
    sds_terms: list
    penetration: Value
    eikonal: Value
    coefficients: tuple
    objective: Value             # scalar to backpropagate

    @property
    def sds_count(self) -> int:
        return len(self.sds_terms)

    def csv_row(self, step: int, kind: str) -> list:
        return [step, kind, self.sds_count,
                float(self.penetration.data), float(self.eikonal.data),
                float(self.objective.data)]


@dataclass
class PenetrationReport:
    counts: np.ndarray           # per-point number of objects claiming it
    naive_loss: float            # mean of max(0, count - 1)
    histogram: np.ndarray        # histogram[k] = points inside exactly k objects

    @property
    def worst(self) -> int:
        return int(self.counts.max()) if self.counts.size else 0


def sds_inject(image, prompt: str, provider, *, step: int = 0,
               stage: str = "coarse", cfg_weight: float = 50.0,
               noise_range=(0.02, 0.98)):
    """Fetch the guidance residual for (image, prompt) and inject it.

    Returns (pseudo_loss, response); backpropagating the pseudo-loss sends
    exactly the residual into the image's pixels and onward to parameters.
    """
    rgb = image.rgb if hasattr(image, "rgb") else image
    request = GuidanceRequest(image=np.asarray(rgb.data, dtype=np.float64),
                              prompt=prompt, step=step, stage=stage,
                              cfg_weight=cfg_weight, noise_range=noise_range)
    response = provider(request)
    response.validate_against(request)
    residual = np.asarray(response.residual, dtype=rgb.data.dtype)
    return inject_gradient(rgb, residual), response


def penetration_loss(u_all: Value, lam: Value) -> Value:
    """Keep every point inside at most one object.

    The owner (minimal-SDF object) claims the point with depth
    d = relu(lam . -u); every other object pays relu(d - u_j)^2, pushing
    non-owner SDFs positive (out to depth d). Normalized by (M-1) * points.
    """
    p, m = u_all.data.shape
    if m < 2:
        return as_value(np.asarray(0.0, dtype=u_all.data.dtype))
    depth = relu(vsum(lam * (-u_all), axis=1))          # (P,)
    terms = relu(depth.reshape((p, 1)) - u_all)
    nonowner = np.ones((p, m), dtype=u_all.data.dtype)
    nonowner[np.arange(p), np.argmin(u_all.data, axis=1)] = 0.0
    return vsum(terms * terms * nonowner) / ((m - 1) * p)


def penetration_count(u_all) -> PenetrationReport:
    """Non-differentiable diagnostic: how many objects claim each point.

    A point exactly on a surface (u = 0) counts as outside.
    """
    u = u_all.data if isinstance(u_all, Value) else np.asarray(u_all)
    m = u.shape[1]
    counts = (u < 0.0).sum(axis=1)
    naive = np.maximum(counts - 1, 0)
    hist = np.bincount(counts, minlength=m + 1)
    return PenetrationReport(counts=counts,
                             naive_loss=float(naive.mean()) if counts.size else 0.0,
                             histogram=hist)


def eikonal_loss(fields, points: np.ndarray, h: float = 1e-3) -> Value:
    """Mean squared deviation of every object's SDF gradient norm from 1.

    Gradients come from central differences evaluated through the tape, so
    the penalty is itself differentiable in the field parameters.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    p = pts.shape[0]
    if p == 0:
        raise LossError("eikonal loss needs at least one sample point")
    offsets = np.zeros((6, 1, 3))
    for axis in range(3):
        offsets[2 * axis, 0, axis] = h
        offsets[2 * axis + 1, 0, axis] = -h
    probes = (pts[None, :, :] + offsets).reshape(-1, 3)
    u_rows, _ = fields.eval_all(probes)
    total = None
    for u in u_rows:
        sq = None
        for axis in range(3):
            hi = slice1d(u, (2 * axis) * p, (2 * axis + 1) * p)
            lo = slice1d(u, (2 * axis + 1) * p, (2 * axis + 2) * p)
            g = (hi - lo) / (2.0 * h)
            sq = g * g if sq is None else sq + g * g
        norm = sqrt(sq + 1e-18)
        dev = norm - 1.0
        term = vsum(dev * dev)
        total = term if total is None else total + term
    return total / (len(u_rows) * p)


def subsample_points(points: np.ndarray, n: int, step: int = 0) -> np.ndarray:
    """Deterministic strided subset of the flattened sample points; the
    offset rotates with the step so successive steps cover different rows."""
    flat = np.asarray(points).reshape(-1, 3)
    p = flat.shape[0]
    if p <= n:
        return flat
    stride = p // n
    offset = (step * 7919) % stride if stride > 1 else 0
    return flat[offset::stride][:n]


def total_loss(plan, renders, prompts, fields, provider, aux, *,
               coefficients=DEFAULT_COEFFICIENTS, eikonal_points=None,
               n_eikonal: int = 512, eikonal_h: float = 1e-3,
               stage: str = "coarse", cfg_weight: float = 50.0,
               noise_range=(0.02, 0.98)) -> LossBundle:
    """Assemble one step's objective from its plan and rendered images.

    Object steps inject guidance into the object image and, when the node
    has an incident edge, the edge image (two injections at most); global
    steps inject into the scene image alone. Penetration and Eikonal
    penalties apply on every step.
    """
    b1, b2, b3 = coefficients
    # beta_2 = beta_3 = 0 legitimately disables a constraint (ablations);
    # negative weights never make sense
    if b1 <= 0 or b2 < 0 or b3 < 0:
        raise LossError("loss coefficients must be nonnegative with beta_1 > 0")
    if len(renders) != len(prompts):
        raise LossError("each rendered image needs exactly one prompt")
    _check_plan(plan, renders)

    terms = []
    pseudo = None
    for image, prompt in zip(renders, prompts):
        loss_i, resp = sds_inject(image, prompt, provider, step=plan.step,
                                  stage=stage, cfg_weight=cfg_weight,
                                  noise_range=noise_range)
        terms.append(SdsTerm(image=image, prompt=prompt,
                             residual=resp.residual, response=resp))
        pseudo = loss_i if pseudo is None else pseudo + loss_i

    pen = penetration_loss(aux["u"], aux["lam"])
    pts = eikonal_points if eikonal_points is not None else subsample_points(
        aux["points"], n_eikonal, plan.step)
    eik = eikonal_loss(fields, pts, h=eikonal_h)
    objective = b1 * pseudo + b2 * pen + b3 * eik
    return LossBundle(sds_terms=terms, penetration=pen, eikonal=eik,
                      coefficients=(b1, b2, b3), objective=objective)


def _check_plan(plan, renders) -> None:
    tags = [r.tag for r in renders]
    if plan.kind == "global":
        if tags != ["scene"]:
            raise LossError(f"global step expects one scene render, got {tags}")
        return
    if plan.kind != "object":
        raise LossError(f"unknown step kind {plan.kind!r}")
    want = 2 if plan.edge is not None else 1
    if len(tags) != want:
        raise LossError(f"object step with edge={plan.edge} expects "
                        f"{want} renders, got {tags}")
    if tags[0] != f"object({plan.object_index})":
        raise LossError(f"first render {tags[0]} does not match plan object "
                        f"{plan.object_index}")
    if plan.edge is not None:
        lo, hi = sorted(plan.edge)
        if tags[1] != f"edge({lo},{hi})":
            raise LossError(f"second render {tags[1]} does not match plan "
                            f"edge {plan.edge}")
