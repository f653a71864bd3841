"""Object fields: per-object hash-grid encoders with shared SDF/color decoders.

Every object owns a multi-resolution hash-grid encoder producing an F-dim
feature per 3D point; a single shared shallow MLP maps feature (+ raw
position) to a signed distance, and a second shared MLP maps feature to an
RGB color in [0,1]. A trainable steepness scalar (kept in log-space so it
stays positive) drives the opacity transform in the renderer. Analytic
sphere fields with the same evaluation interface serve as test oracles and
as ground-truth scenes for mock guidance.
"""

import json
import struct
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Tape, Value, as_value, backward, concat, exp, matmul, sigmoid, softplus, vmean, gather_interp
from .optim import Adam

_HASH_PRIMES = (np.uint32(1), np.uint32(2654435761), np.uint32(805459861))

# corner offsets of a cell, bit k of the row index selects axis k's far face
_CORNERS = np.array([[(c >> a) & 1 for a in range(3)] for c in range(8)],
                    dtype=np.int64)


@dataclass
class FieldConfig:
    levels: int = 8
    features_per_level: int = 2
    table_size: int = 2 ** 16
    base_resolution: int = 16
    max_resolution: int = 256
    sdf_hidden: tuple = (32,)
    color_hidden: tuple = (32,)
    kappa_init: float = 10.0
    bound: float = 1.0

    @property
    def feature_dim(self) -> int:
        return self.levels * self.features_per_level

    def level_resolutions(self) -> list:
        if self.levels == 1:
            return [self.base_resolution]
        growth = (self.max_resolution / self.base_resolution) ** (1.0 / (self.levels - 1))
        return [int(np.floor(self.base_resolution * growth ** l + 0.5))
                for l in range(self.levels)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sdf_hidden"] = list(self.sdf_hidden)
        d["color_hidden"] = list(self.color_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        d = dict(d)
        d["sdf_hidden"] = tuple(d.get("sdf_hidden", (32,)))
        d["color_hidden"] = tuple(d.get("color_hidden", (32,)))
        return cls(**d)


@dataclass
class SceneSpace:
    """Axis-aligned scene box [-bound, bound]^3 plus per-object init spheres."""
    bound: float = 1.0
    spheres: list = field(default_factory=list)   # (center (3,), radius) pairs

    def validate(self) -> None:
        for c, r in self.spheres:
            if r <= 0:
                raise ValueError("init sphere radius must be > 0")
            if np.max(np.abs(np.asarray(c))) + r > self.bound + 1e-9:
                raise ValueError(
                    f"init sphere (center {list(c)}, radius {r}) exceeds scene bounds")

    def to_dict(self) -> dict:
        return {"bound": self.bound,
                "spheres": [{"center": [float(x) for x in c], "radius": float(r)}
                            for c, r in self.spheres]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpace":
        return cls(bound=float(d["bound"]),
                   spheres=[(np.array(s["center"], dtype=np.float64), float(s["radius"]))
                            for s in d["spheres"]])


def default_layout(m: int, bound: float = 1.0) -> list:
    """Default init spheres: one centered sphere, or M spheres evenly spaced
    on a horizontal circle, radii shrunk until pairwise disjoint."""
    if m == 1:
        return [(np.zeros(3), 0.5 * bound)]
    ring = 0.4 * bound
    angles = 2.0 * np.pi * np.arange(m) / m
    centers = np.stack([ring * np.cos(angles), ring * np.sin(angles),
                        np.zeros(m)], axis=1)
    gap = 2.0 * ring * np.sin(np.pi / m)         # adjacent center distance
    radius = min(0.3 * bound, 0.45 * gap, bound - ring)
    return [(centers[i], radius) for i in range(m)]


def space_from_graph(g, config: FieldConfig) -> SceneSpace:
    """Init layout for a scene graph: defaults overridden per node."""
    layout = default_layout(g.M, config.bound)
    spheres = []
    for i, node in enumerate(g.nodes):
        c = np.asarray(node.init_center, dtype=np.float64) \
            if node.init_center is not None else layout[i][0]
        r = float(node.init_radius) if node.init_radius is not None else layout[i][1]
        spheres.append((c, r))
    space = SceneSpace(bound=config.bound, spheres=spheres)
    space.validate()
    return space


class HashGridEncoder:
    """Multi-resolution trilinear feature grid for one object.

    Levels whose dense vertex count fits in the table are indexed directly;
    larger levels fall back to the XOR prime hash. Table entries start near
    zero so untrained features are nearly silent.
    """

    def __init__(self, config: FieldConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.resolutions = config.level_resolutions()
        self.tables = []
        self.table_rows = []
        for res in self.resolutions:
            dense = (res + 1) ** 3
            rows = min(dense, config.table_size)
            self.table_rows.append(rows)
            init = rng.uniform(-1e-4, 1e-4,
                               size=(rows, config.features_per_level))
            self.tables.append(Value(init.astype(dtype), requires_grad=True))

    def _corner_indices(self, res: int, rows: int, i0: np.ndarray) -> np.ndarray:
        """(P,3) integer cell origins -> (P,8) table rows for the 8 corners."""
        n_verts = res + 1
        if n_verts ** 3 <= self.config.table_size:
            base = i0[:, 0] + n_verts * (i0[:, 1] + n_verts * i0[:, 2])
            offs = (_CORNERS[:, 0] + n_verts * (_CORNERS[:, 1]
                                                + n_verts * _CORNERS[:, 2]))
            return base[:, None] + offs[None, :]
        # per-axis hashed halves, combined by XOR over the corner bits
        parts = []
        for a, prime in enumerate(_HASH_PRIMES):
            v = i0[:, a].astype(np.uint32)
            parts.append(np.stack([v * prime, (v + np.uint32(1)) * prime], axis=1))
        h = (parts[0][:, _CORNERS[:, 0]]
             ^ parts[1][:, _CORNERS[:, 1]]
             ^ parts[2][:, _CORNERS[:, 2]])
        return (h % np.uint32(rows)).astype(np.int64)

    def interpolation(self, points01: np.ndarray) -> list:
        """Per level: (idx (P,8), weights (P,8)) trilinear interpolation data.

        Purely geometric, so the result is shared by every encoder with the
        same configuration (the hash layout depends only on resolutions)."""
        out = []
        for res, rows in zip(self.resolutions, self.table_rows):
            xs = points01 * res
            i0 = np.clip(np.floor(xs), 0, res - 1).astype(np.int64)
            frac = (xs - i0).astype(self.dtype)
            idx = self._corner_indices(res, rows, i0)
            gx = np.stack([1.0 - frac[:, 0], frac[:, 0]], axis=1)
            gy = np.stack([1.0 - frac[:, 1], frac[:, 1]], axis=1)
            gz = np.stack([1.0 - frac[:, 2], frac[:, 2]], axis=1)
            w = (gx[:, _CORNERS[:, 0]]
                 * gy[:, _CORNERS[:, 1]]
                 * gz[:, _CORNERS[:, 2]])
            out.append((idx, w))
        return out

    def encode(self, points01: np.ndarray, interp: list = None) -> Value:
        """points01: (P,3) in [0,1]^3 -> (P, L*F) feature Value."""
        if interp is None:
            interp = self.interpolation(points01)
        feats = [gather_interp(table, idx, w)
                 for table, (idx, w) in zip(self.tables, interp)]
        return concat(feats, axis=1)


class MLP:
    """Dense stack with softplus hidden units; optional sigmoid output."""

    def __init__(self, sizes, rng: np.random.Generator, dtype=np.float32,
                 sigmoid_output=False):
        self.sizes = tuple(sizes)
        self.sigmoid_output = sigmoid_output
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = np.sqrt(2.0 / fan_in)
            w = rng.normal(0.0, scale, size=(fan_in, fan_out)).astype(dtype)
            self.weights.append(Value(w, requires_grad=True))
            self.biases.append(Value(np.zeros(fan_out, dtype=dtype),
                                     requires_grad=True))

    def __call__(self, x: Value) -> Value:
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = matmul(h, w) + b
            if k < last:
                h = softplus(h)
        return sigmoid(h) if self.sigmoid_output else h


class FieldSet:
    """All trainable state for one scene: M encoders, shared decoders, κ."""

    def __init__(self, m: int, config: FieldConfig = None, space: SceneSpace = None,
                 seed: int = 0, dtype=np.float32, debug: bool = False):
        self.config = config or FieldConfig()
        self.space = space or SceneSpace(
            bound=self.config.bound,
            spheres=default_layout(m, self.config.bound))
        if len(self.space.spheres) != m:
            raise ValueError("space must carry one init sphere per object")
        self.space.validate()
        self.m = m
        self.dtype = dtype
        self.debug = debug
        rng = np.random.default_rng(seed)
        self.encoders = [HashGridEncoder(self.config, rng, dtype)
                         for _ in range(m)]
        f = self.config.feature_dim
        self.sdf_mlp = MLP((f + 3,) + self.config.sdf_hidden + (1,), rng, dtype)
        self.color_mlp = MLP((f,) + self.config.color_hidden + (3,), rng, dtype,
                             sigmoid_output=True)
        self.log_kappa = Value(
            np.asarray(np.log(self.config.kappa_init), dtype=dtype),
            requires_grad=True)

    # -- parameter plumbing ------------------------------------------------

    def named_parameters(self) -> list:
        out = []
        for i, enc in enumerate(self.encoders):
            for l, t in enumerate(enc.tables):
                out.append((f"enc{i}.table{l}", t))
        for k, (w, b) in enumerate(zip(self.sdf_mlp.weights, self.sdf_mlp.biases)):
            out.append((f"sdf.w{k}", w))
            out.append((f"sdf.b{k}", b))
        for k, (w, b) in enumerate(zip(self.color_mlp.weights, self.color_mlp.biases)):
            out.append((f"color.w{k}", w))
            out.append((f"color.b{k}", b))
        out.append(("log_kappa", self.log_kappa))
        return out

    def parameters(self) -> list:
        return [v for _, v in self.named_parameters()]

    def optimizer_params(self, lr_tables: float, lr_mlps: float) -> list:
        """(name, value, lr) triples: hash tables fast, decoders and κ slow."""
        out = []
        for name, v in self.named_parameters():
            lr = lr_tables if name.startswith("enc") else lr_mlps
            out.append((name, v, lr))
        return out

    def zero_grad(self):
        for _, v in self.named_parameters():
            v.zero_grad()

    # -- evaluation --------------------------------------------------------

    def _normalize(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=self.dtype)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (P,3), got {pts.shape}")
        b = self.config.bound
        if self.debug and (np.abs(pts) > b + 1e-6).any():
            warnings.warn("field evaluated outside scene bounds; clamping")
        pts = np.clip(pts, -b, b)
        return (pts + b) / (2.0 * b)

    def encode(self, i: int, points: np.ndarray) -> Value:
        return self.encoders[i].encode(self._normalize(points))

    def sdf(self, i: int, points: np.ndarray) -> Value:
        feats = self.encode(i, points)
        pts = as_value(np.clip(np.asarray(points, dtype=self.dtype),
                               -self.config.bound, self.config.bound))
        out = self.sdf_mlp(concat([feats, pts], axis=1))
        return out.reshape((out.data.shape[0],))

    def color(self, i: int, points: np.ndarray) -> Value:
        return self.color_mlp(self.encode(i, points))

    def eval_all(self, points: np.ndarray, color_objects=()) -> tuple:
        """Batched evaluation of every object at the same points.

        Runs one shared-decoder pass over the concatenated per-object
        features (much faster than per-object calls on one core). Returns
        (u_rows, colors): u_rows is a list of M (P,) SDF Values; colors maps
        each requested object index to a (P,3) color Value.
        """
        from .autodiff import slice1d
        pts01 = self._normalize(points)
        p = pts01.shape[0]
        interp = self.encoders[0].interpolation(pts01)
        feats = [enc.encode(pts01, interp) for enc in self.encoders]
        feats_all = concat(feats, axis=0) if self.m > 1 else feats[0]
        b = self.config.bound
        pos = np.clip(np.asarray(points, dtype=self.dtype), -b, b)
        pos_all = np.tile(pos, (self.m, 1)) if self.m > 1 else pos
        u_flat = self.sdf_mlp(concat([feats_all, as_value(pos_all)], axis=1))
        u_flat = u_flat.reshape((self.m * p,))
        u_rows = [slice1d(u_flat, i * p, (i + 1) * p) for i in range(self.m)]
        colors = {}
        if len(color_objects):
            wanted = sorted(set(color_objects))
            cf = concat([feats[k] for k in wanted], axis=0) \
                if len(wanted) > 1 else feats[wanted[0]]
            c_flat = self.color_mlp(cf).reshape((len(wanted) * p * 3,))
            for slot, k in enumerate(wanted):
                colors[k] = slice1d(c_flat, slot * p * 3,
                                    (slot + 1) * p * 3).reshape((p, 3))
        return u_rows, colors

    def sdf_all(self, points: np.ndarray) -> Value:
        """(P, M) signed distances of every object at the same points."""
        from .autodiff import stack
        u_rows, _ = self.eval_all(points)
        return stack(u_rows, axis=1)

    def kappa(self) -> Value:
        return exp(self.log_kappa)

    def spatial_gradient(self, i: int, points: np.ndarray, h: float = 5e-3) -> Value:
        """On-tape central-difference gradient of u_i along each axis.

        Six probe evaluations keep the result differentiable w.r.t. the
        field parameters without second-order tape support.
        """
        from .autodiff import stack
        pts = np.asarray(points, dtype=np.float64)
        comps = []
        for a in range(3):
            off = np.zeros(3)
            off[a] = h
            up = self.sdf(i, pts + off)
            dn = self.sdf(i, pts - off)
            comps.append((up - dn) * (0.5 / h))
        return stack(comps, axis=1)


class AnalyticSphere:
    """Closed-form sphere SDF oracle: u(p) = ||p - c|| - r."""

    def __init__(self, center, radius: float, color=(0.5, 0.5, 0.5)):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.color_value = np.asarray(color, dtype=np.float64)

    def sdf_np(self, points: np.ndarray) -> np.ndarray:
        d = np.linalg.norm(np.asarray(points, dtype=np.float64) - self.center,
                           axis=-1)
        return d - self.radius

    def normal_np(self, points: np.ndarray) -> np.ndarray:
        diff = np.asarray(points, dtype=np.float64) - self.center
        n = np.linalg.norm(diff, axis=-1, keepdims=True)
        return diff / np.maximum(n, 1e-12)


class AnalyticSceneField:
    """Drop-in renderable field backed by analytic spheres (fixed κ).

    Mirrors the FieldSet evaluation interface so the renderer can draw
    ground-truth scenes and oracle references without trainable state.
    """

    def __init__(self, spheres, kappa: float = 25.0, bound: float = 1.0,
                 dtype=np.float64):
        self.spheres = list(spheres)
        self.m = len(self.spheres)
        self._kappa = float(kappa)
        self.dtype = dtype
        self.config = FieldConfig(bound=bound)
        self.space = SceneSpace(
            bound=bound,
            spheres=[(s.center, s.radius) for s in self.spheres])

    def sdf(self, i: int, points: np.ndarray) -> Value:
        return as_value(self.spheres[i].sdf_np(points).astype(self.dtype))

    def color(self, i: int, points: np.ndarray) -> Value:
        p = np.asarray(points)
        cols = np.broadcast_to(self.spheres[i].color_value.astype(self.dtype),
                               (p.shape[0], 3)).copy()
        return as_value(cols)

    def sdf_all(self, points: np.ndarray) -> Value:
        from .autodiff import stack
        return stack([self.sdf(i, points) for i in range(self.m)], axis=1)

    def eval_all(self, points: np.ndarray, color_objects=()) -> tuple:
        u_rows = [self.sdf(i, points) for i in range(self.m)]
        colors = {k: self.color(k, points) for k in sorted(set(color_objects))}
        return u_rows, colors

    def kappa(self) -> Value:
        return as_value(np.asarray(self._kappa, dtype=self.dtype))

    def spatial_gradient(self, i: int, points: np.ndarray, h: float = 5e-3) -> Value:
        from .autodiff import stack
        pts = np.asarray(points, dtype=np.float64)
        comps = []
        for a in range(3):
            off = np.zeros(3)
            off[a] = h
            comps.append((self.sdf(i, pts + off) - self.sdf(i, pts - off)) * (0.5 / h))
        return stack(comps, axis=1)


# ---------------------------------------------------------------------------
# sphere initialization (supervised pre-fit)

def prefit_spheres(fields: FieldSet, steps: int = 500, batch: int = 512,
                   seed: int = 0, lr_tables: float = 1e-2, lr_mlps: float = 1e-3,
                   color_target=0.5) -> list:
    """Fit every object's SDF to its init sphere and its color to a flat
    gray by supervised regression. Returns the per-step loss history."""
    rng = np.random.default_rng(seed)
    opt = Adam(fields.optimizer_params(lr_tables, lr_mlps))
    oracles = [AnalyticSphere(c, r) for c, r in fields.space.spheres]
    b = fields.config.bound
    history = []
    for _ in range(steps):
        # uniform points plus points concentrated near each surface
        pts_uniform = rng.uniform(-b, b, size=(batch, 3))
        loss_terms = []
        with Tape():
            for i, sphere in enumerate(oracles):
                shell = sphere.center + rng.normal(
                    0.0, 0.5 * sphere.radius, size=(batch // 2, 3))
                # anchor the center and the six axis poles every step
                poles = sphere.center + sphere.radius * np.concatenate(
                    [np.zeros((1, 3)), np.eye(3), -np.eye(3)], axis=0)
                pts = np.clip(np.concatenate([pts_uniform, shell, poles], axis=0),
                              -b, b)
                target = sphere.sdf_np(pts).astype(fields.dtype)
                u = fields.sdf(i, pts)
                du = u - as_value(target)
                loss_terms.append(vmean(du * du))
                col = fields.color(i, pts[::4])
                dc = col - float(color_target)
                loss_terms.append(vmean(dc * dc) * 0.1)
            loss = loss_terms[0]
            for t in loss_terms[1:]:
                loss = loss + t
            opt.zero_grad()
            backward(loss, [v for _, v, _ in opt.params])
        opt.step()
        history.append(float(loss.data))
    return history


def init_spheres(g, config: FieldConfig = None, seed: int = 0,
                 steps: int = 500, batch: int = 512, dtype=np.float32) -> FieldSet:
    """Build a FieldSet for graph g with every object pre-fit to its init
    sphere (graph-supplied center/radius when present, default layout
    otherwise)."""
    config = config or FieldConfig()
    space = space_from_graph(g, config)
    fields = FieldSet(g.M, config=config, space=space, seed=seed, dtype=dtype)
    prefit_spheres(fields, steps=steps, batch=batch, seed=seed + 1)
    return fields


# ---------------------------------------------------------------------------
# checkpoint serialization (versioned, little-endian float32 payload)

_MAGIC = b"SDFC"
_VERSION = 1


def save_checkpoint(path, fields: FieldSet, extra: dict = None) -> None:
    """Write parameters (little-endian float32), config, space, and any
    JSON-serializable extra state under a versioned header."""
    named = fields.named_parameters()
    meta = {
        "m": fields.m,
        "config": fields.config.to_dict(),
        "space": fields.space.to_dict(),
        "arrays": [{"name": n, "shape": list(v.data.shape)} for n, v in named],
        "extra": extra or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        for _, v in named:
            fh.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Read a checkpoint; returns (FieldSet, extra dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        fields = FieldSet(meta["m"],
                          config=FieldConfig.from_dict(meta["config"]),
                          space=SceneSpace.from_dict(meta["space"]),
                          dtype=dtype)
        named = dict(fields.named_parameters())
        for spec in meta["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * count)
            arr = np.frombuffer(buf, dtype="<f4").reshape(shape)
            target = named[spec["name"]]
            target.data = arr.astype(dtype)
    return fields, meta["extra"]
