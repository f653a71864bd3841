"""Mesh extraction, image/mesh file formats, and the decomposition audit."""

import json
from dataclasses import dataclass, field

import numpy as np

from .losses import penetration_count


@dataclass
class Mesh:
    vertices: np.ndarray          # (V, 3) float64
    triangles: np.ndarray         # (T, 3) int indices
    object_index: int = 0

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle indices out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices
        a = v[self.triangles[:, 1]] - v[self.triangles[:, 0]]
        b = v[self.triangles[:, 2]] - v[self.triangles[:, 0]]
        return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)

    def is_watertight(self) -> bool:
        """Every undirected edge borders exactly two triangles."""
        if self.is_empty:
            return False
        e = np.concatenate([self.triangles[:, [0, 1]],
                            self.triangles[:, [1, 2]],
                            self.triangles[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))


def _sdf_grid(fields, i: int, resolution: int, bound: float,
              chunk_rows: int = 4096) -> np.ndarray:
    """u^(i) on a regular (N, N, N) grid over the scene box, evaluated in
    bounded-size chunks; axes are (x, y, z)."""
    axis = np.linspace(-bound, bound, resolution)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    out = np.empty(pts.shape[0], dtype=np.float64)
    for lo in range(0, pts.shape[0], chunk_rows):
        hi = min(lo + chunk_rows, pts.shape[0])
        out[lo:hi] = np.asarray(fields.sdf(i, pts[lo:hi]).data,
                                dtype=np.float64)
    return out.reshape(resolution, resolution, resolution)


def marching_cubes(fields, i: int, resolution: int = 256,
                   min_area: float = 1e-12) -> Mesh:
    """Triangulate the zero level set of object i's SDF.

    A field that never changes sign has no isosurface and yields an empty
    mesh. Slivers below `min_area` are dropped.
    """
    if resolution < 16:
        raise ValueError("grid resolution must be at least 16")
    from skimage.measure import marching_cubes as _mc

    bound = fields.config.bound
    volume = _sdf_grid(fields, i, resolution, bound)
    if volume.min() > 0.0 or volume.max() < 0.0:
        return Mesh(vertices=np.zeros((0, 3)), triangles=np.zeros((0, 3)),
                    object_index=i)
    spacing = 2.0 * bound / (resolution - 1)
    verts, faces, _, _ = _mc(volume, level=0.0,
                             spacing=(spacing, spacing, spacing))
    verts = verts + np.array([-bound, -bound, -bound])
    mesh = Mesh(vertices=verts, triangles=faces, object_index=i)
    areas = mesh.triangle_areas()
    keep = areas > min_area
    if not np.all(keep):
        mesh = Mesh(vertices=mesh.vertices, triangles=mesh.triangles[keep],
                    object_index=i)
    return mesh


# -- decomposition audit ----------------------------------------------------


def sphere_overlap_volume(c1, r1, c2, r2) -> float:
    """Exact intersection volume of two spheres."""
    d = float(np.linalg.norm(np.asarray(c1, float) - np.asarray(c2, float)))
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        r = min(r1, r2)
        return 4.0 / 3.0 * np.pi * r ** 3
    return (np.pi * (r1 + r2 - d) ** 2
            * (d * d + 2.0 * d * (r1 + r2) - 3.0 * (r1 - r2) ** 2)
            / (12.0 * d))


@dataclass
class AuditReport:
    n_samples: int
    box_volume: float
    occupancy: np.ndarray         # (M,) per-object volume estimates
    overlap: np.ndarray           # (M, M) symmetric pairwise overlap volumes
    histogram: np.ndarray         # points inside exactly k objects
    naive_penetration: float
    iou: dict = field(default_factory=dict)   # object index -> IoU vs reference

    @property
    def m(self) -> int:
        return len(self.occupancy)

    def pairs(self):
        for i in range(self.m):
            for j in range(i + 1, self.m):
                yield i, j, float(self.overlap[i, j])

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "box_volume": self.box_volume,
            "occupancy": [float(v) for v in self.occupancy],
            "overlap": [[float(v) for v in row] for row in self.overlap],
            "histogram": [int(v) for v in self.histogram],
            "naive_penetration": self.naive_penetration,
            "iou": {str(k): float(v) for k, v in self.iou.items()},
        }

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def audit_decomposition(fields, n_samples: int = 100000, seed: int = 0,
                        reference_spheres=None,
                        chunk_rows: int = 16384) -> AuditReport:
    """Monte-Carlo separation metrics over the scene box.

    Estimates per-object occupied volume, pairwise overlap volumes, and the
    penetration histogram; when reference spheres (center, radius) are
    given, also per-object occupancy IoU against them.
    """
    bound = fields.config.bound
    box_volume = (2.0 * bound) ** 3
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-bound, bound, size=(n_samples, 3))
    m = fields.m
    inside = np.empty((n_samples, m), dtype=bool)
    u = np.empty((n_samples, m), dtype=np.float64)
    for lo in range(0, n_samples, chunk_rows):
        hi = min(lo + chunk_rows, n_samples)
        u[lo:hi] = fields.sdf_all(pts[lo:hi]).data
    inside = u < 0.0

    occupancy = inside.mean(axis=0) * box_volume
    overlap = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            frac = np.mean(inside[:, i] & inside[:, j])
            overlap[i, j] = overlap[j, i] = frac * box_volume
    report_counts = penetration_count(u)
    iou = {}
    if reference_spheres is not None:
        for i, (center, radius) in enumerate(reference_spheres):
            ref = np.linalg.norm(pts - np.asarray(center, float),
                                 axis=1) < radius
            union = np.mean(inside[:, i] | ref)
            inter = np.mean(inside[:, i] & ref)
            iou[i] = float(inter / union) if union > 0 else 1.0
    return AuditReport(n_samples=n_samples, box_volume=box_volume,
                       occupancy=occupancy, overlap=overlap,
                       histogram=report_counts.histogram,
                       naive_penetration=report_counts.naive_loss, iou=iou)


# -- file formats -----------------------------------------------------------


def write_obj(mesh: Mesh, path) -> None:
    """ASCII OBJ, 1-based vertex indices."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# object {mesh.object_index}: "
                 f"{len(mesh.vertices)} vertices, "
                 f"{len(mesh.triangles)} triangles\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def read_obj(path) -> Mesh:
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return Mesh(vertices=np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                triangles=np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def write_png(image: np.ndarray, path) -> None:
    """8-bit PNG from floats in [0, 1]."""
    from PIL import Image

    arr = np.asarray(image, dtype=np.float64)
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path)


def write_pfm(image: np.ndarray, path) -> None:
    """Little-endian float32 PFM; round-trips bit-exactly."""
    arr = np.asarray(image, dtype="<f4")
    if arr.ndim == 2:
        header = b"Pf\n"
        h, w = arr.shape
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF\n"
        h, w = arr.shape[:2]
    else:
        raise ValueError(f"PFM needs (H,W) or (H,W,3), got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")                       # negative scale: little-endian
        fh.write(arr[::-1].tobytes())             # bottom-to-top rows


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"not a PFM file (header {kind!r})")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * (3 if kind == b"PF" else 1)
        data = np.frombuffer(fh.read(4 * count), dtype=dtype)
    shape = (h, w, 3) if kind == b"PF" else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB (inf for identical images)."""
    mse = float(np.mean((np.asarray(a, np.float64)
                         - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)
