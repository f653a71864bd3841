"""Two-stage training loop: coarse low-resolution fitting, then a fine pass.

Each step follows the plan from the step router: render the planned images,
inject guidance residuals, add penetration and Eikonal penalties, and apply
exactly one optimizer update. State (parameters, moments, counters, RNG) is
fully serializable so a resumed run reproduces the uninterrupted trajectory.
"""

import csv
import hashlib
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import (
    FieldConfig,
    FieldSet,
    load_checkpoint,
    prefit_spheres,
    save_checkpoint,
    space_from_graph,
)
from .graph import EdgeRotation, SceneGraph, build_step_plan, decompose_prompts
from .guidance import GuidanceError
from .losses import DEFAULT_COEFFICIENTS, LOSS_CSV_COLUMNS, total_loss
from .optim import Adam
from .render import Camera, SceneRenderer, camera_from_angles
from .autodiff import Tape, backward


class TrainError(RuntimeError):
    pass


@dataclass
class CameraDistribution:
    azimuth: tuple = (0.0, 360.0)
    elevation: tuple = (-10.0, 45.0)
    radius: float = 2.5
    fov_y: float = 40.0

    def to_dict(self) -> dict:
        return {"azimuth": list(self.azimuth), "elevation": list(self.elevation),
                "radius": self.radius, "fov_y": self.fov_y}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraDistribution":
        return cls(azimuth=tuple(d["azimuth"]), elevation=tuple(d["elevation"]),
                   radius=float(d["radius"]), fov_y=float(d["fov_y"]))


def sample_camera(rng: np.random.Generator, dist: CameraDistribution,
                  width: int, height: int) -> Camera:
    """Random orbit view: azimuth and elevation uniform over the configured
    ranges, fixed radius and field of view, always looking at the origin."""
    az = float(rng.uniform(dist.azimuth[0], dist.azimuth[1]))
    el = float(rng.uniform(dist.elevation[0], dist.elevation[1]))
    return camera_from_angles(az, el, radius=dist.radius, fov_y=dist.fov_y,
                              width=width, height=height)


def camera_for_step(config, step: int, attempt: int = 0) -> Camera:
    """The view train_step renders at `step`: a pure function of the seed,
    so resumed runs see the same camera sequence as uninterrupted ones and
    external tools can reconstruct the view for any logged step."""
    stage = config.stage_of(step)
    res = config.resolution(stage)
    rng = np.random.default_rng((config.seed, step, attempt))
    return sample_camera(rng, config.camera, res, res)


@dataclass
class TrainConfig:
    steps_coarse: int = 10000
    steps_fine: int = 10000
    res_coarse: int = 64
    res_fine: int = 256
    n_samples_coarse: int = 64
    n_samples_fine: int = 128
    lr_tables: float = 1e-2
    lr_mlps: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    coefficients: tuple = DEFAULT_COEFFICIENTS
    cfg_coarse: float = None        # None: 50 for M <= 2, 100 for M >= 3
    cfg_fine: float = 50.0
    noise_range: tuple = (0.02, 0.98)
    camera: CameraDistribution = field(default_factory=CameraDistribution)
    n_eikonal: int = 512
    eikonal_h: float = 1e-3
    background: tuple = (1.0, 1.0, 1.0)
    prompt_style: str = "full"
    prefit_steps: int = 500
    prefit_batch: int = 512
    checkpoint_every: int = 100
    retry_limit: int = 3

    def validate(self) -> None:
        if self.steps_coarse <= 0 or self.steps_fine < 0:
            raise ValueError("stage step counts must be positive")
        if self.res_coarse < 16 or (self.steps_fine > 0 and self.res_fine < 16):
            raise ValueError("stage resolutions must be at least 16")
        b1, b2, b3 = self.coefficients
        if b1 <= 0 or b2 < 0 or b3 < 0:
            raise ValueError("loss coefficients must be nonnegative "
                             "with beta_1 > 0")
        if self.retry_limit < 1:
            raise ValueError("retry_limit must be at least 1")

    @property
    def total_steps(self) -> int:
        return self.steps_coarse + self.steps_fine

    def stage_of(self, step: int) -> str:
        return "coarse" if step < self.steps_coarse else "fine"

    def resolution(self, stage: str) -> int:
        return self.res_coarse if stage == "coarse" else self.res_fine

    def n_samples(self, stage: str) -> int:
        return self.n_samples_coarse if stage == "coarse" else self.n_samples_fine

    def cfg_weight(self, stage: str, m: int) -> float:
        if stage == "coarse":
            if self.cfg_coarse is not None:
                return float(self.cfg_coarse)
            return 50.0 if m <= 2 else 100.0
        return float(self.cfg_fine)

    def to_dict(self) -> dict:
        d = {
            "steps_coarse": self.steps_coarse, "steps_fine": self.steps_fine,
            "res_coarse": self.res_coarse, "res_fine": self.res_fine,
            "n_samples_coarse": self.n_samples_coarse,
            "n_samples_fine": self.n_samples_fine,
            "lr_tables": self.lr_tables, "lr_mlps": self.lr_mlps,
            "adam_beta1": self.adam_beta1, "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps, "seed": self.seed,
            "coefficients": list(self.coefficients),
            "cfg_coarse": self.cfg_coarse, "cfg_fine": self.cfg_fine,
            "noise_range": list(self.noise_range),
            "camera": self.camera.to_dict(),
            "n_eikonal": self.n_eikonal, "eikonal_h": self.eikonal_h,
            "background": list(self.background),
            "prompt_style": self.prompt_style,
            "prefit_steps": self.prefit_steps,
            "prefit_batch": self.prefit_batch,
            "checkpoint_every": self.checkpoint_every,
            "retry_limit": self.retry_limit,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw = dict(d)
        if "coefficients" in kw:
            kw["coefficients"] = tuple(kw["coefficients"])
        if "noise_range" in kw:
            kw["noise_range"] = tuple(kw["noise_range"])
        if "background" in kw:
            kw["background"] = tuple(kw["background"])
        if "camera" in kw and isinstance(kw["camera"], dict):
            kw["camera"] = CameraDistribution.from_dict(kw["camera"])
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


class TrainState:
    """Everything a resumable run owns besides the config."""

    def __init__(self, fields: FieldSet, optimizer: Adam,
                 rotation: EdgeRotation, rng: np.random.Generator,
                 step: int = 0):
        self.fields = fields
        self.optimizer = optimizer
        self.rotation = rotation
        self.rng = rng
        self.step = step

    def checksum(self) -> str:
        """SHA-256 over all parameter bytes in declaration order."""
        h = hashlib.sha256()
        for name, v in self.fields.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        return h.hexdigest()


def new_state(config: TrainConfig, graph: SceneGraph,
              dtype=np.float32) -> TrainState:
    """Fresh state: fields pre-fit to the layout spheres, zeroed moments."""
    config.validate()
    fc = FieldConfig()
    space = space_from_graph(graph, fc)
    fields = FieldSet(graph.M, config=fc, space=space, seed=config.seed,
                      dtype=dtype)
    if config.prefit_steps > 0:
        prefit_spheres(fields, steps=config.prefit_steps,
                       batch=config.prefit_batch, seed=config.seed + 1)
    optimizer = Adam(fields.optimizer_params(config.lr_tables, config.lr_mlps),
                     beta1=config.adam_beta1, beta2=config.adam_beta2,
                     eps=config.adam_eps)
    return TrainState(fields=fields, optimizer=optimizer,
                      rotation=EdgeRotation(),
                      rng=np.random.default_rng(config.seed))


_STATE_MAGIC = b"SDFS"
_STATE_VERSION = 1


def _write_state(path, state: TrainState) -> None:
    opt = state.optimizer
    arrays = []
    blobs = []
    for kind, table in (("m", opt.m), ("v", opt.v)):
        for name in sorted(table):
            arr = table[name]
            arrays.append({"name": f"{kind}.{name}", "shape": list(arr.shape),
                           "dtype": arr.dtype.str})
            blobs.append(np.ascontiguousarray(arr))
    meta = {
        "step": state.step,
        "adam_t": opt.t,
        "rotation": {str(k): v for k, v in state.rotation.state().items()},
        "rng": state.rng.bit_generator.state,
        "arrays": arrays,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_STATE_MAGIC)
        fh.write(struct.pack("<I", _STATE_VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        for b in blobs:
            fh.write(b.tobytes())


def _read_state(path, state: TrainState) -> None:
    opt = state.optimizer
    with open(path, "rb") as fh:
        if fh.read(4) != _STATE_MAGIC:
            raise TrainError(f"{path} is not a trainer state file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _STATE_VERSION:
            raise TrainError(f"unsupported state version {version}")
        (meta_len,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        for spec in meta["arrays"]:
            dtype = np.dtype(spec["dtype"])
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(dtype.itemsize * count),
                                dtype=dtype).reshape(shape)
            kind, name = spec["name"].split(".", 1)
            table = opt.m if kind == "m" else opt.v
            if name not in table:
                raise TrainError(f"state holds unknown parameter {name!r}")
            table[name][...] = arr
    state.step = int(meta["step"])
    opt.t = int(meta["adam_t"])
    state.rotation = EdgeRotation({int(k): v
                                   for k, v in meta["rotation"].items()})
    state.rng = np.random.default_rng()
    state.rng.bit_generator.state = meta["rng"]


def save_run_state(out_dir, state: TrainState, config: TrainConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "params.bin", state.fields, extra={"step": state.step})
    _write_state(out / "state.bin", state)
    config.save(out / "config.json")


def load_run_state(out_dir, config: TrainConfig = None):
    """Restore (config, state) from a checkpoint directory."""
    out = Path(out_dir)
    if config is None:
        config = TrainConfig.load(out / "config.json")
    fields, _ = load_checkpoint(out / "params.bin")
    optimizer = Adam(fields.optimizer_params(config.lr_tables, config.lr_mlps),
                     beta1=config.adam_beta1, beta2=config.adam_beta2,
                     eps=config.adam_eps)
    state = TrainState(fields=fields, optimizer=optimizer,
                       rotation=EdgeRotation(),
                       rng=np.random.default_rng(config.seed))
    _read_state(out / "state.bin", state)
    return config, state


def _plan_prompts(plan, prompts):
    if plan.kind == "global":
        return [prompts.global_prompt]
    out = [prompts.object_prompts[plan.object_index]]
    if plan.edge is not None:
        lo, hi = sorted(plan.edge)
        out.append(prompts.edge_prompts[(lo, hi)])
    return out


def train_step(state: TrainState, config: TrainConfig, graph: SceneGraph,
               provider, prompts=None) -> dict:
    """One planned step: render, assemble the objective, update once.

    A provider failure rolls the step back (parameters, moments, and edge
    counters untouched) and retries with a fresh camera, up to the limit.
    """
    if prompts is None:
        prompts = decompose_prompts(graph, edge_style=config.prompt_style)
    stage = config.stage_of(state.step)
    res = config.resolution(stage)
    n_samples = config.n_samples(stage)
    cfg_w = config.cfg_weight(stage, graph.M)
    renderer = SceneRenderer(state.fields, background=config.background,
                             n_samples=n_samples)

    last_error = None
    for attempt in range(config.retry_limit):
        counters_before = state.rotation.state()
        plan = build_step_plan(graph, state.step, state.rotation)
        camera = camera_for_step(config, state.step, attempt)
        texts = _plan_prompts(plan, prompts)
        t0 = time.perf_counter()
        try:
            with Tape():
                if plan.kind == "global":
                    renders = [renderer.render_scene(camera, rng=state.rng,
                                                     want_aux=True)]
                else:
                    renders = [renderer.render_object(plan.object_index, camera,
                                                      rng=state.rng,
                                                      want_aux=True)]
                    if plan.edge is not None:
                        renders.append(renderer.render_edge(
                            plan.edge[0], plan.edge[1], camera, rng=state.rng))
                bundle = total_loss(
                    plan, renders, texts, state.fields, provider,
                    renders[0].aux, coefficients=config.coefficients,
                    n_eikonal=config.n_eikonal, eikonal_h=config.eikonal_h,
                    stage=stage, cfg_weight=cfg_w,
                    noise_range=config.noise_range)
                state.optimizer.zero_grad()
                backward(bundle.objective,
                         [v for _, v, _ in state.optimizer.params])
                state.optimizer.step()
        except GuidanceError as e:
            state.rotation = EdgeRotation(counters_before)
            last_error = e
            continue
        metrics = {
            "step": state.step, "kind": plan.kind, "stage": stage,
            "object_index": plan.object_index, "edge": plan.edge,
            "sds_count": bundle.sds_count,
            "penet": float(bundle.penetration.data),
            "eikonal": float(bundle.eikonal.data),
            "total": float(bundle.objective.data),
            "seconds": time.perf_counter() - t0,
            "retries": attempt,
        }
        state.step += 1
        return metrics
    raise TrainError(f"guidance provider failed {config.retry_limit} times "
                     f"at step {state.step}: {last_error}")


def run(config: TrainConfig, graph: SceneGraph, provider, out_dir,
        state: TrainState = None, resume: bool = False,
        on_step=None) -> Path:
    """Execute the full two-stage schedule, checkpointing along the way.

    Returns the path of the final parameter checkpoint. The fine stage
    starts with freshly zeroed optimizer moments because the resolution
    change rescales gradients.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "losses.csv"
    if resume:
        if state is None:
            config, state = load_run_state(out, config)
        mode = "a"
    else:
        if state is None:
            state = new_state(config, graph)
        mode = "w"
    prompts = decompose_prompts(graph, edge_style=config.prompt_style)

    with open(csv_path, mode, newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(LOSS_CSV_COLUMNS)
        try:
            while state.step < config.total_steps:
                if state.step == config.steps_coarse and config.steps_fine > 0:
                    state.optimizer.t = 0
                    for name in state.optimizer.m:
                        state.optimizer.m[name][...] = 0
                        state.optimizer.v[name][...] = 0
                metrics = train_step(state, config, graph, provider,
                                     prompts=prompts)
                writer.writerow([metrics["step"], metrics["kind"],
                                 metrics["sds_count"], metrics["penet"],
                                 metrics["eikonal"], metrics["total"]])
                if on_step is not None:
                    on_step(metrics)
                if state.step % config.checkpoint_every == 0:
                    fh.flush()
                    save_run_state(out, state, config)
        except Exception:
            fh.flush()
            save_run_state(out, state, config)
            raise
    save_run_state(out, state, config)
    return out / "params.bin"
