"""Command-line entry point: graph checks, prompt and schedule dumps,
rendering from checkpoints, training, mesh extraction, and the
decomposition audit.

Exit codes: 0 success, 1 usage error, 2 invalid input (graph, config,
checkpoint), 3 runtime failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .export import (audit_decomposition, marching_cubes, read_pfm,
                     write_obj, write_pfm, write_png)
from .fields import load_checkpoint
from .graph import GraphError, build_step_plan, decompose_prompts, load_graph
from .guidance import (GuidanceError, NoisyScoreProvider, PhotometricProvider,
                       RemoteProvider)
from .render import SceneRenderer, camera_from_angles
from .report import plot_losses, render_audit_outputs
from .train import TrainConfig, TrainError, load_run_state, run

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems via exception, not exit(2)."""

    def error(self, message):
        raise UsageError(message)


def _load_target_image(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".pfm":
        img = read_pfm(path).astype(np.float64)
    else:
        from PIL import Image

        img = np.asarray(Image.open(path).convert("RGB"),
                         dtype=np.float64) / 255.0
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return img


def load_photometric_targets(directory, prompts: list) -> dict:
    """Map prompt i to every image file named prompt_<i>*.pfm/.png in the
    directory; multiple files give multi-resolution targets."""
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"target directory not found: {d}")
    targets = {}
    for i, prompt in enumerate(prompts):
        files = sorted(p for p in d.glob(f"prompt_{i}*")
                       if p.suffix.lower() in (".pfm", ".png"))
        if files:
            targets[prompt] = [_load_target_image(p) for p in files]
    if not targets:
        raise UsageError(f"no prompt_<i>.pfm/.png target images in {d}")
    return targets


def make_provider(spec: str, prompts=None, seed: int = 0):
    """Build a guidance provider from its CLI spec string."""
    if spec == "noisy":
        return NoisyScoreProvider({}, seed=seed, default_value=0.5)
    if spec.startswith("noisy:"):
        targets = load_photometric_targets(spec.split(":", 1)[1],
                                           prompts or [])
        return NoisyScoreProvider(targets, seed=seed)
    if spec.startswith("photometric:"):
        targets = load_photometric_targets(spec.split(":", 1)[1],
                                           prompts or [])
        return PhotometricProvider(targets)
    if spec.startswith("remote:"):
        return RemoteProvider(spec.split(":", 1)[1])
    raise UsageError(
        f"unknown provider {spec!r}; expected photometric:<targets-dir>, "
        f"noisy, noisy:<targets-dir>, or remote:<url>")


def _parse_render_kind(text: str):
    """'scene' | 'object:<i>' | 'edge:<i>,<j>' -> render() arguments."""
    if text == "scene":
        return "global", None, None
    kind, _, rest = text.partition(":")
    try:
        if kind == "object" and rest:
            return "object", int(rest), None
        if kind == "edge" and rest:
            i, j = (int(x) for x in rest.split(","))
            return "object", None, (i, j)
    except ValueError:
        pass
    raise UsageError(f"bad --kind {text!r}; expected scene, object:<i>, "
                     f"or edge:<i>,<j>")


# -- subcommands -------------------------------------------------------------


def cmd_validate(args) -> int:
    g = load_graph(args.graph, scene_bound=args.bound)
    print(f"M={g.M} K={g.K} prompts={1 + g.M + g.K}")
    return EXIT_OK


def cmd_prompts(args) -> int:
    g = load_graph(args.graph)
    ps = decompose_prompts(g, edge_style=args.edge_style)
    payload = {
        "global": ps.global_prompt,
        "objects": list(ps.object_prompts),
        "edges": {f"{i},{j}": ps.edge_prompts[(i, j)]
                  for (i, j) in sorted(ps.edge_prompts)},
    }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_plan(args) -> int:
    g = load_graph(args.graph)
    steps = args.steps if args.steps is not None else g.M + 1
    print("step,kind,object,edge")
    for s in range(steps):
        plan = build_step_plan(g, s)
        if plan.kind == "global":
            print(f"{s},global,,")
        else:
            edge = f"{plan.edge[0]}-{plan.edge[1]}" if plan.edge else ""
            print(f"{s},object,{plan.object_index},{edge}")
    return EXIT_OK


def cmd_render(args) -> int:
    fields, _ = load_checkpoint(args.checkpoint)
    kind, obj, edge = _parse_render_kind(args.kind)
    if obj is not None and not 0 <= obj < fields.m:
        raise UsageError(f"object index {obj} out of range (M={fields.m})")
    if edge is not None and not all(0 <= e < fields.m for e in edge):
        raise UsageError(f"edge {edge} out of range (M={fields.m})")
    camera = camera_from_angles(args.azimuth, args.elevation,
                                radius=args.radius, fov_y=args.fov,
                                width=args.width, height=args.height)
    renderer = SceneRenderer(fields, n_samples=args.samples)
    image = renderer.render(kind, camera, object_index=obj, edge=edge)
    out = Path(args.out)
    rgb = image.rgb_array
    if out.suffix.lower() == ".pfm":
        write_pfm(rgb, out)
    else:
        write_png(rgb, out)
    print(f"wrote {out} ({image.tag}, {rgb.shape[1]}x{rgb.shape[0]})")
    return EXIT_OK


def cmd_train(args) -> int:
    g = load_graph(args.graph)
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    config.validate()
    prompts = decompose_prompts(g, edge_style=config.prompt_style)
    provider = make_provider(args.provider, prompts.all_prompts(),
                             seed=config.seed)
    out = Path(args.out)
    state = None
    if args.resume:
        config, state = load_run_state(out, config)
    params = run(config, g, provider, out, state=state, resume=args.resume)
    figures = plot_losses(out / "losses.csv", out)
    print(f"wrote {params}")
    for p in figures:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_extract(args) -> int:
    fields, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print("object,vertices,triangles,path")
    for i in range(fields.m):
        mesh = marching_cubes(fields, i, resolution=args.resolution)
        path = out / f"object_{i}.obj"
        write_obj(mesh, path)
        print(f"{i},{len(mesh.vertices)},{len(mesh.triangles)},{path}")
    return EXIT_OK


def cmd_audit(args) -> int:
    fields, _ = load_checkpoint(args.checkpoint)
    reference = None
    if args.reference == "init":
        reference = [(c, r) for c, r in fields.space.spheres]
    report = audit_decomposition(fields, n_samples=args.samples,
                                 seed=args.seed, reference_spheres=reference)
    paths = render_audit_outputs(report, args.out)
    print(f"objects={report.m} samples={report.n_samples} "
          f"naive_penetration={report.naive_penetration:.6g}")
    for p in [paths["json"], paths["csv"], *paths["figures"]]:
        print(f"wrote {p}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sdfscene",
                     description="Compositional SDF scene engine.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("validate", help="parse and check a scene graph")
    p.add_argument("graph", help="scene graph JSON file")
    p.add_argument("--bound", type=float, default=1.0,
                   help="scene half-extent for init-sphere checks")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("prompts", help="emit the decomposed prompt set")
    p.add_argument("graph")
    p.add_argument("--edge-style", choices=("full", "bare"), default="full",
                   help="edge prompts use full object prompts or bare names")
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_prompts)

    p = sub.add_parser("plan", help="print the first S schedule steps")
    p.add_argument("graph")
    p.add_argument("--steps", type=int, default=None,
                   help="how many steps (default: one full M+1 cycle)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("render", help="render an image from a checkpoint")
    p.add_argument("--checkpoint", required=True, help="params.bin file")
    p.add_argument("--kind", default="scene",
                   help="scene | object:<i> | edge:<i>,<j>")
    p.add_argument("--azimuth", type=float, default=30.0)
    p.add_argument("--elevation", type=float, default=15.0)
    p.add_argument("--radius", type=float, default=2.5)
    p.add_argument("--fov", type=float, default=40.0)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--samples", type=int, default=64,
                   help="SDF samples per ray")
    p.add_argument("--out", required=True, help=".png or .pfm output path")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", help="run the optimization loop")
    p.add_argument("--graph", required=True)
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--provider", default="noisy",
                   help="photometric:<targets-dir> | noisy | "
                        "noisy:<targets-dir> | remote:<url>")
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="marching-cubes meshes, one per object")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resolution", type=int, default=256,
                   help="marching-cubes grid resolution")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("audit", help="decomposition audit report and figures")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reference", choices=("init", "none"), default="init",
                   help="IoU reference spheres: checkpoint layout or none")
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GraphError as exc:
        print(f"invalid graph: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (GuidanceError, TrainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
