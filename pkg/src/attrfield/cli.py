"""Command-line front end: fit, render, edit, eval, serve, gen-oracle.

Angles are taken in degrees (yaw reduced mod 360 so 0 and 360 render the
same bits) and all bad input exits with status 2. Rendered images land as
rgb.png, sem.png, and depth.bin in the chosen output directory.
"""

import argparse
import json
import math
import os
import sys

import numpy as np

from .deform import Pose, quat_from_axis_angle, quat_identity
from .imgio import quantize, write_depth, write_rgb_png, write_semantic_png
from .optimize import LAMBDA_DEFAULTS, FitConfig, fit
from .render import render_image, resolve_active_labels
from .sampling import orbit_camera
from .sceneio import (CatalogMismatchError, SceneFormatError,
                      generate_oracle_scene, load_scene, make_scene,
                      save_scene, edit_swap)
from .service import DEFAULT_PORT, run_server

_AXES = {"x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}


class CmdError(Exception):
    """Bad input; maps to exit status 2."""


# -- shared option handling --------------------------------------------------------


def _add_camera_flags(p):
    p.add_argument("--yaw", type=float, default=0.0,
                   help="camera yaw in degrees (mod 360)")
    p.add_argument("--pitch", type=float, default=0.0,
                   help="camera pitch in degrees")
    p.add_argument("--dist", type=float, default=3.0,
                   help="camera distance from the origin")
    p.add_argument("--res", type=int, default=128, help="image side in pixels")
    p.add_argument("--seed", type=int, default=0, help="sampling jitter seed")
    p.add_argument("--threads", type=int, default=1, help="render threads")


def _camera(args):
    try:
        yaw = math.radians(args.yaw % 360.0)
        return orbit_camera(yaw, math.radians(args.pitch), args.dist, args.res)
    except ValueError as err:
        raise CmdError(str(err))


def _load(path):
    try:
        return load_scene(path)
    except FileNotFoundError:
        raise CmdError(f"no such scene file: {path}")
    except SceneFormatError as err:
        raise CmdError(f"cannot read {path}: {err}")


def _attr_labels(scene, csv):
    if not csv:
        return None
    try:
        return [scene.catalog.label(name.strip()) for name in csv.split(",")]
    except KeyError as err:
        raise CmdError(str(err).strip('"'))


def _pose(args, scene):
    if not args.rotate:
        return None
    template = scene.template
    theta = quat_identity(template.n_joints)
    for spec in args.rotate:
        parts = spec.split(":")
        if len(parts) != 3:
            raise CmdError(f"--rotate wants JOINT:AXIS:DEGREES, got {spec!r}")
        joint, axis, deg = parts
        if joint in template.joint_names:
            j = template.joint_names.index(joint)
        else:
            try:
                j = int(joint)
            except ValueError:
                raise CmdError(f"unknown joint {joint!r}")
        if not 0 <= j < template.n_joints:
            raise CmdError(f"joint index {j} out of range")
        if axis.lower() not in _AXES:
            raise CmdError(f"axis must be x, y, or z, got {axis!r}")
        try:
            angle = math.radians(float(deg))
        except ValueError:
            raise CmdError(f"bad angle {deg!r}")
        theta[j] = quat_from_axis_angle(_AXES[axis.lower()], angle)
    return Pose(theta)


def _write_images(out_dir, out, n_labels):
    os.makedirs(out_dir, exist_ok=True)
    paths = {"rgb": os.path.join(out_dir, "rgb.png"),
             "semantic": os.path.join(out_dir, "sem.png"),
             "depth": os.path.join(out_dir, "depth.bin")}
    write_rgb_png(paths["rgb"], out.rgb)
    write_semantic_png(paths["semantic"], out.semantic, n_labels)
    write_depth(paths["depth"], out.depth)
    return paths


# -- commands ---------------------------------------------------------------------


def cmd_gen_oracle(args):
    oracle, active = generate_oracle_scene(
        seed=args.seed, n_active=args.n_active, spatial_res=args.plane_res,
        beta=args.beta, samples_per_ray=args.samples)
    save_scene(oracle, args.out)
    print(json.dumps({"out": args.out,
                      "active": [oracle.catalog.names[l] for l in active]}))
    return 0


def cmd_fit(args):
    oracle = _load(args.oracle)
    try:
        config = FitConfig(
            steps=args.steps, learning_rate=args.lr, momentum=args.momentum,
            rays_per_step=args.rays, reg_points_per_step=args.reg_points,
            seed=args.seed,
            resolutions=tuple(int(v) for v in args.resolutions.split(",")),
            **{f"lambda_{k}": getattr(args, f"lambda_{k}")
               for k in LAMBDA_DEFAULTS})
    except ValueError as err:
        raise CmdError(str(err))
    trainable = make_scene(seed=args.init_seed, catalog=oracle.catalog,
                           spatial_res=args.plane_res, bboxes=oracle.bboxes)
    fitted, _ = fit(trainable, oracle, config, log_file=args.log)
    save_scene(fitted, args.out)
    return 0


def cmd_render(args):
    scene = _load(args.scene)
    active = _attr_labels(scene, args.attrs)
    if active is not None:
        try:
            active = resolve_active_labels(scene, active)
        except ValueError as err:
            raise CmdError(str(err))
    out = render_image(scene, _camera(args), active=active,
                       pose=_pose(args, scene), seed=args.seed,
                       n_threads=args.threads)
    paths = _write_images(args.out_dir, out, len(scene.catalog))
    print(json.dumps(paths))
    return 0


def cmd_edit(args):
    scene_a = _load(args.scene_a)
    scene_b = _load(args.scene_b)
    try:
        edited = edit_swap(scene_a, scene_b, args.attr)
    except (CatalogMismatchError, KeyError, ValueError) as err:
        raise CmdError(str(err).strip('"'))
    camera = _camera(args)
    before = render_image(scene_a, camera, seed=args.seed,
                          n_threads=args.threads)
    after = render_image(edited, camera, active=before.active_labels,
                         seed=args.seed, n_threads=args.threads)
    os.makedirs(args.out_dir, exist_ok=True)
    before_path = os.path.join(args.out_dir, "before.png")
    after_path = os.path.join(args.out_dir, "after.png")
    write_rgb_png(before_path, before.rgb)
    write_rgb_png(after_path, after.rgb)
    changed = int((quantize(before.rgb) != quantize(after.rgb))
                  .any(axis=2).sum())
    print(json.dumps({"changed_pixels": changed, "before": before_path,
                      "after": after_path}))
    return 0


def cmd_eval(args):
    scene = _load(args.scene)
    oracle = _load(args.oracle)
    if args.views < 1:
        raise CmdError("--views must be at least 1")
    mses = []
    for k in range(args.views):
        view = argparse.Namespace(**vars(args))
        view.yaw = args.yaw + 360.0 * k / args.views
        camera = _camera(view)
        img_s = render_image(scene, camera, seed=args.seed,
                             n_threads=args.threads)
        img_o = render_image(oracle, camera, seed=args.seed,
                             n_threads=args.threads)
        mses.append(float(np.mean(
            (img_s.rgb.astype(np.float64) - img_o.rgb.astype(np.float64))
            ** 2)))
    mse = float(np.mean(mses))
    psnr = None if mse == 0.0 else float(-10.0 * math.log10(mse))
    print(json.dumps({"mse": mse, "psnr_db": psnr, "views": args.views}))
    return 0


def cmd_serve(args):
    scene_dir = args.scene_dir or os.environ.get("ATTR_SCENE_DIR")
    if not scene_dir:
        raise CmdError("give --scene-dir or set ATTR_SCENE_DIR")
    try:
        run_server(scene_dir, host=args.host, port=args.port,
                   ui_dir=args.ui_dir, render_threads=args.threads)
    except NotADirectoryError as err:
        raise CmdError(f"not a scene directory: {err}")
    return 0


# -- argument wiring ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attrfield",
        description="Compositional attribute-field scenes: fit, render, "
                    "edit, evaluate, and serve.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-oracle", help="generate a synthetic target scene")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-active", type=int, default=3)
    p.add_argument("--plane-res", type=int, default=16)
    p.add_argument("--beta", type=float, default=0.02)
    p.add_argument("--samples", type=int, default=64)
    p.set_defaults(func=cmd_gen_oracle)

    p = sub.add_parser("fit", help="fit a fresh scene to a target scene")
    p.add_argument("--oracle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-seed", type=int, default=1,
                   help="seed for the fresh scene's parameters")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--rays", type=int, default=128)
    p.add_argument("--reg-points", type=int, default=128)
    p.add_argument("--resolutions", default="32,64",
                   help="comma-separated render resolution schedule")
    p.add_argument("--plane-res", type=int, default=32)
    p.add_argument("--log", default=None, help="JSONL loss log path")
    for name, default in LAMBDA_DEFAULTS.items():
        p.add_argument(f"--lambda-{name}", type=float, default=default,
                       dest=f"lambda_{name}")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render rgb/semantic/depth images")
    p.add_argument("--scene", required=True)
    _add_camera_flags(p)
    p.add_argument("--attrs", default=None,
                   help="comma-separated attribute names (default: scene set)")
    p.add_argument("--rotate", action="append", default=[],
                   metavar="JOINT:AXIS:DEG",
                   help="pose one joint (repeatable)")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("edit", help="swap one attribute in from another scene")
    p.add_argument("--scene-a", required=True, help="base scene")
    p.add_argument("--scene-b", required=True, help="attribute source scene")
    p.add_argument("--attr", required=True)
    _add_camera_flags(p)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="reconstruction error between two scenes")
    p.add_argument("--scene", required=True)
    p.add_argument("--oracle", required=True)
    _add_camera_flags(p)
    p.add_argument("--views", type=int, default=1,
                   help="number of evenly spaced yaw views to average")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="HTTP render/edit service")
    p.add_argument("--scene-dir", default=None,
                   help="directory of .attr files (default: $ATTR_SCENE_DIR)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--threads", type=int, default=1, help="render threads")
    p.add_argument("--ui-dir", default=None,
                   help="serve a static frontend bundle under /ui")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    try:
        return args.func(args)
    except CmdError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
