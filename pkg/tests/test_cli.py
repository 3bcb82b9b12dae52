"""Command-line behavior: outputs, exit codes, and determinism."""

import json
import math

import numpy as np
import pytest

from attrfield import imgio
from attrfield.cli import main
from attrfield.render import _slab_entry_exit
from attrfield.sampling import generate_rays, orbit_camera
from attrfield.sceneio import load_scene, make_scene, save_scene


@pytest.fixture(scope="module")
def oracle_path(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("scenes") / "oracle.attr")
    rc = main(["gen-oracle", "--seed", "5", "--out", path,
               "--plane-res", "8", "--samples", "16"])
    assert rc == 0
    return path


def run_json(capsys, argv):
    rc = main(argv)
    out = capsys.readouterr().out.strip().splitlines()
    return rc, json.loads(out[-1]) if out else None


# -- gen-oracle -----------------------------------------------------------------


def test_gen_oracle_writes_loadable_scene(oracle_path):
    scene = load_scene(oracle_path)
    assert len(scene.catalog) == 11
    assert scene.active


def test_gen_oracle_reports_active(tmp_path, capsys):
    out = str(tmp_path / "o.attr")
    rc, info = run_json(capsys, ["gen-oracle", "--seed", "5", "--out", out,
                                 "--plane-res", "8", "--samples", "16"])
    assert rc == 0
    scene = load_scene(out)
    assert info["active"] == [scene.catalog.names[l] for l in scene.active]


# -- fit -----------------------------------------------------------------------


FIT_FAST = ["--steps", "2", "--rays", "8", "--reg-points", "8",
            "--resolutions", "8", "--plane-res", "8"]


def test_fit_missing_oracle_is_exit_2(tmp_path, capsys):
    rc = main(["fit", "--oracle", str(tmp_path / "absent.attr"),
               "--out", str(tmp_path / "out.attr")])
    assert rc == 2
    assert "no such scene" in capsys.readouterr().err


def test_fit_writes_valid_scene(oracle_path, tmp_path, capsys):
    out = str(tmp_path / "fitted.attr")
    rc = main(["fit", "--oracle", oracle_path, "--out", out] + FIT_FAST)
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and json.loads(lines[0])["step"] == 0
    load_scene(out)


def test_fit_deterministic(oracle_path, tmp_path, capsys):
    outs = []
    for name in ("a.attr", "b.attr"):
        out = str(tmp_path / name)
        assert main(["fit", "--oracle", oracle_path, "--out", out,
                     "--seed", "3"] + FIT_FAST) == 0
        outs.append((tmp_path / name).read_bytes())
    capsys.readouterr()
    assert outs[0] == outs[1]


def test_fit_rejects_bad_lambda(oracle_path, tmp_path, capsys):
    rc = main(["fit", "--oracle", oracle_path,
               "--out", str(tmp_path / "x.attr"), "--lambda-eik", "-1"]
              + FIT_FAST)
    assert rc == 2
    capsys.readouterr()


# -- render -----------------------------------------------------------------------


RENDER_FAST = ["--res", "24"]


def test_render_writes_three_files(oracle_path, tmp_path, capsys):
    rc, paths = run_json(capsys, ["render", "--scene", oracle_path,
                                  "--out-dir", str(tmp_path)] + RENDER_FAST)
    assert rc == 0
    rgb = imgio.read_png(paths["rgb"])
    sem = imgio.read_png(paths["semantic"])
    depth = imgio.read_depth(paths["depth"])
    assert rgb.shape == (24, 24, 3)
    assert sem.shape == (24, 24)
    assert depth.shape == (24, 24)
    assert np.isfinite(depth).all()


def test_render_unknown_attr_is_exit_2(oracle_path, tmp_path, capsys):
    rc = main(["render", "--scene", oracle_path, "--attrs", "Body,Wings",
               "--out-dir", str(tmp_path)] + RENDER_FAST)
    assert rc == 2
    assert "Wings" in capsys.readouterr().err


def test_render_unknown_flag_is_exit_2(oracle_path, capsys):
    rc = main(["render", "--scene", oracle_path, "--sharpen"])
    assert rc == 2
    capsys.readouterr()


def test_render_yaw_wraps_bit_identical(oracle_path, tmp_path, capsys):
    blobs = {}
    for yaw, sub in (("0", "a"), ("360", "b")):
        d = tmp_path / sub
        rc = main(["render", "--scene", oracle_path, "--yaw", yaw,
                   "--out-dir", str(d)] + RENDER_FAST)
        assert rc == 0
        blobs[sub] = [(d / n).read_bytes()
                      for n in ("rgb.png", "sem.png", "depth.bin")]
    capsys.readouterr()
    assert blobs["a"] == blobs["b"]


def test_render_pitch_at_pole_is_exit_2(oracle_path, tmp_path, capsys):
    rc = main(["render", "--scene", oracle_path, "--pitch", "90",
               "--out-dir", str(tmp_path)] + RENDER_FAST)
    assert rc == 2
    capsys.readouterr()


def test_render_pose_flag(oracle_path, tmp_path, capsys):
    rest = tmp_path / "rest"
    posed = tmp_path / "posed"
    assert main(["render", "--scene", oracle_path, "--out-dir", str(rest)]
                + RENDER_FAST) == 0
    assert main(["render", "--scene", oracle_path, "--out-dir", str(posed),
                 "--rotate", "1:x:35"] + RENDER_FAST) == 0
    capsys.readouterr()
    assert (rest / "rgb.png").read_bytes() != (posed / "rgb.png").read_bytes()


def test_render_bad_pose_specs(oracle_path, tmp_path, capsys):
    for spec in ("1:x", "99:x:10", "1:w:10", "1:x:abc", "nojoint:x:5"):
        rc = main(["render", "--scene", oracle_path, "--rotate", spec,
                   "--out-dir", str(tmp_path)] + RENDER_FAST)
        assert rc == 2, spec
    capsys.readouterr()


# -- edit -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def scene_pair(tmp_path_factory):
    # both scenes carry Haircut and Body so the swap has visible effect
    d = tmp_path_factory.mktemp("editable")
    paths = []
    for seed in (41, 42):
        scene = make_scene(seed=seed, spatial_res=8, samples_per_ray=16,
                           active=(8, 10))
        p = str(d / f"s{seed}.attr")
        save_scene(scene, p)
        paths.append(p)
    return paths


def test_edit_self_swap_changes_nothing(oracle_path, tmp_path, capsys):
    rc, info = run_json(capsys, ["edit", "--scene-a", oracle_path,
                                 "--scene-b", oracle_path, "--attr", "Body",
                                 "--out-dir", str(tmp_path)] + RENDER_FAST)
    assert rc == 0
    assert info["changed_pixels"] == 0
    assert (tmp_path / "before.png").read_bytes() \
        == (tmp_path / "after.png").read_bytes()


def test_edit_unknown_attr_is_exit_2(oracle_path, tmp_path, capsys):
    rc = main(["edit", "--scene-a", oracle_path, "--scene-b", oracle_path,
               "--attr", "Cloak", "--out-dir", str(tmp_path)] + RENDER_FAST)
    assert rc == 2
    capsys.readouterr()


def test_edit_changes_confined_to_bbox_projection(scene_pair, tmp_path,
                                                  capsys):
    path_a, path_b = scene_pair
    args = ["--yaw", "20", "--pitch", "5", "--res", "32"]
    rc, info = run_json(capsys, ["edit", "--scene-a", path_a,
                                 "--scene-b", path_b, "--attr", "Haircut",
                                 "--out-dir", str(tmp_path)] + args)
    assert rc == 0
    before = imgio.read_png(str(tmp_path / "before.png"))
    after = imgio.read_png(str(tmp_path / "after.png"))
    changed = (before != after).any(axis=2)
    assert int(changed.sum()) == info["changed_pixels"]
    assert info["changed_pixels"] > 0

    scene = load_scene(path_a)
    box = scene.bboxes[scene.catalog.label("Haircut")]
    cam = orbit_camera(math.radians(20.0), math.radians(5.0), 3.0, 32)
    grid = generate_rays(cam, scene.near, scene.far)
    dirs = grid.directions.reshape(-1, 3)
    enter, exit_, hit = _slab_entry_exit(grid.origin, dirs, box.lo, box.hi,
                                         scene.near, scene.far)
    may_change = (hit & (exit_ > enter)).reshape(32, 32)
    assert not np.any(changed & ~may_change)


def test_edit_deterministic(scene_pair, tmp_path, capsys):
    path_a, path_b = scene_pair
    blobs = []
    for sub in ("r1", "r2"):
        d = tmp_path / sub
        rc = main(["edit", "--scene-a", path_a, "--scene-b", path_b,
                   "--attr", "Haircut", "--seed", "4",
                   "--out-dir", str(d)] + RENDER_FAST)
        assert rc == 0
        blobs.append((d / "after.png").read_bytes())
    capsys.readouterr()
    assert blobs[0] == blobs[1]


# -- eval -----------------------------------------------------------------------


def test_eval_self_is_zero(oracle_path, capsys):
    rc, info = run_json(capsys, ["eval", "--scene", oracle_path,
                                 "--oracle", oracle_path] + RENDER_FAST)
    assert rc == 0
    assert info["mse"] == 0.0
    assert info["psnr_db"] is None


def test_eval_reports_positive_mse(oracle_path, scene_pair, capsys):
    rc, info = run_json(capsys, ["eval", "--scene", scene_pair[0],
                                 "--oracle", oracle_path, "--views", "2"]
                        + RENDER_FAST)
    assert rc == 0
    assert info["mse"] > 0
    assert info["psnr_db"] == pytest.approx(-10 * math.log10(info["mse"]))
    assert info["views"] == 2


# -- serve flag validation ---------------------------------------------------------


def test_serve_needs_scene_dir(capsys, monkeypatch):
    monkeypatch.delenv("ATTR_SCENE_DIR", raising=False)
    assert main(["serve"]) == 2
    assert "scene" in capsys.readouterr().err.lower()


def test_serve_rejects_missing_dir(tmp_path, capsys):
    assert main(["serve", "--scene-dir", str(tmp_path / "nope")]) == 2
    capsys.readouterr()


def test_no_command_is_exit_2(capsys):
    assert main([]) == 2
    capsys.readouterr()
