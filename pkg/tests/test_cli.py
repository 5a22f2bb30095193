import json
import subprocess
import sys

import numpy as np
import pytest

from occrender.cli import main
from occrender.grid import GridGeometry, SemanticSchema, VoxelGrid, labels_to_grid, load_grid, load_labels, save_grid
from occrender.imageio import read_blob, read_pfm, read_pgm, write_pfm, write_pgm
from occrender.losses import PixelLabels
from occrender.train import TrainConfig, init_grid

from test_train import spec_dict

FAST = {"iterations": 4, "batch_rays": 256, "sampler": "voxel", "interp": "nearest", "lr": 0.05,
        "eval_every": 2, "dts_iterations": 3}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(spec_dict(frames=3)))
    (root / "unl.json").write_text(json.dumps(spec_dict(frames=3, labeled=False)))
    (root / "fast.json").write_text(json.dumps(FAST))
    assert main(["synth", str(root / "spec.json"), str(root / "scene")]) == 0
    assert main(["synth", str(root / "unl.json"), str(root / "unlabeled")]) == 0
    assert main(["--config", str(root / "fast.json"), "train", str(root / "scene"), str(root / "run")]) == 0
    return root


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_synth_minimal_spec(tmp_path):
    spec = spec_dict(frames=1, primitives=[{"kind": "ground", "class": 0}])
    (tmp_path / "s.json").write_text(json.dumps(spec))
    assert main(["synth", str(tmp_path / "s.json"), str(tmp_path / "out")]) == 0
    names = set(files(tmp_path / "out"))
    assert {"spec.json", "pixels.npy", "visibility.u8", "manifest.json", "frame_000/cameras.json",
            "frame_000/labels/meta.json", "frame_000/labels/labels.u16"} <= names
    assert not any(n.startswith("frame_001") for n in names)


def test_synth_three_frames(work):
    for f in range(3):
        assert load_labels(work / "scene" / f"frame_{f:03d}" / "labels").class_id.shape == (16, 16, 4)
    px = PixelLabels.load(work / "scene" / "pixels.npy")
    assert set(px.frame.tolist()) == {0, 1, 2}
    manifest = json.loads((work / "scene" / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["pixels"] == len(px)


def test_synth_malformed_json(tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{"grid": {"dims": [1, 2,\n')
    assert main(["synth", str(tmp_path / "bad.json"), str(tmp_path / "out")]) == 2
    assert "line 2" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_synth_invalid_spec(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps(spec_dict(primitives=[{"class": 9, "min": [0, 0, 0],
                                                                          "max": [1, 1, 1]}])))
    assert main(["synth", str(tmp_path / "bad.json"), str(tmp_path / "out")]) == 2
    assert "invalid scene spec" in capsys.readouterr().err


def test_train_missing_files_listed(tmp_path, work, capsys):
    import shutil
    shutil.copytree(work / "scene", tmp_path / "scene")
    (tmp_path / "scene" / "pixels.npy").unlink()
    (tmp_path / "scene" / "frame_002" / "cameras.json").unlink()
    assert main(["train", str(tmp_path / "scene"), str(tmp_path / "run")]) == 2
    err = capsys.readouterr().err
    assert "pixels.npy" in err and "frame_002" in err


def test_train_zero_iterations_is_initialization(tmp_path, work):
    assert main(["--config", str(work / "fast.json"), "train", str(work / "scene"), str(tmp_path / "r"),
                 "--iterations", "0"]) == 0
    g = load_grid(tmp_path / "r" / "grid")
    ref = init_grid(g.geometry, g.schema, TrainConfig.from_dict(FAST))
    assert np.array_equal(g.density_raw, ref.density_raw.astype(np.float32))
    assert np.array_equal(g.sem_logits, ref.sem_logits.astype(np.float32))


def test_train_combined_log_fields(tmp_path, work):
    assert main(["--config", str(work / "fast.json"), "train", str(work / "scene"), str(tmp_path / "r"),
                 "--mode", "combined"]) == 0
    lines = [json.loads(x) for x in (tmp_path / "r" / "log.jsonl").read_text().splitlines()]
    assert len(lines) == FAST["iterations"]
    for rec in lines:
        assert {"silog", "sem_ce", "occ3d_ce", "total"} <= set(rec)
        assert rec["occ3d_ce"] > 0 and rec["silog"] > 0 and rec["sem_ce"] > 0
    assert "miou" in lines[-1]


def test_train_non_finite_exits_3(tmp_path, work, capsys):
    (tmp_path / "nan.json").write_text('{"lr": NaN, "iterations": 3, "batch_rays": 64, "sampler": "voxel"}')
    assert main(["--config", str(tmp_path / "nan.json"), "train", str(work / "scene"), str(tmp_path / "r")]) == 3
    assert "non-finite" in capsys.readouterr().err


def test_bad_config_exits_2(tmp_path, work, capsys):
    (tmp_path / "c.json").write_text('{"learning_rate": 1}')
    assert main(["--config", str(tmp_path / "c.json"), "train", str(work / "scene"), str(tmp_path / "r")]) == 2
    assert "unknown config keys" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "none.json"), "train", str(work / "scene"), str(tmp_path / "r")]) == 2
    assert main(["--threads", "0", "synth", "a", "b"]) == 2
    assert main(["frobnicate"]) == 2


def test_render_occ3d_only_rejected_on_unlabeled(tmp_path, work):
    assert main(["train", str(work / "unlabeled"), str(tmp_path / "r"), "--mode", "occ3d_only"]) == 2


def empty_grid_dir(path, geo=None):
    geo = geo or GridGeometry((16, 16, 4), (-4.0, -4.0, -0.5), 0.5)
    save_grid(VoxelGrid.filled(geo, SemanticSchema(("ground", "wall", "car")), -1e3), path)
    return path


def test_render_empty_grid(tmp_path, work):
    grid = empty_grid_dir(tmp_path / "g")
    assert main(["render", str(grid), str(work / "scene" / "frame_000"), str(tmp_path / "o"), "--logits"]) == 0
    for i in range(4):
        assert np.all(read_pfm(tmp_path / "o" / f"cam{i}_depth.pfm") == 0)
        assert np.all(read_pfm(tmp_path / "o" / f"cam{i}_opacity.pfm") == 0)
        assert np.all(read_pgm(tmp_path / "o" / f"cam{i}_sem.pgm") == 0)
        assert read_blob(tmp_path / "o" / f"cam{i}_logits.f32").shape == (12, 24, 3)


def test_render_saturated_gt_matches_baked_depth(tmp_path, work):
    gt = load_labels(work / "scene" / "frame_000" / "labels")
    save_grid(labels_to_grid(gt), tmp_path / "gt")
    assert main(["render", str(tmp_path / "gt"), str(work / "scene" / "frame_000" / "cameras.json"),
                 str(tmp_path / "o"), "--sampler", "uniform", "--n-samples", "400", "--interp", "nearest"]) == 0
    px = PixelLabels.load(work / "scene" / "pixels.npy")
    key = px.frame == 0
    close = total = 0
    for cam in range(4):
        sel = key & (px.cam == cam)
        depth = read_pfm(tmp_path / "o" / f"cam{cam}_depth.pfm")
        sem = read_pgm(tmp_path / "o" / f"cam{cam}_sem.pgm")
        rows, cols = px.v[sel].astype(int), px.u[sel].astype(int)
        err = np.abs(depth[rows, cols] - px.depth[sel])
        close += int(np.sum(err <= gt.geometry.voxel_size))
        total += int(sel.sum())
        assert np.mean(sem[rows, cols] == px.cls[sel]) >= 0.99
    assert total > 0 and close >= 0.99 * total


def test_render_is_byte_reproducible(tmp_path, work):
    args = ["render", str(work / "run" / "grid"), str(work / "scene" / "frame_001")]
    assert main(args + [str(tmp_path / "a")]) == 0
    assert main(args + [str(tmp_path / "b")]) == 0
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    a.pop("manifest.json"), b.pop("manifest.json")
    assert a == b and len(a) == 12


def test_render_unreadable_grid(tmp_path, work, capsys):
    assert main(["render", str(tmp_path / "nowhere"), str(work / "scene" / "frame_000"), str(tmp_path / "o")]) == 2
    assert "nowhere" in capsys.readouterr().err
    (tmp_path / "g").mkdir()
    (tmp_path / "g" / "meta.json").write_text("{}")
    assert main(["render", str(tmp_path / "g"), str(work / "scene" / "frame_000"), str(tmp_path / "o")]) == 2


def test_eval_gt_against_itself(tmp_path, work):
    assert main(["eval", str(work / "scene" / "frame_000" / "labels"), str(work / "scene"), str(tmp_path / "e")]) == 0
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert report["miou"] == 1.0 and report["masked"] is True
    assert "mIoU" in (tmp_path / "e" / "report.txt").read_text()


def test_eval_mask_changes_score_on_occluded_errors(tmp_path, work):
    from occrender.grid import save_labels
    from occrender.train import load_scene
    scene = load_scene(work / "scene")
    pred = scene.labels[0]
    hidden = ~scene.visibility.visible & pred.occupied()
    assert hidden.any()
    wrong = pred.class_id.copy()
    wrong[hidden] = pred.schema.free_id  # erase everything the cameras cannot see
    save_labels(type(pred)(pred.geometry, pred.schema, wrong), tmp_path / "pred")
    assert main(["eval", str(tmp_path / "pred"), str(work / "scene"), str(tmp_path / "m")]) == 0
    assert main(["eval", str(tmp_path / "pred"), str(work / "scene"), str(tmp_path / "u"), "--no-mask"]) == 0
    masked = json.loads((tmp_path / "m" / "report.json").read_text())["miou"]
    unmasked = json.loads((tmp_path / "u" / "report.json").read_text())["miou"]
    assert masked == 1.0 and unmasked < 1.0


def test_eval_density_grid_and_missing_meta(tmp_path, work, capsys):
    assert main(["eval", str(work / "run" / "grid"), str(work / "scene"), str(tmp_path / "e")]) == 0
    assert main(["eval", str(tmp_path / "void"), str(work / "scene"), str(tmp_path / "e2")]) == 2
    assert "meta.json" in capsys.readouterr().err
    assert not (tmp_path / "e2").exists()


def test_eval_geometry_mismatch_prints_both(tmp_path, work, capsys):
    grid = empty_grid_dir(tmp_path / "g", GridGeometry((8, 8, 4), (0.0, 0.0, 0.0), 0.5))
    assert main(["eval", str(grid), str(work / "scene"), str(tmp_path / "e")]) == 2
    err = capsys.readouterr().err
    assert "[8, 8, 4]" in err and "[16, 16, 4]" in err
    assert not (tmp_path / "e").exists()


def test_dts_missing_checkpoint(tmp_path, work, capsys):
    assert main(["dts", str(work / "scene"), str(work / "unlabeled"), str(tmp_path / "none"), str(tmp_path / "o")]) == 2
    assert "occrender train" in capsys.readouterr().err


def test_dts_momentum_one_keeps_teacher(tmp_path, work):
    cfg = dict(FAST, ema_momentum=1.0)
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["--config", str(tmp_path / "c.json"), "dts", str(work / "scene"), str(work / "unlabeled"),
                 str(work / "run" / "grid"), str(tmp_path / "o")]) == 0
    assert files(tmp_path / "o" / "teacher") == files(work / "run" / "grid")
    assert files(tmp_path / "o" / "student") != files(work / "run" / "grid")
    log = [json.loads(x) for x in (tmp_path / "o" / "log.jsonl").read_text().splitlines()]
    assert "teacher_miou" in log[-1] and "student_miou" in log[-1]


def test_dts_zero_iterations(tmp_path, work):
    cfg = dict(FAST, dts_iterations=0)
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["--config", str(tmp_path / "c.json"), "dts", str(work / "scene"), str(work / "unlabeled"),
                 str(work / "run" / "grid"), str(tmp_path / "o")]) == 0
    assert files(tmp_path / "o" / "teacher") == files(work / "run" / "grid")


def test_manifest_contents(work):
    m = json.loads((work / "run" / "manifest.json").read_text())
    assert m["command"] == "train" and m["version"] == "v0.1.0" and m["seed"] == 0
    assert m["config"]["iterations"] == 4 and "train" in m["timings"]
    assert m["inputs"]["scene"].endswith("scene") and set(m["outputs"]) == {"grid", "log.jsonl"}


def test_replay_reproduces_run(tmp_path, work):
    assert main(["replay", str(work / "run" / "manifest.json"), str(tmp_path / "again")]) == 0
    a, b = files(work / "run"), files(tmp_path / "again")
    a.pop("manifest.json"), b.pop("manifest.json")
    assert a == b


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "occrender.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "v0.1.0" in out.stdout


def test_pfm_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).random((5, 7)).astype(np.float32)
    write_pfm(tmp_path / "x.pfm", img)
    assert np.array_equal(read_pfm(tmp_path / "x.pfm"), img)
    assert (tmp_path / "x.pfm").read_bytes().startswith(b"Pf\n7 5\n-1.0\n")
    lab = np.arange(35).reshape(5, 7) % 4
    write_pgm(tmp_path / "x.pgm", lab)
    assert np.array_equal(read_pgm(tmp_path / "x.pgm"), lab)
    write_pgm(tmp_path / "y.pgm", lab * 1000, maxval=65535)
    assert np.array_equal(read_pgm(tmp_path / "y.pgm"), lab * 1000)
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "z.pgm", lab + 300)
