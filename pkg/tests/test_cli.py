import json
from pathlib import Path

import numpy as np
import pytest

from wsis_forge import cli
from wsis_forge.arrayio import save_array
from wsis_forge.core import ImageGrid
from wsis_forge.harness import generate_scene, sample_scene_spec
from wsis_forge.peak_attention import AttentionParams


@pytest.fixture()
def scene_files(tmp_path):
    scene = generate_scene(sample_scene_spec(4, ImageGrid(40, 40), drop_rate=0.25,
                                             noise_bumps=3))
    acts = tmp_path / "activations.npy"
    save_array(acts, scene.activations.channels)
    wsss = tmp_path / "wsss.npy"
    save_array(wsss, scene.semantic.labels)
    params = tmp_path / "params.json"
    params.write_text(json.dumps(AttentionParams.identity(scene.num_classes, 0.7).to_json()))
    points = tmp_path / "points.json"
    points.write_text(json.dumps(
        [{"class_id": c.class_id, "y": c.y, "x": c.x} for c in scene.cues.cues]))
    return scene, acts, wsss, params, points


class TestCues:
    def test_writes_cue_json(self, scene_files, tmp_path):
        _scene, acts, _wsss, params, _pts = scene_files
        out = tmp_path / "cues.json"
        code = cli.main(["cues", "--activations", str(acts), "--params", str(params),
                         "--out", str(out)])
        assert code == 0
        payload = json.loads(out.read_text())
        assert payload["cues"]

    def test_missing_file_is_validation_error(self, tmp_path):
        code = cli.main(["cues", "--activations", str(tmp_path / "nope.npy"),
                         "--params", str(tmp_path / "nope.json"),
                         "--out", str(tmp_path / "out.json")])
        assert code == 2

    def test_default_delta_matches_explicit(self, scene_files, tmp_path):
        _scene, acts, _wsss, params, _pts = scene_files
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        assert cli.main(["cues", "--activations", str(acts), "--params", str(params),
                         "--out", str(a)]) == 0
        assert cli.main(["cues", "--activations", str(acts), "--params", str(params),
                         "--delta-p", "0.5", "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_pam_mode_requires_params(self, scene_files, tmp_path):
        _scene, acts, _wsss, _params, _pts = scene_files
        code = cli.main(["cues", "--activations", str(acts),
                         "--out", str(tmp_path / "c.json")])
        assert code == 64

    def test_raw_mode_skips_sharpening(self, scene_files, tmp_path):
        _scene, acts, _wsss, _params, _pts = scene_files
        out = tmp_path / "raw.json"
        code = cli.main(["cues", "--activations", str(acts), "--mode", "raw",
                         "--out", str(out)])
        assert code == 0
        assert json.loads(out.read_text())["cues"]


class TestTransfer:
    def test_point_mode_equals_cue_mode_at_same_positions(self, scene_files, tmp_path):
        scene, _acts, wsss, _params, points = scene_files
        cue_payload = {"cues": [{"class_id": c.class_id, "y": c.y, "x": c.x,
                                 "score": 1.0} for c in scene.cues.cues]}
        cues = tmp_path / "cues.json"
        cues.write_text(json.dumps(cue_payload))
        out_a = tmp_path / "via_cues"
        out_b = tmp_path / "via_points"
        assert cli.main(["transfer", "--wsss", str(wsss), "--cues", str(cues),
                         "--out-dir", str(out_a)]) == 0
        assert cli.main(["transfer", "--wsss", str(wsss), "--points", str(points),
                         "--out-dir", str(out_b)]) == 0
        for name in ("pseudo_center.npy", "pseudo_offset.npy", "labels.json"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_requires_exactly_one_cue_source(self, scene_files, tmp_path):
        _scene, _acts, wsss, _params, points = scene_files
        assert cli.main(["transfer", "--wsss", str(wsss),
                         "--out-dir", str(tmp_path / "x")]) == 64
        assert cli.main(["transfer", "--wsss", str(wsss), "--points", str(points),
                         "--cues", str(points), "--out-dir", str(tmp_path / "x")]) == 64

    def test_empty_cue_set_is_fine(self, scene_files, tmp_path):
        _scene, _acts, wsss, _params, _pts = scene_files
        cues = tmp_path / "none.json"
        cues.write_text(json.dumps({"cues": []}))
        out = tmp_path / "empty"
        assert cli.main(["transfer", "--wsss", str(wsss), "--cues", str(cues),
                         "--out-dir", str(out)]) == 0
        labels = json.loads((out / "labels.json").read_text())
        assert labels["instances"] == []

    def test_png_mask_input(self, scene_files, tmp_path):
        from wsis_forge.arrayio import save_mask_png

        scene, _acts, _wsss, _params, points = scene_files
        png = tmp_path / "wsss.png"
        save_mask_png(png, scene.semantic)
        out = tmp_path / "png_mode"
        assert cli.main(["transfer", "--wsss", str(png), "--points", str(points),
                         "--out-dir", str(out)]) == 0
        assert (out / "diagnostics.json").exists()


def small_run_config(tmp_path, **overrides):
    config = {
        "scenes": {"count": 2, "height": 40, "width": 40, "num_classes": 2,
                   "instances_min": 4, "instances_max": 4, "drop_rate": 0.5,
                   "noise_bumps": 3},
        "flags": {"pam": True, "iag": True, "refine": True, "cluster": True},
        "iterations": 40,
        "lr": 0.05,
        "seed": 3,
        "metrics_interval": 20,
        "output_dir": str(tmp_path / "out"),
    }
    config.update(overrides)
    return config


class TestRun:
    def test_zero_iterations_writes_single_row(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(small_run_config(tmp_path, iterations=0)))
        assert cli.main(["run", "--config", str(path)]) == 0
        rows = (tmp_path / "out" / "metrics.csv").read_text().strip().splitlines()
        assert len(rows) == 2
        assert rows[0].startswith("iteration,tp,map25,map50,map70,map75")
        assert rows[1].startswith("0,")

    def test_malformed_json_is_config_error(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        assert cli.main(["run", "--config", str(path)]) == 65

    def test_schema_violation_lists_keys(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        cfg = small_run_config(tmp_path)
        cfg["lr"] = "fast"
        cfg["bogus"] = 1
        path.write_text(json.dumps(cfg))
        assert cli.main(["run", "--config", str(path)]) == 65
        err = capsys.readouterr().err
        assert "lr" in err and "bogus" in err

    def test_deterministic_csv(self, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        for out in (out_a, out_b):
            path = tmp_path / f"cfg_{out.name}.json"
            path.write_text(json.dumps(small_run_config(tmp_path, output_dir=str(out))))
            assert cli.main(["run", "--config", str(path)]) == 0
        assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()

    def test_label_dumps_written(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(small_run_config(tmp_path, checkpoint_interval=20)))
        assert cli.main(["run", "--config", str(path)]) == 0
        scene_dir = tmp_path / "out" / "labels" / "scene_000"
        assert (scene_dir / "pseudo.json").exists()
        assert (scene_dir / "final.json").exists()
        assert list(scene_dir.glob("refined_iter*.json"))

    def test_threads_flag_matches_serial(self, tmp_path):
        out_a = tmp_path / "serial"
        out_b = tmp_path / "threads"
        pa = tmp_path / "ca.json"
        pa.write_text(json.dumps(small_run_config(tmp_path, output_dir=str(out_a))))
        pb = tmp_path / "cb.json"
        pb.write_text(json.dumps(small_run_config(tmp_path, output_dir=str(out_b))))
        assert cli.main(["run", "--config", str(pa)]) == 0
        assert cli.main(["run", "--config", str(pb), "--threads", "2"]) == 0
        assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()

    def test_env_threads_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.THREADS_ENV, "2")
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(small_run_config(tmp_path)))
        assert cli.main(["run", "--config", str(path)]) == 0
