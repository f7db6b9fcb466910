import hashlib
import json

import numpy as np
import pytest

from fkb import camera, cli, features, image, warp

from conftest import make_blocky_image


@pytest.fixture
def model_file(tmp_path):
    model = camera.equidistant_model(64, 64)
    path = tmp_path / "model.json"
    model.save(path)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestUsage:
    def test_unknown_flag_exit_1(self, capsys):
        assert run("detect", "--bogus") == 1

    def test_missing_subcommand_exit_1(self):
        assert run() == 1

    def test_missing_file_exit_2(self, tmp_path, capsys):
        assert run("detect", tmp_path / "missing.png") == 2
        assert "error[" in capsys.readouterr().err


class TestBakeLuts:
    def test_reproducible(self, model_file, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            assert run("--seed", 7, "bake-luts", "--model", model_file,
                       "--count", 3, "--out", out) == 0
        for name in sorted(p.name for p in out_a.glob("*.fwrp")):
            ha = hashlib.sha256((out_a / name).read_bytes()).hexdigest()
            hb = hashlib.sha256((out_b / name).read_bytes()).hexdigest()
            assert ha == hb
        manifest = json.loads((out_a / "run_manifest.json").read_text())
        assert manifest["subcommand"] == "bake-luts"
        assert manifest["config"]["seed"] == 7

    def test_range_error_exit_2(self, model_file, tmp_path):
        assert run("bake-luts", "--model", model_file, "--count", 1,
                   "--trans", 0.7, "--out", tmp_path / "x") == 2


class TestWarpCommands:
    def test_warp_unwarp_files(self, model_file, tmp_path):
        img = make_blocky_image(64, 1)
        src = tmp_path / "img.png"
        image.save(img, src)
        luts = tmp_path / "luts"
        assert run("--seed", 3, "bake-luts", "--model", model_file,
                   "--count", 1, "--out", luts) == 0
        assert run("warp", src, "--lut", luts / "lut_00000_fwd.fwrp",
                   "--out", tmp_path / "w") == 0
        warped = image.load(tmp_path / "w" / "img.png")
        assert warped.shape == (64, 64)
        assert run("unwarp", tmp_path / "w" / "img.png",
                   "--lut", luts / "lut_00000_inv.fwrp",
                   "--out", tmp_path / "u") == 0


class TestDetectDescribeMatch:
    def test_detect_keypoint_budget(self, tmp_path):
        img = make_blocky_image(128, 2, n_blocks=30)
        src = tmp_path / "img.png"
        image.save(img, src)
        assert run("detect", src, "--algo", "harris", "--nms", "8",
                   "--k", "300", "--out", tmp_path / "d") == 0
        kps = features.KeypointSet.load_csv(
            tmp_path / "d" / "img_keypoints.csv")
        assert 0 < len(kps) <= 300

    def test_describe_and_match(self, tmp_path):
        img = make_blocky_image(128, 3, n_blocks=30)
        src = tmp_path / "img.png"
        image.save(img, src)
        assert run("detect", src, "--out", tmp_path / "d") == 0
        assert run("describe", src,
                   "--keypoints", tmp_path / "d" / "img_keypoints.csv",
                   "--out", tmp_path / "desc") == 0
        desc = tmp_path / "desc" / "img_desc.fdsc"
        assert run("match", "--desc-a", desc, "--desc-b", desc,
                   "--out", tmp_path / "m") == 0
        lines = (tmp_path / "m" / "matches.csv").read_text().splitlines()
        assert lines[0] == "index_a,index_b,desc_distance"
        assert len(lines) > 1


class TestPipeline:
    def test_testset_eval_report(self, model_file, tmp_path, capsys):
        imgs = tmp_path / "imgs"
        imgs.mkdir()
        for i in range(3):
            image.save(make_blocky_image(64, 30 + i, n_blocks=14),
                       imgs / f"img_{i}.png")
        assert run("make-testset", "--images", imgs, "--mode", "illumination",
                   "--count", 3, "--out", tmp_path / "ts") == 0
        assert run("eval", "--testset", tmp_path / "ts", "--algo", "harris",
                   "--k", 100, "--out", tmp_path / "ev") == 0
        report = json.loads((tmp_path / "ev" / "report.json").read_text())
        assert 0 <= report["aggregates"]["repeatability"] <= 1
        assert run("report", tmp_path / "ev" / "report.csv",
                   "--out", tmp_path / "sum") == 0
        summary = (tmp_path / "sum" / "summary.csv").read_text().splitlines()
        assert summary[0].startswith("algorithm,condition,nms,k")
        assert len(summary) == 2

    def test_adapt_command(self, model_file, tmp_path):
        imgs = tmp_path / "imgs"
        imgs.mkdir()
        img = np.zeros((64, 64), np.uint8)
        img[24:40, 24:40] = 255
        image.save(img, imgs / "img.png")
        luts = tmp_path / "luts"
        assert run("--seed", 5, "bake-luts", "--model", model_file,
                   "--count", 4, "--rot-deg", 15, "--trans", 0.15,
                   "--out", luts) == 0
        assert run("adapt", "--images", imgs, "--model", model_file,
                   "--luts", luts, "--n-warps", 4, "--base-algo", "harris",
                   "--out", tmp_path / "ad") == 0
        manifest = json.loads(
            (tmp_path / "ad" / "adapt_manifest.json").read_text())
        assert manifest["n_warps"] == 4
        assert len(list((tmp_path / "ad").glob("*_labels.csv"))) == 1

    def test_every_run_writes_manifest(self, model_file, tmp_path):
        assert run("--seed", 2, "bake-luts", "--model", model_file,
                   "--count", 1, "--out", tmp_path / "o") == 0
        manifests = list((tmp_path / "o").glob("run_manifest.json"))
        assert len(manifests) == 1
        payload = json.loads(manifests[0].read_text())
        assert payload["tool"] == "fkb"
        assert "version" in payload
        assert str(model_file) in payload["input_digests"]
