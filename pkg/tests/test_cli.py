import csv
import json
import logging

import pytest

from splatview.cli import main
from splatview.imageio import read_pfm

BENCH_KEYS = {"ms_per_frame_forward", "ms_backward", "fps", "threads", "size", "spheres",
              "frames", "backend", "checksum", "scaling"}
TIMING_KEYS = {"ms_per_frame_forward", "ms_backward", "fps", "scaling", "speedup"}


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["dataset-gen", "--out", str(root), "--count", "2", "--size", "40",
                 "--targets", "2", "--seed", "5"]) == 0
    return root


def test_dataset_gen_layout(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["fixtures"] == ["fixture_000", "fixture_001"]
    fx = dataset / "fixture_000"
    for view in ("input", "occlusion_free", "target_00", "target_01"):
        for name in ("rgb.png", "depth.png", "iuv.png", "mask.png", "camera.json"):
            assert (fx / view / name).exists()
    assert (fx / "scene.json").exists()


def test_dataset_gen_deterministic(tmp_path, dataset):
    main(["dataset-gen", "--out", str(tmp_path), "--count", "2", "--size", "40", "--targets", "2",
          "--seed", "5"])
    assert tree_bytes(tmp_path) == tree_bytes(dataset)


def test_render_outputs_and_metrics(tmp_path, dataset):
    fx = dataset / "fixture_000"
    out = tmp_path / "r"
    code = main(["render", "--input", str(fx / "input"), "--camera", str(fx / "input" / "camera.json"),
                 "--out", str(out), "--gt", str(fx / "input"), "--threads", "2"])
    assert code == 0
    for name in ("rgb.png", "features.pfm", "alpha.pfm", "depth.pfm", "winner.pfm", "camera.json"):
        assert (out / name).exists()
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["psnr"] >= 40
    assert read_pfm(out / "alpha.pfm").shape == (40, 40)


def test_render_deterministic(tmp_path, dataset):
    fx = dataset / "fixture_000"
    args = ["render", "--input", str(fx / "input"), "--camera", str(fx / "target_00" / "camera.json"),
            "--sparsity", "0.3", "--seed", "4", "--complete", "--threads", "2", "--fit-steps", "2"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_render_missing_camera(tmp_path, dataset, capsys):
    code = main(["render", "--input", str(dataset / "fixture_000" / "input"),
                 "--camera", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_missing_required_option(capsys):
    assert main(["render", "--camera", "x.json"]) == 2
    assert "--input" in capsys.readouterr().err
    assert main([]) == 2
    assert main(["frobnicate"]) == 2


def test_config_file_precedence(tmp_path, dataset):
    fx = dataset / "fixture_000"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"input": str(fx / "input"), "camera": str(fx / "input" / "camera.json"),
                               "out": str(tmp_path / "from_config"), "gamma": -1.0}))
    # the config value is invalid, the flag overrides it
    assert main(["render", "--config", str(cfg)]) == 2
    assert main(["render", "--config", str(cfg), "--gamma", "0.1"]) == 0
    assert (tmp_path / "from_config" / "rgb.png").exists()
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert main(["render", "--config", str(bad)]) == 2


def test_pipeline_render_only_warning(tmp_path, dataset, caplog):
    fx = dataset / "fixture_000"
    with caplog.at_level(logging.WARNING):
        code = main(["pipeline", "--input", str(fx / "input"), "--occlusion-free",
                     str(fx / "occlusion_free"), "--camera", str(fx / "target_00" / "camera.json"),
                     "--out", str(tmp_path / "p")])
    assert code == 0
    assert "render-only" in caplog.text


def test_pipeline_deterministic(tmp_path, dataset):
    fx = dataset / "fixture_000"
    args = ["pipeline", "--input", str(fx / "input"), "--occlusion-free", str(fx / "occlusion_free"),
            "--camera", str(fx / "target_00" / "camera.json"),
            "--target-iuv", str(fx / "target_00" / "iuv.png"), "--threads", "2"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "warped.png").exists()
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_bench_schema(tmp_path):
    out = tmp_path / "b.json"
    assert main(["bench", "--size", "48x32", "--spheres", "500", "--frames", "1",
                 "--threads", "1,2", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert BENCH_KEYS <= set(report)
    assert report["size"] == [48, 32]
    assert [r["threads"] for r in report["scaling"]] == [1, 2]
    assert "speedup" in report


def test_bench_deterministic_apart_from_timing(tmp_path):
    args = ["bench", "--size", "32x32", "--spheres", "300", "--frames", "1", "--threads", "2"]
    main(args + ["--out", str(tmp_path / "a.json")])
    main(args + ["--out", str(tmp_path / "b.json")])
    a, b = (json.loads((tmp_path / n).read_text()) for n in ("a.json", "b.json"))
    assert {k: v for k, v in a.items() if k not in TIMING_KEYS} == \
        {k: v for k, v in b.items() if k not in TIMING_KEYS}


@pytest.mark.parametrize("argv", [["--spheres", "0"], ["--size", "abc"], ["--frames", "0"]])
def test_bench_bad_arguments(argv):
    assert main(["bench"] + argv) == 2


def test_fit_radii(tmp_path, dataset):
    fx = dataset / "fixture_000"
    (fx / "targets.json").write_text(json.dumps(["input", "target_00", "target_01"]))
    args = ["fit-radii", "--input", str(fx / "input"), "--targets", str(fx / "targets.json"),
            "--steps", "3", "--sparsity", "0.5", "--threads", "2"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    main(args + ["--out", str(tmp_path / "b")])
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    rows = list(csv.DictReader((tmp_path / "a" / "trace.csv").open()))
    assert len(rows) == 3 and float(rows[0]["total"]) > 0
    assert main(args[:-2] + ["--optimize", "colors", "--out", str(tmp_path / "c")]) == 2


def test_evaluate(tmp_path, dataset):
    fx = dataset / "fixture_000"
    cam = str(fx / "input" / "camera.json")
    main(["render", "--input", str(fx / "input"), "--camera", cam, "--out", str(tmp_path / "r")])
    main(["render", "--input", str(fx / "input"), "--camera", cam, "--out", str(tmp_path / "s")])
    outs = []
    for name in ("e1.json", "e2.json"):
        assert main(["evaluate", "--pred", str(tmp_path / "r"), "--gt", str(fx / "input"),
                     "--pair", str(tmp_path / "s"), "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]
    report = json.loads(outs[0])
    assert report["psnr"] >= 40 and report["consistency"] == 0.0
    assert main(["evaluate", "--pred", str(tmp_path / "missing"), "--gt", str(fx / "input")]) == 2


def test_sparsity_sweep(tmp_path, dataset):
    args = ["sparsity-sweep", "--input", str(dataset / "fixture_000"), "--steps", "2",
            "--threads", "2"]
    assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    main(args + ["--out", str(tmp_path / "b.csv")])
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.DictReader((tmp_path / "a.csv").open()))
    assert [float(r["sparsity"]) for r in rows] == [0.05, 0.1, 0.25, 1.0]
    assert main(["sparsity-sweep", "--input", str(tmp_path / "none")]) == 2
