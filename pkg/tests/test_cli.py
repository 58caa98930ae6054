import os
import subprocess
import sys

import numpy as np
import pytest

from yoloant import archnet as A
from yoloant import cli
from yoloant import formats as F
from yoloant.params import learnable_leaves


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def run_proc(*argv, threads=1):
    env = dict(os.environ)
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        env[var] = str(threads)
    proc = subprocess.run([sys.executable, "-m", "yoloant.cli", *argv], capture_output=True, env=env)
    return proc.returncode, proc.stdout


@pytest.fixture(scope="module")
def images(tmp_path_factory):
    d = tmp_path_factory.mktemp("img")
    rng = np.random.default_rng(0)
    F.save_atf(d / "r320.atf", rng.random((1, 3, 320, 320), dtype=np.float32))
    F.save_atf(d / "z320.atf", np.zeros((1, 3, 320, 320), np.float32))
    (d / "black320.ppm").write_bytes(F.encode_ppm(np.zeros((3, 320, 320))))
    F.save_atf(d / "odd.atf", np.zeros((1, 3, 100, 100), np.float32))
    return d


@pytest.fixture()
def eval_files(tmp_path):
    gt = tmp_path / "gt.txt"
    gt.write_text("img 0 0 0 10 10\nimg 0 50 50 60 60\n")
    det = tmp_path / "det.txt"
    det.write_text("img 0 0 0 10 10 0.9\nimg 0 100 100 110 110 0.8\n")
    return gt, det


class TestDescribe:
    @pytest.mark.parametrize("model,total", [("yolov5s", 7235389), ("yolov5s-pruned", 5398845)])
    def test_totals(self, capsys, model, total):
        code, out, _ = run(capsys, "describe", "--model", model, "--nc", "80")
        assert code == 0 and f"total params {total}" in out

    def test_yolo_ant(self, capsys):
        code, out, _ = run(capsys, "describe")
        assert code == 0 and "total params 6193725" in out and "GFLOPs 15.95" in out

    def test_csv(self, capsys, tmp_path):
        code, _, _ = run(capsys, "describe", "--model", "yolov5s", "--csv", str(tmp_path / "r.csv"))
        assert code == 0
        assert (tmp_path / "r.csv").read_text().startswith("stage,name,params,flops,out_shape\n")

    def test_override(self, capsys):
        code, out, _ = run(capsys, "describe", "--set", "vit_sr=1,1", "--set", "heads=2")
        assert code == 0 and "sr1" in out

    @pytest.mark.parametrize("argv", [
        ("describe", "--model", "yolov9"),
        ("describe", "--nc", "0"),
        ("describe", "--input-size", "100"),
        ("describe", "--input-size", "abc"),
        ("describe", "--set", "nonsense"),
        ("describe", "--set", "depth=3"),
        ("describe", "--set", "vit_sr=3,2"),
        ("describe", "--model", "yolov5s", "--set", "heads=2"),
        (),
        ("frobnicate",),
    ])
    def test_usage_errors(self, capsys, argv):
        code, _, err = run(capsys, *argv)
        assert code == 2 and err.startswith("error:")


class TestForward:
    def test_writes_detections(self, capsys, images, tmp_path):
        out = tmp_path / "d.txt"
        code, _, _ = run(capsys, "forward", str(images / "r320.atf"), "--model", "yolov5s", "-o", str(out))
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines and all(len(ln.split()) == 7 for ln in lines)

    def test_ppm_equals_atf(self, capsys, images):
        _, a, _ = run(capsys, "forward", str(images / "black320.ppm"), "--model", "yolov5s-pruned")
        _, b, _ = run(capsys, "forward", str(images / "z320.atf"), "--model", "yolov5s-pruned")
        assert a == b and a

    def test_grid_at_320(self, capsys, images):
        _, out, _ = run(capsys, "forward", str(images / "r320.atf"), "--conf", "0", "--iou", "1.0")
        # every (cell, anchor) survives: 3 * (40^2 + 20^2 + 10^2)
        assert len(out.splitlines()) == 3 * (1600 + 400 + 100)

    def test_seed_changes_output(self, capsys, images):
        _, a, _ = run(capsys, "forward", str(images / "r320.atf"), "--seed", "1")
        _, b, _ = run(capsys, "forward", str(images / "r320.atf"), "--seed", "2")
        assert a != b

    def test_weights_round_trip(self, capsys, images, tmp_path):
        g = A.build_yolo_ant(80, input_size=(320, 320))
        F.save_weights(tmp_path / "w.antw", A.init_params(g, seed=0))
        _, a, _ = run(capsys, "forward", str(images / "r320.atf"), "--weights", str(tmp_path / "w.antw"))
        _, b, _ = run(capsys, "forward", str(images / "r320.atf"))
        assert a == b

    def test_manifest_mismatch_exit_3(self, capsys, images, tmp_path):
        g = A.build_yolov5s(80)
        entries = dict(learnable_leaves(A.init_params(g)))
        entries.pop("24.bias")
        entries["x.y"] = np.zeros(1, np.float32)
        with open(tmp_path / "w.antw", "wb") as f:
            F.write_antw(f, entries.items())
        code, _, err = run(capsys, "forward", str(images / "z320.atf"), "--model", "yolov5s",
                           "--weights", str(tmp_path / "w.antw"))
        assert code == 3 and "24.bias" in err and "x.y" in err

    def test_bad_geometry_exit_2(self, capsys, images):
        code, _, _ = run(capsys, "forward", str(images / "odd.atf"))
        assert code == 2
        code, _, _ = run(capsys, "forward", str(images / "r320.atf"), "--input-size", "640")
        assert code == 2

    def test_corrupt_input_exit_3(self, capsys, tmp_path):
        (tmp_path / "junk.bin").write_bytes(b"garbage")
        assert run(capsys, "forward", str(tmp_path / "junk.bin"))[0] == 3
        assert run(capsys, "forward", str(tmp_path / "missing.atf"))[0] == 3

    def test_corrupt_weights_exit_3(self, capsys, images, tmp_path):
        (tmp_path / "w.antw").write_bytes(b"ANTW\x01\x00\x00\x00")
        assert run(capsys, "forward", str(images / "z320.atf"), "--weights", str(tmp_path / "w.antw"))[0] == 3


class TestGradcheck:
    def test_default_passes(self, capsys):
        code, out, _ = run(capsys, "gradcheck")
        assert code == 0
        lines = out.splitlines()
        n = len(lines) - 1
        assert lines[-1] == f"{n}/{n} passed"
        for name in ("CBS", "DSLK-Block", "DSLK-Layer", "f_local", "MHSA", "f_global", "FFN", "DSLKVit"):
            assert any(ln.split()[:2] == ["PASS", name] for ln in lines[:-1]), name

    def test_tiny_tolerance_fails(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--tol", "1e-12")
        assert code != 0 and "FAIL" in out

    def test_broken_backward(self, capsys, monkeypatch):
        from yoloant import diffcheck as D

        good = D.VJPS["softmax_rows"]
        monkeypatch.setitem(D.VJPS, "softmax_rows", lambda g, out, x: tuple(2 * v for v in good(g, out, x)))
        code, out, _ = run(capsys, "gradcheck")
        assert code != 0 and "MHSA" in out


class TestEval:
    def test_fixture_half(self, capsys, eval_files):
        code, out, _ = run(capsys, "eval", *map(str, eval_files))
        assert code == 0
        rows = dict(ln.split() for ln in out.splitlines()[1:])
        assert abs(float(rows["mAP.5"]) - 0.5) < 0.01
        assert rows["P"] == "0.500000" and rows["R"] == "0.500000"

    def test_gt_as_det(self, capsys, tmp_path, eval_files):
        gt, _ = eval_files
        det = tmp_path / "perfect.txt"
        det.write_text("".join(ln + " 1.0\n" for ln in gt.read_text().splitlines()))
        _, out, _ = run(capsys, "eval", str(gt), str(det))
        rows = dict(ln.split() for ln in out.splitlines()[1:])
        assert rows["mAP.5:.95"] == "1.000000"

    def test_empty_detections(self, capsys, tmp_path, eval_files):
        gt, _ = eval_files
        (tmp_path / "none.txt").write_text("")
        code, out, _ = run(capsys, "eval", str(gt), str(tmp_path / "none.txt"))
        rows = dict(ln.split() for ln in out.splitlines()[1:])
        assert code == 0
        assert all(v in ("0.000000", "n/a") for v in rows.values())
        assert rows["mAP.5"] == rows["mAP.5:.95"] == rows["P"] == rows["R"] == "0.000000"

    def test_csv(self, capsys, tmp_path, eval_files):
        run(capsys, "eval", *map(str, eval_files), "--csv", str(tmp_path / "m.csv"))
        head, vals = (tmp_path / "m.csv").read_text().splitlines()
        assert head.split(",")[:4] == ["P", "R", "mAP.5", "mAP.5:.95"]

    def test_parse_error_line_number(self, capsys, tmp_path, eval_files):
        gt, _ = eval_files
        (tmp_path / "bad.txt").write_text("img 0 0 0 10 10 0.9\nimg 0 0 0 10\n")
        code, _, err = run(capsys, "eval", str(gt), str(tmp_path / "bad.txt"))
        assert code == 2 and "bad.txt:2" in err

    def test_empty_ground_truth(self, capsys, tmp_path, eval_files):
        _, det = eval_files
        (tmp_path / "none.txt").write_text("")
        assert run(capsys, "eval", str(tmp_path / "none.txt"), str(det))[0] == 3


class TestPruneCompare:
    def test_table(self, capsys, tmp_path):
        code, out, _ = run(capsys, "prune-compare", "--csv", str(tmp_path / "t.csv"))
        assert code == 0 and "1836544" in out
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "stage,name,params_baseline,params_pruned,baseline_minus_pruned"
        cols = [ln.split(",") for ln in lines[1:6]]
        assert [int(c[2]) for c in cols] == [90880, 147712, 296448, 590336, 1182720]
        assert [int(c[3]) for c in cols] == [173312, 147712, 173312, 147712, 173312]
        assert lines[-1] == ",total,7235389,5398845,1836544"


class TestDeterminism:
    @pytest.mark.parametrize("threads", [1, 4])
    def test_forward_across_processes(self, images, threads):
        argv = ("forward", str(images / "r320.atf"))
        ref = run_proc(*argv, threads=1)
        assert ref[0] == 0 and ref[1]
        assert run_proc(*argv, threads=threads) == ref

    def test_describe_and_eval_stable(self, capsys, eval_files):
        for argv in (("describe",), ("eval", *map(str, eval_files)), ("prune-compare",)):
            assert run(capsys, *argv) == run(capsys, *argv)
