import json
import os

import numpy as np
import pytest

from udfkit.cli import EXIT_CONFIG, EXIT_DEGENERATE, EXIT_IO, EXIT_NUMERIC, main
from udfkit.field import load_checkpoint
from udfkit.fixtures import KINDS
from udfkit.geometry import load_mesh, load_point_cloud

SMALL_CFG = """# tiny run for the command-line tests
iterations = 40
width = 16
depth = 3
batch_size = 300
dist_subsample = 300
queries_per_point = 4
log_every = 10
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """fixtures -> fit once, shared by the downstream command tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["fixtures", "--count", "600", "--seed", "1", "--out", str(root / "fx")]) == 0
    cfg = root / "small.cfg"
    cfg.write_text(SMALL_CFG)
    cloud = root / "fx" / "sphere.xyz"
    assert main(["fit", str(cloud), "--config", str(cfg), "--out", str(root / "fit")]) == 0
    return root


def test_fixtures_writes_every_kind(run):
    for kind in KINDS:
        assert len(load_point_cloud(run / "fx" / f"{kind}.xyz")) == 600
    man = json.loads((run / "fx" / "manifest.json").read_text())
    assert man["command"] == "fixtures" and man["seed"] == 1


def test_fit_outputs_and_manifest(run):
    d = run / "fit"
    assert (d / "checkpoint.udf").exists()
    trace = (d / "trace.tsv").read_text().splitlines()
    assert len(trace) == 1 + 4
    man = json.loads((d / "manifest.json").read_text())
    for key in ("command", "args", "config", "inputs", "seed", "tool_version", "outputs", "wall_clock"):
        assert key in man
    assert man["config"]["iterations"] == 40 and man["config"]["width"] == 16
    (digest,) = man["inputs"].values()
    assert len(digest) == 64
    # the checkpoint keeps the normalization so outputs can return to input coordinates
    ck = load_checkpoint(d / "checkpoint.udf")
    assert ck.scale > 0


def test_set_overrides_config_file(run, tmp_path):
    out = tmp_path / "o"
    assert main(["fit", str(run / "fx" / "plane.xyz"), "--config", str(run / "small.cfg"),
                 "--set", "iterations=3", "--set", "seed=4", "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["iterations"] == 3 and man["seed"] == 4


def test_replay_is_bit_identical(run, tmp_path):
    assert main(["replay", str(run / "fit" / "manifest.json"), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "checkpoint.udf").read_bytes() == (run / "fit" / "checkpoint.udf").read_bytes()


def test_replay_uses_config_snapshot(run, tmp_path):
    # the original config file may change or vanish; the manifest snapshot still rules
    work = tmp_path / "w"
    cfg = tmp_path / "c.cfg"
    cfg.write_text(SMALL_CFG.replace("iterations = 40", "iterations = 5"))
    assert main(["fit", str(run / "fx" / "sphere.xyz"), "--config", str(cfg), "--out", str(work)]) == 0
    cfg.unlink()
    assert main(["replay", str(work / "manifest.json"), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "checkpoint.udf").read_bytes() == (work / "checkpoint.udf").read_bytes()


def test_reconstruct(run, tmp_path):
    assert main(["reconstruct", str(run / "fit" / "checkpoint.udf"), "--resolution", "24",
                 "--out", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    path = tmp_path / "mesh.obj"
    assert path.exists()
    if man["empty"]:
        assert path.stat().st_size == 0
    else:
        mesh = load_mesh(path)
        assert len(mesh.triangles) == man["triangles"]


def test_reconstruct_resolution_two(run, tmp_path):
    assert main(["reconstruct", str(run / "fit" / "checkpoint.udf"), "--resolution", "2",
                 "--name", "m.ply", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "m.ply").exists()


def test_reconstruct_empty_writes_sentinel(run, tmp_path):
    # a zero threshold activates no cell
    assert main(["reconstruct", str(run / "fit" / "checkpoint.udf"), "--resolution", "8",
                 "--threshold", "0", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "mesh.obj").stat().st_size == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["empty"] is True


def test_normals_six_columns(run, tmp_path):
    src = run / "fx" / "sphere.xyz"
    assert main(["normals", str(run / "fit" / "checkpoint.udf"), "--input", str(src), "--out", str(tmp_path)]) == 0
    rows = np.loadtxt(tmp_path / "normals.xyz")
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert rows.shape == (600 - man["degenerate"], 6)
    np.testing.assert_allclose(np.linalg.norm(rows[:, 3:], axis=1), 1.0, atol=1e-9)
    # positions come back in input coordinates
    np.testing.assert_allclose(rows[:, :3], load_point_cloud(src).points[:len(rows)], atol=1e-12)


def test_upsample_factor_four(run, tmp_path):
    src = run / "fx" / "sphere.xyz"
    code = main(["upsample", str(run / "fit" / "checkpoint.udf"), "--input", str(src),
                 "--factor", "4", "--beta", "1.0", "--out", str(tmp_path)])
    assert code == 0
    assert len(load_point_cloud(tmp_path / "upsampled.xyz")) == 2400


def test_upsample_beta_zero_is_partial(run, tmp_path):
    src = run / "fx" / "sphere.xyz"
    code = main(["upsample", str(run / "fit" / "checkpoint.udf"), "--input", str(src),
                 "--beta", "0", "--max-rounds", "2", "--out", str(tmp_path)])
    assert code == EXIT_DEGENERATE


def test_upsample_bad_factor(run, tmp_path):
    code = main(["upsample", str(run / "fit" / "checkpoint.udf"), "--input", str(run / "fx" / "sphere.xyz"),
                 "--factor", "0", "--out", str(tmp_path)])
    assert code == EXIT_CONFIG


def test_eval_identity(run, tmp_path, capsys):
    src = str(run / "fx" / "torus.xyz")
    assert main(["eval", "--pred", src, "--gt", src, "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["cd_l1"] == 0.0 and rep["cd_l2"] == 0.0
    assert rep["fscore_at"] == {"0.005": 100.0, "0.01": 100.0}
    assert "fscore@0.01\t100" in capsys.readouterr().out


def test_missing_input_is_io_error(tmp_path, capsys):
    assert main(["fit", str(tmp_path / "nope.xyz"), "--out", str(tmp_path / "o")]) == EXIT_IO
    assert "nope.xyz" in capsys.readouterr().err
    assert main(["reconstruct", str(tmp_path / "nope.udf"), "--out", str(tmp_path / "o")]) == EXIT_IO


def test_parse_error_is_io_error(tmp_path):
    bad = tmp_path / "bad.xyz"
    bad.write_text("0 0 0\n1 x 0\n")
    assert main(["fit", str(bad), "--out", str(tmp_path / "o")]) == EXIT_IO


def test_corrupt_checkpoint_is_io_error(tmp_path):
    bad = tmp_path / "bad.udf"
    bad.write_bytes(b"not a checkpoint")
    assert main(["reconstruct", str(bad), "--out", str(tmp_path / "o")]) == EXIT_IO


def test_unknown_key_is_config_error(run, tmp_path, capsys):
    code = main(["fit", str(run / "fx" / "sphere.xyz"), "--set", "alpha9=1", "--out", str(tmp_path)])
    assert code == EXIT_CONFIG
    assert "alpha9" in capsys.readouterr().err


def test_degenerate_cloud(tmp_path):
    p = tmp_path / "same.xyz"
    p.write_text("1 1 1\n1 1 1\n1 1 1\n")
    assert main(["fit", str(p), "--out", str(tmp_path / "o")]) == EXIT_DEGENERATE


def test_numeric_failure_exit_and_last_good(run, tmp_path):
    # an absurd step size blows the parameters up within a few iterations
    out = tmp_path / "o"
    code = main(["fit", str(run / "fx" / "sphere.xyz"), "--config", str(run / "small.cfg"),
                 "--set", "optimizer=sgd", "--set", "step_size=1e30", "--out", str(out)])
    assert code == EXIT_NUMERIC
    assert (out / "last_good.udf").exists()
    assert json.loads((out / "manifest.json").read_text())["status"] == "numeric-failure"


def test_argparse_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["fit"])
    assert err.value.code == 2
