import json
import os
from pathlib import Path

import numpy as np
import pytest

from vlmt.cli import main

from test_dataset import _dir_bytes


TINY_SETS = [
    "--set", "world.grid_extent=32",
    "--set", "world.backbone_resolution=32",
    "--set", "world.expert_resolution=32",
    "--set", "world.half_size_max=5",
    "--set", "world.num_objects=2",
    "--set", "world.horizon=4",
    "--set", "backbone.dim=16",
    "--set", "backbone.layers=4",
    "--set", "backbone.heads=2",
    "--set", "backbone.mlp_ratio=2",
    "--set", "expert.dim=12",
    "--set", "expert.layers=3",
    "--set", "expert.heads=2",
    "--set", "expert.mlp_ratio=2",
    "--set", "coupling.n=2",
    "--set", "train.batch_size=8",
    "--set", "train.eval_every=5",
    "--set", "train.warmup=2",
]


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    train_dir = str(root / "train")
    eval_dir = str(root / "eval")
    assert main(["gen-data", "--seed", "3", "--episodes", "24", "--out", train_dir] + TINY_SETS) == 0
    assert main(["gen-data", "--seed", "4", "--episodes", "8", "--out", eval_dir] + TINY_SETS) == 0
    return root, train_dir, eval_dir


@pytest.fixture(scope="module")
def cli_run(cli_data):
    root, train_dir, eval_dir = cli_data
    out = str(root / "run")
    rc = main([
        "train", "--data", train_dir, "--eval-data", eval_dir,
        "--out", out, "--steps", "10", "--seed", "0",
    ] + TINY_SETS)
    assert rc == 0
    return out


class TestHelp:
    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["--help"])
        assert e.value.code == 0
        out = capsys.readouterr().out
        for cmd in ("gen-data", "train", "eval", "infer", "probe-mask",
                    "probe-attn", "gradcheck", "ablate"):
            assert cmd in out

    def test_unknown_command_exits_two(self):
        with pytest.raises(SystemExit) as e:
            main(["frobnicate"])
        assert e.value.code == 2

    def test_unknown_flag_exits_two(self):
        with pytest.raises(SystemExit) as e:
            main(["gen-data", "--bogus", "1"])
        assert e.value.code == 2

    def test_subcommand_help_documents_flags(self, capsys):
        for cmd, flag in (
            ("train", "--config"),
            ("train", "--set"),
            ("gradcheck", "--f64"),
            ("probe-mask", "--fractions"),
        ):
            with pytest.raises(SystemExit) as e:
                main([cmd, "--help"])
            assert e.value.code == 0
            assert flag in capsys.readouterr().out


class TestGenData:
    def test_rerun_identical_bytes(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        args = ["gen-data", "--seed", "7", "--episodes", "10"] + TINY_SETS
        assert main(args + ["--out", a]) == 0
        assert main(args + ["--out", b]) == 0
        assert _dir_bytes(a) == _dir_bytes(b)

    def test_error_is_single_line(self, tmp_path, capsys):
        rc = main(["gen-data", "--seed", "0", "--episodes", "1",
                   "--out", str(tmp_path / "x"), "--set", "nonsense=1"])
        assert rc == 1
        err = capsys.readouterr().err.strip()
        assert len(err.split("\n")) == 1
        assert err.startswith("error: ")


class TestTrainEvalInfer:
    def test_train_outputs(self, cli_run):
        for name in ("metrics.csv", "final.ckpt", "best.ckpt", "config.txt"):
            assert os.path.exists(os.path.join(cli_run, name))

    def test_eval_writes_metrics(self, cli_data, cli_run, capsys):
        root, _, eval_dir = cli_data
        out = str(root / "evalout")
        rc = main(["eval", "--ckpt", os.path.join(cli_run, "final.ckpt"),
                   "--data", eval_dir, "--out", out])
        assert rc == 0
        payload = json.loads(Path(out, "metrics.json").read_text())
        assert set(payload) >= {"mean_l1", "endpoint_error", "per_color", "count"}

    def test_infer_prints_chunk(self, cli_data, cli_run, capsys):
        _, _, eval_dir = cli_data
        rc = main(["infer", "--ckpt", os.path.join(cli_run, "final.ckpt"),
                   "--data", eval_dir, "--episode", "2"])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert len(payload["chunk"]) == 4
        assert all(abs(v) <= 1.0 for row in payload["chunk"] for v in row)

    def test_train_determinism_bytes(self, cli_data, tmp_path):
        _, train_dir, eval_dir = cli_data
        outs = []
        for tag in ("r1", "r2"):
            out = str(tmp_path / tag)
            rc = main(["train", "--data", train_dir, "--eval-data", eval_dir,
                       "--out", out, "--steps", "6", "--seed", "1"] + TINY_SETS)
            assert rc == 0
            outs.append(out)
        for name in ("metrics.csv", "final.ckpt"):
            assert Path(outs[0], name).read_bytes() == Path(outs[1], name).read_bytes()


class TestProbes:
    def test_probe_mask_complete_grid_and_determinism(self, cli_data, cli_run, tmp_path):
        _, _, eval_dir = cli_data
        texts = []
        for tag in ("p1", "p2"):
            out = str(tmp_path / tag)
            rc = main(["probe-mask", "--ckpt", os.path.join(cli_run, "final.ckpt"),
                       "--data", eval_dir, "--out", out,
                       "--layers", "1..4", "--fractions", "0,0.5,1", "--repeats", "2",
                       "--episodes", "4", "--seed", "5"])
            assert rc == 0
            texts.append(Path(out, "masking.csv").read_bytes())
        assert texts[0] == texts[1]
        lines = texts[0].decode().strip().split("\n")
        assert len(lines) == 2 + 4 * 3 * 2  # header + columns + grid
        assert lines[0].startswith("# vlmt-probe-mask/1 trained=1")

    def test_probe_attn_writes_csv_and_pgm(self, cli_data, cli_run, tmp_path):
        _, _, eval_dir = cli_data
        out = str(tmp_path / "attn")
        rc = main(["probe-attn", "--ckpt", os.path.join(cli_run, "final.ckpt"),
                   "--data", eval_dir, "--out", out, "--layers", "1,3",
                   "--episodes", "2", "--heatmaps"])
        assert rc == 0
        assert os.path.exists(os.path.join(out, "attribution.csv"))
        pgms = [f for f in os.listdir(out) if f.endswith(".pgm")]
        assert len(pgms) == 4
        text = Path(out, pgms[0]).read_text()
        assert text.startswith("P2\n")


class TestGradcheckCommand:
    def test_runs_green(self, capsys):
        rc = main(["gradcheck", "--modes", "baseline", "--seeds", "1"])
        assert rc == 0
        assert "ok" in capsys.readouterr().out


class TestAblate:
    def test_selection_axis_three_runs(self, cli_data, tmp_path, capsys):
        _, train_dir, eval_dir = cli_data
        out = str(tmp_path / "ab")
        rc = main(["ablate", "--axis", "selection", "--values", "first,uniform,last",
                   "--data", train_dir, "--eval-data", eval_dir, "--out", out,
                   "--steps", "4", "--seed", "0"] + TINY_SETS)
        assert rc == 0
        logs = []
        for value in ("first", "uniform", "last"):
            path = Path(out, "selection", value, "metrics.csv")
            assert path.exists()
            logs.append(path.read_bytes())
        assert len({hash(x) for x in logs}) == 3  # distinct metric logs
        assert json.loads(Path(out, "selection_summary.json").read_text())

    def test_bad_axis_value_rejected(self, cli_data, tmp_path):
        _, train_dir, eval_dir = cli_data
        rc = main(["ablate", "--axis", "guidance", "--values", "bogus",
                   "--data", train_dir, "--eval-data", eval_dir,
                   "--out", str(tmp_path / "x")])
        assert rc == 1
