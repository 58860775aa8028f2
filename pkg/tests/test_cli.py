"""End-to-end CLI flows on the small synthetic tasks."""

import numpy as np
import pytest

from mevit.cli import main
from mevit.checkpoint import load_checkpoint
from mevit.profiling import read_profiles_csv

FAST_DATA_ARGS = [
    "--dataset", "two-class",
    "--synth-size", "160",
    "--epochs", "2",
    "--batch-size", "32",
]
FAST_CONFIG_ARGS = [
    "--embed-dim", "16",
    "--heads", "2",
    "--depth", "2",
    "--classes", "2",
]
FAST_MODEL_ARGS = FAST_DATA_ARGS + FAST_CONFIG_ARGS


@pytest.fixture(scope="module")
def backbone_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "backbone.ckpt"
    rc = main(["train-backbone", *FAST_MODEL_ARGS, "--seed", "3", "--out", str(path)])
    assert rc == 0
    return path


@pytest.fixture(scope="module")
def exits_ckpt(backbone_ckpt, tmp_path_factory):
    path = tmp_path_factory.mktemp("cli-exits") / "exits.ckpt"
    rc = main([
        "train-exits", *FAST_DATA_ARGS, "--seed", "3",
        "--model", str(backbone_ckpt),
        "--strategy", "classifier-wise",
        "--arch", "all", "--locations", "all",
        "--out", str(path),
    ])
    assert rc == 0
    return path


class TestTrainBackbone:
    def test_checkpoint_written(self, backbone_ckpt):
        model = load_checkpoint(backbone_ckpt)
        assert model.backbone_trained
        assert model.config.depth == 2

    def test_seed_logged(self, tmp_path, capsys):
        out = tmp_path / "b.ckpt"
        main(["train-backbone", *FAST_MODEL_ARGS, "--seed", "17", "--out", str(out)])
        assert "seed: 17" in capsys.readouterr().out

    def test_lr_sweep_loops(self, tmp_path, capsys):
        out = tmp_path / "b.ckpt"
        main([
            "train-backbone", *FAST_MODEL_ARGS[:-2], "--epochs", "1",
            "--seed", "0", "--lr-sweep", "1e-3,1e-4", "--out", str(out),
        ])
        text = capsys.readouterr().out
        assert "lr 0.001:" in text and "lr 0.0001:" in text


class TestTrainExits:
    def test_all_branches_attached(self, exits_ckpt):
        model = load_checkpoint(exits_ckpt)
        assert sorted(model.branches) == [1, 2]
        assert len(model.branches[1]) == 7

    def test_end_to_end_with_final_double(self, backbone_ckpt, tmp_path):
        out = tmp_path / "e2e.ckpt"
        rc = main([
            "train-exits", *FAST_DATA_ARGS, "--seed", "3",
            "--model", str(backbone_ckpt),
            "--strategy", "end-to-end",
            "--arch", "mlp-ee", "--locations", "1",
            "--lambda-final-double",
            "--out", str(out),
        ])
        assert rc == 0
        assert load_checkpoint(out).branch_at(1, "mlp-ee") is not None

    def test_layer_wise(self, backbone_ckpt, tmp_path, capsys):
        out = tmp_path / "lw.ckpt"
        rc = main([
            "train-exits", *FAST_DATA_ARGS, "--seed", "3",
            "--model", str(backbone_ckpt),
            "--strategy", "layer-wise",
            "--arch", "mlp-ee", "--locations", "1",
            "--out", str(out),
        ])
        assert rc == 0
        assert "stage 1" in capsys.readouterr().out


class TestProfileAndPlots:
    def test_profile_writes_csv_and_figure(self, exits_ckpt, tmp_path):
        out = tmp_path / "profiles.csv"
        rc = main([
            "profile", "--dataset", "two-class", "--synth-size", "160",
            "--seed", "3", "--model", str(exits_ckpt), "--out", str(out),
        ])
        assert rc == 0
        rows = read_profiles_csv(out)
        assert len(rows) == 2 * 7 + 1
        assert out.with_suffix(".png").exists()

    def test_export_plot_and_script(self, exits_ckpt, tmp_path):
        csv_path = tmp_path / "profiles.csv"
        main([
            "profile", "--dataset", "two-class", "--synth-size", "160",
            "--seed", "3", "--model", str(exits_ckpt), "--out", str(csv_path),
        ])
        fig = tmp_path / "fig.png"
        script = tmp_path / "plot.py"
        rc = main(["export-plot", "--profiles", str(csv_path), "--out", str(fig),
                   "--script", str(script)])
        assert rc == 0
        assert fig.exists() and script.exists()
        # the emitted script is runnable and reproduces a figure
        import subprocess
        import sys

        out2 = tmp_path / "fig2.png"
        text = script.read_text().replace(str(fig), str(out2))
        script.write_text(text)
        subprocess.run([sys.executable, str(script)], check=True, cwd=tmp_path)
        assert out2.exists()


class TestInfer:
    def test_budget_mode(self, exits_ckpt, capsys):
        rc = main([
            "infer", "--dataset", "two-class", "--synth-size", "16",
            "--seed", "3", "--model", str(exits_ckpt), "--arch", "mlp-ee",
            "--index", "1", "--budget-flops", "100000000",
        ])
        assert rc == 0
        text = capsys.readouterr().out
        assert "exit" in text and "predicted class" in text

    def test_budget_too_small_fails_cleanly(self, exits_ckpt):
        from mevit.anytime import NoExitCompletedError

        with pytest.raises(NoExitCompletedError):
            main([
                "infer", "--dataset", "two-class", "--synth-size", "16",
                "--seed", "3", "--model", str(exits_ckpt), "--arch", "mlp-ee",
                "--budget-flops", "10",
            ])

    def test_interrupt_mode(self, exits_ckpt, capsys):
        rc = main([
            "infer", "--dataset", "two-class", "--synth-size", "16",
            "--seed", "3", "--model", str(exits_ckpt), "--arch", "mlp-ee",
            "--interrupt-after-ms", "10000",
        ])
        assert rc == 0
        assert "exit" in capsys.readouterr().out


class TestReproducibility:
    def test_same_seed_same_metrics(self, tmp_path, capsys):
        def run(tag):
            out = tmp_path / f"{tag}.ckpt"
            main(["train-backbone", *FAST_MODEL_ARGS, "--seed", "5", "--out", str(out)])
            return capsys.readouterr().out, out

        text_a, ckpt_a = run("a")
        text_b, ckpt_b = run("b")
        line_a = [l for l in text_a.splitlines() if l.startswith("lr ")]
        line_b = [l for l in text_b.splitlines() if l.startswith("lr ")]
        assert line_a == line_b
        a = load_checkpoint(ckpt_a)
        b = load_checkpoint(ckpt_b)
        for (_, ta), (_, tb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(ta.data, tb.data)
