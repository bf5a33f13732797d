import os

import numpy as np
import pytest

from asapseg.cli import main
from asapseg.config import RunConfig
from asapseg.errors import ConfigError


class TestRunConfig:
    def test_defaults_match_published_recipe(self):
        cfg = RunConfig()
        assert cfg.train.batch_size == 4
        assert cfg.train.momentum == 0.9
        assert cfg.train.weight_decay == pytest.approx(1e-4)
        assert cfg.augment.scales == (0.75, 1.0, 1.5, 1.75, 2.0)
        assert cfg.loss.alpha == pytest.approx(0.4)

    def test_parse_text_and_types(self):
        cfg = RunConfig().apply_text(
            "train.max_steps = 50\n"
            "# a comment\n"
            "loss.alpha = 0.25\n"
            "model.variant = no_attention\n"
            "augment.scales = 1.0,2.0\n"
            "loss.ohem_min_kept = none\n")
        assert cfg.train.max_steps == 50
        assert cfg.loss.alpha == 0.25
        assert cfg.model.variant == "no_attention"
        assert cfg.augment.scales == (1.0, 2.0)
        assert cfg.loss.ohem_min_kept is None

    def test_unknown_section_and_key_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig().apply_text("bogus.key = 1")
        with pytest.raises(ConfigError):
            RunConfig().apply_text("train.bogus = 1")
        with pytest.raises(ConfigError):
            RunConfig().apply_text("not_dotted = 1")

    def test_bad_values_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig().apply_text("train.max_steps = soon")
        with pytest.raises(ConfigError):
            RunConfig().apply_text("model.variant = nonexistent")
        with pytest.raises(ConfigError):
            RunConfig().apply_text("loss.alpha = -1")

    def test_echo_round_trip(self):
        cfg = RunConfig()
        cfg.set_option("train.max_steps", "123")
        echoed = RunConfig().apply_text(cfg.to_text())
        assert echoed.train.max_steps == 123
        assert echoed.to_text() == cfg.to_text()


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("clids") / "ds"
    rc = main(["gen", "--out", str(root), "--set", "data.count=10",
               "--set", "data.width=64", "--set", "data.height=32"])
    assert rc == 0
    return str(root)


class TestCli:
    def test_gen_writes_expected_files(self, cli_dataset):
        ppms = [f for f in os.listdir(os.path.join(cli_dataset, "images"))]
        pgms = [f for f in os.listdir(os.path.join(cli_dataset, "labels"))]
        assert len(ppms) == 10 and len(pgms) == 10

    def test_gen_deterministic(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            root = tmp_path / name
            assert main(["gen", "--out", str(root),
                         "--set", "data.count=3",
                         "--set", "data.width=32",
                         "--set", "data.height=32"]) == 0
            with open(root / "images" / "train_00000.ppm", "rb") as f:
                outs.append(f.read())
        assert outs[0] == outs[1]

    def test_train_eval_round_trip(self, cli_dataset, tmp_path, capsys):
        out = tmp_path / "run"
        rc = main(["train", "--data", cli_dataset, "--out", str(out),
                   "--set", "train.max_steps=4",
                   "--set", "train.eval_every=0",
                   "--set", "train.batch_size=2"])
        assert rc == 0
        assert (out / "checkpoint.bin").exists()
        assert (out / "config.txt").exists()
        assert (out / "trace.tsv").exists()
        capsys.readouterr()
        rc = main(["eval", "--data", cli_dataset,
                   "--ckpt", str(out / "checkpoint.bin")])
        assert rc == 0
        report = capsys.readouterr().out
        assert "miou" in report and "iou[pole]" in report

    def test_eval_reports_identically_twice(self, cli_dataset, tmp_path,
                                            capsys):
        out = tmp_path / "run"
        main(["train", "--data", cli_dataset, "--out", str(out),
              "--set", "train.max_steps=2", "--set", "train.eval_every=0",
              "--set", "train.batch_size=2"])
        capsys.readouterr()
        reports = []
        for _ in range(2):
            assert main(["eval", "--data", cli_dataset,
                         "--ckpt", str(out / "checkpoint.bin")]) == 0
            reports.append(capsys.readouterr().out)
        assert reports[0] == reports[1]

    def test_gradcheck_exits_zero(self, capsys):
        rc = main(["gradcheck", "--coords", "4"])
        assert rc == 0
        assert "PASS" in capsys.readouterr().out

    def test_flops_reports_ratios(self, capsys):
        assert main(["flops"]) == 0
        out = capsys.readouterr().out
        assert "conventional/vertical ratio" in out
        assert "general/ffdn ratio" in out

    def test_bench_single_iteration(self, capsys):
        rc = main(["bench", "--repeats", "1", "--warmup", "1",
                   "--height", "32", "--width", "32",
                   "--source-height", "48", "--source-width", "48"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "p95" in out

    def test_bad_config_exits_two(self, tmp_path, capsys):
        rc = main(["gen", "--out", str(tmp_path / "x"),
                   "--set", "data.bogus=1"])
        assert rc == 2

    def test_bad_override_syntax_exits_two(self, tmp_path):
        rc = main(["gen", "--out", str(tmp_path / "x"), "--set", "nonsense"])
        assert rc == 2

    def test_ablate_single_variant(self, cli_dataset, tmp_path, capsys):
        out = tmp_path / "abl"
        rc = main(["ablate", "--data", cli_dataset, "--out", str(out),
                   "--variants", "no_attention", "--seeds", "0",
                   "--set", "train.max_steps=2",
                   "--set", "train.eval_every=0",
                   "--set", "train.batch_size=2"])
        assert rc == 0
        table = (out / "ablation.tsv").read_text().splitlines()
        assert table[0].startswith("variant\tseed\tmiou")
        assert len(table) == 2
