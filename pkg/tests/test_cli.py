import csv

import pytest

from avdetect import cli
from avdetect.errors import ConfigError

TINY = """\
n_videos = 24
n_seq = 5
d_v = 3
d_l = 2
d_a = 4
max_segments = 2
hidden = 3
proj = 3
head_hidden = 4
max_epochs = 2
batch_size = 8
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.cfg"
    config.write_text(TINY)
    assert cli.main(["synth", "--config", str(config), "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--config", str(config), "--data", str(root / "data"),
                     "--out", str(root / "train")]) == 0
    return root, config


class TestConfig:
    def test_routing(self):
        cfg = cli.build_config({"d_v": "5", "hidden": "7", "lr": "0.01", "rho": "0.5", "seed": "3",
                                "synth_seed": "9", "threshold": "0.6"})
        assert cfg.model.d_v == 5 and cfg.synth.d_v == 5
        assert cfg.model.hidden == 7 and cfg.train.lr == 0.01 and cfg.synth.rho == 0.5
        assert cfg.train.seed == 3 and cfg.synth.seed == 9 and cfg.run["threshold"] == 0.6

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="colour"):
            cli.build_config({"colour": "red"})

    def test_split_fractions(self):
        assert cli.build_config({"split_fractions": "0.5,0.25,0.25"}).synth.split_fractions == (0.5, 0.25, 0.25)
        with pytest.raises(ConfigError):
            cli.build_config({"split_fractions": "half"})

    def test_seed_flag_targets_command(self):
        args = cli.build_parser().parse_args(["synth", "--seed", "4"])
        assert cli._overrides(args) == {"synth_seed": "4"}
        args = cli.build_parser().parse_args(["train", "--seed", "4", "--set", "lr=0.1"])
        assert cli._overrides(args) == {"lr": "0.1", "seed": "4"}

    def test_parse_seeds(self):
        assert cli.parse_seeds("0, 1,2") == [0, 1, 2]
        with pytest.raises(ConfigError):
            cli.parse_seeds("")


class TestPipeline:
    def test_synth_outputs(self, workspace):
        root, _ = workspace
        for split in ("train", "val", "test"):
            assert (root / "data" / split / "labels.txt").exists()
        assert (root / "data" / "config.txt").read_text() == "".join(
            f"{k} = {v}\n" for k, v in cli.parse_key_values(TINY).items())

    def test_train_outputs(self, workspace):
        root, _ = workspace
        assert (root / "train" / "checkpoint.mmba").stat().st_size > 0
        rows = list(csv.reader((root / "train" / "train_log.csv").open()))
        assert rows[0] == ["epoch", "train_loss", "val_auc", "lr"] and len(rows) == 3

    def test_eval_report(self, workspace, capsys):
        root, config = workspace
        code = cli.main(["eval", "--config", str(config), "--data", str(root / "data"),
                         "--checkpoint", str(root / "train" / "checkpoint.mmba"), "--out", str(root / "eval")])
        assert code == 0
        text = (root / "eval" / "metrics_test.txt").read_text()
        for key in ("AUC", "pAUC", "EER", "ACC", "TPR", "FPR"):
            assert f"\n{key} = " in "\n" + text

    def test_localize_outputs(self, workspace):
        root, config = workspace
        code = cli.main(["localize", "--config", str(config), "--data", str(root / "data"), "--split", "val",
                         "--checkpoint", str(root / "train" / "checkpoint.mmba"), "--out", str(root / "loc")])
        assert code == 0
        assert (root / "loc" / "predictions_val.tsv").exists()
        assert "AR@10 = " in (root / "loc" / "localization_val.txt").read_text()

    def test_training_is_reproducible(self, workspace):
        root, config = workspace
        assert cli.main(["train", "--config", str(config), "--data", str(root / "data"),
                         "--out", str(root / "train2")]) == 0
        for name in ("checkpoint.mmba", "train_log.csv", "config.txt"):
            assert (root / "train" / name).read_bytes() == (root / "train2" / name).read_bytes()

    def test_ablation_table(self, workspace):
        root, config = workspace
        code = cli.main(["ablate", "--config", str(config), "--data", str(root / "data"),
                         "--set", "ablate_seeds=0", "--set", "ablate_epochs=1", "--out", str(root / "abl")])
        assert code == 0
        rows = list(csv.reader((root / "abl" / "ablation.csv").open()))
        assert rows[0] == ["variant", "modalities", "auc_mean", "auc_std", "auc_per_seed"]
        assert [(r[0], r[1]) for r in rows[1:]] == list(cli.ABLATION_ROWS)


class TestExitCodes:
    def test_unknown_key_is_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("colour = red\n")
        assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        err = capsys.readouterr().err
        assert err.startswith("avdetect: ") and err.count("\n") == 1

    def test_missing_out_is_2(self):
        assert cli.main(["synth"]) == 2

    def test_missing_config_is_3(self, tmp_path):
        assert cli.main(["synth", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path)]) == 3

    def test_missing_data_is_3(self, tmp_path):
        assert cli.main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 3

    def test_missing_checkpoint_is_3(self, workspace, tmp_path):
        root, config = workspace
        assert cli.main(["eval", "--config", str(config), "--data", str(root / "data"),
                         "--checkpoint", str(tmp_path / "none.mmba"), "--out", str(tmp_path)]) == 3

    def test_corrupt_checkpoint_is_4(self, workspace, tmp_path):
        root, config = workspace
        bad = tmp_path / "bad.mmba"
        bad.write_bytes((root / "train" / "checkpoint.mmba").read_bytes()[:100])
        assert cli.main(["eval", "--config", str(config), "--data", str(root / "data"),
                         "--checkpoint", str(bad), "--out", str(tmp_path)]) == 4

    def test_corrupt_feature_file_is_4(self, workspace, tmp_path):
        import shutil

        root, config = workspace
        data = tmp_path / "data"
        shutil.copytree(root / "data", data)
        victim = next((data / "test" / "features").iterdir())
        victim.write_bytes(victim.read_bytes()[:30])
        assert cli.main(["eval", "--config", str(config), "--data", str(data),
                         "--checkpoint", str(root / "train" / "checkpoint.mmba"), "--out", str(tmp_path / "e")]) == 4

    def test_bad_set_syntax_is_2(self, tmp_path):
        assert cli.main(["synth", "--set", "novalue", "--out", str(tmp_path)]) == 2
