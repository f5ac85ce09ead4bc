"""Flat config parsing and the command-line entry points, including the
exit-code contract: 2 for configuration problems, 3 for data problems,
4 for a failed correctness battery."""

import numpy as np
import pytest

import seqnp.cli as cli
from seqnp.config import ConfigError, parse_config, parse_text, render_echo
from seqnp.corpus import SynthConfig, synth_generate, write_interactions
from seqnp.trainer import TrainConfig, load_checkpoint


class TestParseText:
    def test_flat_keys_comments_and_blanks(self):
        run = parse_text(
            "# run settings\n"
            "window = 4\n"
            "cap=12\n"
            "lr = 3e-3\n"
            "\n"
            "use_np = false\n"
            "cutoffs = 1,10\n"
            "outdir = /tmp/somewhere\n")
        assert run.train.window == 4
        assert run.train.cap == 12
        assert run.train.learning_rate == pytest.approx(3e-3)
        assert run.train.use_np is False
        assert run.train.cutoffs == (1, 10)
        assert run.outdir == "/tmp/somewhere"

    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError) as err:
            parse_text("windoe = 4\n")
        assert "windoe" in str(err.value)

    def test_bad_value_names_the_key(self):
        with pytest.raises(ConfigError) as err:
            parse_text("seed = abc\n")
        assert "seed" in str(err.value)

    def test_missing_equals_is_rejected(self):
        with pytest.raises(ConfigError):
            parse_text("window 4\n")

    def test_validation_runs_after_parsing(self):
        with pytest.raises(ConfigError):
            parse_text("window = 9\ncap = 3\n")

    def test_echo_round_trips(self):
        run = parse_text("window = 4\nlr = 0.002\nsynth_users = 12\n")
        again = parse_text(render_echo(run))
        assert again.train == run.train
        assert again.synth_users == run.synth_users

    def test_parse_config_reads_files(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 7\n", encoding="utf-8")
        assert parse_config(path).train.seed == 7


def write_cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def tiny_cfg_text(tmp_path, name="run.cfg", **extra):
    lines = [
        "window = 3", "cap = 10", "embed_dim = 4", "channels = 2",
        "attn_dim = 4", "latent_dim = 4", "batch_size = 4",
        "max_epochs = 2", "seed = 3", "train_ratio = 0.6",
        "val_ratio = 0.2", "test_ratio = 0.2",
        "synth_users = 18", "synth_items = 12", "synth_genres = 3",
        "synth_seq_len = 10", f"outdir = {tmp_path}",
        f"data = {tmp_path}/synth.tsv",
    ]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    return write_cfg(tmp_path, "\n".join(lines) + "\n", name)


class TestCliExitCodes:
    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "windoe = 4\n")
        assert cli.main(["train", "--config", cfg]) == 2
        assert "windoe" in capsys.readouterr().err

    def test_bad_value_exits_2(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "seed = abc\n")
        assert cli.main(["synth", "--config", cfg]) == 2
        assert "seed" in capsys.readouterr().err

    def test_missing_config_file_exits_2(self, tmp_path, capsys):
        missing = str(tmp_path / "nope.cfg")
        assert cli.main(["train", "--config", missing]) == 2
        assert "nope.cfg" in capsys.readouterr().err

    def test_missing_data_exits_3(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, f"outdir = {tmp_path}\n")
        assert cli.main(["train", "--config", cfg]) == 3
        assert "seqnp train" in capsys.readouterr().err

    def test_unreadable_data_exits_3(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path,
                        f"data = {tmp_path}/absent.tsv\noutdir = {tmp_path}\n")
        assert cli.main(["train", "--config", cfg]) == 3
        capsys.readouterr()

    def test_verify_failure_exits_4(self, monkeypatch, capsys):
        import seqnp.verify as verify_mod

        def rigged(log=None):
            return [verify_mod.CheckResult("rigged", False,
                                           "forced failure", 0.0)]

        monkeypatch.setattr(verify_mod, "run_battery", rigged)
        assert cli.main(["verify", "--quiet"]) == 4
        capsys.readouterr()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("cliwork")
    cfg = tiny_cfg_text(tmp_path)
    assert cli.main(["synth", "--config", cfg]) == 0
    assert cli.main(["train", "--config", cfg]) == 0
    return tmp_path, cfg


# the 12-item catalog leaves 9 rankable items under exclusion, so cutoff 10
# legitimately clamps; the warning is the documented behavior, not noise
@pytest.mark.filterwarnings("ignore:requested top")
class TestCliPipeline:

    def test_synth_writes_data_and_echo(self, workspace, capsys):
        tmp_path, cfg = workspace
        assert (tmp_path / "synth.tsv").exists()
        echo = (tmp_path / "synth.echo.cfg").read_text(encoding="utf-8")
        assert "synth_users = 18" in echo
        capsys.readouterr()

    def test_train_writes_checkpoint_curve_and_echo(self, workspace, capsys):
        tmp_path, cfg = workspace
        assert (tmp_path / "model.ckpt").exists()
        curve = (tmp_path / "curve.csv").read_text(encoding="utf-8")
        assert curve.splitlines()[0] == "epoch,nll,wass,total,val-ndcg@10"
        assert len(curve.splitlines()) == 3
        assert (tmp_path / "train.echo.cfg").exists()
        capsys.readouterr()

    def test_eval_writes_reports(self, workspace, capsys):
        tmp_path, cfg = workspace
        assert cli.main(["eval", "--config", cfg, "--baselines"]) == 0
        out = capsys.readouterr().out
        assert "== model on test ==" in out
        assert "== popularity on test ==" in out
        assert (tmp_path / "eval.model.test.json").exists()
        assert (tmp_path / "eval.random.test.json").exists()

    def test_eval_split_override(self, workspace, capsys):
        tmp_path, cfg = workspace
        assert cli.main(["eval", "--config", cfg, "--split", "validation"]) == 0
        assert (tmp_path / "eval.model.validation.json").exists()
        capsys.readouterr()

    def test_predict_prints_item_ids(self, workspace, capsys):
        tmp_path, cfg = workspace
        assert cli.main(["predict", "--config", cfg, "--items", "1,2",
                         "--k", "3"]) == 0
        line = capsys.readouterr().out.strip().splitlines()[-1]
        ids = line.split(",")
        assert len(ids) == 3
        assert all(i.isdigit() for i in ids)

    def test_predict_unknown_item_exits_3(self, workspace, capsys):
        _, cfg = workspace
        assert cli.main(["predict", "--config", cfg, "--items",
                         "not-an-item"]) == 3
        capsys.readouterr()

    def test_ingest_builds_a_cache(self, workspace, capsys):
        tmp_path, cfg = workspace
        assert cli.main(["ingest", "--config", cfg]) == 0
        assert (tmp_path / "sequences.json").exists()
        capsys.readouterr()

    def test_corrupt_checkpoint_exits_3(self, workspace, capsys):
        tmp_path, cfg = workspace
        blob = bytearray((tmp_path / "model.ckpt").read_bytes())
        broken = tmp_path / "broken.ckpt"
        blob[-1] ^= 0xFF
        broken.write_bytes(bytes(blob))
        cfg2 = tiny_cfg_text(tmp_path, "broken.cfg", checkpoint=str(broken))
        assert cli.main(["eval", "--config", cfg2]) == 3
        capsys.readouterr()

    def test_resume_without_checkpoint_exits_3(self, tmp_path, capsys):
        cfg = tiny_cfg_text(tmp_path)
        scfg = SynthConfig(users=18, items=12, genres=3, seq_len=10)
        write_interactions(tmp_path / "synth.tsv",
                           synth_generate(scfg, np.random.default_rng(3)))
        assert cli.main(["train", "--config", cfg, "--resume"]) == 3
        capsys.readouterr()

    def test_resume_restores_saved_state(self, workspace, capsys):
        tmp_path, cfg = workspace
        ckpt = load_checkpoint(tmp_path / "model.ckpt")
        assert ckpt.epoch == 2
        assert cli.main(["train", "--config", cfg, "--resume"]) == 0
        out = capsys.readouterr().out
        assert "resuming from epoch 2" in out
        again = load_checkpoint(tmp_path / "model.ckpt")
        assert again.epoch == 2
        assert [r.epoch for r in again.history] == [1, 2]

    def test_resume_rejects_a_changed_config(self, workspace, capsys):
        # resuming demands the identical echo so the finished run is
        # indistinguishable from an uninterrupted one
        tmp_path, _ = workspace
        cfg4 = tiny_cfg_text(tmp_path, "longer.cfg", max_epochs=4)
        assert cli.main(["train", "--config", cfg4, "--resume"]) == 3
        assert "max_epochs" in capsys.readouterr().err


def test_verify_battery_passes_for_real(capsys):
    assert cli.main(["verify", "--quiet"]) == 0
    out = capsys.readouterr().out
    assert "ok" in out
