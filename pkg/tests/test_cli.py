import json

import numpy as np
import pytest

from agave.cli import build_parser, load_dataset, main, run_ablate_aux, run_name
from agave.config import RunConfig, build_config, format_config, load_config, parse_config_text, parse_value
from agave.data import read_ppm
from agave.errors import ConfigError
from agave.model import AgaveModel, ModelConfig
from agave.training import parse_record

SMALL = ["--latent-dim", "2", "--encoder-width", "3", "--decoder-width", "3", "--ar-layers", "1",
         "--ar-width", "3", "--ar-first-kernel", "3", "--cond-width", "2", "--train-count", "16",
         "--held-out-count", "4", "--batch-size", "4", "-q"]


def run(tmp_path, *args):
    return main([*args, "--out-dir", str(tmp_path), *SMALL])


class TestConfigParsing:
    def test_typed_values(self):
        assert parse_value("lam", "2.5") == 2.5
        assert parse_value("vae_steps", "10") == 10
        assert parse_value("resume", "yes") is True
        assert parse_value("control", "off") is False
        assert parse_value("lambdas", "1, 2,8") == (1.0, 2.0, 8.0)
        assert parse_value("cifar10", "none") is None
        assert parse_value("aux_height", "4") == 4

    @pytest.mark.parametrize("key,text", [("lam", "abc"), ("resume", "maybe"), ("nope", "1"), ("seeds", "1.5")])
    def test_bad_values(self, key, text):
        with pytest.raises(ConfigError):
            parse_value(key, text)

    def test_file_text(self):
        values = parse_config_text("# comment\nlam = 4  # trailing\n\nvae-steps=3\n")
        assert values == {"lam": 4.0, "vae_steps": 3}

    @pytest.mark.parametrize("text", ["lam=1\nlam=2\n", "just words\n", "unknown=1\n"])
    def test_bad_file_text(self, text):
        with pytest.raises(ConfigError):
            parse_config_text(text)

    def test_precedence_and_default_source(self):
        cfg = build_config({"lam": 4.0, "seed": 2}, {"lam": 8.0})
        assert cfg.lam == 8.0 and cfg.seed == 2
        assert cfg.sprites_seed == 0 and cfg.cifar10 is None

    def test_exactly_one_source(self):
        with pytest.raises(ConfigError):
            RunConfig(cifar10="x.bin", sprites_seed=1)
        with pytest.raises(ConfigError):
            RunConfig()

    @pytest.mark.parametrize("override", [{"batch_size": 0}, {"lr": 0.0}, {"stop_fraction": 1.0},
                                          {"interp_steps": 1}, {"lambdas": ()}, {"height": 6},
                                          {"command": "fly"}, {"temperature": 0.0}])
    def test_validation(self, override):
        with pytest.raises(ConfigError):
            build_config(overrides=override)

    def test_format_round_trip(self, tmp_path):
        cfg = build_config(overrides={"lam": 3.0, "lambdas": (0.5, 2.0), "aux_height": 4, "aux_width": 4})
        path = tmp_path / "run.cfg"
        path.write_text(format_config(cfg))
        assert load_config(path) == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.cfg")

    def test_every_field_has_a_flag(self):
        flags = {a.dest for a in build_parser()._actions}
        assert set(RunConfig.__dataclass_fields__) - {"command"} <= flags


class TestExitCodes:
    def test_help(self, capsys):
        assert main(["--help"]) == 0

    def test_unknown_command(self, capsys):
        assert main(["fly"]) == 2

    def test_bad_flag_value(self, tmp_path, capsys):
        assert run(tmp_path, "train", "--lam", "-1") == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_checkpoint_is_runtime_error(self, tmp_path, capsys):
        assert run(tmp_path, "eval") == 3

    def test_truncated_cifar_is_runtime_error(self, tmp_path, capsys):
        path = tmp_path / "data.bin"
        path.write_bytes(bytes(100))
        assert main(["train", "--cifar10", str(path), "--height", "32", "--width", "32", "--out-dir",
                     str(tmp_path), "-q"]) == 3

    def test_print_config(self, tmp_path, capsys):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("lam=5\njoint_steps=7\n")
        assert main(["sample", "--config", str(cfg_file), "--joint-steps", "9", "--print-config"]) == 0
        values = parse_config_text(capsys.readouterr().out)
        assert values["lam"] == 5.0 and values["joint_steps"] == 9 and values["command"] == "sample"


class TestCommands:
    @pytest.fixture
    def trained(self, tmp_path, capsys):
        code = run(tmp_path, "train", "--vae-steps", "2", "--ar-steps", "2", "--joint-steps", "2", "--log-every", "2")
        assert code == 0
        return tmp_path

    def test_train_artifacts(self, trained):
        log = (trained / "train-s0-lam2.log").read_text().splitlines()
        assert [parse_record(line)["phase"] for line in log] == ["vae", "ar", "joint"]
        assert (trained / "train-s0-lam2.ckpt").exists()

    def test_resume_appends(self, trained):
        assert run(trained, "train", "--vae-steps", "2", "--ar-steps", "2", "--joint-steps", "4", "--log-every", "2",
                   "--resume", "true") == 0
        steps = [parse_record(line)["step"] for line in (trained / "train-s0-lam2.log").read_text().splitlines()]
        assert steps == [2, 4, 6, 8]

    def test_eval_reports(self, trained):
        assert run(trained, "eval", "--eval-k", "3", "--eval-batch", "2") == 0
        reports = json.loads((trained / "eval-s0-lam2.eval.json").read_text())
        assert [r["bound_type"] for r in reports] == ["elbo", "iwae-3"]
        lines = (trained / "eval-s0-lam2.eval.txt").read_text().splitlines()
        assert lines[0].startswith("bound=elbo ")

    def test_eval_k1_is_elbo_only(self, trained):
        assert run(trained, "eval", "--eval-k", "1") == 0
        reports = json.loads((trained / "eval-s0-lam2.eval.json").read_text())
        assert len(reports) == 1 and reports[0]["bound_type"] == "elbo"

    def test_iwae_not_worse_than_elbo(self, trained):
        assert main(["eval", "--out-dir", str(trained), *SMALL, "--held-out-count", "200", "--eval-k", "25"]) == 0
        elbo_report, iwae_report = json.loads((trained / "eval-s0-lam2.eval.json").read_text())
        assert iwae_report["bpd"] <= elbo_report["bpd"] + 0.01

    def test_sample_grid(self, trained):
        assert run(trained, "sample", "--samples", "2", "--per-latent", "3") == 0
        grid = read_ppm((trained / "sample-s0-lam2.ppm").read_bytes())
        # Z rows, M + 1 columns of 8x8 tiles with 1-pixel borders
        assert grid.shape == (3, 2 * 9 + 1, 4 * 9 + 1)

    def test_interpolate_strip(self, trained):
        assert run(trained, "interpolate", "--interp-steps", "3") == 0
        strip = read_ppm((trained / "interpolate-s0-lam2.ppm").read_bytes())
        # the two end-point images frame the interpolants on each row
        assert strip.shape == (3, 2 * 9 + 1, (3 + 2) * 9 + 1)

    def test_checkpoint_from_other_config_rejected(self, trained):
        assert main(["eval", "--out-dir", str(trained), *SMALL, "--ar-width", "6"]) == 3

    def test_ablate(self, trained):
        assert run(trained, "ablate-aux", "--ablate-steps", "4", "--ablate-log-every", "2") == 0
        summary = json.loads((trained / "ablate-aux-s0-lam2.json").read_text())
        assert [r["step"] for r in summary["ablation"]] == [2, 4]
        assert [r["step"] for r in summary["control"]] == [2, 4]
        assert summary["horizon"] == 4
        assert (trained / "ablate-aux-s0-lam2-control.log").exists()

    def test_ablate_with_in_memory_model_creates_out_dir(self, tmp_path):
        out = tmp_path / "fresh" / "dir"
        cfg = build_config(overrides={"command": "ablate-aux", "ablate_steps": 2, "ablate_log_every": 1,
                                      "batch_size": 4, "out_dir": str(out)})
        model = AgaveModel(ModelConfig(latent_dim=2, encoder_width=3, decoder_width=3, ar_layers=1, ar_width=3,
                                       ar_first_kernel=3, cond_width=2))
        images = np.zeros((4, 3, 8, 8), dtype=np.uint8)
        summary = run_ablate_aux(cfg, model=model, data=(images, images))
        assert summary["horizon"] == 2
        assert (out / "ablate-aux-s0-lam2.json").exists()

    def test_sweep(self, tmp_path, capsys):
        assert run(tmp_path, "sweep-lambda", "--lambdas", "1,4", "--seeds", "0", "--vae-steps", "1",
                   "--ar-steps", "1", "--joint-steps", "1") == 0
        summary = json.loads((tmp_path / "sweep-lambda-s0.json").read_text())
        assert [m["lambda"] for m in summary["means"]] == [1.0, 4.0]
        assert len(summary["runs"]) == 2
        assert isinstance(summary["kl_decreasing"], bool)
        assert (tmp_path / "train-s0-lam4.ckpt").exists()


class TestDataset:
    def test_sprite_split_is_disjoint_and_deterministic(self):
        cfg = build_config(overrides={"train_count": 5, "held_out_count": 5})
        train, held_out = load_dataset(cfg)
        again = load_dataset(cfg)
        np.testing.assert_array_equal(train, again[0])
        assert not any(np.array_equal(a, b) for a in train for b in held_out)

    def test_cifar_held_out_is_tail(self, tmp_path):
        records = b"".join(bytes([k]) + bytes([k]) * 3072 for k in range(5))
        path = tmp_path / "c.bin"
        path.write_bytes(records)
        cfg = build_config(overrides={"cifar10": str(path), "height": 32, "width": 32, "held_out_count": 2})
        train, held_out = load_dataset(cfg)
        assert [int(im.max()) for im in train] == [0, 1, 2]
        assert [int(im.max()) for im in held_out] == [3, 4]

    def test_sprite_extents(self):
        with pytest.raises(ConfigError):
            load_dataset(build_config(overrides={"height": 12, "width": 12}))

    def test_run_name(self):
        assert run_name(build_config(overrides={"lam": 0.5, "seed": 3}), "train") == "train-s3-lam0.5"
