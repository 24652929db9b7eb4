import dataclasses

import numpy as np
import pytest

from fedwsq import cli, config, datagen, nncore, weightstd
from fedwsq.errors import ConfigError

SMALL = """
layer_sizes = 4,8,6,3
groups = 2
num_clients = 4
participation_rate = 0.5
rounds = 2
local_epochs = 1
iterations_per_epoch = 2
num_classes = 3
samples_per_class = 10
test_per_class = 5
"""


def write_cfg(tmp_path, text=SMALL, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


class TestConfig:
    def test_parse_defaults(self):
        cfg = config.parse_config("")
        assert cfg == config.RunConfig()

    def test_roundtrip(self):
        cfg = config.parse_config(SMALL)
        assert config.parse_config(cfg.serialize()) == cfg

    def test_comments_and_blanks(self):
        cfg = config.parse_config("# hi\n\nbits = 2  # inline\n")
        assert cfg.bits == 2

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            config.parse_config("learning_rate = 0.1")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="bits"):
            config.parse_config("bits = four")

    def test_invalid_combination(self):
        with pytest.raises(ConfigError):
            config.parse_config("num_classes = 7")  # head width still 10


class TestEvaluate:
    def setup_method(self):
        self.spec = nncore.ModelSpec(layer_sizes=(3, 2), use_group_norm=False)
        self.ws = weightstd.WsConfig()

    def test_uniform_logits_pick_class_zero(self):
        params = [
            nncore.ParamBlock(1, "weight", np.zeros((3, 2))),
            nncore.ParamBlock(1, "bias", np.zeros(2)),
        ]
        test = datagen.Dataset(np.ones((4, 3)), np.array([0, 0, 1, 1]), 2)
        assert cli.evaluate(self.spec, params, test, self.ws) == 0.5

    def test_perfect_classifier(self):
        params = [
            nncore.ParamBlock(1, "weight", np.array([[1.0, -1.0], [0, 0], [0, 0]])),
            nncore.ParamBlock(1, "bias", np.zeros(2)),
        ]
        x = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
        test = datagen.Dataset(x, np.array([0, 1]), 2)
        assert cli.evaluate(self.spec, params, test, self.ws) == 1.0

    def test_empty_test_set(self):
        with pytest.raises(ValueError):
            cli.evaluate(
                self.spec, [], datagen.Dataset(np.zeros((0, 3)), np.zeros(0, int), 2), self.ws
            )


class TestRunCommand:
    def test_artifacts_and_csv_shape(self, tmp_path):
        out = tmp_path / "out"
        rc = cli.main(["run", "--config", write_cfg(tmp_path), "--out", str(out)])
        assert rc == 0
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == "round,train_loss,acc_raw,acc_ema,uplink_bytes,bits_1,bits_2,bits_4,wallclock_ms"
        assert len(lines) == 3
        first = lines[1].split(",")
        assert first[0] == "1" and first[-1] == "0"
        assert (out / "summary.txt").exists()
        assert (out / "metrics.png").stat().st_size > 0

    def test_ema_recurrence_across_rows(self, tmp_path):
        out = tmp_path / "out"
        cli.main(["run", "--config", write_cfg(tmp_path, SMALL + "rounds = 4\n"), "--out", str(out)])
        rows = [l.split(",") for l in (out / "metrics.csv").read_text().splitlines()[1:]]
        ema = None
        for row in rows:
            raw, got = float(row[2]), float(row[3])
            ema = raw if ema is None else 0.9 * ema + 0.1 * raw
            assert got == pytest.approx(ema, abs=1e-15)

    def test_zero_rounds_header_only(self, tmp_path):
        out = tmp_path / "out"
        rc = cli.main(["run", "--config", write_cfg(tmp_path, SMALL + "rounds = 0\n"), "--out", str(out)])
        assert rc == 0
        assert (out / "metrics.csv").read_text().splitlines() == [
            "round,train_loss,acc_raw,acc_ema,uplink_bytes,bits_1,bits_2,bits_4,wallclock_ms"
        ]

    def test_unknown_key_exits_2(self, tmp_path, capsys):
        rc = cli.main(["run", "--config", write_cfg(tmp_path, "lr = 0.1\n"), "--out", str(tmp_path)])
        assert rc == 2
        assert "lr" in capsys.readouterr().err

    def test_missing_config_exits_2(self, tmp_path):
        rc = cli.main(["run", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)])
        assert rc == 2

    def test_seed_override_changes_run(self, tmp_path):
        cfg_path = write_cfg(tmp_path)
        a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        cli.main(["run", "--config", cfg_path, "--out", str(a), "--seed", "1"])
        cli.main(["run", "--config", cfg_path, "--out", str(b), "--seed", "2"])
        cli.main(["run", "--config", cfg_path, "--out", str(c), "--seed", "1"])
        ra = (a / "metrics.csv").read_bytes()
        assert ra != (b / "metrics.csv").read_bytes()
        assert ra == (c / "metrics.csv").read_bytes()


class TestLevelsCommand:
    def test_artifacts(self, tmp_path):
        rc = cli.main(["levels", "--bits", "2", "--out", str(tmp_path)])
        assert rc == 0
        text = (tmp_path / "levels_2bit.txt").read_text()
        assert "q_0 = -1.22" in text
        assert "max_deviation_vs_reference" in text
        assert (tmp_path / "levels_2bit.png").stat().st_size > 0

    def test_unsupported_bits_exits_2(self, tmp_path, capsys):
        rc = cli.main(["levels", "--bits", "3", "--out", str(tmp_path)])
        assert rc == 2
        assert "3" in capsys.readouterr().err


@pytest.fixture(scope="module")
def compare_out(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cmp")
    out = tmp / "out"
    rc = cli.main(["compare", "--config", write_cfg(tmp), "--out", str(out)])
    assert rc == 0
    return out


class TestCompareCommand:
    def test_artifacts(self, compare_out):
        for arm in cli.COMPARE_ARMS:
            assert (compare_out / f"{arm}_metrics.csv").exists()
        assert (compare_out / "compare.png").stat().st_size > 0

    def test_rows_and_shared_partition(self, compare_out):
        lines = (compare_out / "compare.csv").read_text().splitlines()
        assert lines[0].startswith("arm,partition_hash,")
        rows = {l.split(",")[0]: l.split(",") for l in lines[1:]}
        assert set(rows) == set(cli.COMPARE_ARMS)
        hashes = {r[1] for r in rows.values()}
        assert len(hashes) == 1  # every arm sees the identical partition

    def test_payload_compression_ratio(self, compare_out):
        rows = {l.split(",")[0]: l.split(",") for l in (compare_out / "compare.csv").read_text().splitlines()[1:]}
        q = int(rows["ws_danuq"][6])
        fp = int(rows["fp32"][6])
        assert fp == 8 * q  # 4-bit codes vs 32-bit floats


class TestArmConfig:
    def test_grid(self):
        cfg = config.RunConfig()
        assert cli._arm_config(cfg, "fp32").quantizer == "none"
        assert cli._arm_config(cfg, "nows_uq") == dataclasses.replace(
            cfg, ws_enabled=False, quantizer="uniform"
        )
        assert cli._arm_config(cfg, "ws_danuq") == cfg


class TestConvergence:
    def test_smoke_accuracy_improves(self, tmp_path):
        text = SMALL + "rounds = 12\nparticipation_rate = 1.0\nspread = 5.0\n"
        out = tmp_path / "out"
        rc = cli.main(["run", "--config", write_cfg(tmp_path, text), "--out", str(out)])
        assert rc == 0
        rows = [l.split(",") for l in (out / "metrics.csv").read_text().splitlines()[1:]]
        assert float(rows[-1][2]) > 1 / 3  # better than chance on 3 classes
        assert float(rows[-1][1]) < float(rows[0][1])
