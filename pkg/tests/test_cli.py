import csv
import io
import json

import numpy as np
import pytest

from codistill import cli
from codistill.config import ConfigError, ExperimentConfig, parse_config, parse_config_text
from codistill.spectrum import spectrum

TINY = """
dataset = "gaussian_blobs"
n_clients = 4
rounds = 3
n_samples = 300
num_classes = 4
in_dim = 4
hidden = [8]
"""


def write_config(tmp_path, text=TINY, name="c.toml"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def test_minimal_config_gets_defaults():
    cfg = parse_config_text('dataset = "gaussian_blobs"\nn_clients = 3\nrounds = 7\n')
    assert cfg.n_clients == 3 and cfg.rounds == 7
    default = ExperimentConfig()
    assert cfg.tau == default.tau and cfg.lambda_p == default.lambda_p and cfg.participation == 1.0


@pytest.mark.parametrize("text, key", [
    ("tau = 1.5", "tau"),
    ("alpha = 0", "alpha"),
    ("e_g = 2.5", "e_g"),
    ("strategy = \"fedprox\"", "strategy"),
    ("colour = 1", "colour"),
    ("t_up = [1.0, 2.0]", "t_up"),
    ("participation = 1.2", "participation"),
    ("normalize_spectrum = 1", "normalize_spectrum"),
])
def test_config_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as info:
        parse_config_text('dataset = "gaussian_blobs"\nn_clients = 3\nrounds = 2\n' + text + "\n")
    assert info.value.key == key
    assert key in str(info.value)


def test_missing_required_key():
    with pytest.raises(ConfigError, match="rounds"):
        parse_config_text('dataset = "gaussian_blobs"\nn_clients = 3\n')


def test_duplicate_key_is_rejected():
    with pytest.raises(ConfigError):
        parse_config_text('dataset = "gaussian_blobs"\nn_clients = 3\nrounds = 2\nrounds = 4\n')


def test_nested_table_rejected():
    with pytest.raises(ConfigError):
        parse_config_text('dataset = "gaussian_blobs"\nn_clients = 3\nrounds = 2\n[extra]\nx = 1\n')


def test_per_client_timing_list(tmp_path):
    cfg = parse_config(write_config(tmp_path, TINY + "t_pm_epoch = [1, 2, 3, 4.5]\n"))
    assert cfg.t_pm_epoch == (1, 2, 3, 4.5)


def test_run_writes_three_rows(tmp_path):
    cfg = write_config(tmp_path)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = read_rows(tmp_path / "o" / "rounds.csv")
    assert tuple(rows[0]) == cli.ROUND_COLUMNS
    assert len(rows) == 4
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["rounds_completed"] == 3
    assert summary["config"]["hidden"] == [8]
    assert summary["seeds"] == {"data": 0, "init": 0, "sampling": 0}
    assert "out_dir" not in summary["config"]
    assert float(rows[-1][7]) > float(rows[-1][8])


def test_rounds_csv_uses_crlf_and_dot_decimals(tmp_path):
    cfg = write_config(tmp_path)
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")])
    raw = (tmp_path / "o" / "rounds.csv").read_bytes()
    assert raw.count(b"\r\n") == 4
    assert b"," in raw and b";" not in raw


@pytest.mark.parametrize("threads", [1, 3])
def test_reruns_are_byte_identical(tmp_path, threads):
    cfg = write_config(tmp_path, TINY + "participation = 0.75\nbatch_size = 16\n")
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--threads", str(threads)])
    for name in ("rounds.csv", "summary.json", "global.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fedavg_pm_reg_is_zero(tmp_path):
    cfg = write_config(tmp_path, TINY + 'strategy = "fedavg"\n')
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")])
    rows = read_rows(tmp_path / "o" / "rounds.csv")
    assert all(float(r[6]) == 0.0 for r in rows[1:])


def test_seed_override_changes_results(tmp_path):
    cfg = write_config(tmp_path)
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed-override", "5"])
    summary = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert summary["seeds"] == {"data": 5, "init": 5, "sampling": 5}
    assert (tmp_path / "a" / "rounds.csv").read_bytes() != (tmp_path / "b" / "rounds.csv").read_bytes()


def test_output_dir_precedence(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, TINY + f'out_dir = "{(tmp_path / "from_config").as_posix()}"\n')
    cli.main(["run", "--config", str(cfg)])
    assert (tmp_path / "from_config" / "rounds.csv").exists()
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "from_env"))
    cli.main(["run", "--config", str(cfg)])
    assert (tmp_path / "from_env" / "rounds.csv").exists()
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "from_flag")])
    assert (tmp_path / "from_flag" / "rounds.csv").exists()


def test_config_from_stdin(tmp_path, monkeypatch):
    monkeypatch.setattr("sys.stdin", io.StringIO(TINY))
    assert cli.main(["run", "--config", "-", "--out", str(tmp_path / "o")]) == 0


def test_bad_config_exits_nonzero(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY + "tau = 1.5\n")
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "tau" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_missing_config_is_io_error(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "nope.toml")]) == cli.EXIT_IO


def test_unwritable_output_is_io_error(tmp_path):
    cfg = write_config(tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["run", "--config", str(cfg), "--out", str(blocker / "sub")]) == cli.EXIT_IO


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_nonzero(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY + "eta_g = 1e200\neta_p = 1e200\n")
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_DIVERGED
    assert "aborted" in capsys.readouterr().err


def test_sweep_strategy_has_four_rows(tmp_path):
    cfg = write_config(tmp_path)
    code = cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s"), "--param", "strategy",
                     "--values", "spectral_codistill,fedavg,local_only,ditto_l2"])
    assert code == 0
    rows = read_rows(tmp_path / "s" / "sweep_strategy.csv")
    assert tuple(rows[0]) == cli.SWEEP_COLUMNS
    assert [r[1] for r in rows[1:]] == ["spectral_codistill", "fedavg", "local_only", "ditto_l2"]


def test_sweep_tau_rows_in_order(tmp_path):
    cfg = parse_config(write_config(tmp_path))
    rows = cli.sweep(cfg.replace(rounds=1), "tau", [0.05, 0.2, 0.5, 1.0])
    assert [float(r[1]) for r in rows] == [0.05, 0.2, 0.5, 1.0]


def test_sweep_ablation_none_matches_fedavg(tmp_path):
    cfg = parse_config(write_config(tmp_path))
    rows = cli.sweep(cfg, "ablation", ["full", "no_gm", "no_pm", "none"])
    assert len(rows) == 4
    fedavg = cli.sweep(cfg, "strategy", ["fedavg"])[0]
    # final and best GM accuracy columns agree exactly
    assert rows[3][2] == fedavg[2] and rows[3][4] == fedavg[4]


def test_sweep_rejects_unknown_values(tmp_path):
    cfg = write_config(tmp_path)
    assert cli.main(["sweep", "--config", str(cfg), "--param", "strategy", "--values", "fedprox"]) == cli.EXIT_CONFIG
    with pytest.raises(SystemExit):
        cli.main(["sweep", "--config", str(cfg), "--param", "eta_g", "--values", "0.1"])
    with pytest.raises(ValueError):
        cli.sweep_config(ExperimentConfig(), "eta_g", 0.1)


def test_checkpoint_roundtrip(tmp_path):
    w = np.random.default_rng(0).standard_normal(17)
    cli.save_checkpoint(tmp_path / "m.ckpt", w, (2, 3, 2))
    back, sizes = cli.load_checkpoint(tmp_path / "m.ckpt")
    assert sizes == (2, 3, 2) and back.tobytes() == w.tobytes()
    with pytest.raises(ValueError):
        cli.save_checkpoint(tmp_path / "bad.ckpt", w[:5], (2, 3, 2))


@pytest.mark.parametrize("damage", ["magic", "truncate", "extra", "d"])
def test_corrupt_checkpoint(tmp_path, damage):
    path = tmp_path / "m.ckpt"
    cli.save_checkpoint(path, np.ones(17), (2, 3, 2))
    raw = bytearray(path.read_bytes())
    if damage == "magic":
        raw[0:1] = b"X"
    elif damage == "truncate":
        raw = raw[:-3]
    elif damage == "extra":
        raw += b"\0" * 8
    else:
        # the u64 d sits right before the weights
        raw[-17 * 8 - 8] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        cli.load_checkpoint(path)
    assert cli.main(["inspect-spectrum", str(path)]) == cli.EXIT_CONFIG


def inspect(tmp_path, w, sizes):
    cli.save_checkpoint(tmp_path / "m.ckpt", w, sizes)
    assert cli.main(["inspect-spectrum", str(tmp_path / "m.ckpt"), "--out", str(tmp_path / "s.csv")]) == 0
    rows = read_rows(tmp_path / "s.csv")
    assert rows[0] == ["index", "magnitude"]
    assert [int(r[0]) for r in rows[1:]] == list(range(len(rows) - 1))
    return np.array([float(r[1]) for r in rows[1:]])


def test_inspect_zero_model(tmp_path):
    np.testing.assert_array_equal(inspect(tmp_path, np.zeros(17), (2, 3, 2)), np.zeros(17))


def test_inspect_constant_model(tmp_path):
    mags = inspect(tmp_path, np.full(17, 0.5), (2, 3, 2))
    assert mags[0] == pytest.approx(0.5 * 17, rel=1e-14)
    assert np.all(mags[1:] < 1e-12)


def test_inspect_matches_in_memory_spectrum(tmp_path):
    w = np.random.default_rng(3).standard_normal(17)
    assert inspect(tmp_path, w, (2, 3, 2)).tobytes() == spectrum(w).values.tobytes()


def test_inspect_truncated_to_stdout(tmp_path, capsys):
    cli.save_checkpoint(tmp_path / "m.ckpt", np.arange(17.0), (2, 3, 2))
    assert cli.main(["inspect-spectrum", str(tmp_path / "m.ckpt"), "--tau", "0.2"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "index,magnitude" and len(lines) == 1 + 4


def test_partition_prints_histograms(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.main(["partition", "--config", str(cfg)]) == 0
    out = capsys.readouterr()
    rows = list(csv.reader(io.StringIO(out.out)))
    assert rows[0][:2] == ["client", "n_samples"] and len(rows) == 5
    assert sum(int(r[1]) for r in rows[1:]) == 300
    assert all(int(r[1]) == sum(int(x) for x in r[2:]) for r in rows[1:])
    assert "mean TV distance" in out.err
