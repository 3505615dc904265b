import csv
import json
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ablab import cli, dist, report, training
from ablab.config import AbHyperparams, RunConfig, RunMode
from ablab.errors import ConfigError

DATASET = {"kind": "teacher_student", "n_samples": 600, "in_dim": 6, "classes": 3, "hidden": 12,
           "test_fraction": 0.25, "seed": 1}
MODEL = [{"type": "linear", "in": 6, "out": 16}, {"type": "relu"}, {"type": "linear", "in": 16, "out": 3}]


def small_cfg(**kw):
    base = dict(model=MODEL, dataset=DATASET, world_size=2, num_groups=2, local_batch_size=8,
                ab=AbHyperparams(total_training_steps=40, sigma_cutoff=0.3), eval_interval=10)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def datasets():
    return training.load_datasets(DATASET)


def test_compression_ratio():
    assert report.compression_ratio(100, 100) == 1.0
    # 44.14:1 leaves 2.2655 % of the model, which rounds to the quoted 2.27 %
    retained_pct = 100 / report.compression_ratio(4414, 100)
    assert round(retained_pct, 2) == 2.27
    assert abs(retained_pct - 2.27) <= 0.1
    with pytest.raises(ValueError):
        report.compression_ratio(10, 0)


def test_ecr_examples():
    assert report.ecr(25, 75, 100) == 0.0
    assert abs(report.ecr(25, 75, 2.266) - 73.30) <= 0.05
    # group training time is taken off L
    assert report.ecr(25, 75, 10, group_phase_frac=20, is_ab=True) == pytest.approx(100 - 25 - 55 * 0.1)
    assert report.ecr(25, 75, 10, group_phase_frac=20, is_ab=False) == pytest.approx(100 - 25 - 7.5)


@pytest.mark.parametrize("args", [(60, 50, 10), (-1, 50, 10), (25, 75, 0), (25, 75, 101)])
def test_ecr_range_errors(args):
    with pytest.raises(ValueError):
        report.ecr(*args)


def test_ecr_group_fraction_cannot_exceed_l():
    with pytest.raises(ValueError):
        report.ecr(25, 75, 10, group_phase_frac=80, is_ab=True)


pct = st.floats(0, 100, allow_nan=False)


@given(pct, pct, st.floats(0.01, 100), st.floats(0.01, 100), st.floats(0, 1))
def test_ecr_monotone(f, l, c1, c2, gfrac):
    if f + l > 100:
        return
    lo, hi = sorted((c1, c2))
    g = gfrac * l
    assert report.ecr(f, l, hi) <= report.ecr(f, l, lo)
    assert report.ecr(f, l, hi, g, True) <= report.ecr(f, l, lo, g, True)
    assert report.ecr(f, l, lo, g, True) >= report.ecr(f, l, lo, 0.0, True)
    assert report.ecr(f, l, lo) <= 100
    if f + l + 1 <= 100:
        assert report.ecr(f, l + 1, lo) <= report.ecr(f, l, lo)


def test_sweep_batch_arithmetic():
    assert report.sweep_batch_sizes(2, "local", local_batch=256, workers_per_node=4) == (8, 256, 2048)
    assert report.sweep_batch_sizes(4, "local", local_batch=256, workers_per_node=4) == (16, 256, 4096)
    # nodes of four workers: 4 nodes hold 256 samples per worker, 8 nodes hold 128
    assert report.sweep_batch_sizes(4, "global", global_batch=4096, workers_per_node=4) == (16, 256, 4096)
    assert report.sweep_batch_sizes(8, "global", global_batch=4096, workers_per_node=4) == (32, 128, 4096)
    assert report.sweep_batch_sizes(4, "global", global_batch=4096) == (4, 1024, 4096)
    with pytest.raises(ConfigError):
        report.sweep_batch_sizes(3, "global", global_batch=4096)
    with pytest.raises(ConfigError):
        report.sweep_batch_sizes(2, "diagonal", local_batch=8)


def test_sweep_config_keeps_samples_seen():
    base = small_cfg(world_size=1, num_groups=1, mode=RunMode.TRAD_DDP, local_batch_size=8,
                     ab=AbHyperparams(total_training_steps=400))
    c = report.sweep_config(base, 4, "local")
    assert (c.world_size, c.local_batch, c.global_batch) == (4, 8, 32)
    assert c.ab.total_training_steps == 100
    g = report.sweep_config(small_cfg(local_batch_size=None, global_batch_size=32), 4, "global")
    assert (g.world_size, g.local_batch, g.global_batch) == (4, 8, 32)
    assert g.ab.total_training_steps == 40


def test_metrics_from_run_matches_ledger(datasets):
    rep = training.run_training(small_cfg(), datasets)
    m = report.metrics_from_run(rep)
    totals = rep.ledger.totals()
    assert m.total_bytes == totals.total_bytes == sum((e.bytes for e in rep.ledger.entries), Fraction(0))
    assert m.scaled_traffic == float(totals.total_bytes) * 0.5384
    assert m.compression_ratio == rep.decompositions[-1].compression_ratio
    c = min(100.0, 100.0 / m.compression_ratio)
    gfrac = 100.0 * rep.schedule.steps_in(training.GROUP_TRAIN) / 40
    assert m.ecr == report.ecr(25, 75, c, gfrac, True)


def test_emit_reports_single_run(tmp_path, datasets):
    cfg = small_cfg()
    rep = training.run_training(cfg, datasets)
    out = report.emit_reports([(cfg, rep, report.metrics_from_run(rep))], tmp_path / "out")
    names = {p.name for p in out.iterdir()}
    assert {"run_config.json", "metrics.csv", "ledger.csv", "accuracy_curve.csv"} <= names
    assert RunConfig.from_dict(json.loads((out / "run_config.json").read_text())) == cfg
    rows = report.read_metrics(out)
    assert len(rows) == 1 and tuple(rows[0]) == report.METRICS_COLUMNS
    assert Fraction(rows[0]["total_bytes"]) == rep.ledger.totals().total_bytes
    with open(out / "ledger.csv", newline="") as fh:
        ledger_rows = list(csv.DictReader(fh))
    assert sum(Fraction(r["bytes"]) for r in ledger_rows) == rep.ledger.totals().total_bytes


def test_emit_reports_is_byte_stable(tmp_path, datasets):
    outputs = []
    for i in range(2):
        cfg = small_cfg()
        rep = training.run_training(cfg, datasets)
        out = report.emit_reports([(cfg, rep, report.metrics_from_run(rep))], tmp_path / f"r{i}")
        outputs.append({n: (out / n).read_bytes() for n in ("metrics.csv", "ledger.csv", "run_config.json",
                                                             "accuracy_curve.csv", "phase_traffic.csv")})
    assert outputs[0] == outputs[1]


def test_emit_reports_empty_sweep(tmp_path):
    out = report.emit_reports([], tmp_path)
    assert (out / "metrics.csv").read_text() == ",".join(report.METRICS_COLUMNS) + "\n"
    assert report.read_metrics(out) == []


def test_emit_reports_surfaces_paths(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        report.emit_reports([], blocker / "sub")
    with pytest.raises(OSError, match="metrics.csv"):
        report.read_metrics(tmp_path / "missing")


def test_scaling_sweep_writes_per_run_dirs(tmp_path, datasets):
    base = small_cfg(mode=RunMode.TRAD_DDP, world_size=1, num_groups=1, ab=AbHyperparams(total_training_steps=20))
    results = report.scaling_sweep(base, [1, 2], "local", datasets)
    assert [m.global_batch for _, _, m in results] == [8, 16]
    assert [m.total_steps for _, _, m in results] == [20, 10]
    out = report.emit_reports(results, tmp_path)
    assert (out / "run_000" / "ledger.csv").exists() and (out / "run_001" / "accuracy_curve.csv").exists()
    assert [r["run"] for r in report.read_metrics(out)] == ["0", "1"]
    assert "world_size" in report.format_table(report.read_metrics(out))


def test_format_table_shortens_floats():
    table = report.format_table([{"run": "0", "ecr": "73.30049999"}], columns=["run", "ecr"])
    assert table.splitlines()[1].split() == ["0", "73.3"]


# -- CLI ----------------------------------------------------------------------


def write_config(path, **kw):
    path.write_text(small_cfg(**kw).to_json())
    return path


def test_cli_run_and_report(tmp_path, capsys):
    conf = write_config(tmp_path / "c.json")
    assert cli.main(["run", "--config", str(conf), "--out", str(tmp_path / "o"), "--seed", "3"]) == 0
    rows = report.read_metrics(tmp_path / "o")
    assert rows[0]["seed"] == "3" and rows[0]["mode"] == "AbGroups"
    capsys.readouterr()
    assert cli.main(["report", "--in", str(tmp_path / "o")]) == 0
    assert "AbGroups" in capsys.readouterr().out


def test_cli_overrides(tmp_path):
    conf = write_config(tmp_path / "c.json")
    assert cli.main(["run", "--config", str(conf), "--out", str(tmp_path / "o"), "--mode", "TradDDP",
                     "--world-size", "4", "--num-groups", "1"]) == 0
    row = report.read_metrics(tmp_path / "o")[0]
    assert (row["mode"], row["world_size"], row["compression_ratio"]) == ("TradDDP", "4", "1.0")


def test_cli_sweep(tmp_path):
    conf = write_config(tmp_path / "c.json", mode="TradDDP", world_size=1, num_groups=1,
                        ab=AbHyperparams(total_training_steps=12))
    assert cli.main(["sweep", "--config", str(conf), "--nodes", "1,2", "--scaling", "local",
                     "--out", str(tmp_path / "s")]) == 0
    assert len(report.read_metrics(tmp_path / "s")) == 2


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"world_size": 3, "global_batch_size": 8, "local_batch_size": null}')
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    conf = write_config(tmp_path / "c.json")
    assert cli.main(["run", "--config", str(conf)]) == cli.EXIT_CONFIG
    assert cli.main(["sweep", "--config", str(conf), "--nodes", "1,x", "--scaling", "local",
                     "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["report", "--in", str(tmp_path / "missing")]) == cli.EXIT_OTHER
    assert "config error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["run"])


def test_config_round_trip_and_validation(tmp_path):
    cfg = small_cfg(local_batch_size=None, global_batch_size=16, precision="float32")
    assert RunConfig.from_json(cfg.to_json()) == cfg
    assert cfg.bpe == 4 and cfg.local_batch == 8
    for bad in ['{"nope": 1}', "{", '{"precision": "float16"}', '{"ab": {"sigma_cutoff": 1.5}}',
                '{"local_batch_size": 8, "global_batch_size": 8}',
                '{"dataset": {"kind": "idx", "train_images": "/does/not/exist"}}']:
        with pytest.raises(ConfigError):
            RunConfig.from_json(bad)
    assert cfg.override(seed=None, world_size=4).world_size == 4


def test_protocol_errors_map_to_exit_code(tmp_path, monkeypatch):
    from ablab.errors import ProtocolError

    def boom(*a, **k):
        raise ProtocolError("diverged")

    monkeypatch.setattr(training, "run_training", boom)
    conf = write_config(tmp_path / "c.json")
    assert cli.main(["run", "--config", str(conf), "--out", str(tmp_path / "o")]) == cli.EXIT_PROTOCOL


def test_backward_fraction_constant():
    assert dist.BACKWARD_FRACTION == 0.5384
