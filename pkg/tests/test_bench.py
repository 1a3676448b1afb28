import csv
import math

import pytest

from edgepier.bench import MB, Cell, Report, ScenarioSpec, load_report, run_once, run_scenario, synthetic_layers, write_csvs


def small(kind="sequential", **kw):
    base = dict(node_count=3, image_size=2 * MB, layer_size=1 * MB, uplink_mbps=[20.0], repetitions=1)
    base.update(kw)
    return ScenarioSpec.desk(kind, **base)


@pytest.mark.parametrize("kw", [
    dict(kind="parallel"),
    dict(repetitions=0),
    dict(image_size=0),
    dict(uplink_mbps=[]),
    dict(uplink_mbps=[20, -1]),
    dict(modes=("edgepier", "docker")),
])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        ScenarioSpec(**kw)


def test_spec_defaults_and_sizes():
    spec = ScenarioSpec()
    assert spec.node_count == 6 and spec.repetitions == 10
    assert spec.layer_sizes() == [100 * MB] * 5
    assert ScenarioSpec.full("size_sweep").sweep_sizes() == [k * 100 * MB for k in range(1, 11)]
    assert ScenarioSpec.desk("size_sweep").sweep_sizes() == [k * 10 * MB for k in range(1, 11)]
    assert ScenarioSpec(image_size=250, layer_size=100).layer_sizes() == [100, 100, 50]


def test_synthetic_layers_are_seeded():
    a = synthetic_layers([1000, 10], 1)
    assert a == synthetic_layers([1000, 10], 1)
    assert a != synthetic_layers([1000, 10], 2)


def test_baseline_matches_serialized_uplink_model():
    spec = small(modes=("baseline",))
    r = run_once(spec, "baseline", 20.0, 0)
    assert r.ok
    # N images, one after another, over the scaled uplink
    model_s = spec.node_count * spec.image_size * 8 / (20.0 * spec.bandwidth_scale * 1e6)
    assert r.distribution_ms / 1000 == pytest.approx(model_s, rel=0.03)
    assert max(r.pull_ms.values()) <= r.distribution_ms


def test_edgepier_sequential_pulls_get_faster():
    r = run_once(small(), "edgepier", 20.0, 0)
    assert r.ok
    times = [r.pull_ms[f"node{i}"] for i in range(1, 4)]
    for earlier, later in zip(times, times[1:]):
        assert later <= earlier * 1.10
    assert r.uplink_bytes <= 1.25 * r.image_size


def test_concurrent_run_and_uplink_series():
    r = run_once(small("concurrent"), "edgepier", 20.0, 0)
    assert r.ok and len(r.pull_ms) == 3
    # series is reported in nominal Mbps and never exceeds the nominal uplink
    assert r.uplink_series
    assert max(mbps for _, mbps in r.uplink_series) <= 20.0 * 1.01


def test_csvs_and_report(tmp_path):
    results = run_scenario(small(repetitions=2))
    paths = write_csvs(results, tmp_path)
    names = {p.name for p in paths}
    assert {"distribution_time.csv", "pull_times.csv", "uplink_util.csv", "uplink_bytes.csv"} <= names
    with (tmp_path / "distribution_time.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert set(rows[0]) == {"scenario", "mode", "bandwidth_mbps", "repetition", "distribution_ms"}
    with (tmp_path / "pull_times.csv").open() as fh:
        assert next(csv.reader(fh)) == ["scenario", "mode", "bandwidth_mbps", "repetition", "node", "pull_ms"]
    report = load_report(tmp_path)
    assert report.cells[("sequential", "20", "edgepier")].count == 2
    assert "speedup" in report.render()


def test_size_sweep_csv(tmp_path):
    spec = small("size_sweep", sweep_layers=2, modes=("baseline",), uplink_mbps=[100.0])
    results = run_scenario(spec)
    write_csvs(results, tmp_path)
    with (tmp_path / "size_sweep.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["image_mb"] for r in rows] == ["1", "2"]
    assert float(rows[1]["avg_pull_ms"]) > float(rows[0]["avg_pull_ms"])


def test_report_identical_values_have_zero_stddev():
    assert Cell([5.0] * 10).stddev == 0.0


def test_report_speedup_arithmetic():
    report = Report({
        ("sequential", "100", "baseline"): Cell([240_000.0]),
        ("sequential", "100", "edgepier"): Cell([96_000.0]),
    })
    assert report.speedups()[("sequential", "100")] == pytest.approx(0.60)


def test_report_counts_mixed_repetitions(tmp_path):
    (tmp_path / "distribution_time.csv").write_text(
        "scenario,mode,bandwidth_mbps,repetition,distribution_ms\n"
        "sequential,edgepier,20,0,100.0\n"
        "sequential,edgepier,20,1,failed\n"
        "sequential,baseline,20,0,200.0\n"
        "sequential,baseline,20,1,200.0\n"
        "sequential,baseline,20,2,200.0\n"
    )
    report = load_report(tmp_path)
    e = report.cells[("sequential", "20", "edgepier")]
    b = report.cells[("sequential", "20", "baseline")]
    assert (e.count, e.failed, b.count) == (1, 1, 3)
    assert math.isclose(report.speedups()[("sequential", "20")], 0.5)


def test_report_on_empty_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_report(tmp_path)
