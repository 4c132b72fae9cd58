"""Tests for ingestion, scaling, windowing, split plans and the EPS generator."""
import numpy as np
import pytest

from config import read_json
from data import (CorpusConfig, FaultSpec, Scaler, SynthConfig, TelemetryTable, WindowedDataset, apply_scale,
                  eps_relations, fit_scale, ingest_csv, load_directory, make_windows, plan_splits, prepare_split,
                  reduce_windows, synth_corpus, synth_eps, train_validation_split, write_csv, write_sidecar)
from errors import ConfigError, ContractError, DataError


def table(rows, n=2, faults=None, source="f"):
    values = np.arange(rows * n, dtype=float).reshape(rows, n)
    return TelemetryTable([f"s{i}" for i in range(n)], values,
                          np.zeros(rows, bool) if faults is None else faults, source)


def test_ingest_small_file(tmp_path):
    path = tmp_path / "run.csv"
    path.write_text("a,b,label\n1.5,2,nominal\n-3,4e-2,fault\n")
    parsed = ingest_csv(path)
    assert parsed.sensors == ["a", "b"]
    np.testing.assert_array_equal(parsed.values, [[1.5, 2.0], [-3.0, 0.04]])
    np.testing.assert_array_equal(parsed.faults, [False, True])
    assert parsed.source_ids == ["run"]


@pytest.mark.parametrize("body, message", [
    ("a,b\n1,2\n", "label"),
    ("a,b,label\n1,2,nominal\n3,nominal\n", "line 3"),
    ("a,b,label\n1,2,nominal\n3,oops,fault\n", "line 3"),
    ("a,b,label\n1,2,broken\n", "line 2"),
])
def test_ingest_rejects_malformed_files(tmp_path, body, message):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(DataError, match=message):
        ingest_csv(path)


def test_csv_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    original = TelemetryTable(["x", "y", "z"], rng.normal(size=(30, 3)) * 1e3, rng.random(30) < 0.2, "rt")
    path = tmp_path / "rt.csv"
    write_csv(original, path)
    loaded = ingest_csv(path)
    assert loaded.values.tobytes() == original.values.tobytes()
    np.testing.assert_array_equal(loaded.faults, original.faults)


def test_scaling_examples():
    data = TelemetryTable(["a", "b"], [[0.0, 7.0], [5.0, 7.0], [10.0, 7.0]], [False] * 3, "s")
    scaler = fit_scale(data)
    scaled = apply_scale(scaler, data)
    np.testing.assert_allclose(scaled.values[:, 0], [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(scaled.values[:, 1], [0.0, 0.0, 0.0])
    np.testing.assert_allclose(scaler.inverse_transform(scaled.values), data.values, atol=1e-12)


def test_scaler_fits_only_training_rows():
    data = TelemetryTable(["a"], [[0.0], [10.0], [100.0]], [False] * 3, "s")
    scaler = fit_scale(data, np.array([True, True, False]))
    np.testing.assert_allclose(apply_scale(scaler, data).values[:, 0], [0.0, 1.0, 10.0])
    restored = Scaler.from_dict(scaler.to_dict())
    np.testing.assert_array_equal(restored.transform(data.values), scaler.transform(data.values))
    with pytest.raises(ContractError):
        fit_scale(data, np.zeros(3, bool))


def test_window_counts_and_labels():
    assert len(make_windows(table(100), 50, 50)) == 2
    assert len(make_windows(table(100), 50, 1)) == 51
    faults = np.zeros(100, bool)
    faults[60] = True
    windows = make_windows(table(100, faults=faults), 50, 50)
    np.testing.assert_array_equal(windows.faults, [False, True])
    assert windows.windows.shape == (2, 50, 2)


def test_windows_are_time_major():
    windows = make_windows(table(4, n=3), 2, 2)
    np.testing.assert_array_equal(windows.flat()[0], [0, 1, 2, 3, 4, 5])


def test_windows_never_cross_files():
    joined = TelemetryTable.concat([table(60, source="a"), table(30, source="b"), table(50, source="c")])
    windows = make_windows(joined, 50, 10)
    assert windows.skipped_segments == 1
    assert set(windows.sources) == {"a", "c"}
    assert len(windows) == 2 + 1


def test_reduce_windows_keeps_ceiling_count():
    dataset = make_windows(table(1000), 10, 10)
    reduced = reduce_windows(dataset, 0.34, seed=1)
    assert len(reduced) == 34
    assert len(reduce_windows(make_windows(table(70), 10, 10), 0.34)) == 3


def test_train_validation_split_sizes():
    dataset = make_windows(table(1000), 10, 10)
    train, validation = train_validation_split(dataset, 0.3, seed=0)
    assert (len(train), len(validation)) == (70, 30)
    assert validation.role == "validation"
    combined = np.concatenate([train.flat(), validation.flat()])
    assert len({row.tobytes() for row in combined}) == 100


def test_plan_splits_partitions_files():
    files = [f"f{i}" for i in range(9)]
    plan = plan_splits(files, k=7, seed=3)
    assert len(plan.splits) == 7
    for split in plan.splits:
        assert sorted(split.train + split.test) == sorted(files)
        assert len(split.test) == 3
    assert plan == plan_splits(files, k=7, seed=3)
    assert plan_splits(["a", "b", "c"], seed=1) == plan_splits(["a", "b", "c"], seed=1)
    with pytest.raises(ContractError):
        plan_splits(["only"])


def test_synthetic_circuit_laws_hold_without_noise():
    cfg = SynthConfig(rows=400, noise_sigma=0.0)
    generated = synth_eps(cfg, seed=5)
    assert generated.sensors == ["V_src", "I_src", "V_busA", "V_busB", "I_L1", "I_L2", "I_L3", "I_L4"]
    values = generated.values
    np.testing.assert_array_equal(values[:, 1], values[:, 4] + values[:, 5] + values[:, 6] + values[:, 7])
    residuals = eps_relations(cfg).residuals(values)
    assert np.max(np.abs(residuals)) < 1e-12
    assert not generated.faults.any()


def test_stuck_fault_is_labeled_and_constant():
    cfg = SynthConfig(rows=300, faults=[FaultSpec(kind="stuck", target="V_busB", start=100, end=200)])
    generated = synth_eps(cfg, seed=1)
    assert generated.faults[100:200].all()
    assert not generated.faults[:100].any() and not generated.faults[200:].any()
    column = generated.values[100:200, 3]
    assert np.all(column == column[0])


def test_short_fault_spikes_current():
    loads = [load.model_copy(update={"toggle_probability": 0.0}) for load in SynthConfig().loads]
    cfg = SynthConfig(rows=200, noise_sigma=0.0, loads=loads,
                      faults=[FaultSpec(kind="short", target="L3", start=50, end=80, magnitude=0.1)])
    generated = synth_eps(cfg, seed=2)
    current = generated.values[:, 6]
    assert current[60] > 5 * current[10]
    # shorts obey the circuit laws
    assert np.max(np.abs(eps_relations(cfg).residuals(generated.values))) < 1e-12


def test_generator_is_seeded():
    cfg = SynthConfig(rows=100)
    assert synth_eps(cfg, 7).values.tobytes() == synth_eps(cfg, 7).values.tobytes()


def test_contradictory_schedule_is_rejected():
    faults = [FaultSpec(kind="offset", target="I_src", start=10, end=50, magnitude=1.0),
              FaultSpec(kind="stuck", target="I_src", start=40, end=60)]
    with pytest.raises(ConfigError):
        synth_eps(SynthConfig(rows=100, faults=faults))
    with pytest.raises(ConfigError):
        synth_eps(SynthConfig(rows=100, faults=[FaultSpec(kind="stuck", target="nope", start=0, end=5)]))


def test_corpus_and_directory_loading(tmp_path):
    cfg = CorpusConfig(files=4, base=SynthConfig(rows=120), fault_length=(20, 40))
    tables = synth_corpus(cfg, seed=0)
    assert [t.source_ids[0] for t in tables] == ["eps_000", "eps_001", "eps_002", "eps_003"]
    assert sum(t.faults.any() for t in tables) == 2
    for t in tables:
        path = tmp_path / f"{t.source_ids[0]}.csv"
        write_csv(t, path)
        write_sidecar(path, seed=0)
    assert read_json(tmp_path / "eps_000.csv.meta.json") == {"seed": 0}
    loaded = load_directory(tmp_path)
    assert [t.source_ids[0] for t in loaded] == ["eps_000", "eps_001", "eps_002", "eps_003"]
    with pytest.raises(DataError):
        load_directory(tmp_path / "missing")


def test_prepare_split_keeps_test_files_out_of_training():
    cfg = CorpusConfig(files=6, base=SynthConfig(rows=400), fault_file_fraction=0.5, fault_length=(40, 80))
    tables = synth_corpus(cfg, seed=1)
    plan = plan_splits([t.source_ids[0] for t in tables], k=2, seed=0)
    for scope in ("split_train", "complete_dataset"):
        data = prepare_split(tables, plan, 1, scope=scope, length=20, train_stride=20, test_stride=5)
        test_files = set(plan.split(1).test)
        for dataset in (data.train, data.validation, data.ssl_train, data.ssl_validation):
            assert not set(dataset.sources) & test_files
        assert set(data.test.sources) <= test_files
        assert not data.train.faults.any() and not data.validation.faults.any()
        train_rows = np.concatenate([t.values for t in tables if t.source_ids[0] in plan.split(1).train])
        np.testing.assert_array_equal(data.scaler.data_min, train_rows.min(axis=0))
        np.testing.assert_array_equal(data.scaler.data_max, train_rows.max(axis=0))
    complete = prepare_split(tables, plan, 1, scope="complete_dataset", length=20, train_stride=20)
    reduced = prepare_split(tables, plan, 1, scope="split_train", length=20, train_stride=20)
    assert len(complete.ssl_train) > len(reduced.ssl_train)


def test_empty_windowed_dataset_roles():
    with pytest.raises(ContractError):
        WindowedDataset(np.zeros((1, 2, 2)), [False], ["a"], ["x", "y"], role="holdout")
