# tests/test_evaluation.py
import math
import os

import numpy as np
import pytest
from scipy import stats

from dataset import build_cohort, build_test_set, denormalize_position, load_manifest
from evaluation import (
    MetricsReport, PersistenceBaseline, _pooled_sd, ade, error_decomposition, evaluate, fde, horizon_steps,
    paired_t_test, paired_tests, read_report, run_strategy_comparison, summarize, table1, write_report,
)
from formats.reports import TABLE1_COLUMNS, read_rows
from model import init_glorot, parameters_equal
from tumor_shared import ContractError, ModelConfig, ParameterError, ShapeError, TrainConfig, read_json_config


class LookupOracle:
    """Returns the stored targets of whichever sample owns the observed positions."""
    T_obs, T_pred = 16, 5

    def __init__(self, samples):
        self.table = {s.observed_positions.tobytes(): s.targets for s in samples}

    def predict(self, frames, observed):
        return np.stack([self.table[np.ascontiguousarray(o).tobytes()] for o in observed])


@pytest.fixture(scope="module")
def test_set(small_phantom):
    return build_test_set(small_phantom, 2, 5.0, 3.0, seed=5)


def _row(pid, strategy, session, ade_mean, n_train=25, seed=0, n=5, sd=0.5, status="ok", group=""):
    return {"patient_id": pid, "group": group, "strategy": strategy, "session": session, "n_train": n_train, "seed": seed,
            "n_samples": n, "ade_mean": ade_mean, "ade_sd": sd, "fde_mean": 2 * ade_mean, "fde_sd": sd,
            "status": status, "train_patients": pid if strategy == "PS" else "", "message": ""}


def test_ade_fde_examples():
    pred = np.array([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]])
    gt = np.zeros((2, 3))
    assert ade(pred, gt) == 2.5
    assert fde(pred, gt) == 5.0
    with pytest.raises(ShapeError):
        ade(pred, np.zeros((3, 3)))


def test_metrics_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p, g = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        d = [math.sqrt(sum((p[i, j] - g[i, j]) ** 2 for j in range(3))) for i in range(5)]
        assert ade(p, g) == pytest.approx(sum(d) / 5, rel=1e-12)
        assert fde(p, g) == pytest.approx(d[-1], rel=1e-12)


def test_horizon_steps():
    assert horizon_steps(1.0) == 5
    assert horizon_steps(0.2) == 1


def test_paired_t_matches_scipy():
    rng = np.random.default_rng(1)
    a, b = rng.normal(2.0, 1.0, 12), rng.normal(1.5, 1.0, 12)
    res = paired_t_test(a, b)
    ref = stats.ttest_rel(a, b)
    assert res.t == pytest.approx(ref.statistic, rel=1e-10)
    assert res.p == pytest.approx(ref.pvalue, rel=1e-8)
    assert res.df == 11 and res.significant == (ref.pvalue < 0.05)


def test_paired_t_degenerate_cases():
    same = paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert (same.t, same.p, same.degenerate, same.significant) == (0.0, 1.0, True, False)
    shifted = paired_t_test([2.0, 3.0, 4.0], [1.0, 2.0, 3.0])
    assert shifted.t == math.inf and shifted.p == 0.0 and shifted.degenerate
    with pytest.raises(ParameterError):
        paired_t_test([1.0], [2.0])


def test_oracle_scores_zero(test_set):
    report = evaluate(LookupOracle(test_set.samples), test_set)
    assert report.ade.shape == (len(test_set),)
    assert np.all(report.ade == 0.0) and np.all(report.fde == 0.0)


def test_persistence_matches_brute_force(test_set):
    report = evaluate(PersistenceBaseline(), test_set, batch_size=3)
    expected = []
    for s in test_set.samples:
        last = denormalize_position(s.observed_positions[-1], s.norm)
        gt = denormalize_position(s.targets, s.norm)
        expected.append(np.mean([np.linalg.norm(g - last) for g in gt]))
    assert report.ade == pytest.approx(expected, rel=1e-12)
    assert (report.patient_id, report.session) == ("P001", "T1")


def test_horizon_one_makes_ade_equal_fde(test_set):
    report = evaluate(PersistenceBaseline(), test_set, horizon=1)
    assert np.array_equal(report.ade, report.fde)
    with pytest.raises(ParameterError):
        evaluate(PersistenceBaseline(), test_set, horizon=6)


def test_window_mismatch_is_contract_error(test_set):
    with pytest.raises(ContractError):
        evaluate(PersistenceBaseline(4, 2), test_set)


def test_image_size_mismatch_is_contract_error(test_set):
    config = ModelConfig(d_model=8, n_heads=2, n_layers_enc=1, n_layers_dec=1, d_ff=16, dropout=0.0,
                         image_size=32)
    with pytest.raises(ContractError, match="image size"):
        evaluate(init_glorot(config, 0), test_set)


def test_inference_leaves_parameters_untouched(test_set, small_model_config):
    model = init_glorot(small_model_config, 0)
    before = model.copy()
    report = evaluate(model, test_set)
    assert parameters_equal(model, before)
    assert np.all(np.isfinite(report.ade))


def test_missing_report_row():
    row = MetricsReport("P001", "T2", strategy="MP", status="missing", message="numeric: boom").to_row()
    assert row["ade_mean"] is None and row["status"] == "missing" and row["n_samples"] == 0


def test_error_decomposition_counts_at_threshold():
    rows = [_row("P001", "PS", "T1", 1.0), _row("P001", "PS", "T2", 2.0),
            _row("P002", "PS", "T1", 2.5), _row("P002", "PS", "T2", 4.0),
            _row("P001", "MP", "T1", 2.0), _row("P001", "MP", "T2", 2.1),
            _row("P002", "MP", "T1", 1.5), _row("P002", "MP", "T2", 1.9)]
    decomp = error_decomposition(rows)
    assert decomp.count_under("PS", "modeling") == 1
    assert decomp.count_under("PS", "inter-fractional") == 1
    assert decomp.count_under("MP", "modeling") == 2
    assert decomp.count_under("MP", "inter-fractional") == 1
    with pytest.raises(ContractError):
        error_decomposition([r for r in rows if r["session"] == "T1"])


def test_pooled_sd_matches_concatenated_samples():
    rng = np.random.default_rng(2)
    parts = [rng.normal(1.0, 0.5, 7), rng.normal(2.0, 0.3, 11)]
    cells = [{"n_samples": len(x), "ade_mean": x.mean(), "ade_sd": x.std(ddof=1)} for x in parts]
    assert _pooled_sd(cells, "ade") == pytest.approx(np.concatenate(parts).std(ddof=1), rel=1e-12)


def test_summary_averages_patients_over_seeds():
    rows = [_row("P001", "PS", "T1", 1.0, seed=0), _row("P001", "PS", "T1", 3.0, seed=1),
            _row("P002", "PS", "T1", 4.0), _row("P003", "PS", "T1", 9.0, status="missing")]
    (summary,) = summarize(rows)
    assert summary["n_patients"] == 2
    assert summary["ade_mean"] == pytest.approx(3.0)
    assert summary["ade_sd_patients"] == pytest.approx(np.std([2.0, 4.0], ddof=1))


def test_table1_rows_per_group_and_averaged():
    rows = [_row("P001", "PS", "T1", 1.0, group="SM"), _row("P001", "PS", "T2", 2.0, group="SM"),
            _row("P001", "MP", "T1", 1.5, group="SM"), _row("P001", "MP", "T2", 1.8, group="SM"),
            _row("P002", "PS", "T1", 3.0, group="SV"), _row("P002", "PS", "T2", 5.0, group="SV"),
            _row("P002", "MP", "T1", 2.0, group="SV"), _row("P002", "MP", "T2", 2.5, group="SV"),
            _row("P001", "PS", "T1", 100.0, n_train=10, group="SM")]
    table = table1(rows)
    assert [(r["dataset"], r["strategy"]) for r in table] == [
        ("SM", "PS"), ("SM", "MP"), ("SV", "PS"), ("SV", "MP"), ("Averaged", "PS"), ("Averaged", "MP")]
    sm_ps, avg_ps, avg_mp = table[0], table[4], table[5]
    assert (sm_ps["t1_ade"], sm_ps["t1_fde"], sm_ps["t2_ade"]) == (1.0, 2.0, 2.0)
    assert sm_ps["t1_ade_sd"] == pytest.approx(0.5) and sm_ps["n_patients"] == 1
    assert avg_ps["n_train"] == 25 and avg_ps["n_patients"] == 2
    assert (avg_ps["t1_ade"], avg_ps["t2_ade"]) == (pytest.approx(2.0), pytest.approx(3.5))
    assert avg_ps["t1_ade_sd"] == pytest.approx(math.sqrt(12.0 / 9.0), rel=1e-12)
    assert avg_mp["t2_fde"] == pytest.approx(4.3)
    assert table1(rows, n_train=10)[0]["t1_ade"] == 100.0


def test_table1_without_groups_has_only_averaged():
    rows = [_row("P001", "PS", "T1", 1.0), _row("P002", "MP", "T1", 2.0)]
    table = table1(rows)
    assert [(r["dataset"], r["strategy"]) for r in table] == [("Averaged", "PS"), ("Averaged", "MP")]
    assert table[0]["t2_ade"] is None and table[1]["t1_ade"] == 2.0


def test_report_round_trip(tmp_path):
    rows = [_row("P001", "PS", "T1", 1.234567891234), _row("P002", "MP", "T2", 0.1, status="missing")]
    rows[1].update(ade_mean=None, ade_sd=None, fde_mean=None, fde_sd=None, message="numeric: nan loss")
    paths = write_report(rows, str(tmp_path))
    back = read_report(paths["detail"])
    assert back[0]["ade_mean"] == pytest.approx(1.23456789, rel=1e-9)
    assert back[0]["n_train"] == 25 and back[0]["train_patients"] == "P001"
    assert back[1]["ade_mean"] is None and back[1]["message"] == "numeric: nan loss"
    assert summarize(back)[0]["ade_mean"] == pytest.approx(summarize(rows)[0]["ade_mean"], rel=1e-8)
    (avg_ps, avg_mp) = read_rows(paths["table1"], TABLE1_COLUMNS)
    assert avg_ps["dataset"] == "Averaged" and avg_ps["t1_ade"] == pytest.approx(1.23456789, rel=1e-9)
    assert avg_mp["t2_ade"] is None and back[0]["group"] == ""


def _sweep(manifest_file, model_config, groups=(), **kwargs):
    cohort = build_cohort(load_manifest(manifest_file(n_patients=2, groups=groups)))
    train_cfg = TrainConfig(epochs=1, warmup_epochs=0, batch_size=4)
    return run_strategy_comparison(cohort, [25], [0], model_config, train_cfg, **kwargs)


def test_small_sweep_is_complete(manifest_file, small_model_config):
    result = _sweep(manifest_file, small_model_config)
    rows = result.rows()
    assert len(rows) == 8 and not result.missing
    assert {(r["patient_id"], r["strategy"], r["session"]) for r in rows} == {
        (p, s, t) for p in ("P001", "P002") for s in ("PS", "MP") for t in ("T1", "T2")}
    for r in rows:
        assert r["n_samples"] == 5 and math.isfinite(r["ade_mean"])
        if r["strategy"] == "PS":
            assert r["train_patients"] == r["patient_id"]
        else:
            assert r["patient_id"] not in r["train_patients"].split(";")
    tests = paired_tests(result)
    assert {(t["session"], t["metric"]) for t in tests} == {(s, m) for s in ("T1", "T2") for m in ("ade", "fde")}


def test_sweep_rows_carry_patient_group(manifest_file, small_model_config, tmp_path):
    result = _sweep(manifest_file, small_model_config, groups=("SM", "SV"))
    assert {(r["patient_id"], r["group"]) for r in result.rows()} == {("P001", "SM"), ("P002", "SV")}
    paths = write_report(result, str(tmp_path))
    table = read_rows(paths["table1"], TABLE1_COLUMNS)
    assert [r["dataset"] for r in table] == ["SM", "SM", "SV", "SV", "Averaged", "Averaged"]
    assert all(r["n_patients"] == (2 if r["dataset"] == "Averaged" else 1) for r in table)


def test_failed_cells_are_reported_missing(manifest_file):
    wrong_window = ModelConfig.tiny()
    result = _sweep(manifest_file, wrong_window)
    assert len(result.missing) == 8
    assert all(r["message"].startswith("contract:") for r in result.rows())


@pytest.mark.slow
def test_desk_sweep_produces_finite_errors(manifest_file):
    config = ModelConfig(d_model=16, n_heads=2, n_layers_enc=1, n_layers_dec=1, d_ff=32, dropout=0.0)
    cohort = build_cohort(load_manifest(manifest_file(n_patients=3, n_sequences=2, duration_s=10.0)))
    train_cfg = TrainConfig(epochs=10, warmup_epochs=1, batch_size=8, lr_min=1e-5, lr_max=1e-3)
    result = run_strategy_comparison(cohort, [100], [0, 1], config, train_cfg)
    assert len(result.rows()) == 3 * 2 * 2 * 2 and not result.missing
    assert all(r["ade_mean"] < 50.0 for r in result.rows())
    assert len(error_decomposition(result).rows) == 6


def test_metric_worked_examples():
    gt = np.zeros((5, 3))
    assert ade(np.tile([3.0, 4.0, 0.0], (5, 1)), gt) == 5.0
    offsets = np.array([[1.0, 0, 0], [0, 2.0, 0], [0, 0, 3.0], [4.0, 0, 0], [0, 5.0, 0]])
    assert ade(offsets, gt) == 3.0
    assert fde(np.array([[9.0, 9.0, 9.0], [0.0, 0.0, 2.0]]), np.zeros((2, 3))) == 2.0
    assert fde(np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]]), np.zeros((2, 3))) == 0.0


def test_paired_t_worked_example():
    res = paired_t_test([1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 0.0, 0.0])
    assert res.t == pytest.approx(3.873, abs=1e-3) and res.df == 3
    const = paired_t_test([2.0, 3.0, 4.0, 5.0], [1.0, 2.0, 3.0, 4.0])
    assert const.p == 0.0 and const.degenerate


def test_decomposition_threshold_zero_and_recount():
    rows = [_row(p, s, t, v) for p, s, t, v in [
        ("P001", "PS", "T1", 0.4), ("P001", "PS", "T2", 3.0), ("P002", "PS", "T1", 1.1),
        ("P002", "PS", "T2", 0.9), ("P001", "MP", "T1", 0.0), ("P001", "MP", "T2", 0.0),
        ("P002", "MP", "T1", 2.2), ("P002", "MP", "T2", 2.6)]]
    assert error_decomposition(rows, threshold_mm=0.0).count_under("PS", "modeling") == 0
    decomp = error_decomposition(rows, threshold_mm=1.0)
    for strategy in ("PS", "MP"):
        for kind, session in (("modeling", "T1"), ("inter-fractional", "T2")):
            brute = sum(1 for r in rows if r["strategy"] == strategy and r["session"] == session
                        and r["ade_mean"] <= 1.0)
            assert decomp.count_under(strategy, kind) == brute


@pytest.mark.slow
def test_desk_cohort_patient_specific_beats_multi_patient():
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    model_cfg, train_cfg = read_json_config(os.path.join(root, "configs", "desk.json"), ModelConfig.toy())
    cohort = build_cohort(load_manifest(os.path.join(root, "manifests", "desk_cohort.json")))
    result = run_strategy_comparison(cohort, [200, 1000], [0, 1, 2], model_cfg, train_cfg,
                                     workers=min(4, os.cpu_count() or 1))
    assert not result.missing
    summary = {(r["strategy"], r["session"], r["n_train"]): r["ade_mean"] for r in summarize(result.rows())}
    for n_train in (200, 1000):
        ps_t1, mp_t1 = summary[("PS", "T1", n_train)], summary[("MP", "T1", n_train)]
        ps_t2, mp_t2 = summary[("PS", "T2", n_train)], summary[("MP", "T2", n_train)]
        assert ps_t1 < mp_t1
        assert ps_t2 - ps_t1 > mp_t2 - mp_t1
