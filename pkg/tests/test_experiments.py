import json
import math

import numpy as np
import pandas as pd
import pytest

from app.core.errors import BudgetInfeasibleError, ExperimentIOError, InvalidArgumentError
from app.core.seeding import StreamRole, make_rng
from app.models.experiment import ExperimentConfig, RunMode, Termination
from app.services import experiments
from app.services.experiments import (
    CURVE_COLUMNS,
    ErrorCurves,
    fit_decay_rate,
    lemma_trials,
    run_certified_cli,
    run_experiment,
    run_lemma_mc,
    run_study,
)
from app.services.params import SamplingMeasure
from app.services.polytools import Polynomial, compute_N


def small_config(tmp_path, **overrides):
    values = dict(
        k=2, t=2.0, delta=0.1, grid_n=8, beta_list=[1.0], n_max=2, realizations=1,
        validation_size=20, output_dir=tmp_path / "out",
    )
    values.update(overrides)
    return ExperimentConfig(**values)


def test_single_realization_writes_one_row_per_step(tmp_path):
    config = small_config(tmp_path)
    curves = run_experiment(config)
    assert len(curves.raw) == 2
    assert list(curves.raw["n"]) == [1, 2]
    assert list(curves.raw["N_n"]) == [1, 2]
    out = config.output_dir
    with open(out / "curves.csv", newline="") as fh:
        header = fh.readline()
    assert header == ",".join(CURVE_COLUMNS) + "\n"
    assert (out / "trace_beta1_r0.json").is_file()
    assert (out / "basis_beta1_r0.rb").is_file()
    trace = json.loads((out / "trace_beta1_r0.json").read_text())
    assert trace["termination"] == Termination.HIT_SCHEDULE_END.value
    assert trace["config"]["beta"] == 1.0


def test_curves_are_byte_identical_across_runs(tmp_path):
    first = small_config(tmp_path / "a", beta_list=[1.0, 1.5], n_max=4, realizations=2)
    second = small_config(tmp_path / "b", beta_list=[1.0, 1.5], n_max=4, realizations=2)
    run_experiment(first)
    run_experiment(second)
    for name in ("curves.csv", "curves_summary.csv", "rates.json"):
        assert (first.output_dir / name).read_bytes() == (second.output_dir / name).read_bytes()


def test_parallel_jobs_match_serial(tmp_path):
    serial = small_config(tmp_path / "serial", beta_list=[1.0, 1.5], n_max=3, realizations=2, save_bases=False)
    parallel = small_config(tmp_path / "parallel", beta_list=[1.0, 1.5], n_max=3, realizations=2,
                            save_bases=False, workers=3)
    run_experiment(serial)
    run_experiment(parallel)
    assert (serial.output_dir / "curves.csv").read_bytes() == (parallel.output_dir / "curves.csv").read_bytes()


def test_manifest_lists_committed_files(tmp_path):
    config = small_config(tmp_path)
    run_experiment(config)
    manifest = json.loads((config.output_dir / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    assert set(manifest["files"]) == {
        "trace_beta1_r0.json", "basis_beta1_r0.rb", "curves.csv", "curves_summary.csv", "rates.json",
    }


def test_disk_failure_leaves_partial_manifest(tmp_path, monkeypatch):
    def broken_save(rb, path):
        raise OSError("no space left on device")

    monkeypatch.setattr(experiments, "save_basis", broken_save)
    config = small_config(tmp_path)
    with pytest.raises(ExperimentIOError) as info:
        run_experiment(config)
    manifest = json.loads((config.output_dir / "manifest.json").read_text())
    assert info.value.manifest_path == str(config.output_dir / "manifest.json")
    assert manifest["status"] == "partial"
    assert manifest["files"] == ["trace_beta1_r0.json"]
    assert "no space left" in manifest["error"]


def test_summary_and_csv_reload(tmp_path):
    config = small_config(tmp_path, beta_list=[1.0, 2.0], n_max=3, realizations=3, save_bases=False)
    curves = run_experiment(config)
    summary = curves.summary
    assert len(summary) == 6
    assert set(summary["realizations"]) == {3}
    assert np.all(summary["min"] <= summary["mean"]) and np.all(summary["mean"] <= summary["max"])
    reloaded = ErrorCurves.from_csv(config.output_dir / "curves.csv")
    assert reloaded.betas == [1.0, 2.0]
    pd.testing.assert_frame_equal(reloaded.summary, summary, check_exact=True)


def test_from_csv_requires_all_columns(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("beta,n\n1,1\n")
    with pytest.raises(InvalidArgumentError):
        ErrorCurves.from_csv(path)


def test_fit_decay_rate_recovers_power_law():
    n = np.arange(1, 21)
    raw = pd.DataFrame({
        "beta": 1.0, "realization": 0, "n": n, "N_n": n, "sigma_hat": 0.0, "sigma_val": 3.0 * n ** -1.5,
    })
    curves = ErrorCurves(raw)
    assert fit_decay_rate(curves, 1.0) == pytest.approx(1.5, rel=1e-10)
    assert math.isnan(fit_decay_rate(curves, 1.0, n_min=20))


def test_study_over_several_amplitude_decays(tmp_path):
    config = small_config(tmp_path, save_bases=False)
    results = run_study(config, ks=[2], ts=[1.0, 2.0])
    assert set(results) == {(2, 1.0), (2, 2.0)}
    for t in ("1", "2"):
        assert (config.output_dir / f"k2_t{t}" / "curves.csv").is_file()


def test_certified_driver_reports_budget(tmp_path):
    config = small_config(tmp_path, mode=RunMode.CERTIFIED, epsilon=1000.0, eta=0.05, r=4.0, m0=1.0)
    trace = run_certified_cli(config)
    assert trace.termination is Termination.HIT_TOLERANCE
    assert trace.diagnostics["m"] == 23
    assert trace.diagnostics["N"] == compute_N(23, 0.05)
    assert trace.diagnostics["final_dimension"] == 0
    assert trace.evaluation_count == trace.diagnostics["N"]
    assert (config.output_dir / "trace_certified.json").is_file()
    assert (config.output_dir / "basis_certified.rb").is_file()


def test_certified_driver_rejects_infeasible_budget(tmp_path, monkeypatch):
    monkeypatch.setenv("RBGREEDY_MAX_BASIS_SIZE", "100")
    config = small_config(tmp_path, mode=RunMode.CERTIFIED, epsilon=0.5, r=4.0)
    with pytest.raises(BudgetInfeasibleError) as info:
        run_certified_cli(config)
    assert info.value.m == 23
    assert not (config.output_dir / "trace_certified.json").exists()


def test_lemma_campaign_with_constant_polynomials(tmp_path):
    config = small_config(
        tmp_path, mode=RunMode.LEMMA_MC, lemma_instances=3, lemma_trials=50, lemma_max_m=1,
        lemma_max_d=2, lemma_mc_samples=2000, lemma_etas=[0.25],
    )
    report = run_lemma_mc(config)
    assert len(report.lemma) == 3
    assert all(r.m == 1 and r.frequency == 0.0 for r in report.lemma)
    saved = json.loads((config.output_dir / "lemma_report.json").read_text())
    assert len(saved["lemma"]) == 3


def test_lemma_trials_univariate_linear():
    rng = make_rng(0, StreamRole.LEMMA, "linear")
    P = Polynomial.from_map({(0,): 0.3, (1,): 1.0})
    N = compute_N(2, 0.25)
    result = lemma_trials(P, 0.3 + np.sqrt(3.0), N, 500, SamplingMeasure.UNIFORM, rng, eta=0.25)
    assert N == 14
    assert result.N == 14
    assert result.bound == pytest.approx((1 - 3 / 16) ** 14)
    assert result.passed


@pytest.mark.parametrize("measure", [SamplingMeasure.UNIFORM, SamplingMeasure.CHEBYSHEV])
def test_lemma_campaign_on_random_downward_closed_sets(tmp_path, measure):
    config = small_config(
        tmp_path, mode=RunMode.LEMMA_MC, measure=measure, lemma_instances=30, lemma_trials=1000,
        lemma_max_m=15, lemma_etas=[0.25, 0.05],
    )
    report = run_lemma_mc(config)
    assert len(report.nikolskii) == len(report.superlevel) == 30
    assert len(report.lemma) == 60
    assert max(r.m for r in report.lemma) > 1
    for r in report.lemma:
        assert r.N == compute_N(r.m, r.eta, measure)
    assert report.violations == 0


@pytest.mark.slow
@pytest.mark.parametrize("measure", [SamplingMeasure.UNIFORM, SamplingMeasure.CHEBYSHEV])
def test_lemma_campaign_at_full_scale(tmp_path, measure):
    config = small_config(
        tmp_path, mode=RunMode.LEMMA_MC, measure=measure, lemma_instances=100, lemma_trials=2000,
        lemma_max_m=20, lemma_mc_samples=100_000, lemma_etas=[0.25, 0.05],
    )
    assert run_lemma_mc(config).violations == 0


@pytest.mark.slow
def test_decay_orderings_on_sixteen_parameters(tmp_path):
    betas = [1.0, 1.25, 1.5, 1.75, 2.0]
    config = small_config(tmp_path, k=4, grid_n=32, delta=0.01, beta_list=betas, n_max=15,
                          realizations=5, validation_size=2000, save_bases=False)
    results = run_study(config, ks=[4], ts=[1.0, 2.0])
    n_max = config.n_max

    for beta in betas:
        assert results[(4, 2.0)].mean_curve(beta)[n_max] < results[(4, 1.0)].mean_curve(beta)[n_max]

    for t in (1.0, 2.0):
        curves = results[(4, t)]
        low, high = curves.mean_curve(1.0), curves.mean_curve(2.0)
        assert all(high[n] <= low[n] for n in range(5, n_max + 1))
        early_gap = curves.mean_curve(1.0)[n_max] - curves.mean_curve(1.25)[n_max]
        late_gap = curves.mean_curve(1.75)[n_max] - curves.mean_curve(2.0)[n_max]
        assert late_gap < early_gap
