import math

import numpy as np
import pytest
from scipy import stats

from glip import bounds, harness
from glip.harness import COLUMNS, ResultTable, compare, fit_slope, read_rows, run_scenario
from glip.prior import solve_x_star

SMALL = {"replicates": 50, "inner_draws": 200, "taus": [1e-2, 3e-3, 1e-3, 3e-4],
         "sampler": {"burn_in": 200, "thin": 1}}


def small(scenario, **extra):
    return {"scenario": scenario, **SMALL, **extra}


def power_rows(exponent, taus, factor=None):
    factor = np.ones(len(taus)) if factor is None else factor
    return [{"tau": t, "kf_posterior_empirical": c * 2 * (t * math.log(1 / t)) ** exponent}
            for t, c in zip(taus, factor)]


@pytest.fixture(scope="module")
def wpg():
    return run_scenario(small("WellPosedGaussian"))


@pytest.fixture(scope="module")
def boundary():
    return run_scenario(small("BoundaryPoisson"))


class TestFitSlope:
    def test_exact_power_law(self):
        fit = fit_slope(power_rows(1 / 3, np.geomspace(1e-2, 1e-5, 6)))
        assert fit.slope == pytest.approx(1 / 3, abs=1e-10)
        assert fit.intercept == pytest.approx(math.log(2), abs=1e-10)
        assert fit.r_squared == pytest.approx(1.0)
        assert fit.regressor == "log(tau*log(1/tau))"

    def test_multiplicative_noise(self):
        g = np.random.default_rng(7)
        taus = np.geomspace(1e-2, 1e-5, 6)
        slopes = np.array([fit_slope(power_rows(0.5, taus, g.uniform(0.9, 1.1, 6))).slope for _ in range(2000)])
        # slope sd is about 0.0115 on this grid, so 0.02 covers roughly 92% of fits
        assert np.mean(np.abs(slopes - 0.5) <= 0.02) >= 0.88
        assert abs(slopes.mean() - 0.5) < 1e-3

    def test_single_point(self):
        with pytest.raises(ValueError):
            fit_slope(power_rows(0.5, [1e-3]))

    def test_nonpositive_points_to_boundary_analysis(self):
        rows = power_rows(0.5, np.geomspace(1e-2, 1e-5, 6))
        rows[2]["kf_posterior_empirical"] = 0.0
        with pytest.raises(ValueError, match="boundary"):
            fit_slope(rows)

    def test_other_column(self):
        rows = [{"tau": t, "kf_data_empirical": math.sqrt(t * math.log(1 / t))} for t in np.geomspace(1e-2, 1e-5, 5)]
        assert fit_slope(rows, "kf_data_empirical").slope == pytest.approx(0.5, abs=1e-12)


class TestCompare:
    def fit(self, slope):
        return harness.RateFit(slope, 0.0, 0.0, 1.0, 6)

    def test_pass(self):
        verdict = compare(self.fit(0.34), 1 / 3, 0.08)
        assert verdict.passed and verdict.slope == 0.34 and verdict.predicted == 1 / 3

    def test_fail(self):
        assert not compare(self.fit(0.50), 1 / 3, 0.08).passed

    def test_zero_tolerance(self):
        assert compare(self.fit(0.5), 0.5, 0.0).passed


class TestRunScenario:
    def test_boundary_data_is_exact(self, boundary):
        for row, det in zip(boundary.rows, boundary.details):
            assert row["kf_data_empirical"] == 0.0
            assert det["data_all_exact"] and det["map_at_x_star_all"]
            assert not row["failed"]

    def test_empirical_below_bound(self, wpg):
        for row, det in zip(wpg.rows, wpg.details):
            assert row["kf_posterior_empirical"] <= row["bound_overall"] + 3 * det["posterior_kf_stderr"]

    def test_data_below_analytic_bound(self, wpg):
        for row in wpg.rows:
            assert row["kf_data_empirical"] <= row["kf_data_bound"]

    def test_trend(self, wpg):
        rho, _ = stats.spearmanr([r["tau"] for r in wpg.rows], [r["kf_posterior_empirical"] for r in wpg.rows])
        assert rho > 0.9

    def test_columns_and_csv(self, wpg):
        text = wpg.to_csv()
        assert text.splitlines()[0] == ",".join(COLUMNS)
        rows = read_rows(text)
        assert len(rows) == 4 and all(r["wall_ms"] == "0" for r in rows)

    def test_parallel_invariance(self, wpg):
        again = run_scenario(small("WellPosedGaussian"), parallel=2)
        assert again.to_csv() == wpg.to_csv()
        assert again.to_json() == wpg.to_json()

    def test_seed_changes_output(self, wpg):
        assert run_scenario(small("WellPosedGaussian", seed=1)).to_csv() != wpg.to_csv()

    def test_ill_posed_offset_and_schedule(self):
        cfg = small("IllPosedGaussian", taus=[1e-2, 1e-3])
        table = run_scenario(cfg)
        for row in table.rows:
            problem = harness.build_problem(table.config, row["tau"])
            assert row["gamma"] ** 2 == pytest.approx(bounds.ill_posed_gamma2(row["tau"]), rel=1e-12)
            proj = np.eye(problem.p) - problem.operator.projector
            expect = np.linalg.norm(proj @ (problem.x_true - solve_x_star(problem).x_star))
            assert row["x_star_offset"] == pytest.approx(expect, abs=1e-12)
            assert row["x_star_offset"] > 0


class TestResultTable:
    def table(self, failed):
        rows = [dict.fromkeys(COLUMNS, 0) | {"failed": f} for f in failed]
        return ResultTable({}, rows, [], [])

    def test_failure_threshold(self):
        assert not self.table([0] * 9 + [1]).scenario_failed
        assert self.table([0] * 8 + [1, 1]).scenario_failed

    def test_format_value(self):
        assert harness.format_value(0.1) == "0.10000000000000001"
        assert harness.format_value(True) == "1"
        assert harness.format_value(float("nan")) == "nan"


class TestReadRows:
    def test_header_mismatch(self):
        with pytest.raises(ValueError, match="header"):
            read_rows("tau,kf\n0.1,0.2\n")

    def test_ragged(self):
        header = ",".join(COLUMNS)
        with pytest.raises(ValueError):
            read_rows(header + "\nWellPosedGaussian,0.01\n")

    def test_non_numeric(self):
        header = ",".join(COLUMNS)
        line = ",".join("x" for _ in COLUMNS)
        with pytest.raises(ValueError):
            read_rows(header + "\n" + line + "\n")
