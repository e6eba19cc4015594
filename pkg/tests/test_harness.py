"""Tests for config parsing, the corpus, aggregation, and batch runs."""

import numpy as np
import numpy.testing as npt
import pytest

from dpslab.diagnostics import RunRecord, StepRow, read_curve_csv
from dpslab.harness import (ExperimentSpec, cell_seed, compare_curves,
                            curve_ratio, make_corpus, mean_curve,
                            parse_experiment, run_experiment, summarize)
from dpslab.samplers import SamplerConfig

FULL_CONFIG = """
# desk-scale deblur comparison
size = 16
operator = gaussian_blur
op.ksize = 5
op.sigma = 1.0
noise = gaussian
noise_sigma = 0.05
T = 30
images = 2
seeds = 0, 1
prior = empirical
prior_images = 8
diag_stride = 5

[method dps]
zeta = 0.3

[method dpscm cm]
zeta = 0.3
omega = 0.5
mu = 0.5
accel_cutoff = 0.4     # fraction of T
"""


# ---------------- config parsing ----------------

class TestParseExperiment:
    def test_full_config(self):
        spec = parse_experiment(FULL_CONFIG)
        assert spec.size == 16
        assert spec.operator == "gaussian_blur"
        assert spec.op_params == {"ksize": 5, "sigma": 1.0}
        assert spec.seeds == (0, 1)
        assert [m.label for m in spec.methods] == ["dps", "cm"]
        assert spec.methods[1].method == "dpscm"
        assert spec.methods[1].mu == 0.5
        assert spec.methods[0].T == 30
        # fractional cutoff resolves against T
        assert spec.methods[1].accel_cutoff == 12

    def test_seeds_space_separated(self):
        spec = parse_experiment("seeds = 3 5 9\n[method dps]\n")
        assert spec.seeds == (3, 5, 9)

    def test_no_methods_rejected(self):
        with pytest.raises(ValueError, match="at least one method"):
            parse_experiment("size = 16\n")

    def test_unknown_global_key(self):
        with pytest.raises(ValueError, match="unknown key"):
            parse_experiment("zetta = 3\n[method dps]\n")

    def test_unknown_method_key(self):
        with pytest.raises(ValueError, match="unknown method key"):
            parse_experiment("[method dps]\nstrength = 3\n")

    def test_bad_section(self):
        with pytest.raises(ValueError, match="method KIND"):
            parse_experiment("[task blur]\n")

    def test_missing_equals(self):
        with pytest.raises(ValueError, match="key = value"):
            parse_experiment("size 16\n[method dps]\n")

    def test_duplicate_labels(self):
        with pytest.raises(ValueError, match="duplicate"):
            parse_experiment("[method dps]\n[method dps]\n")

    def test_unknown_noise(self):
        with pytest.raises(ValueError, match="unknown noise"):
            parse_experiment("noise = salt\n[method dps]\n")

    def test_png_prior_needs_path(self):
        with pytest.raises(ValueError, match="prior_path"):
            parse_experiment("prior = png_dir\n[method dps]\n")


# ---------------- corpus ----------------

class TestCorpus:
    def test_deterministic(self):
        a = make_corpus(5, 16, 42)
        b = make_corpus(5, 16, 42)
        npt.assert_array_equal(a, b)

    def test_seed_changes_content(self):
        assert not np.array_equal(make_corpus(3, 16, 1), make_corpus(3, 16, 2))

    def test_range_and_shape(self):
        imgs = make_corpus(12, 32, 0)
        assert imgs.shape == (12, 32, 32)
        assert imgs.min() >= 0.0 and imgs.max() <= 1.0

    def test_images_have_structure(self):
        imgs = make_corpus(10, 32, 3)
        assert all(img.std() > 0.01 for img in imgs)

    def test_cell_seed_injective(self):
        seen = {cell_seed(i, s) for i in range(50) for s in range(100)}
        assert len(seen) == 5000


# ---------------- aggregation ----------------

def _fake_record(label, t_vals, resid_vals, failed=False):
    rec = RunRecord(method=label, config_echo={})
    rec.failed = failed
    for t, v in zip(t_vals, resid_vals):
        rec.append(StepRow(t=t, meas_residual=v, eps_error=2.0 * v))
    return rec


class TestAggregation:
    def test_mean_curve(self):
        recs = [_fake_record("m", [9, 5, 1], [1.0, 2.0, 3.0]),
                _fake_record("m", [9, 5, 1], [3.0, 4.0, 5.0])]
        t, mat = mean_curve(recs)
        npt.assert_array_equal(t, [9, 5, 1])
        npt.assert_allclose(mat[:, 0], [2.0, 3.0, 4.0])  # meas_residual
        npt.assert_allclose(mat[:, 4], [4.0, 6.0, 8.0])  # eps_error

    def test_mean_curve_skips_failed(self):
        recs = [_fake_record("m", [5, 1], [1.0, 1.0]),
                _fake_record("m", [], [], failed=True)]
        t, mat = mean_curve(recs)
        npt.assert_allclose(mat[:, 0], [1.0, 1.0])

    def test_mean_curve_grid_mismatch(self):
        recs = [_fake_record("m", [5, 1], [1.0, 1.0]),
                _fake_record("m", [6, 1], [1.0, 1.0])]
        with pytest.raises(ValueError, match="t grid"):
            mean_curve(recs)

    def test_compare_curves_self_ratio(self):
        recs = [_fake_record("m", [9, 5, 1], [1.0, 2.0, 3.0])]
        t, ratio, flags = compare_curves(recs, recs)
        finite = np.isfinite(ratio)
        npt.assert_allclose(ratio[finite], 1.0)
        assert all(f == "" for f in flags)

    def test_zero_denominator_flagged(self):
        a = [_fake_record("m", [5, 1], [1.0, 1.0])]
        b = [_fake_record("m", [5, 1], [0.0, 1.0])]
        t, ratio, flags = compare_curves(a, b)
        assert ratio[0, 0] == np.inf
        assert flags[0] == "zero_denominator"
        assert flags[1] == ""

    def test_grid_mismatch_rejected(self):
        a = np.array([5, 1])
        b = np.array([5, 2])
        with pytest.raises(ValueError, match="mismatched"):
            curve_ratio(a, np.ones((2, 2)), b, np.ones((2, 2)))

    def test_summarize_counts_failures(self):
        good = RunRecord(method="m", config_echo={})
        good.final_psnr, good.final_ssim, good.final_mse = 20.0, 0.8, 0.01
        bad = RunRecord(method="m", config_echo={}, failed=True)
        rows = summarize({"m": [good, bad]})
        assert rows[0]["runs"] == 2
        assert rows[0]["failures"] == 1
        assert rows[0]["psnr_mean"] == 20.0


# ---------------- end-to-end batch run ----------------

@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    spec = parse_experiment(FULL_CONFIG)
    out = tmp_path_factory.mktemp("exp")
    return spec, run_experiment(spec, out_dir=out)


class TestRunExperiment:
    def test_layout(self, small_run):
        spec, result = small_run
        out = result["out_dir"]
        assert (out / "summary.csv").exists()
        assert (out / "report.txt").exists()
        assert (out / "curves" / "dps.csv").exists()
        assert (out / "curves" / "cm.csv").exists()
        assert (out / "ratios" / "cm_over_dps.csv").exists()
        assert (out / "images" / "truth_img000.png").exists()
        assert (out / "images" / "meas_img001_seed01.png").exists()
        assert (out / "images" / "recon_cm_img000_seed00.png").exists()
        assert (out / "runs" / "dps" / "img000_seed00.csv").exists()

    def test_all_cells_ran(self, small_run):
        spec, result = small_run
        for label in ("dps", "cm"):
            assert len(result["records"][label]) == 4
            assert all(not r.failed for r in result["records"][label])

    def test_summary_matches_records(self, small_run):
        spec, result = small_run
        recs = result["records"]["dps"]
        want = np.mean([r.final_psnr for r in recs])
        row = next(r for r in result["summary"] if r["method"] == "dps")
        npt.assert_allclose(row["psnr_mean"], want, rtol=1e-15)

    def test_curve_csv_readable(self, small_run):
        spec, result = small_run
        header, mat = read_curve_csv(result["out_dir"] / "curves" / "dps.csv")
        assert header[0] == "t"
        # stride 5 on T=30 plus forced first and last steps
        npt.assert_array_equal(mat[:, 0], [29, 25, 20, 15, 10, 5, 1])

    def test_report_mentions_scale(self, small_run):
        spec, result = small_run
        text = (result["out_dir"] / "report.txt").read_text()
        assert "2 images x 2 seeds" in text
        assert text.startswith("# generated ")

    def test_rerun_byte_identical_modulo_header(self, small_run, tmp_path):
        spec, result = small_run
        second = run_experiment(spec, out_dir=tmp_path / "again")
        first_files = sorted(p.relative_to(result["out_dir"])
                             for p in result["out_dir"].rglob("*") if p.is_file())
        second_files = sorted(p.relative_to(second["out_dir"])
                              for p in (tmp_path / "again").rglob("*")
                              if p.is_file())
        assert first_files == second_files
        for rel in first_files:
            a = (result["out_dir"] / rel).read_bytes()
            b = (tmp_path / "again" / rel).read_bytes()
            if rel.name == "report.txt":
                assert a.split(b"\n", 1)[1] == b.split(b"\n", 1)[1]
            else:
                assert a == b, f"{rel} differs between reruns"


class TestEquivalenceThroughHarness:
    def test_mu_zero_rows_identical(self, tmp_path):
        text = FULL_CONFIG.replace("mu = 0.5", "mu = 0.0")
        spec = parse_experiment(text)
        result = run_experiment(spec, out_dir=tmp_path)
        by_label = {row["method"]: row for row in result["summary"]}
        assert by_label["dps"]["psnr_mean"] == by_label["cm"]["psnr_mean"]
        assert by_label["dps"]["mse_mean"] == by_label["cm"]["mse_mean"]


class TestFailurePolicy:
    def test_divergent_method_recorded_batch_continues(self, tmp_path):
        text = FULL_CONFIG.replace("zeta = 0.3\nomega", "zeta = 1e30\nomega")
        text = text.replace("mu = 0.5", "mu = 0.5\nguidance_norm = squared")
        spec = parse_experiment(text)
        with np.errstate(all="ignore"):
            result = run_experiment(spec, out_dir=tmp_path)
        by_label = {row["method"]: row for row in result["summary"]}
        assert by_label["cm"]["failures"] == 4
        assert by_label["dps"]["failures"] == 0
        assert np.isnan(by_label["cm"]["psnr_mean"])
        assert np.isfinite(by_label["dps"]["psnr_mean"])
        report = (tmp_path / "report.txt").read_text()
        assert "non-finite" in report
        assert not (tmp_path / "curves" / "cm.csv").exists()
        assert (tmp_path / "curves" / "dps.csv").exists()

    def test_failed_run_csv_carries_marker(self, tmp_path):
        text = FULL_CONFIG.replace("zeta = 0.3\nomega", "zeta = 1e30\nomega")
        text = text.replace("mu = 0.5", "mu = 0.5\nguidance_norm = squared")
        spec = parse_experiment(text)
        with np.errstate(all="ignore"):
            run_experiment(spec, out_dir=tmp_path)
        body = (tmp_path / "runs" / "cm" / "img000_seed00.csv").read_text()
        assert body.startswith("# failed: non-finite")


class TestCurvesOnly:
    def test_diagnose_layout(self, tmp_path):
        spec = parse_experiment(FULL_CONFIG)
        run_experiment(spec, out_dir=tmp_path, curves_only=True)
        assert (tmp_path / "curves" / "dps.csv").exists()
        assert (tmp_path / "report.txt").exists()
        assert not (tmp_path / "images").exists()
        assert not (tmp_path / "runs").exists()


class TestPoissonTask:
    def test_poisson_spec_runs(self, tmp_path):
        text = """
size = 16
operator = gaussian_blur
op.ksize = 5
op.sigma = 1.0
noise = poisson
noise_lam = 1.0
T = 30
images = 1
seeds = 0
prior = empirical
prior_images = 8
diag_stride = 10

[method dpscm_poisson pcm]
zeta = 0.1
omega = 0.2
mu = 0.5
"""
        spec = parse_experiment(text)
        result = run_experiment(spec, out_dir=tmp_path)
        rec = result["records"]["pcm"][0]
        assert not rec.failed
        assert np.isfinite(rec.final_psnr)
