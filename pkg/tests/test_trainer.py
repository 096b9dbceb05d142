import numpy as np
import pytest
import torch

from udfkit.errors import ConfigError, DegenerateInputError
from udfkit.field import load_checkpoint, save_checkpoint
from udfkit.fixtures import sample_surface, shape
from udfkit.geometry import PointCloud
from udfkit.trainer import (TRACE_COLUMNS, TrainConfig, TrainingAborted, checkpoint_for,
                            config_from_mapping, fit, load_config, parse_config_text,
                            training_diagnostics)

SMALL = dict(width=16, depth=3, batch_size=200, dist_subsample=200, queries_per_point=4,
             resample_every=50, log_every=5)


@pytest.fixture(scope="module")
def cloud():
    return sample_surface(shape("sphere"), 500, seed=0)


def small(**kw):
    return TrainConfig(**{**SMALL, **kw})


# --- config ---------------------------------------------------------------

def test_defaults_carry_the_reference_weights():
    cfg = TrainConfig()
    assert (cfg.alpha1, cfg.alpha2, cfg.alpha3, cfg.lam) == (0.002, 0.1, 0.01, 10.0)
    assert cfg.optimizer == "adam" and cfg.step_size == 1e-3


def test_config_file_round_trip(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\niterations = 12\nalpha2 = 0.5  # inline\nadaptive_weight = false\nprecision=single\n")
    cfg = load_config(p, overrides={"seed": "7"})
    assert cfg.iterations == 12 and cfg.alpha2 == 0.5 and cfg.adaptive_weight is False
    assert cfg.precision == "single" and cfg.seed == 7


def test_unknown_key_names_it():
    with pytest.raises(ConfigError) as err:
        config_from_mapping({"alpha9": "1"})
    assert "alpha9" in str(err.value)


@pytest.mark.parametrize("values", [{"iterations": "0"}, {"step_size": "-1"}, {"alpha1": "-0.1"},
                                    {"optimizer": "lbfgs"}, {"iterations": "ten"}, {"adaptive_weight": "maybe"}])
def test_invalid_values(values):
    with pytest.raises(ConfigError):
        config_from_mapping(values)


def test_config_line_without_equals():
    with pytest.raises(ConfigError):
        parse_config_text("iterations 5\n")


# --- fit ------------------------------------------------------------------

def test_fit_requires_normalized_cloud():
    big = PointCloud(np.random.default_rng(0).normal(size=(100, 3)))
    with pytest.raises(DegenerateInputError):
        fit(big, small(iterations=1))


def test_same_seed_bit_identical(cloud, tmp_path):
    cfg = small(iterations=30)
    blobs = []
    for k in range(2):
        net, _ = fit(cloud, cfg)
        p = tmp_path / f"{k}.udf"
        save_checkpoint(p, checkpoint_for(net, cloud, cfg))
        blobs.append(p.read_bytes())
    assert blobs[0] == blobs[1]
    net3, _ = fit(cloud, cfg.replace(seed=1))
    assert not np.array_equal(net3.get_flat(), load_checkpoint(tmp_path / "0.udf").build().get_flat())


def test_trace_thinning_and_export(cloud, tmp_path):
    net, tr = fit(cloud, small(iterations=23))
    assert len(tr.totals) == 23
    assert [r["iteration"] for r in tr.rows] == [0, 5, 10, 15, 20]
    assert tr.wall_clock > 0
    p = tmp_path / "trace.tsv"
    tr.write(p)
    lines = p.read_text().splitlines()
    assert lines[0].split("\t") == list(TRACE_COLUMNS)
    assert len(lines) == 6
    assert float(lines[1].split("\t")[5]) == tr.rows[0]["total"]


def test_total_is_weighted_sum(cloud):
    cfg = small(iterations=3, log_every=1)
    _, tr = fit(cloud, cfg)
    for r in tr.rows:
        expect = r["cd"] + cfg.alpha1 * r["proj"] + cfg.alpha2 * r["dist"] + cfg.alpha3 * r["orth"]
        assert r["total"] == pytest.approx(expect, rel=1e-6)


def test_sgd_option_runs(cloud):
    _, tr = fit(cloud, small(iterations=5, optimizer="sgd", step_size=1e-2))
    assert np.all(np.isfinite(tr.totals))


def test_nan_aborts_with_last_good(cloud):
    cfg = small(iterations=20, precision="double")
    snapshots = {}

    def poison(it, bd):
        snapshots[it] = net.get_flat()
        if it == 6:
            with torch.no_grad():
                next(net.parameters()).view(-1)[0] = float("nan")

    from udfkit.trainer import build_field
    net = build_field(cfg)
    with pytest.raises(TrainingAborted) as err:
        fit(cloud, cfg, field=net, callback=poison)
    exc = err.value
    assert exc.iteration == 7
    good = exc.last_good.build().get_flat()
    assert np.all(np.isfinite(good))
    # state after the last successful update, before the poisoning
    assert np.array_equal(good, snapshots[5])
    assert len(exc.trace.totals) == 7
    assert exc.last_good.metadata["aborted_at"] == 7


def test_diagnostics_untrained_and_single_entry(cloud):
    net, tr = fit(cloud, small(iterations=1))
    rep = training_diagnostics(tr, net, cloud)
    assert rep["rows"] == 1 and rep["iterations"] == 1
    assert len(rep["curves"]["total"]) == 1
    assert sum(rep["parallel_histogram"]["counts"]) >= 0
    assert isinstance(rep["skipped"], dict)
    bare = training_diagnostics(tr)
    assert "parallel_fraction" not in bare


def test_prefix_of_longer_run_equals_shorter_run(cloud):
    # with a constant step the trajectory does not depend on the total iteration count
    from udfkit.trainer import build_field
    long_cfg = small(iterations=25, resample_every=7)
    net = build_field(long_cfg)
    snap = {}

    def cb(it, _):
        if it + 1 == 10:
            snap["p"] = net.get_flat()

    fit(cloud, long_cfg, field=net, callback=cb)
    short, _ = fit(cloud, long_cfg.replace(iterations=10))
    assert np.array_equal(short.get_flat(), snap["p"])


def test_cosine_schedule_reaches_final_ratio(cloud):
    seen = []
    from udfkit.trainer import build_field
    cfg = small(iterations=12, lr_schedule="cosine", lr_final_ratio=0.1)
    net = build_field(cfg)
    orig = torch.optim.Adam.step

    def spy(self, *a, **k):
        seen.append(self.param_groups[0]["lr"])
        return orig(self, *a, **k)

    torch.optim.Adam.step = spy
    try:
        fit(cloud, cfg, field=net)
    finally:
        torch.optim.Adam.step = orig
    expect = [1e-4 + 0.5 * (1e-3 - 1e-4) * (1 + np.cos(np.pi * t / 12)) for t in range(12)]
    np.testing.assert_allclose(seen, expect, rtol=1e-9)
    with pytest.raises(ConfigError):
        config_from_mapping({"lr_schedule": "step"})


# --- fixture-scale runs (shared with the acceptance suite) -----------------

@pytest.mark.slow
def test_smoothed_loss_progress():
    import fits
    tr = fits.sphere().trace
    T = len(tr.totals)
    assert tr.smoothed_total(int(0.9 * T)) < tr.smoothed_total(int(0.1 * T))


def _eval_cd(net, cloud, queries):
    from udfkit.losses import loss_cd
    return float(loss_cd(net, queries, cloud).detach())


@pytest.mark.slow
def test_pure_pull_reaches_the_exact_field_floor():
    # the exact distance field is the best any network can do on this loss, so
    # it is the reference; the literal 10x ratio is checked separately below
    import fits
    from udfkit.sampler import sample_queries
    run = fits.ablation("w/o ZLS-C")
    queries = sample_queries(run.cloud, 4, seed=123).queries
    initial = _eval_cd(fits.desk_build(run.cfg), run.cloud, queries)
    final = _eval_cd(run.net, run.cloud, queries)
    floor = _eval_cd(shape("sphere").torch_field(), run.cloud, queries)
    assert initial >= 3 * floor
    assert final <= 1.10 * floor


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="the exact field's own L_CD on this fixture is ~1/8.6 of the "
                                       "untrained value, so no field can show a 10x drop")
def test_pure_pull_tenfold_drop():
    import fits
    from udfkit.sampler import sample_queries
    run = fits.ablation("w/o ZLS-C")
    queries = sample_queries(run.cloud, 4, seed=123).queries
    initial = _eval_cd(fits.desk_build(run.cfg), run.cloud, queries)
    assert initial / _eval_cd(run.net, run.cloud, queries) >= 10


@pytest.mark.slow
def test_fitted_field_matches_analytic_distance_at_probes():
    import fits
    from scipy.spatial import cKDTree
    from udfkit.field import evaluate
    from udfkit.fixtures import exact_udf
    run = fits.sphere()
    d, _ = cKDTree(run.cloud.points).query(run.cloud.points, k=2)
    spacing = d[:, 1].mean()
    probes = np.random.default_rng(0).uniform(-0.5, 0.5, (1000, 3))
    err = np.abs(evaluate(run.net, probes) - exact_udf(shape("sphere"), probes)[0])
    assert err.max() < 3 * spacing


@pytest.mark.slow
def test_trained_diagnostics_parallel_fraction():
    import fits
    run = fits.sphere()
    rep = training_diagnostics(run.trace, run.net, run.cloud)
    assert rep["parallel_fraction"] >= 0.90
    assert rep["iterations"] == run.cfg.iterations
