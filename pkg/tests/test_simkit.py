"""Tests for the Monte Carlo experiment engine.

Frozen-seed simulations keep every assertion deterministic; statistical
comparisons against independent references use 3-sigma bounds on the
engine's own cluster-adjusted intervals.
"""

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffrelay.analysis import (
    PepTermsConfig,
    SnrPoint,
    fit_diversity_slope,
    pep_closed_form,
    ser_nearest_neighbor,
)
from diffrelay.channel import LinkParams
from diffrelay.constellation import make_psk, make_qam
from diffrelay.decoders import DecoderConfig
from diffrelay.relay import analytic_epsilon_psk
from diffrelay.simkit import (
    ComparisonRow,
    ExperimentPlan,
    SerCurve,
    SerPoint,
    TrialsPolicy,
    _effective_trials,
    compare_curves,
    resolve_epsilons,
    run_point,
    run_sweep,
    snr_at_level,
    wilson_interval,
)

from oracles import dpsk_ser_rayleigh

QPSK = make_psk(4)
QAM16 = make_qam(16)
_Z = 1.959963984540054


def analytic_eps(db):
    return analytic_epsilon_psk(LinkParams(1.0, 10.0 ** (-db / 10.0)), QPSK)


def eps_table(grid):
    return tuple((("psk", 4, db), analytic_eps(db)) for db in grid)


def z_score(point, truth):
    sd = (point.ci_high - point.ci_low) / (2.0 * _Z)
    return (point.ser - truth) / sd


_CACHE = {}


def cached(key, build):
    if key not in _CACHE:
        _CACHE[key] = build()
    return _CACHE[key]


def small_curve():
    def build():
        plan = ExperimentPlan(
            QPSK,
            DecoderConfig("pl", epsilons=(analytic_eps(10.0),)),
            (10.0, 14.0),
            trials=TrialsPolicy(200, 1_000_000),
            seed=3,
        )
        return plan, run_sweep(plan, workers=1)

    return cached("small", build)


def genie_and_erroneous():
    def build():
        grid = (21.0, 24.0, 27.0)
        err_plan = ExperimentPlan(
            QPSK,
            DecoderConfig("pl"),
            grid,
            trials=TrialsPolicy(600, 40_000_000),
            seed=33,
            epsilon_table=eps_table(grid),
        )
        gen_plan = replace(err_plan, tying="sr_infinite")
        return run_sweep(err_plan, workers=8), run_sweep(gen_plan, workers=8)

    return cached("genie_pair", build)


def synthetic_curve(rows):
    points = tuple(
        SerPoint(db, 0, 1, ser, ser, ser) for db, ser in rows
    )
    return SerCurve(points, "feed", 0, "pl", 0.0)


class TestPolicyAndPlanValidation:
    def test_policy_defaults(self):
        pol = TrialsPolicy()
        assert pol.min_errors == 200
        assert pol.max_trials == 100_000_000

    def test_min_errors_floor(self):
        with pytest.raises(ValueError, match="min_errors must be >= 1"):
            TrialsPolicy(min_errors=0)

    def test_max_trials_floor(self):
        with pytest.raises(ValueError, match="max_trials must allow"):
            TrialsPolicy(min_errors=200, max_trials=399)

    def test_empty_grid(self):
        with pytest.raises(ValueError, match="snr_grid_db must be nonempty"):
            ExperimentPlan(QPSK, DecoderConfig("ml", epsilons=(0.1,)), ())

    def test_negative_relays(self):
        with pytest.raises(ValueError, match="n_relays must be >= 0"):
            ExperimentPlan(QPSK, DecoderConfig("ml"), (10.0,), n_relays=-1)

    def test_bad_tying(self):
        with pytest.raises(ValueError, match="tying must be one of"):
            ExperimentPlan(QPSK, DecoderConfig("ml"), (10.0,), tying="loose")

    def test_bad_sr_eps(self):
        with pytest.raises(ValueError, match="sr_eps must be one of"):
            ExperimentPlan(QPSK, DecoderConfig("ml"), (10.0,), sr_eps="zero")

    def test_custom_needs_offsets(self):
        with pytest.raises(ValueError, match="one sr and rd offset per relay"):
            ExperimentPlan(
                QPSK, DecoderConfig("ml"), (10.0,), tying="custom",
                sr_offsets_db=(3.0,),
            )

    def test_offsets_require_custom(self):
        with pytest.raises(ValueError, match="only meaningful with custom"):
            ExperimentPlan(
                QPSK, DecoderConfig("ml"), (10.0,), sr_offsets_db=(3.0,),
                rd_offsets_db=(0.0,),
            )

    def test_frame_len_floor(self):
        with pytest.raises(ValueError, match="frame_len must be >= 1"):
            ExperimentPlan(QPSK, DecoderConfig("ml"), (10.0,), frame_len=0)

    def test_epsilon_count_mismatch(self):
        with pytest.raises(ValueError, match="carries 2 epsilons"):
            ExperimentPlan(
                QPSK, DecoderConfig("ml", epsilons=(0.1, 0.2)), (10.0,),
                n_relays=1,
            )

    def test_grid_coerced_to_float(self):
        plan = ExperimentPlan(QPSK, DecoderConfig("ml"), (10, 14))
        assert plan.snr_grid_db == (10.0, 14.0)
        assert all(isinstance(v, float) for v in plan.snr_grid_db)


class TestTopologyAndHash:
    def test_all_equal_links(self):
        plan = ExperimentPlan(QPSK, DecoderConfig("ml"), (10.0, 20.0))
        topo = plan.topology_at(1)
        for link in (topo.source_dest, topo.source_relay[0], topo.relay_dest[0]):
            assert link.noise_var == pytest.approx(0.01)
            assert link.sigma2 == 1.0
            assert link.coherence_len == 65

    def test_custom_offsets(self):
        plan = ExperimentPlan(
            QPSK, DecoderConfig("ml"), (5.0,), tying="custom",
            sr_offsets_db=(10.0,), rd_offsets_db=(-2.0,),
        )
        topo = plan.topology_at(0)
        assert topo.source_dest.avg_snr == pytest.approx(10.0 ** 0.5)
        assert topo.source_relay[0].avg_snr == pytest.approx(10.0 ** 1.5)
        assert topo.relay_dest[0].avg_snr == pytest.approx(10.0 ** 0.3)

    def test_coherence_follows_frame_len(self):
        plan = ExperimentPlan(QPSK, DecoderConfig("ml"), (10.0,), frame_len=32)
        assert plan.topology_at(0).source_dest.coherence_len == 33

    def test_hash_stable_and_sensitive(self):
        plan = ExperimentPlan(QPSK, DecoderConfig("ml"), (10.0,))
        twin = ExperimentPlan(QPSK, DecoderConfig("ml"), (10.0,))
        assert plan.plan_hash() == twin.plan_hash()
        assert plan.plan_hash() != replace(plan, seed=1).plan_hash()
        assert (
            plan.plan_hash()
            != replace(plan, trials=TrialsPolicy(min_errors=100)).plan_hash()
        )


class TestWilsonInterval:
    @given(
        trials=st.integers(1, 10**6),
        frac=st.floats(0.0, 1.0),
        shrink=st.floats(0.001, 1.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_interval_brackets_rate(self, trials, frac, shrink):
        errors = int(round(frac * trials))
        lo, hi = wilson_interval(errors, trials, n_eff=shrink * trials)
        p = errors / trials
        assert 0.0 <= lo <= p <= hi <= 1.0

    def test_zero_errors_zero_floor(self):
        lo, hi = wilson_interval(0, 1000)
        assert lo == 0.0
        assert 0.0 < hi < 0.01

    def test_all_errors_unit_ceiling(self):
        lo, hi = wilson_interval(1000, 1000)
        assert hi == 1.0
        assert 0.99 < lo < 1.0

    def test_smaller_n_eff_widens(self):
        lo1, hi1 = wilson_interval(50, 10000)
        lo2, hi2 = wilson_interval(50, 10000, n_eff=2500.0)
        assert hi2 - lo2 > hi1 - lo1

    def test_n_eff_capped_at_trials(self):
        assert wilson_interval(50, 10000, n_eff=1e9) == wilson_interval(50, 10000)

    def test_input_validation(self):
        with pytest.raises(ValueError, match="trials must be >= 1"):
            wilson_interval(0, 0)
        with pytest.raises(ValueError, match="errors must lie in"):
            wilson_interval(5, 4)

    def test_effective_trials_concentrated_frames(self):
        # frames of 64 symbols with errors (4, 0, 0, 0)
        n_eff = _effective_trials(256, 4, 4, 16)
        assert n_eff == pytest.approx(256 / (12.0 / 3.9375))

    def test_effective_trials_degenerate(self):
        assert _effective_trials(256, 4, 0, 0) == 256.0
        assert _effective_trials(64, 1, 5, 25) == 64.0


class TestResolveEpsilons:
    def test_no_relays(self):
        plan = ExperimentPlan(QPSK, DecoderConfig("ml"), (10.0,), n_relays=0)
        assert resolve_epsilons(plan, 0) == ()

    def test_naive_gets_zeros(self):
        plan = ExperimentPlan(QPSK, DecoderConfig("naive_eps0"), (10.0,), n_relays=2)
        assert resolve_epsilons(plan, 0) == (0.0, 0.0)

    def test_vanishing_gets_zeros(self):
        plan = ExperimentPlan(
            QPSK, DecoderConfig("pl"), (10.0,), tying="sr_infinite",
            sr_eps="vanishing", epsilon_table=eps_table((10.0,)),
        )
        assert resolve_epsilons(plan, 0) == (0.0,)

    def test_sr_infinite_configured_uses_table(self):
        plan = ExperimentPlan(
            QPSK, DecoderConfig("pl"), (10.0,), tying="sr_infinite",
            epsilon_table=eps_table((10.0,)),
        )
        assert resolve_epsilons(plan, 0) == (analytic_eps(10.0),)

    def test_explicit_epsilons_win(self):
        plan = ExperimentPlan(
            QPSK, DecoderConfig("pl", epsilons=(0.07,)), (10.0,),
            epsilon_table=eps_table((10.0,)),
        )
        assert resolve_epsilons(plan, 0) == (0.07,)

    def test_table_keyed_at_offset_snr(self):
        plan = ExperimentPlan(
            QPSK, DecoderConfig("pl"), (5.0,), tying="custom",
            sr_offsets_db=(10.0,), rd_offsets_db=(0.0,),
            epsilon_table=eps_table((15.0,)),
        )
        assert resolve_epsilons(plan, 0) == (analytic_eps(15.0),)

    def test_missing_entry_points_to_calibration(self):
        plan = ExperimentPlan(QPSK, DecoderConfig("pl"), (10.0,))
        with pytest.raises(ValueError, match="run the calibrate step first"):
            resolve_epsilons(plan, 0)


class TestRunPoint:
    def test_zero_noise_never_errs(self):
        plan = ExperimentPlan(
            QPSK, DecoderConfig("pl", epsilons=(0.02,)), (3.0,),
            trials=TrialsPolicy(1, 10_000), seed=0, zero_noise=True,
        )
        pt = run_point(plan, 0)
        assert pt.errors == 0
        assert pt.ser == 0.0
        assert pt.ci_low == 0.0
        assert pt.fallbacks == 0
        assert 0 < pt.trials <= 10_000

    def test_index_out_of_range(self):
        plan = ExperimentPlan(QPSK, DecoderConfig("naive_eps0"), (10.0,))
        with pytest.raises(ValueError, match="grid index 1 outside"):
            run_point(plan, 1)

    def test_missing_calibration_is_annotated(self):
        plan = ExperimentPlan(QPSK, DecoderConfig("pl"), (10.0,))
        pt = run_point(plan, 0)
        assert pt.failure is not None
        assert "calibrate" in pt.failure
        assert math.isnan(pt.ser)
        assert pt.trials == 0

    def test_no_relay_matches_differential_reference(self):
        # single-link differential detection over Rayleigh block fading
        for db, min_errors in ((12.0, 2000), (20.0, 1500)):
            plan = ExperimentPlan(
                QPSK, DecoderConfig("ml"), (db,), n_relays=0,
                trials=TrialsPolicy(min_errors, 10_000_000), seed=7,
            )
            pt = run_point(plan, 0, workers=4)
            truth = dpsk_ser_rayleigh(4, 10.0 ** (db / 10.0))
            assert abs(z_score(pt, truth)) < 3.0

    def test_fallback_counter_reaches_output(self):
        plan = ExperimentPlan(
            QPSK, DecoderConfig("pl", epsilons=(analytic_eps(5.0),)), (5.0,),
            trials=TrialsPolicy(100, 1_000_000), seed=7,
        )
        pt = run_point(plan, 0)
        assert pt.fallbacks > 0

    def test_respects_max_trials(self):
        plan = ExperimentPlan(
            QPSK, DecoderConfig("pl", epsilons=(0.02,)), (30.0,),
            trials=TrialsPolicy(200, 50_000), seed=1,
        )
        pt = run_point(plan, 0)
        assert pt.trials <= 50_000
        assert pt.errors < 200


class TestRunSweep:
    def test_worker_count_is_invisible(self):
        plan, serial = small_curve()
        threaded = run_sweep(plan, workers=8)
        for a, b in zip(serial.points, threaded.points):
            assert a == b
        assert serial.plan_hash == threaded.plan_hash

    def test_rows_ordered_by_snr(self):
        plan = ExperimentPlan(
            QPSK, DecoderConfig("naive_eps0"), (14.0, 10.0),
            trials=TrialsPolicy(50, 100_000), seed=2,
        )
        curve = run_sweep(plan)
        assert [p.snr_db for p in curve.points] == [10.0, 14.0]

    def test_ser_non_increasing_within_ci(self):
        _, curve = small_curve()
        for a, b in zip(curve.points, curve.points[1:]):
            assert a.ser >= b.ser or a.ci_high >= b.ci_low

    def test_partial_failure_annotated(self):
        plan = ExperimentPlan(
            QPSK, DecoderConfig("pl"), (10.0, 12.0),
            trials=TrialsPolicy(50, 100_000), seed=2,
            epsilon_table=eps_table((10.0,)),
        )
        curve = run_sweep(plan)
        assert len(curve.points) == 2
        assert len(curve.failures) == 1
        assert curve.failures[0].snr_db == 12.0
        assert "calibrate" in curve.failures[0].failure
        assert curve.snr_db.tolist() == [10.0]
        assert curve.ser.size == 1


class TestStoppingBias:
    def test_round_granular_stopping_bias_small(self):
        # replica of the engine's loop: draw rounds of 8 batches, check the
        # error floor only between rounds, cap total trials
        def estimate(rng, p):
            errors = 0
            trials = 0
            while errors < 100 and trials < 4_000_000:
                take = min(8 * 8192, 4_000_000 - trials)
                errors += rng.binomial(take, p)
                trials += take
            return errors / trials

        rng = np.random.default_rng(0)
        p = 1e-4
        estimates = [estimate(rng, p) for _ in range(2000)]
        bias = np.mean(estimates) / p - 1.0
        assert abs(bias) < 0.02


class TestCurveGeometry:
    def test_snr_at_level_interpolates_log_linearly(self):
        curve = synthetic_curve([(10.0, 1e-2), (20.0, 1e-4)])
        assert snr_at_level(curve, 1e-3) == pytest.approx(15.0, abs=1e-12)
        assert snr_at_level(curve, 1e-2) == pytest.approx(10.0, abs=1e-12)

    def test_snr_at_level_validation(self):
        curve = synthetic_curve([(10.0, 1e-2), (20.0, 1e-4)])
        with pytest.raises(ValueError, match="level must be > 0"):
            snr_at_level(curve, 0.0)
        with pytest.raises(ValueError, match="never crosses"):
            snr_at_level(curve, 1e-6)
        with pytest.raises(ValueError, match="at least 2 successful points"):
            snr_at_level(synthetic_curve([(10.0, 1e-2)]), 1e-2)

    def test_curve_against_itself_is_unity(self):
        _, curve = small_curve()
        report = compare_curves(curve, curve, mode="ratio")
        assert len(report.rows) == len(curve.points)
        for row in report.rows:
            assert row.value == 1.0
            assert row.low <= 1.0 <= row.high

    def test_horizontal_gap_recovers_exact_shift(self):
        a = synthetic_curve([(10.0, 1e-2), (20.0, 1e-4)])
        b = synthetic_curve([(12.0, 1e-2), (22.0, 1e-4)])
        report = compare_curves(a, b, mode="horizontal_db")
        assert [row.snr_db for row in report.rows] == [10.0, 20.0]
        for row in report.rows:
            assert row.value == pytest.approx(2.0, abs=1e-9)
            assert row.low == pytest.approx(2.0, abs=1e-9)
            assert row.high == pytest.approx(2.0, abs=1e-9)

    def test_disjoint_grids_rejected(self):
        a = synthetic_curve([(10.0, 1e-2), (20.0, 1e-4)])
        b = synthetic_curve([(11.0, 1e-2), (21.0, 1e-4)])
        with pytest.raises(ValueError, match="share no successful SNR points"):
            compare_curves(a, b, mode="ratio")

    def test_zero_reference_rejected(self):
        a = synthetic_curve([(10.0, 1e-2)])
        b = synthetic_curve([(10.0, 0.0)])
        with pytest.raises(ValueError, match="positive reference SER"):
            compare_curves(a, b, mode="ratio")

    def test_bad_mode_rejected(self):
        _, curve = small_curve()
        with pytest.raises(ValueError, match="mode must be"):
            compare_curves(curve, curve, mode="vertical")


class TestAgainstAnalysis:
    def test_mc_tracks_nearest_neighbor_sum(self):
        # erroneous single relay, equal SNRs: the pairwise-sum approximation
        # stays within 3 cluster-adjusted error bars of simulation
        grid = (15.0, 18.0, 21.0)
        plan = ExperimentPlan(
            QPSK, DecoderConfig("pl"), grid,
            trials=TrialsPolicy(300, 10_000_000), seed=21,
            epsilon_table=eps_table(grid),
        )
        curve = run_sweep(plan, workers=4)
        for pt in curve.points:
            eps = analytic_eps(pt.snr_db)
            cfg = PepTermsConfig(
                SnrPoint.from_db(pt.snr_db, pt.snr_db, pt.snr_db), eps, 4
            )
            approx = ser_nearest_neighbor(QPSK, pep_closed_form, cfg).value
            assert abs(z_score(pt, approx)) < 3.0

    def test_erroneous_relay_keeps_genie_slope(self):
        # an erroneous relay costs a bounded SNR offset at high SNR; the
        # decay rate (diversity) matches the error-free reference
        err, gen = genie_and_erroneous()
        ratio = compare_curves(err, gen, mode="ratio")
        for row in ratio.rows:
            assert 1.0 < row.value < 5.5
            assert row.low > 0.8
            assert row.high < 8.0
        gaps = compare_curves(gen, err, mode="horizontal_db")
        assert len(gaps.rows) >= 2
        for row in gaps.rows:
            assert 0.5 < row.value < 3.5
        assert abs(gaps.rows[0].value - gaps.rows[1].value) < 1.5
        slope = fit_diversity_slope(gen, (20.9, 27.1))
        assert 1.6 < slope < 2.35

    def test_pl_beats_naive_everywhere(self):
        grid = (15.0, 18.0, 21.0)
        policy = TrialsPolicy(200, 5_000_000)
        pl = run_sweep(
            ExperimentPlan(
                QPSK, DecoderConfig("pl"), grid, trials=policy, seed=11,
                epsilon_table=eps_table(grid),
            ),
            workers=4,
        )
        naive = run_sweep(
            ExperimentPlan(
                QPSK, DecoderConfig("naive_eps0"), grid, trials=policy, seed=11
            ),
            workers=4,
        )
        for a, b in zip(pl.points, naive.points):
            assert a.ser < b.ser
            assert a.ci_high < b.ci_low

    def test_qam_genie_reference_bounds_decision_directed(self):
        policy = TrialsPolicy(400, 2_000_000)
        dd = run_point(
            ExperimentPlan(
                QAM16, DecoderConfig("ml", epsilons=(0.05,)), (16.0,),
                trials=policy, seed=13,
            ),
            0,
            workers=4,
        )
        genie = run_point(
            ExperimentPlan(
                QAM16, DecoderConfig("genie_reference", epsilons=(0.05,)),
                (16.0,), trials=policy, seed=13,
            ),
            0,
            workers=4,
        )
        assert genie.ser < dd.ser
        assert genie.ci_high < dd.ci_low
