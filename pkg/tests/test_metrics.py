import numpy as np
import pytest

from cnndecomp.concernmap import ConcernMap
from cnndecomp.compose import ModuleLabel, ModuleSet, VOTE_LOGIT
from cnndecomp.errors import FormatError, ValidationError
from cnndecomp.graph import Split
from cnndecomp.metrics import (
    PowerLog, co2e, co2e_from_powers, evaluate, jaccard, maskable_universe,
    top_k_accuracy,
)

from conftest import make_dataset, make_residual_cnn, make_small_cnn
from test_compose import full_set


class TestCo2e:
    def test_pinned_hour_at_kilowatt(self):
        kwh, lbs = co2e_from_powers(800.0, 200.0, 0.0, 0, 1.0)
        assert abs(kwh - 1.58) < 1e-9
        assert abs(lbs - 1.50732) < 1e-9

    def test_linear_in_time_and_power(self):
        kwh1, lbs1 = co2e_from_powers(100.0, 50.0, 10.0, 2, 1.0)
        kwh2, lbs2 = co2e_from_powers(100.0, 50.0, 10.0, 2, 3.0)
        assert abs(kwh2 - 3 * kwh1) < 1e-12
        assert abs(lbs2 - 3 * lbs1) < 1e-12
        kwh3, _ = co2e_from_powers(200.0, 100.0, 20.0, 2, 1.0)
        assert abs(kwh3 - 2 * kwh1) < 1e-12

    def test_gpu_cores_scale_gpu_power(self):
        base, _ = co2e_from_powers(0.0, 0.0, 50.0, 0, 1.0)
        assert base == 0.0
        four, _ = co2e_from_powers(0.0, 0.0, 50.0, 4, 1.0)
        assert abs(four - 1.58 * 4 * 50.0 / 1000.0) < 1e-12

    def test_negative_time_rejected(self):
        with pytest.raises(ValidationError):
            co2e_from_powers(1.0, 1.0, 0.0, 0, -1.0)


class TestPowerLog:
    def test_constant_log_average(self):
        log = PowerLog(t=np.array([0.0, 10.0, 20.0]),
                       p_cpu=np.full(3, 800.0), p_dram=np.full(3, 200.0),
                       p_gpu=np.zeros(3))
        assert log.average_powers() == (800.0, 200.0, 0.0)
        kwh, lbs = co2e(log, 1.0)
        assert abs(kwh - 1.58) < 1e-9 and abs(lbs - 1.50732) < 1e-9

    def test_trapezoidal_weighting(self):
        # ramp 0 -> 100 over uneven steps: time-weighted mean of a linear ramp is 50
        log = PowerLog(t=np.array([0.0, 1.0, 4.0]),
                       p_cpu=np.array([0.0, 25.0, 100.0]),
                       p_dram=np.zeros(3), p_gpu=np.zeros(3))
        assert abs(log.average_powers()[0] - 50.0) < 1e-12

    def test_baseline_subtraction_clamped(self):
        log = PowerLog(t=np.array([0.0, 1.0]), p_cpu=np.full(2, 30.0),
                       p_dram=np.full(2, 10.0), p_gpu=np.zeros(2),
                       baseline_cpu=10.0, baseline_dram=50.0)
        assert log.average_powers() == (20.0, 0.0, 0.0)

    def test_non_increasing_time_rejected(self):
        with pytest.raises(ValidationError):
            PowerLog(t=np.array([0.0, 0.0]), p_cpu=np.zeros(2),
                     p_dram=np.zeros(2), p_gpu=np.zeros(2))

    def test_csv_round_trip(self, tmp_path):
        path = tmp_path / "power.csv"
        path.write_text("t_seconds,p_cpu_w,p_dram_w,p_gpu_w\n"
                        "0,800,200,0\n3600,800,200,0\n")
        log = PowerLog.from_csv(str(path))
        assert co2e(log, 1.0) == (1.58, pytest.approx(1.50732, abs=1e-9))

    def test_csv_bad_header(self, tmp_path):
        path = tmp_path / "power.csv"
        path.write_text("time,cpu,dram,gpu\n0,1,1,0\n")
        with pytest.raises(FormatError):
            PowerLog.from_csv(str(path))


class TestTopK:
    def _labels(self, *ids):
        return [ModuleLabel("d", i) for i in ids]

    def test_basic(self):
        rankings = [self._labels(0, 1, 2), self._labels(1, 0, 2), self._labels(2, 1, 0)]
        truths = self._labels(0, 0, 0)
        assert top_k_accuracy(rankings, truths, 1) == pytest.approx(1 / 3)
        assert top_k_accuracy(rankings, truths, 2) == pytest.approx(2 / 3)
        assert top_k_accuracy(rankings, truths, 3) == 1.0

    def test_k_beyond_ranking_length(self):
        rankings = [self._labels(1, 0)]
        assert top_k_accuracy(rankings, self._labels(0), 5) == 1.0

    def test_errors(self):
        with pytest.raises(ValidationError):
            top_k_accuracy([], [], 1)
        with pytest.raises(ValidationError):
            top_k_accuracy([self._labels(0)], self._labels(0), 0)
        with pytest.raises(ValidationError):
            top_k_accuracy([self._labels(0)], self._labels(0, 1), 1)


class TestJaccard:
    def test_empty_map_is_one(self):
        model = make_small_cnn()
        assert jaccard(model, ConcernMap()) == 1.0

    def test_universe_counts_by_hand(self):
        model = make_small_cnn()
        # conv 4x4x3 + pool 2x2x3 + flatten 12 + hidden dense 8
        assert maskable_universe(model) == 48 + 12 + 12 + 8

    def test_masked_positions_reduce_index(self):
        model = make_small_cnn()
        cmap = ConcernMap(conv_inactive={0: {0, 1, 2, 3}}, dense_inactive={4: {0}})
        total = maskable_universe(model)
        assert jaccard(model, cmap) == pytest.approx((total - 5) / total)

    def test_residual_universe(self):
        model = make_residual_cnn()
        # three conv 4x4x4, avgpool 2x2x4, flatten 16, no hidden dense
        assert maskable_universe(model) == 3 * 64 + 16 + 16


class TestEvaluate:
    def test_perfect_separable_setup(self):
        model = make_small_cnn(seed=8)
        mset = full_set(model)
        ds = make_dataset(model, per_class=5, name="toy", split=Split.TEST)
        report = evaluate(mset, [ds], mode=VOTE_LOGIT)
        assert report.n_examples == 5 * model.class_count
        assert 0.0 <= report.top1 <= report.top5 <= 1.0
        assert set(report.per_class) == {str(l) for l in mset.labels}
        assert all(v == 1.0 for v in report.jaccard.values())  # empty maps

    def test_strict_label_coverage(self):
        model = make_small_cnn(seed=8)
        mset = ModuleSet(full_set(model).modules[:2])
        ds = make_dataset(model, per_class=3, name="toy")
        with pytest.raises(ValidationError):
            evaluate(mset, [ds])
        report = evaluate(mset, [ds], strict_labels=False)
        assert report.n_examples == 3 * 2

    def test_parallel_matches_serial(self):
        model = make_small_cnn(seed=9)
        mset = full_set(model)
        ds = make_dataset(model, per_class=4, name="toy")
        serial = evaluate(mset, [ds], jobs=1)
        parallel = evaluate(mset, [ds], jobs=4)
        assert serial.top1 == parallel.top1
        assert serial.top5 == parallel.top5
        assert serial.per_class == parallel.per_class

    def test_no_examples(self):
        model = make_small_cnn()
        mset = full_set(model, "other")
        ds = make_dataset(model, per_class=2, name="toy")
        with pytest.raises(ValidationError):
            evaluate(mset, [ds], strict_labels=False)
