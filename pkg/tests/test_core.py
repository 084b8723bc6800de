import math

import numpy as np
import pytest

from shapetrack.core import (
    BoundingBox3D,
    ClassConfig,
    DetectionFrame,
    default_class_config,
    greedy_pairs,
    normalize_yaw,
    pad_or_sample,
)


def make_box(x=0.0, y=0.0, conf=1.0, **kw):
    defaults = dict(z=0.0, w=2.0, l=4.0, h=1.5, r_y=0.0)
    defaults.update(kw)
    return BoundingBox3D(x=x, y=y, confidence=conf, **defaults)


class TestNormalizeYaw:
    def test_examples(self):
        assert normalize_yaw(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
        assert normalize_yaw(-math.pi) == pytest.approx(math.pi)
        assert normalize_yaw(0.0) == 0.0
        assert normalize_yaw(math.pi) == pytest.approx(math.pi)

    def test_range_and_idempotence(self):
        rng = np.random.default_rng(0)
        for a in rng.uniform(-50, 50, size=500):
            w = normalize_yaw(float(a))
            assert -math.pi < w <= math.pi
            assert normalize_yaw(w) == pytest.approx(w, abs=1e-12)
            # Same angle up to 2*pi.
            assert math.cos(w) == pytest.approx(math.cos(a), abs=1e-9)
            assert math.sin(w) == pytest.approx(math.sin(a), abs=1e-9)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            normalize_yaw(float("nan"))
        with pytest.raises(ValueError):
            normalize_yaw(float("inf"))


class TestBoundingBox:
    def test_yaw_normalized_on_construction(self):
        b = make_box(r_y=3 * math.pi / 2)
        assert b.r_y == pytest.approx(-math.pi / 2)

    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            make_box(w=0.0)
        with pytest.raises(ValueError):
            make_box(h=-1.0)

    def test_rejects_bad_confidence(self):
        with pytest.raises(ValueError):
            make_box(conf=1.5)

    def test_to_row(self):
        b = make_box(x=1, y=2, z=3, w=4, l=5, h=6, r_y=0.5)
        np.testing.assert_allclose(b.to_row(), [1, 2, 3, 4, 5, 6, 0.5])


class TestClassConfig:
    def test_defaults(self):
        cfg = ClassConfig()
        assert cfg.tau_fp == 0.7
        assert cfg.tau_fn == 0.5
        assert cfg.tau_nb == 0.5
        assert cfg.tau_dt == 0.5
        assert cfg.beta1 == 0.5

    def test_per_class_beta2(self):
        assert default_class_config("car").beta2 == 0.5
        assert default_class_config("bicycle").beta2 == 0.4
        assert default_class_config("bus").beta2 == 0.7
        assert default_class_config("trailer").beta2 == 0.4

    def test_beta1_gate(self):
        with pytest.raises(ValueError):
            ClassConfig(beta1=0.8, tau_fp=0.7)

    def test_bad_class(self):
        with pytest.raises(ValueError):
            default_class_config("boat")


class TestPadOrSample:
    def cfg(self, n_max=5):
        return ClassConfig(n_max=n_max)

    def test_under_capacity(self):
        boxes = [make_box(x=i, conf=0.5 + 0.1 * i) for i in range(3)]
        padded = pad_or_sample(DetectionFrame(0.0, boxes), self.cfg())
        assert padded.count == 3
        assert padded.valid_mask.tolist() == [True, True, True, False, False]
        np.testing.assert_allclose(padded.boxes[0, 0], 0.0)
        np.testing.assert_allclose(padded.boxes[2, 0], 2.0)
        # Padded slots are exactly zero everywhere.
        np.testing.assert_array_equal(padded.boxes[3:], 0.0)
        np.testing.assert_array_equal(padded.confidences[3:], 0.0)
        np.testing.assert_array_equal(padded.velocities[3:], 0.0)
        assert padded.source_indices == {0: 0, 1: 1, 2: 2}

    def test_empty_frame(self):
        padded = pad_or_sample(DetectionFrame(0.0, []), self.cfg())
        assert padded.count == 0
        assert not padded.valid_mask.any()
        np.testing.assert_array_equal(padded.boxes, 0.0)

    def test_over_capacity_keeps_top_confidence_in_original_order(self):
        # Oracle: 7 boxes, confidences [.9,.3,.8,.5,.7,.4,.6]; with n_max=5 the
        # top five by confidence are indices {0,2,4,6,3}; re-sorted by original
        # index the kept order is [0,2,3,4,6].
        confs = [0.9, 0.3, 0.8, 0.5, 0.7, 0.4, 0.6]
        boxes = [make_box(x=i, conf=c) for i, c in enumerate(confs)]
        padded = pad_or_sample(DetectionFrame(0.0, boxes), self.cfg())
        assert padded.count == 5
        assert [padded.source_indices[s] for s in range(5)] == [0, 2, 3, 4, 6]
        np.testing.assert_allclose(padded.boxes[:, 0], [0, 2, 3, 4, 6])
        np.testing.assert_allclose(padded.confidences, [0.9, 0.8, 0.5, 0.7, 0.6])

    def test_over_capacity_tie_breaks_by_index(self):
        boxes = [make_box(x=i, conf=0.5) for i in range(4)]
        padded = pad_or_sample(DetectionFrame(0.0, boxes), self.cfg(n_max=2))
        assert [padded.source_indices[s] for s in range(2)] == [0, 1]

    def test_exact_capacity(self):
        boxes = [make_box(x=i, conf=0.5) for i in range(5)]
        padded = pad_or_sample(DetectionFrame(0.0, boxes), self.cfg())
        assert padded.count == 5
        assert padded.valid_mask.all()

    def test_mask_count_property(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(0, 12))
            boxes = [make_box(x=float(i), conf=float(rng.uniform(0, 1))) for i in range(n)]
            padded = pad_or_sample(DetectionFrame(0.0, boxes), self.cfg())
            assert padded.count == min(n, 5)
            # Valid slots are a prefix.
            assert padded.valid_mask[: padded.count].all()
            assert not padded.valid_mask[padded.count :].any()


class TestGreedyPairs:
    def test_basic(self):
        d = np.array([[1.0, 5.0], [4.0, 2.0]])
        assert greedy_pairs(d, gate=10.0) == [(0, 0), (1, 1)]

    def test_gate_excludes(self):
        d = np.array([[1.0, 5.0], [4.0, 2.0]])
        assert greedy_pairs(d, gate=1.5) == [(0, 0)]

    def test_greedy_not_optimal(self):
        # Greedy takes the global minimum first even when a different pairing
        # would lower the total cost.
        d = np.array([[1.0, 2.0], [1.5, 100.0]])
        assert greedy_pairs(d, gate=200.0) == [(0, 0), (1, 1)]

    def test_tie_broken_by_row_then_col(self):
        d = np.ones((2, 2))
        assert greedy_pairs(d, gate=2.0) == [(0, 0), (1, 1)]

    def test_empty(self):
        assert greedy_pairs(np.zeros((0, 3)), gate=1.0) == []
        assert greedy_pairs(np.zeros((3, 0)), gate=1.0) == []

    def test_one_to_one(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            d = rng.uniform(0, 10, size=(6, 4))
            pairs = greedy_pairs(d, gate=5.0)
            rows = [i for i, _ in pairs]
            cols = [j for _, j in pairs]
            assert len(set(rows)) == len(rows)
            assert len(set(cols)) == len(cols)
            for i, j in pairs:
                assert d[i, j] <= 5.0
