import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vaprompt import autodiff as ad
from vaprompt.autodiff import Tensor
from vaprompt.labels import (
    GridConfig,
    PrototypeFormatError,
    PrototypeMatrix,
    SemanticHead,
    grid_regions,
    load_prototypes,
    semantic_distribution,
    soft_label,
    soft_labels,
    write_prototypes,
)

DEFAULT = GridConfig()

# Direct evaluation of the Gaussian-kernel formula at 30 digits (mpmath),
# no max-subtraction; arousal-major order.
ORIGIN_WEIGHTS = [
    0.041116921542120203303, 0.12053923585406492016, 0.041116921542120203303,
    0.12053923585406492016, 0.35337537041525950617, 0.12053923585406492016,
    0.041116921542120203303, 0.12053923585406492016, 0.041116921542120203303,
]
OFF_CENTER_POINT = (0.3, -0.5)
OFF_CENTER_WEIGHTS = [
    0.03908505895303335498, 0.30462259084858863896, 0.27624711947991408182,
    0.022458433393625991334, 0.17503737617455633648, 0.15873271524230869399,
    0.0015015246282546869782, 0.011702638674065717644, 0.010612542605652497815,
]

va_points = st.tuples(st.floats(-1, 1), st.floats(-1, 1))


def direct_soft_label(y, centers, sigma):
    num = []
    for a in centers:
        for v in centers:
            num.append(math.exp(-((y[0] - v) ** 2 + (y[1] - a) ** 2) / (2 * sigma**2)))
    s = math.fsum(num)
    return [n / s for n in num]


class TestGridConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [dict(axis_centers=(0.0, -0.5, 0.5)), dict(axis_centers=(-1.5, 0.0, 1.0)),
         dict(sigma=0.0), dict(axis_centers=(-0.5, 0.0, 0.25, 0.5))],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            GridConfig(**kwargs)

    def test_dict_round_trip(self):
        cfg = GridConfig(axis_centers=(-1.0, 0.0, 1.0), sigma=0.6)
        assert GridConfig.from_dict(cfg.to_dict()) == cfg


class TestGridRegions:
    def test_corner_centers(self):
        regions = grid_regions(DEFAULT)
        assert len(regions) == 9
        assert regions[0].center == (-0.66, -0.66)
        assert regions[8].center == (0.66, 0.66)

    def test_middle_cell(self):
        assert grid_regions(GridConfig(axis_centers=(-1, 0, 1), sigma=0.6))[4].center == (0.0, 0.0)

    def test_arousal_major_order(self):
        regions = grid_regions(DEFAULT)
        # region 1: low arousal, mid valence; region 3: mid arousal, low valence
        assert regions[1].center == (0.0, -0.66)
        assert regions[3].center == (-0.66, 0.0)

    def test_prompt_texts(self):
        for cfg in (DEFAULT, GridConfig(axis_centers=(-1, 0, 1), sigma=0.6)):
            r0 = grid_regions(cfg)[0]
            assert r0.prompt_texts[0] == "a photo of a person who looks sad, tired, and low-energy"
            assert r0.prompt_texts[1] == "a face showing sad, tired, and low-energy"
            assert r0.prompt_texts[2] == "a facial expression of sad, tired, and low-energy"
        assert grid_regions(DEFAULT)[8].name == "excited, joyful, and energetic"

    def test_pure(self):
        assert grid_regions(GridConfig()) == grid_regions(GridConfig())


class TestSoftLabel:
    def test_origin_matches_frozen_oracle(self):
        w = soft_label((0.0, 0.0), DEFAULT)
        np.testing.assert_allclose(w, ORIGIN_WEIGHTS, rtol=0, atol=1e-12)
        assert round(w[4], 4) == 0.3534 and round(w[1], 4) == 0.1205 and round(w[0], 4) == 0.0411

    def test_origin_four_fold_symmetry(self):
        w = soft_label((0.0, 0.0), DEFAULT)
        for group in ([0, 2, 6, 8], [1, 3, 5, 7]):
            assert max(w[group]) - min(w[group]) <= 1e-12

    def test_off_center_matches_frozen_oracle(self):
        np.testing.assert_allclose(soft_label(OFF_CENTER_POINT, DEFAULT), OFF_CENTER_WEIGHTS,
                                   rtol=0, atol=1e-12)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(0)
        for y in rng.uniform(-1, 1, size=(50, 2)):
            np.testing.assert_allclose(
                soft_label(y, DEFAULT), direct_soft_label(y, DEFAULT.axis_centers, DEFAULT.sigma),
                rtol=0, atol=1e-12,
            )

    def test_peak_at_each_center(self):
        for k, c in enumerate(DEFAULT.centers):
            w = soft_label(c, DEFAULT)
            assert np.argmax(w) == k and np.sum(w == w.max()) == 1

    def test_mirror_image(self):
        a = soft_label((0.66, 0.66), DEFAULT)
        b = soft_label((-0.66, -0.66), DEFAULT)
        np.testing.assert_allclose(a, b[::-1], rtol=0, atol=1e-15)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            soft_label((1.2, 0.0), DEFAULT)

    def test_sum_to_one_over_many_points(self):
        pts = np.random.default_rng(1).uniform(-1, 1, size=(10_000, 2))
        w = soft_labels(pts, DEFAULT)
        assert np.max(np.abs(w.sum(axis=1) - 1.0)) <= 1e-9
        assert np.all(w > 0)

    @settings(max_examples=200, deadline=None)
    @given(va_points)
    def test_monotone_in_distance(self, y):
        w = soft_label(y, DEFAULT)
        d = np.linalg.norm(DEFAULT.centers - np.array(y), axis=1)
        for i in range(9):
            for j in range(9):
                # Only assert where the distance gap is resolvable in float64.
                if d[i] < d[j] - 1e-9:
                    assert w[i] > w[j]

    @settings(max_examples=200, deadline=None)
    @given(st.tuples(st.floats(-0.999, 0.999), st.floats(-0.999, 0.999)))
    def test_continuity(self, y):
        a = soft_label(y, DEFAULT)
        b = soft_label((y[0] + 1e-6, y[1] - 1e-6), DEFAULT)
        assert np.max(np.abs(a - b)) < 1e-4

    def test_smaller_sigma_concentrates(self):
        narrow = GridConfig(sigma=0.1)
        for y in [(0.2, 0.1), (-0.4, 0.5), (0.9, -0.8), (0.33, 0.33), (-0.1, -0.6)]:
            assert soft_label(y, narrow).max() >= soft_label(y, DEFAULT).max()


class TestPrototypes:
    def test_round_trip_unit_rows(self, tmp_path):
        rows = np.random.default_rng(0).normal(size=(9, 512))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        path = tmp_path / "p.vapb"
        write_prototypes(path, rows)
        pm = load_prototypes(path)
        np.testing.assert_allclose(pm.rows, rows, atol=1e-6)
        assert len(pm.source_digest) == 64 and pm.dim == 512

    def test_header_layout(self, tmp_path):
        path = tmp_path / "p.vapb"
        write_prototypes(path, np.ones((9, 3)))
        raw = path.read_bytes()
        assert raw[:4] == b"VAPB"
        assert raw[4:16] == (1).to_bytes(4, "little") + (9).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert len(raw) == 16 + 9 * 3 * 4

    def test_renormalizes(self, tmp_path):
        rows = np.random.default_rng(1).normal(size=(9, 16))
        rows = 2.0 * rows / np.linalg.norm(rows, axis=1, keepdims=True)
        path = tmp_path / "p.vapb"
        write_prototypes(path, rows)
        np.testing.assert_allclose(np.linalg.norm(load_prototypes(path).rows, axis=1), 1.0, atol=1e-6)

    def test_rejects_eight_rows(self, tmp_path):
        path = tmp_path / "p.vapb"
        raw = b"VAPB" + (1).to_bytes(4, "little") + (8).to_bytes(4, "little") + (4).to_bytes(4, "little")
        path.write_bytes(raw + np.ones((8, 4), "<f4").tobytes())
        with pytest.raises(PrototypeFormatError, match="row count 8"):
            load_prototypes(path)

    def test_rejects_bad_magic_and_dim(self, tmp_path):
        path = tmp_path / "p.vapb"
        write_prototypes(path, np.ones((9, 4)))
        with pytest.raises(PrototypeFormatError, match="dimension 4"):
            load_prototypes(path, expected_dim=8)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(PrototypeFormatError, match="magic"):
            load_prototypes(path)

    def test_rejects_truncated(self, tmp_path):
        path = tmp_path / "p.vapb"
        write_prototypes(path, np.ones((9, 4)))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(PrototypeFormatError, match="expected"):
            load_prototypes(path)


def _unit_protos(dim, seed=0):
    rows = np.random.default_rng(seed).normal(size=(9, dim))
    return PrototypeMatrix(rows / np.linalg.norm(rows, axis=1, keepdims=True), "test")


class TestSemanticHead:
    def test_zero_linear_head_is_uniform(self):
        head = SemanticHead(8, np.random.default_rng(0))
        for p in head.parameters():
            p.data[...] = 0.0
        out = semantic_distribution(Tensor(np.random.default_rng(1).normal(size=(5, 8))), head)
        np.testing.assert_allclose(out.data, 1 / 9, atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        for mode, protos in (("linear", None), ("prototype", _unit_protos(6))):
            head = SemanticHead(8, rng, mode=mode, prototypes=protos)
            out = head(Tensor(rng.normal(size=(2, 7, 8))))
            assert out.shape == (2, 7, 9)
            np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_prototype_mode_requires_prototypes(self):
        with pytest.raises(ValueError, match="PrototypeMatrix"):
            SemanticHead(8, np.random.default_rng(0), mode="prototype")

    def test_prototype_alignment_concentrates(self):
        protos = _unit_protos(8, seed=3)
        head = SemanticHead(8, np.random.default_rng(0), mode="prototype", prototypes=protos)
        head.proj.weight.data = np.eye(8)
        head.proj.bias.data[...] = 0.0
        head.temperature.data[...] = 1000.0
        out = head(Tensor(protos.rows[3:4] * 0.7))
        assert np.argmax(out.data[0]) == 3 and out.data[0, 3] > 0.999

    def test_temperature_initialized_and_learnable(self):
        head = SemanticHead(8, np.random.default_rng(0), mode="prototype", prototypes=_unit_protos(4))
        assert head.temperature.item() == 10.0
        assert any(p is head.temperature for p in head.parameters())

    @pytest.mark.parametrize("mode", ["linear", "prototype"])
    def test_gradients(self, mode):
        worst = 0.0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            protos = _unit_protos(5, seed) if mode == "prototype" else None
            head = SemanticHead(8, rng, mode=mode, prototypes=protos)
            x = Tensor(rng.uniform(-2, 2, size=(5, 8)))
            w = soft_labels(rng.uniform(-1, 1, size=(5, 2)), DEFAULT)

            def f(_):
                lp = ad.log_softmax(head.logits(x))
                return ad.mean(ad.sum(ad.mul(Tensor(w), lp), axis=-1))

            for t in [x] + head.parameters():
                worst = max(worst, ad.gradient_check(f, t, 1e-5, 1e-4).max_rel_error)
        assert worst < 1e-4
