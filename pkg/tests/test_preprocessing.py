import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autopet_lab.phantom import PhantomConfig, generate_cohort
from autopet_lab.preprocessing import (EPS, CaseNormalizer, CTNormalizer, CTNormStats, NormalizationMode,
                                       NormalizationRecord, ZScoreNormalizer, apply_ct_norm, apply_zscore,
                                       compute_ct_norm_stats, normalize_case, read_norm_stats, stats_from_pool,
                                       write_norm_stats)
from autopet_lab.volume import CaseRecord, VolumeGrid

from oracles import percentile_linear


def _case_with_pool(values, case_id="c"):
    """A case whose dilated label covers exactly the given values."""
    values = np.asarray(values, dtype=np.float32)
    n = len(values)
    data = np.zeros((n, 3, 3), np.float32)
    data[:, :, :] = -5000.0
    data[:, 1, 1] = values
    label = np.zeros((n, 3, 3), np.uint8)
    label[:, 1, 1] = 1
    # every voxel sits within one voxel of the label, so the whole volume is the pool
    data[:, :, :] = values[:, None, None]
    grid = VolumeGrid(data)
    return CaseRecord(case_id, grid, grid, grid.with_data(label))


class TestStats:
    def test_uniform_pool_percentiles(self):
        pool = np.arange(1000, dtype=np.float64)
        stats = stats_from_pool(pool)
        assert stats.clip_low == pytest.approx(percentile_linear(list(pool), 0.5), abs=1e-12)
        assert stats.clip_high == pytest.approx(percentile_linear(list(pool), 99.5), abs=1e-12)
        assert stats.clip_low == pytest.approx(4.995)
        assert stats.clip_high == pytest.approx(994.005)
        clipped = np.clip(pool, stats.clip_low, stats.clip_high)
        assert stats.mean == pytest.approx(clipped.mean())
        assert stats.std == pytest.approx(clipped.std())
        assert stats.source_voxel_count == 1000

    def test_single_voxel_pool_rejected(self):
        with pytest.raises(ValueError, match="zero variance"):
            stats_from_pool([3.0])

    def test_constant_pool_rejected(self):
        with pytest.raises(ValueError, match="zero variance"):
            stats_from_pool([3.0] * 10)

    def test_empty_pool_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            stats_from_pool([])

    def test_case_pool_equals_value_pool(self):
        case = _case_with_pool(np.arange(50))
        stats = compute_ct_norm_stats([case])
        ref = stats_from_pool(np.repeat(np.arange(50), 9))
        assert stats == ref

    def test_permutation_invariant(self):
        cases = generate_cohort(PhantomConfig(grid_shape=(24, 24, 24), lesion_radius_range_mm=(3, 5)), 4, 1, seed=2)
        a = compute_ct_norm_stats(cases, "ct")
        b = compute_ct_norm_stats(cases[::-1], "ct")
        c = compute_ct_norm_stats([cases[2], cases[0], cases[4], cases[1], cases[3]], "ct")
        assert a == b == c

    def test_negative_only_fallback(self):
        cases = generate_cohort(PhantomConfig(grid_shape=(20, 20, 20), lesion_radius_range_mm=(3, 5)), 0, 2, seed=1)
        stats = compute_ct_norm_stats(cases, "pet")
        expected = np.concatenate([c.pet.data[c.pet.data > np.percentile(c.pet.data, 5.0)].astype(np.float64)
                                   for c in cases])
        assert stats.source_voxel_count == expected.size

    def test_invalid_stats(self):
        with pytest.raises(ValueError):
            CTNormStats(0.0, 0.0, -1.0, 1.0, 10)
        with pytest.raises(ValueError):
            CTNormStats(0.0, 1.0, 2.0, 1.0, 10)


STATS = CTNormStats(mean=10.0, std=4.0, clip_low=-20.0, clip_high=50.0, source_voxel_count=100)


class TestCTNorm:
    def test_value_at_mean(self):
        out = apply_ct_norm(VolumeGrid(np.full((2, 2, 2), 10.0, np.float32)), STATS)
        assert np.all(out.data == 0)

    def test_above_clip(self):
        out = apply_ct_norm(VolumeGrid(np.full((1, 1, 1), 1e6, np.float32)), STATS)
        assert out.data[0, 0, 0] == pytest.approx((50.0 - 10.0) / 4.0)

    def test_elementwise_oracle(self, rng):
        data = rng.normal(10, 40, size=(5, 6, 7)).astype(np.float32)
        out = apply_ct_norm(VolumeGrid(data), STATS).data
        for idx in np.ndindex(data.shape):
            v = min(max(float(data[idx]), STATS.clip_low), STATS.clip_high)
            assert out[idx] == np.float32((v - STATS.mean) / STATS.std)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=50))
    def test_monotone(self, values):
        v = np.sort(np.asarray(values, np.float32))
        out = apply_ct_norm(VolumeGrid(v.reshape(-1, 1, 1)), STATS).data.ravel()
        assert np.all(np.diff(out) >= 0)

    def test_geometry_unchanged(self):
        g = VolumeGrid(np.zeros((3, 4, 5), np.float32), (1.0, 2.0, 3.0), (4.0, 5.0, 6.0))
        out = apply_ct_norm(g, STATS)
        assert out.same_geometry(g)


class TestZScore:
    def test_constant_volume(self):
        out = apply_zscore(VolumeGrid(np.full((3, 3, 3), 7.0, np.float32)))
        assert np.all(out.data == 0)

    def test_balanced_two_values(self):
        data = np.zeros((4, 4, 4), np.float32)
        data.ravel()[::2] = 2.0
        out = apply_zscore(VolumeGrid(data)).data
        assert set(np.unique(out)) == {-1.0, 1.0}

    def test_affine_invariance(self, rng):
        v = rng.normal(size=(6, 6, 6))
        a = apply_zscore(VolumeGrid(v)).data
        b = apply_zscore(VolumeGrid(3.5 * v + 12.0)).data
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_moments_over_random_volumes(self, rng):
        for _ in range(100):
            shape = tuple(rng.integers(2, 12, size=3))
            v = rng.normal(rng.uniform(-100, 100), rng.uniform(0.01, 50), size=shape)
            assert v.std() > 1e3 * EPS
            out = apply_zscore(VolumeGrid(v)).data.astype(np.float64)
            assert abs(out.mean()) < 1e-6
            assert abs(out.std() - 1) < 1e-4


class TestNormalizeCase:
    @pytest.fixture
    def cases(self):
        return generate_cohort(PhantomConfig(grid_shape=(24, 24, 24), lesion_radius_range_mm=(3, 5)), 3, 1, seed=4)

    def test_ct_scheme_both(self, cases):
        ct_stats = compute_ct_norm_stats(cases, "ct")
        pet_stats = compute_ct_norm_stats(cases, "pet")
        out = normalize_case(cases[0], NormalizationMode.CT_SCHEME_BOTH, ct_stats, pet_stats)
        assert np.array_equal(out.ct.data, apply_ct_norm(cases[0].ct, ct_stats).data)
        assert np.array_equal(out.pet.data, apply_ct_norm(cases[0].pet, pet_stats).data)

    def test_zscore_pet(self, cases):
        ct_stats = compute_ct_norm_stats(cases, "ct")
        out = normalize_case(cases[0], NormalizationMode.CT_FOR_CT_ZSCORE_FOR_PET, ct_stats)
        assert abs(out.pet.data.astype(np.float64).mean()) < 1e-5
        assert np.array_equal(out.ct.data, apply_ct_norm(cases[0].ct, ct_stats).data)

    @pytest.mark.parametrize("mode", list(NormalizationMode))
    def test_label_and_geometry_untouched(self, cases, mode):
        ct_stats = compute_ct_norm_stats(cases, "ct")
        pet_stats = compute_ct_norm_stats(cases, "pet")
        out = normalize_case(cases[1], mode, ct_stats, pet_stats)
        assert out.label.data.tobytes() == cases[1].label.data.tobytes()
        for ch in ("ct", "pet", "label"):
            assert getattr(out, ch).same_geometry(getattr(cases[1], ch))

    def test_missing_stats(self, cases):
        with pytest.raises(ValueError, match="statistics"):
            normalize_case(cases[0], NormalizationMode.CT_SCHEME_BOTH, compute_ct_norm_stats(cases, "ct"), None)

    def test_record_round_trip(self, cases, tmp_path):
        est = CaseNormalizer(NormalizationMode.CT_SCHEME_BOTH).fit(cases)
        write_norm_stats(est.record_, tmp_path / "norm_stats.json")
        back = read_norm_stats(tmp_path / "norm_stats.json")
        assert back.to_json() == est.record_.to_json()
        assert np.array_equal(back.apply(cases[0]).pet.data, est.transform(cases[0]).pet.data)

    def test_record_requires_mode(self):
        with pytest.raises(ValueError):
            NormalizationRecord.from_dict({})


class TestTransformers:
    def test_ct_normalizer(self, rng):
        cases = generate_cohort(PhantomConfig(grid_shape=(20, 20, 20), lesion_radius_range_mm=(3, 5)), 2, 0, seed=9)
        est = CTNormalizer(channel="ct").fit(cases)
        assert est.get_params() == {"channel": "ct"}
        out = est.transform([c.ct for c in cases])
        assert np.array_equal(out[0].data, apply_ct_norm(cases[0].ct, est.stats_).data)

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            CTNormalizer().transform(VolumeGrid(np.zeros((2, 2, 2))))

    def test_zscore_transformer(self):
        v = VolumeGrid(np.arange(8, dtype=np.float32).reshape(2, 2, 2))
        assert np.array_equal(ZScoreNormalizer().fit_transform(v).data, apply_zscore(v).data)

    def test_case_normalizer_zscore_has_no_pet_stats(self):
        cases = generate_cohort(PhantomConfig(grid_shape=(20, 20, 20), lesion_radius_range_mm=(3, 5)), 2, 0, seed=9)
        est = CaseNormalizer(NormalizationMode.CT_FOR_CT_ZSCORE_FOR_PET).fit(cases)
        assert est.record_.pet_stats is None
        assert est.source_case_ids_ == tuple(c.case_id for c in cases)
