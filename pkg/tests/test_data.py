import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedstab.data import (
    GLOBAL,
    ClientDataset,
    DataGenSpec,
    FederatedDataset,
    HeterogeneityProfile,
    IdxFormatError,
    NeighborSpec,
    Sample,
    SpecError,
    draw_oracle_set,
    draw_replacement,
    federation_from_pool,
    generate_federation,
    label_marginals,
    load_idx,
    make_neighbor,
    project_to_ball,
    total_variation_labels,
)


def tv_direct(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


class TestHeterogeneity:
    def test_rho_zero_is_homogeneous(self):
        spec = DataGenSpec.synthetic(num_clients=7, num_classes=10, rho=0.0, pairs=[(0, 3), (1, 1), (2, 9)] * 2 + [(4, 5)])
        prof = total_variation_labels(spec)
        np.testing.assert_allclose(prof.D, 0.0, atol=1e-15)
        assert prof.D_tilde < 1e-30

    def test_disjoint_pairs_rho_one(self):
        spec = DataGenSpec.synthetic(num_clients=10, num_classes=10, rho=1.0)
        np.testing.assert_allclose(spec.global_marginal(), np.full(10, 0.1), atol=1e-15)
        # 0.5 * (2 * |0.5 - 0.1| + 8 * 0.1)
        np.testing.assert_allclose(total_variation_labels(spec).D, 0.8, atol=1e-12)

    def test_disjoint_pairs_rho_half(self):
        spec = DataGenSpec.synthetic(num_clients=10, num_classes=10, rho=0.5)
        prof = total_variation_labels(spec)
        np.testing.assert_allclose(prof.D, 0.4, atol=1e-12)
        for i in range(10):
            assert prof.D[i] == pytest.approx(tv_direct(spec.label_marginals()[i], spec.global_marginal()), abs=1e-15)

    def test_two_point_tv(self):
        pi = np.array([[1.0, 0.0], [0.0, 1.0]])
        prof = HeterogeneityProfile.from_marginals(pi, np.array([0.5, 0.5]))
        np.testing.assert_allclose(prof.D, [0.5, 0.5])

    def test_identical_clients(self):
        pi = np.tile([0.2, 0.3, 0.5], (4, 1))
        prof = HeterogeneityProfile.from_marginals(pi, np.full(4, 0.25))
        assert prof.D_max == 0.0 and prof.D_tilde == 0.0

    @given(rho=st.floats(0, 1), m=st.integers(1, 12), C=st.integers(2, 12))
    @settings(max_examples=60, deadline=None)
    def test_marginals_are_distributions(self, rho, m, C):
        pairs = [((2 * i) % C, (2 * i + 1) % C) for i in range(m)]
        pi = label_marginals(rho, pairs, C)
        assert pi.shape == (m, C)
        assert np.all(pi >= 0)
        np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-12)
        prof = HeterogeneityProfile.from_marginals(pi, np.full(m, 1.0 / m))
        assert np.all((prof.D >= 0) & (prof.D <= 1))

    @given(rho=st.floats(0, 1))
    @settings(max_examples=30, deadline=None)
    def test_tv_linear_in_rho_for_aligned_design(self, rho):
        spec = DataGenSpec.synthetic(num_clients=10, num_classes=10, feature_dim=3, rho=rho)
        np.testing.assert_allclose(total_variation_labels(spec).D, 0.8 * rho, atol=1e-12)


class TestSpec:
    def test_validation(self):
        base = DataGenSpec.synthetic(num_clients=2, num_classes=4, feature_dim=3)
        with pytest.raises(SpecError):
            base.replace(rho=1.5)
        with pytest.raises(SpecError):
            base.replace(noise_scale=-1.0)
        with pytest.raises(SpecError):
            base.replace(client_class_pairs=((0, 1), (2, 7)))
        with pytest.raises(SpecError):
            base.replace(class_means=tuple((1.0, 0.0, 0.0) for _ in range(4)))
        with pytest.raises(SpecError):
            base.replace(class_means=tuple((2.0, 0.0, 0.0) for _ in range(4)))
        with pytest.raises(SpecError):
            base.replace(samples_per_client=(0, 3))

    def test_round_trip(self):
        spec = DataGenSpec.synthetic(num_clients=3, num_classes=4, feature_dim=3, rho=0.3)
        assert DataGenSpec.from_dict(spec.to_dict()) == spec


class TestGeneration:
    def test_deterministic(self, small_spec):
        a, _ = generate_federation(small_spec, 9)
        b, _ = generate_federation(small_spec, 9)
        c, _ = generate_federation(small_spec, 10)
        assert a.equals(b)
        assert not a.equals(c)

    def test_features_in_unit_ball(self, small_fed):
        for c in small_fed.clients:
            assert np.all(np.linalg.norm(c.features, axis=1) <= 1.0 + 1e-12)

    def test_support_restriction(self):
        spec = DataGenSpec.synthetic(num_clients=5, num_classes=10, rho=1.0)
        fed, _ = generate_federation(spec, 0)
        for i, c in enumerate(fed.clients):
            assert set(np.unique(c.labels)) <= {2 * i, 2 * i + 1}
        z = draw_oracle_set(spec, 3, 500, 1)
        assert set(np.unique(z.labels)) <= {6, 7}

    def test_global_histogram_converges(self):
        spec = DataGenSpec.synthetic(num_clients=10, num_classes=10, feature_dim=2, rho=0.7)
        z = draw_oracle_set(spec, GLOBAL, 100_000, 2024)
        freq = np.bincount(z.labels, minlength=10) / z.n
        assert np.max(np.abs(freq - spec.global_marginal())) < 0.01

    def test_oracle_size_rejected(self, small_spec):
        with pytest.raises(ValueError):
            draw_oracle_set(small_spec, GLOBAL, 0, 1)

    def test_client_streams_are_independent_of_other_sizes(self, small_spec):
        a, _ = generate_federation(small_spec, 5)
        bigger = small_spec.replace(samples_per_client=(12, 30, 12, 12))
        b, _ = generate_federation(bigger, 5)
        assert a.clients[0].equals(b.clients[0])
        assert a.clients[2].equals(b.clients[2])

    def test_replacement_comes_from_client_law(self):
        spec = DataGenSpec.synthetic(num_clients=5, num_classes=10, rho=1.0)
        for s in range(20):
            assert draw_replacement(spec, 2, s).label in (4, 5)


class TestNeighbor:
    def test_identity_replacement(self, small_fed):
        z = small_fed.clients[1].sample(3)
        nb = make_neighbor(small_fed, NeighborSpec(1, 3, z))
        assert nb.equals(small_fed)
        assert nb.hamming(small_fed) == 0

    def test_hamming_one(self, small_fed, small_spec):
        z = draw_replacement(small_spec, 2, 77)
        nb = make_neighbor(small_fed, NeighborSpec(2, 5, z))
        assert nb.hamming(small_fed) == 1
        assert nb.clients[2].sample(5).same_as(z)
        # the source is untouched
        assert not small_fed.clients[2].sample(5).same_as(z)

    def test_overwrite_semantics(self, small_fed, small_spec):
        r1 = draw_replacement(small_spec, 0, 1)
        r2 = draw_replacement(small_spec, 0, 2)
        twice = make_neighbor(make_neighbor(small_fed, NeighborSpec(0, 4, r1)), NeighborSpec(0, 4, r2))
        once = make_neighbor(small_fed, NeighborSpec(0, 4, r2))
        assert twice.equals(once)

    def test_out_of_range(self, small_fed, small_spec):
        z = draw_replacement(small_spec, 0, 1)
        with pytest.raises(IndexError):
            make_neighbor(small_fed, NeighborSpec(9, 0, z))
        with pytest.raises(IndexError):
            make_neighbor(small_fed, NeighborSpec(0, 99, z))


class TestContainers:
    def test_projection(self):
        x = np.array([[3.0, 4.0], [0.3, 0.4]])
        p = project_to_ball(x)
        np.testing.assert_allclose(p[0], [0.6, 0.8])
        np.testing.assert_array_equal(p[1], x[1])
        assert Sample([3.0, 4.0], 0).features[0] == pytest.approx(0.6)

    def test_empty_client_rejected(self):
        with pytest.raises(ValueError):
            ClientDataset(np.zeros((0, 2)), np.zeros(0))

    def test_pooled_and_weights(self, small_fed):
        pooled = small_fed.pooled()
        assert pooled.n == small_fed.n
        np.testing.assert_allclose(small_fed.weights.sum(), 1.0, atol=0)
        fed = FederatedDataset([ClientDataset(np.zeros((1, 2)), [0]), ClientDataset(np.zeros((3, 2)), [0, 1, 1])])
        np.testing.assert_allclose(fed.weights, [0.25, 0.75])


def _write_idx(path, magic, dims, payload: bytes):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * len(dims), *dims))
        fh.write(payload)


class TestIdx:
    def test_two_image_fixture(self, tmp_path):
        imgs = np.zeros((2, 28, 28), dtype=np.uint8)
        imgs[0, 0, 0] = 255
        imgs[1, 5, 5] = 51
        _write_idx(tmp_path / "img", 2051, (2, 28, 28), imgs.tobytes())
        _write_idx(tmp_path / "lab", 2049, (2,), bytes([7, 3]))
        ds = load_idx(tmp_path / "img", tmp_path / "lab")
        assert ds.n == 2 and ds.dim == 784
        np.testing.assert_array_equal(ds.labels, [7, 3])
        assert ds.features[0, 0] == 1.0
        assert ds.features[1, 5 * 28 + 5] == pytest.approx(0.2)

    def test_errors_carry_offsets(self, tmp_path):
        imgs = np.zeros((2, 2, 2), dtype=np.uint8).tobytes()
        _write_idx(tmp_path / "img", 2051, (2, 2, 2), imgs)
        _write_idx(tmp_path / "bad_label", 2049, (2,), bytes([1, 10]))
        with pytest.raises(IdxFormatError) as e:
            load_idx(tmp_path / "img", tmp_path / "bad_label")
        assert e.value.offset == 8 + 1
        (tmp_path / "empty").write_bytes(b"")
        with pytest.raises(IdxFormatError):
            load_idx(tmp_path / "empty", tmp_path / "bad_label")
        _write_idx(tmp_path / "short", 2051, (2, 2, 2), imgs[:5])
        with pytest.raises(IdxFormatError) as e:
            load_idx(tmp_path / "short", tmp_path / "bad_label")
        assert e.value.offset == 16 + 5
        _write_idx(tmp_path / "magic", 2049, (2, 2, 2), imgs)
        with pytest.raises(IdxFormatError) as e:
            load_idx(tmp_path / "magic", tmp_path / "bad_label")
        assert e.value.offset == 0
        _write_idx(tmp_path / "lab1", 2049, (1,), bytes([1]))
        with pytest.raises(IdxFormatError):
            load_idx(tmp_path / "img", tmp_path / "lab1")

    def test_pool_split(self):
        gen = np.random.default_rng(0)
        pool = ClientDataset(gen.random((400, 3)) * 0.3, np.repeat(np.arange(10), 40))
        fed, prof = federation_from_pool(pool, 1.0, [20] * 5, seed=3)
        for i, c in enumerate(fed.clients):
            assert set(np.unique(c.labels)) <= {2 * i, 2 * i + 1}
        # without replacement: no row is used twice
        rows = np.concatenate([c.features for c in fed.clients])
        assert len(np.unique(rows, axis=0)) == len(rows)
        np.testing.assert_allclose(prof.D, 0.8, atol=1e-12)
