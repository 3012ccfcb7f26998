import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from chmnet.convnd import conv_naive
from chmnet.kernel import (KernelGeometry, accumulate_param_grad, build_sharing, dump_kernel,
                           expand_dense, group_distance, init_kernel, n_dense_blocks)

REFERENCE_COUNTS = [("iso", 4, 15), ("psi", 4, 55), ("full", 4, 625),
                ("iso", 6, 45), ("psi", 6, 220), ("full", 6, 5625)]


def geom(rank, n=5):
    return KernelGeometry(n, 3 if rank == 6 else 1, rank)


def brute_force_classes(rank, scheme, n=5):
    """Independent class enumeration: distances recomputed with floats, grouped by rounding."""
    half = [range(-(n // 2), n // 2 + 1)] * 2 + ([range(-1, 2)] if rank == 6 else [])
    offs = list(itertools.product(*half))
    seen = set()
    for z in offs:
        for zp in offs:
            if scheme == "full":
                seen.add(z + zp)
                continue
            d = np.subtract(zp, z)
            key = [round(float(np.hypot(d[0], d[1])), 9)] + ([abs(int(d[2]))] if rank == 6 else [])
            if scheme == "psi":
                a = round(float(np.hypot(*z[:2])), 9)
                b = round(float(np.hypot(*zp[:2])), 9)
                key += [min(a, b), max(a, b)]
                if rank == 6:
                    key += [min(abs(z[2]), abs(zp[2])), max(abs(z[2]), abs(zp[2]))]
            seen.add(tuple(key))
    return len(seen)


def test_group_distance_examples():
    assert group_distance((0, 0, 0)) == (0, 0)
    assert group_distance((3, 4, 1)) == (25, 1)
    assert group_distance((-2, 2, -2)) == (8, 2)
    assert group_distance((1, 2)) == (5, 0)


@pytest.mark.parametrize("scheme,rank,count", REFERENCE_COUNTS)
def test_reference_class_counts(scheme, rank, count):
    k = build_sharing(geom(rank), scheme)
    assert k.n_classes == count
    assert k.share_count.sum() == geom(rank).size
    assert np.all(k.share_count >= 1)


@pytest.mark.parametrize("scheme,rank,count", REFERENCE_COUNTS[:2] + REFERENCE_COUNTS[3:5])
def test_counts_match_brute_force_oracle(scheme, rank, count):
    assert brute_force_classes(rank, scheme) == count


@pytest.mark.parametrize("scheme", ["iso", "psi", "full"])
def test_single_position_kernel(scheme):
    assert build_sharing(KernelGeometry(1), scheme).n_classes == 1


def test_geometry_validation():
    for bad in [dict(spatial=4), dict(spatial=5, scale=2, rank=6), dict(spatial=5, rank=5),
                dict(spatial=5, scale=3, rank=4)]:
        with pytest.raises(ValueError):
            KernelGeometry(**bad)
    assert KernelGeometry(5, 3, 6).shape == (5, 5, 3, 5, 5, 3)


def test_expand_iso_zero_offset_class():
    k = build_sharing(KernelGeometry(3), "iso")
    c = k.keys.index((0,))
    assert k.share_count[c] == 9
    p = np.zeros(k.n_classes)
    p[c] = 9.0
    dense = expand_dense(k.with_params(p))
    zero_offset = np.zeros((3, 3, 3, 3))
    for i, j in np.ndindex(3, 3):
        zero_offset[i, j, i, j] = 1.0
    assert np.array_equal(dense, zero_offset)


def test_expand_full_and_zero():
    k = build_sharing(KernelGeometry(3), "full")
    p = np.arange(k.n_classes, dtype=float)
    assert np.array_equal(expand_dense(k.with_params(p)).ravel(), p)
    assert not expand_dense(build_sharing(geom(6, 3), "psi")).any()


@pytest.mark.parametrize("scheme", ["iso", "psi", "full"])
def test_class_sums_telescope(scheme):
    k = build_sharing(KernelGeometry(3, 3, 6), scheme)
    p = np.random.default_rng(0).normal(size=k.n_classes)
    dense = expand_dense(k.with_params(p))
    sums = np.bincount(k.class_of.ravel(), weights=dense.ravel(), minlength=k.n_classes)
    assert np.allclose(sums, p, atol=1e-12)


@given(st.sampled_from(["iso", "psi", "full"]), st.sampled_from([4, 6]), st.integers(0, 10_000))
def test_accumulate_is_adjoint(scheme, rank, seed):
    k = build_sharing(geom(rank, 3), scheme)
    rng = np.random.default_rng(seed)
    u = rng.normal(size=k.n_classes)
    v = rng.normal(size=k.geometry.shape)
    lhs = np.sum(expand_dense(k.with_params(u)) * v)
    rhs = np.dot(u, accumulate_param_grad(k, v))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_accumulate_examples_and_errors():
    k = build_sharing(KernelGeometry(3), "full")
    g = np.random.default_rng(2).normal(size=(3, 3, 3, 3))
    assert np.allclose(accumulate_param_grad(k, g), g.ravel())
    iso = build_sharing(KernelGeometry(3), "iso")
    assert np.allclose(accumulate_param_grad(iso, np.ones((3, 3, 3, 3))), 1.0)
    with pytest.raises(ValueError):
        accumulate_param_grad(iso, np.ones((3, 3, 3)))


def test_accumulate_matches_finite_differences():
    k = build_sharing(KernelGeometry(3), "psi")
    rng = np.random.default_rng(3)
    w = rng.normal(size=k.geometry.shape)
    p = rng.normal(size=k.n_classes)

    def loss(q):
        return float(np.sum(np.sin(expand_dense(k.with_params(q)) * w)))

    dense_grad = np.cos(expand_dense(k.with_params(p)) * w) * w
    grad = accumulate_param_grad(k, dense_grad) * 1.0
    # chain rule through expand: d/dp_c = sum_{members} dense_grad / m_c
    for c in rng.choice(k.n_classes, 8, replace=False):
        e = np.zeros_like(p)
        e[c] = 1e-6
        fd = (loss(p + e) - loss(p - e)) / 2e-6
        assert grad[c] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def _rot90(z):
    return (-z[1], z[0]) + tuple(z[2:])


@pytest.mark.parametrize("scheme", ["iso", "psi"])
def test_dense_kernel_invariant_under_joint_rotation(scheme):
    k = build_sharing(KernelGeometry(5, 3, 6), scheme)
    k = k.with_params(np.random.default_rng(4).normal(size=k.n_classes))
    dense = expand_dense(k)
    c = np.array([2, 2, 1])
    for idx in np.ndindex(*k.geometry.shape):
        z, zp = np.array(idx[:3]) - c, np.array(idx[3:]) - c
        rz, rzp = np.array(_rot90(tuple(z))) + c, np.array(_rot90(tuple(zp))) + c
        assert dense[idx] == dense[tuple(rz) + tuple(rzp)]


def test_init_delta_and_near_identity():
    k = init_kernel(build_sharing(KernelGeometry(5), "full"), "delta")
    dense = expand_dense(k)
    assert dense.sum() == 1.0 and dense[2, 2, 2, 2] == 1.0
    psi = build_sharing(KernelGeometry(3, 3, 6), "psi")
    x = np.random.default_rng(5).normal(size=(4, 4, 3, 4, 4, 3))
    assert np.allclose(conv_naive(x, expand_dense(init_kernel(psi, "delta"))), x, atol=1e-14)
    assert np.array_equal(init_kernel(psi, "near_identity", sigma=0.0).params, init_kernel(psi, "delta").params)
    noisy = init_kernel(psi, "near_identity", sigma=0.01, rng=np.random.default_rng(0))
    assert 0 < np.abs(noisy.params - init_kernel(psi, "delta").params).max() < 0.1
    with pytest.raises(ValueError):
        init_kernel(psi, "bogus")


def test_dump_classes():
    k = init_kernel(build_sharing(geom(6), "psi"), "delta")
    lines = dump_kernel(k, "classes").strip().splitlines()
    assert lines[0].split() == ["psi", "6", "5", "5", "3", "220", "0"]
    assert len(lines) == 221
    rows = [l.split() for l in lines[1:]]
    assert sum(int(r[6]) for r in rows) == 5625
    # rows sorted lexicographically by integer key
    keys = [tuple(int(v) for v in r[:6]) for r in rows]
    assert keys == sorted(keys)


def test_dump_dense_maps_delta():
    k = init_kernel(build_sharing(geom(6, 3), "psi"), "delta")
    text = dump_kernel(k, "dense_maps")
    values = [float(v) for line in text.splitlines()[1:] if line and not line.startswith("#")
              for v in line.split()]
    assert sorted(values)[-1] == 1.0 and sum(values) == 1.0


@pytest.mark.parametrize("scheme,blocks", [("iso", 3), ("psi", 4), ("full", 9)])
def test_dense_block_counts(scheme, blocks):
    k = build_sharing(geom(6), scheme)
    assert n_dense_blocks(k) == blocks
    assert dump_kernel(k, "dense_maps").count("# block") == blocks


def test_dump_unknown_format():
    with pytest.raises(ValueError):
        dump_kernel(build_sharing(geom(4), "iso"), "xml")
