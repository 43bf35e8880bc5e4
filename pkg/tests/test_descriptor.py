import numpy as np
import pytest

from bodycorr import descriptor as D
from bodycorr import network as N
from bodycorr import render as rd


def cfg(**kw):
    return N.NetConfig(**{"d": 4, "schedule": "conv6k3s2 relu pool lrn conv6k3s1 relu", "input_size": 32, **kw})


def blob(shift=(0, 0), size=32):
    rr, cc = np.mgrid[:size, :size]
    r, c = rr - shift[0], cc - shift[1]
    mask = ((r - 15) ** 2 / 49 + (c - 13) ** 2 / 16) < 1
    depth = np.where(mask, 0.02 * np.sin(r * 0.7) + 0.01 * c, 0.0)
    return rd.DepthImage(depth, mask)


def field(values, mask):
    return D.DescriptorField(np.asarray(values, float), np.asarray(mask, bool))


def buffers(vid):
    vid = np.asarray(vid)
    return rd.RenderBuffers(vid, vid.copy(), np.zeros(vid.shape + (3,)), np.zeros(vid.shape + (3,)))


class TestExtract:
    def test_background_only(self):
        c = cfg()
        img = rd.DepthImage(np.zeros((32, 32)), np.zeros((32, 32), bool))
        f = D.extract_pixel_descriptors(N.init_params(c, {}), img, c)
        assert f.foreground().shape == (0, 4)

    def test_deterministic(self):
        c = cfg()
        p = N.init_params(c, {})
        a = D.extract_pixel_descriptors(p, blob(), c)
        b = D.extract_pixel_descriptors(p, blob(), c)
        np.testing.assert_array_equal(a.values, b.values)

    def test_resolution_mismatch(self):
        c = cfg()
        with pytest.raises(ValueError):
            D.extract_pixel_descriptors(N.init_params(c, {}), rd.DepthImage(np.zeros((16, 16)), np.ones((16, 16), bool)), c)

    @pytest.mark.parametrize("schedule", ["conv6k3s2 relu pool lrn conv6k3s1 relu", "conv6k5s1 relu pool pool conv6k3s1"])
    def test_shift_equivariance(self, schedule):
        # shifts that are multiples of the total conv stride keep every pooling phase aligned
        c = cfg(schedule=schedule)
        p = N.init_params(c, {}, rng_seed=2)
        for k in p:
            if k.endswith(".b"):
                p[k] = np.random.default_rng(3).normal(size=p[k].shape) * 0.1
        a = D.extract_pixel_descriptors(p, blob(), c)
        b = D.extract_pixel_descriptors(p, blob((4, 4)), c)
        m = a.mask
        assert m.sum() > 50
        np.testing.assert_allclose(b.values[4:, 4:][m[:-4, :-4]], a.values[:-4, :-4][m[:-4, :-4]], atol=1e-9, rtol=0)

    def test_batch_equals_single(self):
        c = cfg()
        p = N.init_params(c, {})
        imgs = [blob(), blob((2, 0)), rd.DepthImage(np.zeros((32, 32)), np.zeros((32, 32), bool)), blob((0, 6))]
        batch = D.extract_batch(p, imgs, c, chunk=3)
        for img, f in zip(imgs, batch):
            np.testing.assert_allclose(f.values, D.extract_pixel_descriptors(p, img, c).values, rtol=1e-12, atol=1e-14)


class TestPerVertex:
    def test_single_view_identity(self):
        vals = np.random.default_rng(0).normal(size=(2, 2, 3))
        t = D.per_vertex_descriptors([field(vals, np.ones((2, 2)))], [buffers([[0, 1], [2, -1]])], 5)
        np.testing.assert_array_equal(t.values[:3], vals.reshape(-1, 3)[:3])
        np.testing.assert_array_equal(t.counts, [1, 1, 1, 0, 0])
        assert not t.usable[3] and not t.usable[4]

    def test_two_view_mean(self):
        u, v = np.array([1.0, 2.0]), np.array([4.0, -1.0])
        f1 = field(np.broadcast_to(u, (1, 1, 2)), [[True]])
        f2 = field(np.broadcast_to(v, (1, 1, 2)), [[True]])
        t = D.per_vertex_descriptors([f1, f2], [buffers([[0]]), buffers([[0]])], 1)
        np.testing.assert_array_equal(t.values[0], (u + v) / 2)

    def test_average_bounds(self):
        rng = np.random.default_rng(1)
        fields, bufs = [], []
        for _ in range(4):
            fields.append(field(rng.normal(size=(6, 6, 3)), rng.random((6, 6)) < 0.8))
            bufs.append(buffers(rng.integers(0, 10, size=(6, 6))))
        t = D.per_vertex_descriptors(fields, bufs, 10)
        for v in range(10):
            contrib = np.concatenate([f.values[f.mask & (b.vertex_id == v)] for f, b in zip(fields, bufs)])
            if len(contrib):
                assert (t.values[v] >= contrib.min(axis=0) - 1e-12).all()
                assert (t.values[v] <= contrib.max(axis=0) + 1e-12).all()
                assert t.counts[v] == len(contrib)

    def test_misaligned(self):
        with pytest.raises(ValueError):
            D.per_vertex_descriptors([field(np.zeros((2, 2, 1)), np.ones((2, 2)))], [], 3)

    def test_table_roundtrip(self, tmp_path):
        t = D.VertexDescriptorTable(np.random.default_rng(2).normal(size=(7, 3)), np.arange(7))
        D.save_vertex_table(tmp_path / "t.bin", t)
        back = D.load_vertex_table(tmp_path / "t.bin")
        np.testing.assert_array_equal(back.values, t.values)
        np.testing.assert_array_equal(back.counts, t.counts)

    def test_field_roundtrip(self, tmp_path):
        f = field(np.random.default_rng(3).normal(size=(4, 5, 2)), np.random.default_rng(4).random((4, 5)) < 0.5)
        D.save_field(tmp_path / "f.bin", f)
        back = D.load_field(tmp_path / "f.bin")
        np.testing.assert_array_equal(back.values, f.values)
        np.testing.assert_array_equal(back.mask, f.mask)


def test_pose_stability_ratio():
    rng = np.random.default_rng(5)
    a = D.VertexDescriptorTable(rng.normal(size=(200, 4)), np.ones(200, int))
    b = D.VertexDescriptorTable(a.values + rng.normal(size=(200, 4)) * 0.01, np.ones(200, int))
    assert D.pose_stability_ratio(a, b) < 0.05
    assert D.pose_stability_ratio(a, D.VertexDescriptorTable(rng.normal(size=(200, 4)), np.ones(200, int))) > 0.8


def test_rank_correlation_of_embedding():
    # descriptors equal to positions on a line: perfect rank agreement
    x = np.linspace(0, 1, 100)
    t = D.VertexDescriptorTable(np.stack([x, 0 * x], axis=1), np.ones(100, int))
    rho = D.geodesic_rank_correlation(t, lambda i, j: np.abs(x[i] - x[j]), n_pairs=2000)
    assert rho == pytest.approx(1.0)


def test_boundary_discontinuity():
    lab = np.zeros((4, 6), int)
    lab[:, 3:] = 1
    vals = np.zeros((4, 6, 2))
    vals[:, :, 0] = np.arange(6) * 1.0
    vals[:, 3:, 0] += 2.0  # jump of 3 across the boundary, 1 elsewhere
    f = field(vals, np.ones((4, 6)))
    # horizontal: 4 boundary pairs of 3, 16 interior of 1; vertical: 18 interior of 0
    assert D.boundary_discontinuity([f], [lab]) == pytest.approx(3.0 / (16 / 34))
