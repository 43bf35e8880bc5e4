import numpy as np
import pytest

from bodycorr import mesh_core as mc
from bodycorr import render as rd
from bodycorr import synth_body as sb

FRONT = dict(eye=(0.0, 0.0, 0.0), target=(0.0, 0.0, -1.0))


def plane_tri(z, size=10.0):
    return np.array([[-size, -size, z], [size, -size, z], [0.0, size, z]])


def ray_cast(mesh, camera):
    """Brute-force z-depth per pixel by Moller-Trumbore against every face."""
    basis = camera.basis()
    eye = np.asarray(camera.eye, float)
    out = np.zeros((camera.height, camera.width))
    tris = mesh.vertices[mesh.faces]
    for r in range(camera.height):
        for c in range(camera.width):
            x = (c + 0.5 - camera.width / 2) / camera.focal
            y = -(r + 0.5 - camera.height / 2) / camera.focal
            d = x * basis[0] + y * basis[1] + basis[2]
            best = np.inf
            for a, b, cc in tris:
                e1, e2 = b - a, cc - a
                p = np.cross(d, e2)
                det = e1 @ p
                if abs(det) < 1e-14:
                    continue
                s = eye - a
                u = (s @ p) / det
                q = np.cross(s, e1)
                v = (d @ q) / det
                if u < -1e-9 or v < -1e-9 or u + v > 1 + 1e-9:
                    continue
                t = (e2 @ q) / det
                if 0 < t < best:
                    best = t  # d has unit forward component, so t is the z-depth
            out[r, c] = 0.0 if np.isinf(best) else best
    return out


class TestCamera:
    def test_invalid(self):
        with pytest.raises(rd.CameraError):
            rd.Camera(eye=(0, 0, 0), target=(0, 0, 0))
        with pytest.raises(rd.CameraError):
            rd.Camera(**FRONT, fov=np.pi)
        with pytest.raises(rd.CameraError):
            rd.Camera(**FRONT, width=8)


class TestViewpoints:
    def test_single_frontal(self):
        (cam,) = rd.sample_viewpoints(1, 3.0, (0, 1, 0))
        np.testing.assert_allclose(cam.eye, (0.0, 1.0, 3.0), atol=1e-12)

    def test_paper_count_and_sphere(self):
        center = np.array([0.1, 0.9, -0.2])
        cams = rd.sample_viewpoints(144, 2.5, center)
        assert len(cams) == 144
        r = [np.linalg.norm(np.asarray(c.eye) - center) for c in cams]
        np.testing.assert_allclose(r, 2.5, atol=1e-9)
        assert all(np.allclose(c.target, center) for c in cams)
        assert len({tuple(np.round(c.eye, 9)) for c in cams}) == 144

    def test_invalid(self):
        with pytest.raises(ValueError):
            rd.sample_viewpoints(0, 1.0, (0, 0, 0))
        with pytest.raises(ValueError):
            rd.sample_viewpoints(4, -1.0, (0, 0, 0))

    def test_jitter_deterministic(self):
        a = rd.sample_viewpoints(8, 2.0, (0, 0, 0), rng_seed=4, jitter=True)
        b = rd.sample_viewpoints(8, 2.0, (0, 0, 0), rng_seed=4, jitter=True)
        assert [c.eye for c in a] == [c.eye for c in b]


class TestRasterize:
    def test_constant_plane(self):
        mesh = mc.TriMesh(plane_tri(-2.0), [[0, 1, 2]])
        out = rd.rasterize_depth(mesh, rd.Camera(**FRONT, width=32, height=32))
        assert out.image.mask.sum() > 100
        np.testing.assert_allclose(out.image.depth[out.image.mask], 2.0, rtol=1e-12)
        assert (out.image.depth[~out.image.mask] == 0).all()

    def test_z_buffer(self):
        v = np.concatenate([plane_tri(-2.0), plane_tri(-1.0, size=0.5)])
        mesh = mc.TriMesh(v, [[0, 1, 2], [3, 4, 5]], check_connected=False)
        out = rd.rasterize_depth(mesh, rd.Camera(**FRONT, width=32, height=32))
        near = out.buffers.face_id == 1
        assert near.sum() > 10
        np.testing.assert_allclose(out.image.depth[near], 1.0, rtol=1e-12)
        np.testing.assert_allclose(out.image.depth[out.buffers.face_id == 0], 2.0, rtol=1e-12)

    def test_behind_camera_is_background(self):
        mesh = mc.TriMesh(plane_tri(+2.0), [[0, 1, 2]])
        out = rd.rasterize_depth(mesh, rd.Camera(**FRONT, width=16, height=16))
        assert not out.image.mask.any()
        assert (out.buffers.vertex_id == -1).all()

    def test_sphere_center_depth(self):
        radius, dist = 0.5, 3.0
        sphere = mc.icosphere(radius, 4)
        cam = rd.Camera(eye=(0, 0, dist), target=(0, 0, 0), width=64, height=64)
        out = rd.rasterize_depth(sphere, cam)
        r, c = 32, 32
        # analytic ray-sphere hit through the pixel center
        x = (c + 0.5 - 32) / cam.focal
        y = -(r + 0.5 - 32) / cam.focal
        d = np.array([x, y, -1.0])
        o = np.array([0.0, 0.0, dist])
        a, b, cc = d @ d, 2 * o @ d, o @ o - radius ** 2
        t = (-b - np.sqrt(b * b - 4 * a * cc)) / (2 * a)
        chord = sphere.edge_lengths.max()
        sagitta = radius - np.sqrt(radius ** 2 - (chord / 2) ** 2)
        assert abs(out.image.depth[r, c] - t) <= sagitta
        assert abs(out.image.depth[r, c] - (dist - radius)) <= sagitta + 1e-3

    def test_matches_ray_cast_oracle(self):
        v = np.concatenate([mc.icosphere(0.4, 1).vertices, plane_tri(-0.1, size=0.6)])
        f = np.concatenate([mc.icosphere(0.4, 1).faces, [[42, 43, 44]]])
        mesh = mc.TriMesh(v, f, check_connected=False)
        cam = rd.Camera(eye=(0.3, 0.2, 2.0), target=(0, 0, 0), width=24, height=24)
        out = rd.rasterize_depth(mesh, cam)
        oracle = ray_cast(mesh, cam)
        np.testing.assert_array_equal(out.image.mask, oracle > 0)
        np.testing.assert_allclose(out.image.depth, oracle, rtol=1e-9, atol=1e-12)


@pytest.fixture(scope="module")
def body_render():
    mesh, binding = sb.generate_body()
    kp = sb.keypoints(mesh, binding)
    segs = [mc.random_segmentation(mesh, 20, 5, rng_seed=s) for s in range(2)]
    center = (mesh.vertices.min(0) + mesh.vertices.max(0)) / 2
    radius = rd.default_radius(np.ptp(mesh.vertices[:, 1]))
    cams = rd.sample_viewpoints(4, radius, center)
    return mesh, segs, kp, cams, [rd.rasterize_depth(mesh, c, segs, kp) for c in cams]


class TestBodyRender:
    def test_half_height(self, body_render):
        *_, outs = body_render
        rows = np.nonzero(outs[0].image.mask.any(axis=1))[0]
        assert 0.4 <= (rows.max() - rows.min() + 1) / 64 <= 0.6

    def test_depth_matches_points(self, body_render):
        mesh, segs, kp, cams, outs = body_render
        for cam, out in zip(cams, outs):
            m = out.image.mask
            z = cam.to_camera(out.buffers.points[m])[:, 2]
            np.testing.assert_allclose(out.image.depth[m], z, rtol=1e-6)

    def test_reprojection(self, body_render):
        mesh, segs, kp, cams, outs = body_render
        for cam, out in zip(cams, outs):
            rows, cols = np.nonzero(out.image.mask)
            u, v, _ = cam.project(out.buffers.points[rows, cols])
            np.testing.assert_array_equal(np.floor(u).astype(int), cols)
            np.testing.assert_array_equal(np.floor(v).astype(int), rows)

    def test_label_consistency(self, body_render):
        mesh, segs, kp, cams, outs = body_render
        for out in outs:
            m = out.image.mask
            faces = mesh.faces[out.buffers.face_id[m]]
            vid = faces[np.arange(len(faces)), np.argmax(out.buffers.bary[m], axis=1)]
            np.testing.assert_array_equal(vid, out.buffers.vertex_id[m])
            for s, seg in enumerate(segs):
                np.testing.assert_array_equal(out.labels[s][m], seg.labels[vid])
                assert (out.labels[s][~m] == -1).all()

    def test_keypoint_pixels(self, body_render):
        mesh, segs, kp, cams, outs = body_render
        assert len(outs[0].keypoint_pixels) > 5
        for out in outs:
            for k, r, c in out.keypoint_pixels:
                assert out.image.mask[r, c]
                assert 0 <= k < 33


class TestNormalize:
    def test_small(self):
        img = rd.DepthImage(np.array([[1.0, 2.0], [3.0, 0.0]]), np.array([[True, True], [True, False]]))
        out = rd.normalize_depth(img)
        np.testing.assert_allclose(out.depth, [[-1.0, 0.0], [1.0, 0.0]])
        np.testing.assert_array_equal(out.mask, img.mask)

    def test_idempotent_on_zero_mean(self):
        img = rd.DepthImage(np.array([[-0.5, 0.5], [0.25, -0.25]]), np.ones((2, 2), bool))
        np.testing.assert_allclose(rd.normalize_depth(img).depth, img.depth, atol=1e-12)

    def test_random_mean_zero(self):
        rng = np.random.default_rng(0)
        depth = rng.uniform(1, 4, (32, 32))
        mask = rng.random((32, 32)) < 0.4
        out = rd.normalize_depth(rd.DepthImage(np.where(mask, depth, 0.0), mask))
        assert abs(out.depth[mask].mean()) < 1e-9
        # no scale normalization
        np.testing.assert_allclose(out.depth[mask].std(), depth[mask].std(), rtol=1e-12)

    def test_all_background(self):
        with pytest.raises(ValueError):
            rd.normalize_depth(rd.DepthImage(np.zeros((4, 4)), np.zeros((4, 4), bool)))


def test_salt_pepper():
    img = rd.DepthImage(np.full((16, 16), 2.0), np.ones((16, 16), bool))
    noisy = rd.add_salt_pepper(img, 0.1, rng_seed=1)
    changed = noisy.depth != 2.0
    assert 0 < changed.mean() < 0.3
    np.testing.assert_array_equal(noisy.mask, img.mask)
