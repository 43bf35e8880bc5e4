"""Software z-buffer rasterization of simulated depth scans."""
from dataclasses import dataclass, field

import numpy as np

NEAR = 1e-3


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    """Pinhole camera.  Pixel ``(row, col)`` has its center at ``(col + 0.5, row + 0.5)``."""

    eye: tuple
    target: tuple
    up: tuple = (0.0, 1.0, 0.0)
    fov: float = np.pi / 3
    width: int = 64
    height: int = 64

    def __post_init__(self):
        eye, target = np.asarray(self.eye, float), np.asarray(self.target, float)
        if np.allclose(eye, target):
            raise CameraError("eye coincides with target")
        if not 0 < self.fov < np.pi:
            raise CameraError("fov must lie in (0, pi)")
        if self.width < 16 or self.height < 16:
            raise CameraError("image must be at least 16x16")
        fwd = target - eye
        if np.linalg.norm(np.cross(fwd, np.asarray(self.up, float))) < 1e-12:
            raise CameraError("up vector is parallel to the viewing direction")

    def basis(self):
        """Rows: right, up, forward (unit vectors, world frame)."""
        eye = np.asarray(self.eye, float)
        fwd = np.asarray(self.target, float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, float))
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return np.stack([right, up, fwd])

    @property
    def focal(self):
        return 0.5 * self.height / np.tan(0.5 * self.fov)

    def to_camera(self, points):
        return (np.asarray(points, float) - np.asarray(self.eye, float)) @ self.basis().T

    def project(self, points):
        """Continuous image coordinates ``(u, v)`` and z-depth of world points."""
        c = self.to_camera(points)
        z = c[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = 0.5 * self.width + self.focal * c[..., 0] / z
            v = 0.5 * self.height - self.focal * c[..., 1] / z
        return u, v, z


def default_radius(body_height, fov=np.pi / 3, fraction=0.5):
    """Camera distance at which ``body_height`` spans ``fraction`` of the image height."""
    return body_height / (2.0 * fraction * np.tan(0.5 * fov))


def sample_viewpoints(n, radius, center, rng_seed=0, width=64, height=64, fov=np.pi / 3,
                      elevation_range=(-0.35, 0.7), jitter=False):
    """Cameras on a sphere around ``center`` on an azimuth x elevation grid.

    ``n == 1`` yields the frontal camera on the ``+z`` axis.  Elevation rings
    are spread over ``elevation_range`` (radians) with evenly spaced azimuths
    staggered between rings; ``jitter`` rotates the whole grid by a random
    azimuth drawn from ``rng_seed``.
    """
    if n < 1:
        raise ValueError("need at least one viewpoint")
    if not radius > 0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, float)
    n_rings = max(1, int(round(np.sqrt(n / 4.0))))
    phase = np.random.default_rng(rng_seed).uniform(0, 2 * np.pi) if jitter else 0.0
    lo, hi = elevation_range
    cams = []
    for ring in range(n_rings):
        count = n // n_rings + (1 if ring < n % n_rings else 0)
        elev = 0.0 if n_rings == 1 else lo + (hi - lo) * (ring + 0.5) / n_rings
        stagger = np.pi / count * (ring % 2)
        for j in range(count):
            az = phase + stagger + 2 * np.pi * j / count
            direction = np.array([np.cos(elev) * np.sin(az), np.sin(elev), np.cos(elev) * np.cos(az)])
            eye = center + radius * direction
            cams.append(Camera(tuple(eye), tuple(center), fov=fov, width=width, height=height))
    return cams


@dataclass
class DepthImage:
    """z-depth in meters; background pixels hold 0 and are False in ``mask``."""

    depth: np.ndarray
    mask: np.ndarray

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]


@dataclass
class RenderBuffers:
    """Per-pixel surface references; background pixels hold -1 / 0."""

    vertex_id: np.ndarray
    face_id: np.ndarray
    bary: np.ndarray
    points: np.ndarray


@dataclass
class Render:
    image: DepthImage
    buffers: RenderBuffers
    labels: np.ndarray  # (n_segmentations, H, W), -1 on background
    keypoint_pixels: list = field(default_factory=list)  # (keypoint index, row, col)


def rasterize_depth(mesh, camera, segmentation_set=None, keypoints=None, keypoint_tolerance=0.03):
    """Perspective z-buffer rendering of ``mesh`` seen from ``camera``.

    Per pixel the nearest covering triangle wins (lowest face index on exact
    depth ties).  Depth and the 3D point use perspective-correct barycentric
    weights; the pixel's vertex is the face corner with the largest weight.
    """
    W, H = camera.width, camera.height
    verts = np.asarray(mesh.vertices, float)
    faces = np.asarray(mesh.faces)
    u, v, z = camera.project(verts)

    fz = z[faces]
    ok = (fz > NEAR).all(axis=1)
    fu, fv = u[faces], v[faces]
    # signed doubled area in screen space
    area = (fu[:, 1] - fu[:, 0]) * (fv[:, 2] - fv[:, 0]) - (fu[:, 2] - fu[:, 0]) * (fv[:, 1] - fv[:, 0])
    ok &= np.abs(area) > 1e-12
    c0 = np.clip(np.ceil(fu.min(axis=1) - 0.5), 0, W).astype(np.int64)
    c1 = np.clip(np.floor(fu.max(axis=1) - 0.5), -1, W - 1).astype(np.int64)
    r0 = np.clip(np.ceil(fv.min(axis=1) - 0.5), 0, H).astype(np.int64)
    r1 = np.clip(np.floor(fv.max(axis=1) - 0.5), -1, H - 1).astype(np.int64)
    ok &= (c1 >= c0) & (r1 >= r0)
    fidx = np.nonzero(ok)[0]

    depth = np.zeros((H, W))
    vertex_id = np.full((H, W), -1, dtype=np.int64)
    face_id = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    points = np.zeros((H, W, 3))

    if len(fidx):
        ncol = c1[fidx] - c0[fidx] + 1
        nrow = r1[fidx] - r0[fidx] + 1
        counts = ncol * nrow
        cand_face = np.repeat(fidx, counts)
        local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        rep_ncol = np.repeat(ncol, counts)
        cols = np.repeat(c0[fidx], counts) + local % rep_ncol
        rows = np.repeat(r0[fidx], counts) + local // rep_ncol
        pu, pv = cols + 0.5, rows + 0.5

        U, V, A = fu[cand_face], fv[cand_face], area[cand_face]
        l0 = ((U[:, 1] - pu) * (V[:, 2] - pv) - (U[:, 2] - pu) * (V[:, 1] - pv)) / A
        l1 = ((U[:, 2] - pu) * (V[:, 0] - pv) - (U[:, 0] - pu) * (V[:, 2] - pv)) / A
        l2 = 1.0 - l0 - l1
        lam = np.stack([l0, l1, l2], axis=1)
        inside = (lam >= -1e-12).all(axis=1)
        cand_face, rows, cols, lam = cand_face[inside], rows[inside], cols[inside], lam[inside]

        w = lam / fz[cand_face]
        zc = 1.0 / w.sum(axis=1)
        b = w * zc[:, None]
        pix = rows * W + cols
        order = np.lexsort((cand_face, zc, pix))
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix[order][1:] != pix[order][:-1]
        win = order[first]

        r, c, f = rows[win], cols[win], cand_face[win]
        bw = b[win]
        depth[r, c] = zc[win]
        face_id[r, c] = f
        bary[r, c] = bw
        vertex_id[r, c] = faces[f, np.argmax(bw, axis=1)]
        points[r, c] = np.einsum("nk,nkd->nd", bw, verts[faces[f]])

    mask = face_id >= 0
    segs = list(segmentation_set) if segmentation_set is not None else []
    labels = np.full((len(segs), H, W), -1, dtype=np.int64)
    for s, seg in enumerate(segs):
        labels[s][mask] = np.asarray(seg.labels)[vertex_id[mask]]

    kp_pixels = []
    if keypoints is not None:
        for k, vi in enumerate(keypoints):
            if not z[vi] > NEAR:
                continue
            col, row = int(np.floor(u[vi])), int(np.floor(v[vi]))
            if 0 <= row < H and 0 <= col < W and mask[row, col]:
                if depth[row, col] >= z[vi] - keypoint_tolerance:
                    kp_pixels.append((k, row, col))

    return Render(
        image=DepthImage(depth=depth, mask=mask),
        buffers=RenderBuffers(vertex_id=vertex_id, face_id=face_id, bary=bary, points=points),
        labels=labels,
        keypoint_pixels=kp_pixels,
    )


def normalize_depth(image):
    """Subtract the mean foreground depth; background stays 0 (masked)."""
    if not image.mask.any():
        raise ValueError("image has no foreground pixels")
    out = np.zeros_like(image.depth)
    fg = image.depth[image.mask]
    out[image.mask] = fg - fg.mean()
    return DepthImage(depth=out, mask=image.mask.copy())


def add_salt_pepper(image, fraction, rng_seed=0, amplitude=0.5):
    """Corrupt a fraction of foreground pixels by +/- ``amplitude`` meters."""
    rng = np.random.default_rng(rng_seed)
    depth = image.depth.copy()
    rows, cols = np.nonzero(image.mask)
    hit = rng.random(len(rows)) < fraction
    sign = rng.choice([-1.0, 1.0], size=int(hit.sum()))
    depth[rows[hit], cols[hit]] = np.maximum(depth[rows[hit], cols[hit]] + sign * amplitude, NEAR)
    return DepthImage(depth=depth, mask=image.mask.copy())
