"""Triangle meshes, edge-graph geodesics and randomized Voronoi segmentations."""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .arrays import atomic_write_text


class MeshError(ValueError):
    """Base class for invalid mesh input."""


class MeshParseError(MeshError):
    pass


class FaceIndexError(MeshError):
    pass


class DegenerateFaceError(MeshError):
    pass


class DisconnectedMeshError(MeshError):
    pass


class TriMesh:
    """Indexed triangle mesh with its undirected, Euclidean-weighted edge graph.

    Parameters
    ----------
    vertices : array_like, shape (n, 3)
        Vertex positions in meters.
    faces : array_like, shape (m, 3)
        Vertex index triples.
    check_connected : bool
        Reject meshes whose edge graph has more than one component.
        Geodesic operations require a connected mesh.
    """

    def __init__(self, vertices, faces, check_connected=True):
        v = np.asarray(vertices, dtype=np.float64)
        f = np.asarray(faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (n, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must have shape (m, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            bad = f[(f < 0) | (f >= len(v))][0]
            raise FaceIndexError(f"face index {bad} out of range for {len(v)} vertices")
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if degenerate.any():
            raise DegenerateFaceError(f"face {int(np.argmax(degenerate))} repeats a vertex index")
        self.vertices = v
        self.faces = f
        self.vertices.setflags(write=False)
        self.faces.setflags(write=False)

        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        self.edges = np.unique(e, axis=0)
        self.edge_lengths = np.linalg.norm(v[self.edges[:, 0]] - v[self.edges[:, 1]], axis=1)
        n = len(v)
        g = sparse.coo_matrix(
            (self.edge_lengths, (self.edges[:, 0], self.edges[:, 1])), shape=(n, n)
        ).tocsr()
        self.graph = g + g.T
        if check_connected and n:
            ncomp, _ = csgraph.connected_components(self.graph, directed=False)
            if ncomp != 1:
                raise DisconnectedMeshError(f"mesh edge graph has {ncomp} connected components")

    @property
    def n_vertices(self):
        return len(self.vertices)

    def with_vertices(self, vertices):
        """Same topology, new positions."""
        return TriMesh(vertices, self.faces, check_connected=False)

    def __repr__(self):
        return f"TriMesh(n_vertices={len(self.vertices)}, n_faces={len(self.faces)})"


def load_mesh(path):
    """Read a ``v x y z`` / ``f i j k`` text mesh (1-based face indices, OBJ style).

    Face tokens of the form ``i/t/n`` are accepted; only the vertex index is used.
    """
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            try:
                if tokens[0] == "v":
                    verts.append([float(t) for t in tokens[1:4]])
                    if len(tokens) < 4:
                        raise ValueError("vertex needs 3 coordinates")
                elif tokens[0] == "f":
                    if len(tokens) != 4:
                        raise ValueError("only triangular faces are supported")
                    faces.append([int(t.split("/")[0]) - 1 for t in tokens[1:4]])
            except ValueError as exc:
                raise MeshParseError(f"{path}:{lineno}: {exc}") from None
    if not verts:
        raise MeshParseError(f"{path}: no vertices")
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_mesh(path, mesh):
    lines = [f"# vertices {mesh.n_vertices} faces {len(mesh.faces)}"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    atomic_write_text(path, "\n".join(lines) + "\n")


def geodesic_distances(mesh, source):
    """Shortest-path distances from ``source`` along the mesh edges (meters)."""
    source = int(source)
    if not 0 <= source < mesh.n_vertices:
        raise IndexError(f"source vertex {source} out of range")
    return csgraph.dijkstra(mesh.graph, directed=False, indices=source)


def geodesic_matrix(mesh, sources=None):
    """Distances from each of ``sources`` (all vertices by default), shape (len(sources), n)."""
    if sources is None:
        sources = np.arange(mesh.n_vertices)
    sources = np.asarray(sources, dtype=np.int64)
    if sources.size and (sources.min() < 0 or sources.max() >= mesh.n_vertices):
        raise IndexError("source vertex out of range")
    return csgraph.dijkstra(mesh.graph, directed=False, indices=sources).reshape(len(sources), -1)


def farthest_point_sample(mesh, initial_seeds, k, rng_seed=0):
    """Grow a seed set by farthest-point sampling in geodesic distance.

    ``initial_seeds`` is either a list of vertex indices or a count of random
    vertices to draw with ``rng_seed``. Each appended seed maximizes the
    distance to its nearest chosen seed; ties go to the lowest vertex index.
    """
    n = mesh.n_vertices
    if k > n:
        raise ValueError(f"k={k} exceeds vertex count {n}")
    if isinstance(initial_seeds, (int, np.integer)):
        if not 1 <= initial_seeds <= k:
            raise ValueError("initial seed count must be in [1, k]")
        rng = np.random.default_rng(rng_seed)
        seeds = [int(s) for s in rng.choice(n, size=int(initial_seeds), replace=False)]
    else:
        seeds = [int(s) for s in initial_seeds]
    if not 1 <= len(seeds) <= k:
        raise ValueError("need between 1 and k initial seeds")
    if len(set(seeds)) != len(seeds):
        raise ValueError("duplicate initial seeds")
    if min(seeds) < 0 or max(seeds) >= n:
        raise IndexError("initial seed out of range")

    nearest = geodesic_matrix(mesh, seeds).min(axis=0)
    chosen = np.zeros(n, dtype=bool)
    chosen[seeds] = True
    while len(seeds) < k:
        score = np.where(chosen, -np.inf, nearest)
        nxt = int(np.argmax(score))
        seeds.append(nxt)
        chosen[nxt] = True
        nearest = np.minimum(nearest, geodesic_distances(mesh, nxt))
    return seeds


@dataclass
class Segmentation:
    """Partition of mesh vertices into ``k`` regions grown from ``seeds``."""

    labels: np.ndarray
    seeds: list
    rng_seed: int = None

    @property
    def k(self):
        return len(self.seeds)

    @property
    def n_vertices(self):
        return len(self.labels)


def voronoi_segmentation(mesh, seeds, rng_seed=None):
    """Label every vertex with the index of its geodesically nearest seed."""
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    if len(set(seeds)) != len(seeds):
        raise ValueError("duplicate seeds")
    dist = geodesic_matrix(mesh, seeds)
    # argmin returns the first minimum, i.e. the lowest seed index on ties
    labels = np.argmin(dist, axis=0).astype(np.int64)
    return Segmentation(labels=labels, seeds=seeds, rng_seed=rng_seed)


def random_segmentation(mesh, k, n_initial=10, rng_seed=0):
    """Random seeds, farthest-point completion to ``k``, then Voronoi regions."""
    n_initial = max(1, min(int(n_initial), k))
    seeds = farthest_point_sample(mesh, n_initial, k, rng_seed=rng_seed)
    return voronoi_segmentation(mesh, seeds, rng_seed=rng_seed)


def _refine_codes(codes, labels):
    pair = codes * (int(labels.max()) + 1) + labels
    _, inverse = np.unique(pair, return_inverse=True)
    return inverse.reshape(-1)


def intersection_codes(segmentations):
    """Per-vertex id of the label vector across all segmentations (dense, from 0)."""
    codes = np.zeros(segmentations[0].n_vertices, dtype=np.int64)
    for seg in segmentations:
        codes = _refine_codes(codes, np.asarray(seg.labels, dtype=np.int64))
    return codes


@dataclass
class SegmentationSet:
    segmentations: list = field(default_factory=list)
    candidate_indices: list = field(default_factory=list)

    def __post_init__(self):
        sizes = {s.n_vertices for s in self.segmentations}
        if len(sizes) > 1:
            raise ValueError("segmentations refer to meshes of different sizes")

    def append(self, segmentation, candidate_index=None):
        if self.segmentations and segmentation.n_vertices != self.segmentations[0].n_vertices:
            raise ValueError("segmentation refers to a different mesh")
        self.segmentations.append(segmentation)
        self.candidate_indices.append(candidate_index)

    @property
    def intersection_region_count(self):
        return intersection_region_count(self)

    def __len__(self):
        return len(self.segmentations)

    def __iter__(self):
        return iter(self.segmentations)

    def __getitem__(self, i):
        return self.segmentations[i]


def intersection_region_count(segmentation_set):
    """Number of distinct per-vertex label vectors."""
    segs = list(segmentation_set)
    if not segs:
        raise ValueError("empty segmentation set")
    return int(intersection_codes(segs).max()) + 1


def select_segmentation_set(candidates, max_count=10, min_gain=None, rng_seed=0):
    """Greedily pick segmentations whose intersection has the most regions.

    The first pick is uniform over ``candidates``. Each later pick is the
    remaining candidate giving the largest intersection region count (lowest
    candidate index on ties). Selection stops at ``max_count`` or when the
    best gain falls below ``min_gain``; ``None`` means 1% of the current count
    (at least 1).
    """
    if not candidates:
        raise ValueError("empty candidate list")
    n = candidates[0].n_vertices
    if any(c.n_vertices != n for c in candidates):
        raise ValueError("candidates refer to meshes of different sizes")
    rng = np.random.default_rng(rng_seed)
    first = int(rng.integers(len(candidates)))
    chosen = SegmentationSet()
    chosen.append(candidates[first], first)
    codes = intersection_codes([candidates[first]])
    count = int(codes.max()) + 1
    remaining = [i for i in range(len(candidates)) if i != first]
    while len(chosen) < max_count and remaining and count < n:
        best, best_count, best_codes = None, -1, None
        for i in remaining:
            c = _refine_codes(codes, np.asarray(candidates[i].labels, dtype=np.int64))
            cnt = int(c.max()) + 1
            if cnt > best_count:
                best, best_count, best_codes = i, cnt, c
        threshold = max(1, math.ceil(0.01 * count)) if min_gain is None else min_gain
        if best_count - count < threshold:
            break
        chosen.append(candidates[best], best)
        remaining.remove(best)
        codes, count = best_codes, best_count
    return chosen


def save_segmentation(path, segmentation):
    lines = [
        f"# k {segmentation.k}",
        f"# rng_seed {segmentation.rng_seed if segmentation.rng_seed is not None else -1}",
        "# seeds " + " ".join(str(s) for s in segmentation.seeds),
    ]
    lines += [f"{i} {int(lab)}" for i, lab in enumerate(segmentation.labels)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_segmentation(path):
    header, pairs = {}, []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition(" ")
                header[key] = value
            elif line.strip():
                i, lab = line.split()
                pairs.append((int(i), int(lab)))
    labels = np.empty(len(pairs), dtype=np.int64)
    for i, lab in pairs:
        labels[i] = lab
    seeds = [int(s) for s in header.get("seeds", "").split()]
    rng_seed = int(header.get("rng_seed", -1))
    return Segmentation(labels=labels, seeds=seeds, rng_seed=None if rng_seed < 0 else rng_seed)


def icosphere(radius=1.0, subdivisions=2, center=(0.0, 0.0, 0.0)):
    """Geodesic sphere built by subdividing an icosahedron."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=float)
    return TriMesh(v, np.array(faces))


def grid_mesh(nx, ny, spacing=1.0, jitter=0.0, rng_seed=0):
    """Triangulated planar grid in the z=0 plane, optionally with jittered vertices."""
    rng = np.random.default_rng(rng_seed)
    xs, ys = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float))
    v = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1) * spacing
    if jitter:
        v[:, :2] += rng.uniform(-jitter, jitter, size=(nx * ny, 2)) * spacing
        v[:, 2] = rng.uniform(-jitter, jitter, size=nx * ny) * spacing
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b, c, d = a + 1, a + nx, a + nx + 1
            faces += [(a, b, d), (a, d, c)]
    return TriMesh(v, np.array(faces))
