"""Nearest-neighbor matching in descriptor space and the spatial-consistency filter."""
import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .arrays import atomic_write_text

DEFAULT_THRESHOLD = 0.10


@dataclass
class CorrespondenceSet:
    """Matches ``source_ids[i] -> target_ids[i]`` with their descriptor distances.

    For pixel-kind sources the ids are flat indices ``row * width + col``
    into a grid of shape ``grid_shape``.
    """

    source_ids: np.ndarray
    target_ids: np.ndarray
    distances: np.ndarray
    source_kind: str = "vertex"
    target_kind: str = "vertex"
    grid_shape: tuple = field(default=None)

    def __len__(self):
        return len(self.source_ids)

    def subset(self, keep):
        return CorrespondenceSet(self.source_ids[keep], self.target_ids[keep], self.distances[keep],
                                 self.source_kind, self.target_kind, self.grid_shape)


@dataclass(frozen=True)
class FilterConfig:
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")


def _exact_distances(src, tgt):
    return np.sqrt(((src[:, None, :] - tgt[None, :, :]) ** 2).sum(axis=2))


def brute_force_nn(source, target, chunk=256):
    """Exact nearest target row per source row; ties go to the lowest target id."""
    idx = np.empty(len(source), dtype=np.int64)
    dist = np.empty(len(source))
    rows_per = max(1, int(chunk * 256 / max(len(target), 1)))
    for s in range(0, len(source), rows_per):
        d = _exact_distances(source[s:s + rows_per], target)
        idx[s:s + rows_per] = d.argmin(axis=1)
        dist[s:s + rows_per] = d[np.arange(len(d)), idx[s:s + rows_per]]
    return idx, dist


def kdtree_nn(source, target, tree=None):
    """Tree-accelerated search returning exactly what :func:`brute_force_nn` returns.

    The tree proposes a radius; every target inside a slightly inflated ball
    is rescored with the brute-force formula, so the argmin and the tie-break
    agree element for element.
    """
    tree = cKDTree(target) if tree is None else tree
    r, _ = tree.query(source, k=1)
    balls = tree.query_ball_point(source, r * (1 + 1e-9) + 1e-12)
    idx = np.empty(len(source), dtype=np.int64)
    dist = np.empty(len(source))
    for i, cand in enumerate(balls):
        cand = np.sort(np.asarray(cand, dtype=np.int64))
        d = np.sqrt(((target[cand] - source[i]) ** 2).sum(axis=1))
        j = int(d.argmin())
        idx[i], dist[i] = cand[j], d[j]
    return idx, dist


def nn_match(source, target, source_ids=None, target_ids=None, accelerate=False,
             source_kind="vertex", target_kind="vertex", grid_shape=None):
    """Match each source descriptor to its nearest target descriptor.

    Parameters
    ----------
    source, target : ndarray, shape (n, d) and (m, d)
    source_ids, target_ids : int ndarray, optional
        Ids attached to the rows (default: row numbers).  Ties go to the
        lowest target row, so pass targets sorted by id for lowest-id ties.
    accelerate : bool
        Use the kd-tree search; results are identical to brute force.
    """
    source = np.asarray(source, float)
    target = np.asarray(target, float)
    if source.ndim != 2 or target.ndim != 2 or source.shape[1] != target.shape[1]:
        raise ValueError("descriptor dimensions differ")
    if len(target) == 0:
        raise ValueError("empty target set")
    if not (np.isfinite(source).all() and np.isfinite(target).all()):
        raise ValueError("non-finite descriptors")
    rows, dist = (kdtree_nn if accelerate else brute_force_nn)(source, target)
    sid = np.arange(len(source)) if source_ids is None else np.asarray(source_ids, dtype=np.int64)
    tid = rows if target_ids is None else np.asarray(target_ids, dtype=np.int64)[rows]
    return CorrespondenceSet(sid, tid, dist, source_kind, target_kind, grid_shape)


def match_vertices(source_table, target_table, accelerate=False):
    """Vertex-to-vertex matching over usable vertices of two descriptor tables."""
    s = np.nonzero(source_table.usable)[0]
    t = np.nonzero(target_table.usable)[0]
    return nn_match(source_table.values[s], target_table.values[t], s, t, accelerate)


def match_pixels(field, target_table, accelerate=False):
    """Match every foreground pixel of a descriptor field to usable target vertices."""
    H, W = field.mask.shape
    pix = np.flatnonzero(field.mask)
    t = np.nonzero(target_table.usable)[0]
    return nn_match(field.values.reshape(-1, field.d)[pix], target_table.values[t], pix, t, accelerate,
                    source_kind="pixel", grid_shape=(H, W))


def filter_graph(matches, target_points, threshold):
    """Edges between 4-adjacent matched pixels whose targets lie within ``threshold``."""
    H, W = matches.grid_shape
    pos = np.full(H * W, -1, dtype=np.int64)
    pos[matches.source_ids] = np.arange(len(matches))
    pts = np.asarray(target_points, float)[matches.target_ids]
    a_all, b_all = [], []
    pix = matches.source_ids
    for step, valid in ((1, pix % W < W - 1), (W, pix < (H - 1) * W)):
        a = np.nonzero(valid)[0]
        b = pos[pix[a] + step]
        ok = b >= 0
        a, b = a[ok], b[ok]
        near = np.linalg.norm(pts[a] - pts[b], axis=1) < threshold
        a_all.append(a[near])
        b_all.append(b[near])
    return np.concatenate(a_all), np.concatenate(b_all)


def spatial_filter(matches, target_points, config=FilterConfig()):
    """Keep the matches in the largest connected component of the consistency graph.

    Ties between equal-size components go to the one holding the lowest pixel index.
    """
    if matches.source_kind != "pixel" or matches.grid_shape is None:
        raise ValueError("spatial filter needs pixel-kind matches on a grid")
    n = len(matches)
    if n == 0:
        return matches
    if np.asarray(target_points).shape[0] <= matches.target_ids.max():
        raise ValueError("missing geometry for a matched target")
    H, W = matches.grid_shape
    if matches.source_ids.min() < 0 or matches.source_ids.max() >= H * W:
        raise ValueError("source pixel outside the grid")
    a, b = filter_graph(matches, target_points, config.threshold)
    g = sparse.coo_matrix((np.ones(len(a)), (a, b)), shape=(n, n))
    _, comp = connected_components(g, directed=False)
    sizes = np.bincount(comp)
    lowest = np.full(len(sizes), np.iinfo(np.int64).max)
    np.minimum.at(lowest, comp, matches.source_ids)
    best = np.lexsort((lowest, -sizes))[0]
    return matches.subset(comp == best)


def write_matches_csv(path, matches):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source_id", "target_id", "feature_distance"])
    for s, t, d in zip(matches.source_ids, matches.target_ids, matches.distances):
        w.writerow([int(s), int(t), f"{d:.10g}"])
    atomic_write_text(path, buf.getvalue())


def read_matches_csv(path, source_kind="vertex", target_kind="vertex", grid_shape=None):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    a = np.array([[int(r[0]), int(r[1])] for r in rows], dtype=np.int64).reshape(-1, 2)
    d = np.array([float(r[2]) for r in rows])
    return CorrespondenceSet(a[:, 0], a[:, 1], d, source_kind, target_kind, grid_shape)
