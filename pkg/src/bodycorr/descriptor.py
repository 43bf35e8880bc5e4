"""Per-pixel descriptors from a frozen network and their per-vertex averages."""
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import network as N
from .arrays import load_array, save_array


@dataclass
class DescriptorField:
    """Per-pixel descriptors ``(H, W, d)``; values on background pixels are meaningless."""

    values: np.ndarray
    mask: np.ndarray

    @property
    def d(self):
        return self.values.shape[2]

    def foreground(self):
        return self.values[self.mask]


@dataclass
class VertexDescriptorTable:
    """Mean descriptor per vertex and the number of pixels that contributed."""

    values: np.ndarray
    counts: np.ndarray

    @property
    def usable(self):
        return self.counts > 0

    @property
    def d(self):
        return self.values.shape[1]


def extract_pixel_descriptors(params, image, config):
    """One forward pass of the tower on a normalized depth image.

    Parameters
    ----------
    params : dict
    image : DepthImage
        Mean-subtracted depth with its foreground mask.
    config : NetConfig
    """
    if image.depth.shape != (config.input_size, config.input_size):
        raise ValueError(f"image is {image.depth.shape}, network expects {config.input_size}x{config.input_size}")
    if not image.mask.any():
        return DescriptorField(np.zeros(image.depth.shape + (config.d,)), image.mask.copy())
    x = N.prepare_input(image.depth, image.mask, config)
    f = N.descriptors(params, x, config)[0].transpose(1, 2, 0).astype(np.float64)
    f[~image.mask] = 0.0
    return DescriptorField(np.ascontiguousarray(f), image.mask.copy())


def extract_batch(params, images, config, chunk=16):
    """:func:`extract_pixel_descriptors` over many images, batched through the tower."""
    out = [None] * len(images)
    for start in range(0, len(images), chunk):
        idx = [i for i in range(start, min(start + chunk, len(images))) if images[i].mask.any()]
        for i in range(start, min(start + chunk, len(images))):
            if i not in idx:
                out[i] = extract_pixel_descriptors(params, images[i], config)
        if not idx:
            continue
        x = N.prepare_input(np.stack([images[i].depth for i in idx]), np.stack([images[i].mask for i in idx]), config)
        f = N.descriptors(params, x, config).transpose(0, 2, 3, 1).astype(np.float64)
        for j, i in enumerate(idx):
            v = f[j].copy()
            v[~images[i].mask] = 0.0
            out[i] = DescriptorField(v, images[i].mask.copy())
    return out


def per_vertex_descriptors(fields, buffers, vertex_count):
    """Average each vertex's pixel descriptors over every view that sees it.

    A pixel contributes to the vertex recorded in its render buffer (the face
    corner with the largest barycentric weight).
    """
    if len(fields) != len(buffers):
        raise ValueError("fields and buffers must align one-to-one")
    if not fields:
        raise ValueError("no views")
    d = fields[0].d
    sums = np.zeros((vertex_count, d))
    counts = np.zeros(vertex_count, dtype=np.int64)
    for f, b in zip(fields, buffers):
        if f.values.shape[:2] != b.vertex_id.shape:
            raise ValueError("field and buffer resolutions differ")
        m = f.mask & (b.vertex_id >= 0)
        vid = b.vertex_id[m]
        if len(vid) and vid.max() >= vertex_count:
            raise ValueError("buffer references a vertex beyond vertex_count")
        np.add.at(sums, vid, f.values[m])
        counts += np.bincount(vid, minlength=vertex_count)
    values = np.zeros_like(sums)
    seen = counts > 0
    values[seen] = sums[seen] / counts[seen, None]
    return VertexDescriptorTable(values, counts)


def save_vertex_table(path, table):
    save_array(path, np.concatenate([table.values, table.counts[:, None].astype(float)], axis=1))


def load_vertex_table(path):
    a = load_array(path)[..., 0]
    return VertexDescriptorTable(np.ascontiguousarray(a[:, :-1]), a[:, -1].astype(np.int64))


def save_field(path, field):
    save_array(path, np.concatenate([field.values, field.mask[..., None].astype(float)], axis=2))


def load_field(path):
    a = load_array(path)
    return DescriptorField(np.ascontiguousarray(a[..., :-1]), a[..., -1] > 0.5)


def geodesic_rank_correlation(table, geodesic_pair_fn, n_pairs=10_000, rng_seed=0):
    """Spearman correlation between geodesic and descriptor distances over random vertex pairs.

    Parameters
    ----------
    table : VertexDescriptorTable
    geodesic_pair_fn : callable
        ``(i, j) -> geodesic distances`` for index arrays.
    """
    rng = np.random.default_rng(rng_seed)
    ok = np.nonzero(table.usable)[0]
    i = ok[rng.integers(len(ok), size=n_pairs)]
    j = ok[rng.integers(len(ok), size=n_pairs)]
    keep = i != j
    i, j = i[keep], j[keep]
    geo = geodesic_pair_fn(i, j)
    desc = np.linalg.norm(table.values[i] - table.values[j], axis=1)
    return float(stats.spearmanr(geo, desc).statistic)


def pose_stability_ratio(table_a, table_b, n_pairs=10_000, rng_seed=0):
    """Mean distance between same-vertex descriptors of two poses over mean distance of random pairs."""
    both = np.nonzero(table_a.usable & table_b.usable)[0]
    same = np.linalg.norm(table_a.values[both] - table_b.values[both], axis=1).mean()
    rng = np.random.default_rng(rng_seed)
    i = both[rng.integers(len(both), size=n_pairs)]
    j = both[rng.integers(len(both), size=n_pairs)]
    keep = i != j
    rand = np.linalg.norm(table_a.values[i[keep]] - table_b.values[j[keep]], axis=1).mean()
    return float(same / rand)


def boundary_discontinuity(fields, label_maps):
    """Descriptor jump across region boundaries relative to the jump inside regions.

    Over all horizontally or vertically adjacent foreground pixel pairs,
    returns mean descriptor distance of pairs whose labels differ divided by
    mean distance of pairs sharing a label.
    """
    across, within = [], []
    for f, lab in zip(fields, label_maps):
        v, m = f.values, f.mask & (np.asarray(lab) >= 0)
        for a, b, ma, mb, la, lb in (
            (v[:, :-1], v[:, 1:], m[:, :-1], m[:, 1:], lab[:, :-1], lab[:, 1:]),
            (v[:-1], v[1:], m[:-1], m[1:], lab[:-1], lab[1:]),
        ):
            both = ma & mb
            d = np.linalg.norm(a[both] - b[both], axis=1)
            diff = la[both] != lb[both]
            across.append(d[diff])
            within.append(d[~diff])
    across, within = np.concatenate(across), np.concatenate(within)
    if len(across) == 0 or len(within) == 0:
        raise ValueError("need both boundary and interior pixel pairs")
    return float(across.mean() / within.mean())
