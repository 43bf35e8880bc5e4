"""Stochastic gradient descent on the ensemble loss."""
import csv
import io
import struct
from dataclasses import dataclass

import numpy as np

from . import network as N
from .arrays import atomic_write_bytes, atomic_write_text

KEYPOINT_HEAD = "keypoints"


def sgd_step(params, grads, velocity, lr, momentum):
    """Classical momentum: ``v <- mu v - lr g``, ``p <- p + v``.

    Returns new ``(params, velocity)`` dicts; inputs are not modified.
    """
    new_p, new_v = {}, {}
    for k, p in params.items():
        g = grads[k]
        v = velocity.get(k)
        if v is None:
            v = np.zeros_like(p)
        if g.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"shape mismatch for {k}: {p.shape} vs {g.shape}")
        new_v[k] = momentum * v - lr * g
        new_p[k] = p + new_v[k]
    return new_p, new_v


@dataclass
class TrainingSet:
    """Rendered training images and their supervision.

    Attributes
    ----------
    depth : ndarray, shape (N, H, W)
        Mean-subtracted depth, 0 on background.
    mask : bool ndarray, shape (N, H, W)
    labels : int ndarray, shape (N, S, H, W)
        Segment id per segmentation, -1 on background.
    keypoints : list of list of (k, row, col)
    n_classes : list of int
        Region count of each segmentation.
    n_keypoints : int
    """

    depth: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    keypoints: list
    n_classes: list
    n_keypoints: int = 0

    def __post_init__(self):
        n = len(self.depth)
        if n == 0:
            raise ValueError("empty training set")
        if len(self.mask) != n or len(self.labels) != n or len(self.keypoints) != n:
            raise ValueError("training set arrays disagree on image count")
        if self.labels.shape[1] != len(self.n_classes):
            raise ValueError("segmentation count does not match class counts")

    def heads(self):
        h = {f"seg{s}": int(c) for s, c in enumerate(self.n_classes)}
        if self.n_keypoints and any(self.keypoints):
            h[KEYPOINT_HEAD] = self.n_keypoints
        return h


def keypoint_targets(shape, fg, keypoints, radius):
    """Class map for pixels within ``radius`` of a projected keypoint.

    Overlaps go to the nearest keypoint, then the lowest keypoint id.
    """
    H, W = shape
    rr, cc = np.mgrid[:H, :W]
    best = np.full((H, W), np.inf)
    target = np.zeros((H, W), dtype=np.int64)
    for k, r, c in sorted(keypoints):
        dist = np.hypot(rr - r, cc - c)
        better = (dist <= radius) & (dist < best)
        best[better] = dist[better]
        target[better] = k
    return target, np.isfinite(best) & fg


def dense_task(data, image, seg):
    lab = data.labels[image, seg]
    return N.TrainTask(f"seg{seg}", image, np.maximum(lab, 0), lab >= 0, kind="dense")


def keypoint_task(data, image, radius):
    t, m = keypoint_targets(data.mask[image].shape, data.mask[image], data.keypoints[image], radius)
    return N.TrainTask(KEYPOINT_HEAD, image, t, m, kind="keypoint")


def sample_batch(data, config, rng, heads):
    tasks = []
    n_seg = len(data.n_classes)
    for _ in range(config.batch_size):
        img = int(rng.integers(len(data.depth)))
        want_kp = KEYPOINT_HEAD in heads and rng.random() < config.keypoint_fraction
        if want_kp and data.keypoints[img]:
            task = keypoint_task(data, img, config.keypoint_radius)
            if task.mask.any():
                tasks.append(task)
                continue
        tasks.append(dense_task(data, img, int(rng.integers(n_seg))))
    return tasks


@dataclass
class TrainResult:
    params: dict
    log: list  # (iteration, task_kind, loss)


def train(data, config, params=None, callback=None):
    """Run ``config.iterations`` SGD steps on randomly drawn tasks.

    Each batch element picks a random image, then a task kind (keypoint with
    probability ``config.keypoint_fraction``), and for dense tasks a
    segmentation uniformly at random.
    """
    config.validate()
    heads = data.heads()
    if params is None:
        params = N.init_params(config, heads)
    missing = [h for h in heads if f"head.{h}" not in params]
    if missing:
        raise ValueError(f"params lack heads {missing}")
    rng = np.random.default_rng(config.rng_seed + 1)
    inputs = N.prepare_input(data.depth, data.mask, config)
    velocity = {}
    log = []
    for it in range(config.iterations):
        tasks = sample_batch(data, config, rng, heads)
        _, grads, per_task = N.ensemble_loss(params, inputs, tasks, config)
        params, velocity = sgd_step(params, grads, velocity, config.lr, config.momentum)
        if it % config.log_every == 0:
            for t, loss in zip(tasks, per_task):
                log.append((it, t.head, loss))
        if callback is not None:
            callback(it, params, per_task)
    return TrainResult(params, log)


def evaluate_loss(params, data, config, seg):
    """Mean cross-entropy of segmentation ``seg`` over all images."""
    inputs = N.prepare_input(data.depth, data.mask, config)
    tasks = [dense_task(data, i, seg) for i in range(len(data.depth))]
    _, _, per = N.ensemble_loss(params, inputs, tasks, config)
    return float(np.mean(per))


def write_loss_log(path, log):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "task_kind", "loss"])
    for it, kind, loss in log:
        w.writerow([it, kind, repr(float(loss))])
    atomic_write_text(path, buf.getvalue())


def read_loss_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [(int(a), b, float(c)) for a, b, c in rows]


# checkpoint: magic, version, 64-char config hash, array count, then arrays
CKPT_MAGIC = b"BCCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params, config_hash):
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), config_hash.encode("ascii").ljust(64)[:64],
             struct.pack("<I", len(params))]
    for name, arr in params.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", a.ndim),
                  struct.pack(f"<{a.ndim}Q", *a.shape), a.tobytes()]
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path, dtype="float64"):
    """Returns ``(params, config_hash)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    try:
        (version,) = struct.unpack_from("<I", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config_hash = data[8:72].decode("ascii").strip()
        (count,) = struct.unpack_from("<I", data, 72)
        pos = 76
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + nlen].decode()
            pos += 4 + nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{rank}Q", data, pos + 4)
            pos += 4 + 8 * rank
            size = int(np.prod(shape)) * 8
            if pos + size > len(data):
                raise CheckpointError("truncated checkpoint")
            params[name] = np.frombuffer(data[pos:pos + size], dtype="<f8").reshape(shape).astype(dtype)
            pos += size
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    if pos != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return params, config_hash
