"""Descriptor tower plus per-task softmax heads.

The tower maps a depth image to a ``d``-dimensional descriptor per pixel.
Each classification task owns a head matrix whose rows are representative
descriptors; its logits are plain dot products with the pixel descriptor.
"""
import hashlib
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L

DESK_SCHEDULE = "conv16k5s2 relu pool lrn conv32k3s1 relu pool lrn conv32k3s1 relu"
# conv rows of the original table; 2x conv read as two stacked convolutions
PAPER_SCHEDULE = ("conv96k11s4 relu pool lrn conv256k5s1 relu pool lrn "
                  "conv384k3s1 relu conv384k3s1 relu conv256k3s1 relu pool "
                  "conv4096k1s1 relu conv4096k1s1 relu")

_CONV = re.compile(r"conv(\d+)k(\d+)s(\d+)$")


class NetConfigError(ValueError):
    pass


@dataclass
class NetConfig:
    """Architecture and optimizer settings."""

    d: int = 8
    schedule: str = DESK_SCHEDULE
    final_activation: str = "relu"
    input_size: int = 64
    input_channels: int = 2  # normalized depth plus foreground indicator
    depth_scale: float = 10.0
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 4
    iterations: int = 1500
    keypoint_fraction: float = 0.25
    keypoint_radius: float = 2.0
    weight_decay: float = 0.0
    log_every: int = 1
    dtype: str = "float64"
    lrn_size: int = L.LRN_SIZE
    lrn_alpha: float = L.LRN_ALPHA
    lrn_beta: float = L.LRN_BETA
    lrn_k: float = L.LRN_K
    rng_seed: int = 0

    def layers(self):
        """Parsed schedule as a list of tuples."""
        out = []
        for tok in self.schedule.split():
            m = _CONV.match(tok)
            if m:
                out.append(("conv",) + tuple(int(g) for g in m.groups()))
            elif tok in ("relu", "lrn", "pool", "idn"):
                out.append((tok,))
            else:
                raise NetConfigError(f"unknown layer token {tok!r}")
        return out

    @property
    def total_stride(self):
        s = 1
        for layer in self.layers():
            if layer[0] == "conv":
                s *= layer[3]
        return s

    @property
    def pool_levels(self):
        return sum(1 for layer in self.layers() if layer[0] == "pool")

    def validate(self):
        if self.d < 2:
            raise NetConfigError("descriptor dimension must be at least 2")
        if self.final_activation not in ("relu", "idn"):
            raise NetConfigError("final_activation must be relu or idn")
        if self.input_channels not in (1, 2):
            raise NetConfigError("input_channels must be 1 or 2")
        if self.dtype not in ("float64", "float32"):
            raise NetConfigError("dtype must be float64 or float32")
        if not (self.lr > 0 and 0 <= self.momentum < 1 and self.batch_size >= 1 and self.iterations >= 0):
            raise NetConfigError("bad optimizer settings")
        size = self.input_size
        for layer in self.layers():
            if layer[0] == "conv":
                _, _, k, s = layer
                if size % s:
                    raise NetConfigError(f"stride {s} does not divide size {size}")
                size //= s
            elif layer[0] == "pool":
                if size % 2:
                    raise NetConfigError(f"pooling needs an even size, got {size}")
                size //= 2
        if size * self.total_stride * 2 ** self.pool_levels != self.input_size:
            raise NetConfigError("schedule does not restore the input resolution")
        return self

    def hash(self):
        text = ";".join(f"{k}={v!r}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()


def paper_config():
    """The full-scale settings: 512x512 input, d=16, batch 128, 200,000 iterations."""
    return NetConfig(d=16, schedule=PAPER_SCHEDULE, input_size=512, input_channels=1,
                     batch_size=128, iterations=200_000, dtype="float32")


def init_params(config, heads, rng_seed=None):
    """He-initialized tower weights and one head matrix per task.

    Parameters
    ----------
    config : NetConfig
    heads : dict
        Head name -> class count.

    Returns
    -------
    dict
        Parameter name -> array, in a fixed order.
    """
    config.validate()
    rng = np.random.default_rng(config.rng_seed if rng_seed is None else rng_seed)
    dtype = np.dtype(config.dtype)
    params = {}
    cin = config.input_channels
    i = 0
    for layer in config.layers():
        if layer[0] != "conv":
            continue
        _, cout, k, _ = layer
        std = np.sqrt(2.0 / (cin * k * k))
        params[f"conv{i}.w"] = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
        params[f"conv{i}.b"] = np.zeros(cout, dtype)
        cin = cout
        i += 1
    proj = rng.standard_normal((config.d, cin)) * np.sqrt(2.0 / cin)
    params["up.w"] = L.bilinear_upsample_weights(proj, config.total_stride).astype(dtype)
    params["up.b"] = np.zeros(config.d * config.total_stride ** 2, dtype)
    for name, count in heads.items():
        if count < 1:
            raise NetConfigError(f"head {name!r} needs at least one class")
        params[f"head.{name}"] = (rng.standard_normal((count, config.d)) / np.sqrt(config.d)).astype(dtype)
    return params


def head_names(params):
    return [k[5:] for k in params if k.startswith("head.")]


def prepare_input(depth, mask, config):
    """Stack normalized depth (and optionally the mask) into network input channels.

    ``depth`` and ``mask`` are ``(H, W)`` or ``(B, H, W)``.
    """
    depth = np.asarray(depth)
    mask = np.asarray(mask)
    if depth.ndim == 2:
        depth, mask = depth[None], mask[None]
    chans = [depth * config.depth_scale]
    if config.input_channels == 2:
        chans.append(mask.astype(float))
    return np.stack(chans, axis=1).astype(config.dtype)


def _check_finite(x, where):
    if not np.isfinite(x).all():
        raise FloatingPointError(f"non-finite activation after {where}")


def tower_forward(params, x, config):
    """Descriptors ``(B, d, H, W)`` for input ``(B, channels, H, W)``."""
    if x.shape[1] != config.input_channels or x.shape[2:] != (config.input_size,) * 2:
        raise L.ShapeError(f"input shape {x.shape} does not match the network contract")
    caches = []
    i = 0
    for layer in config.layers():
        kind = layer[0]
        if kind == "conv":
            x, c = L.conv2d_forward(x, params[f"conv{i}.w"], params[f"conv{i}.b"], layer[3])
            i += 1
        elif kind == "relu":
            x, c = L.relu_forward(x)
        elif kind == "lrn":
            x, c = L.lrn_forward(x, config.lrn_size, config.lrn_alpha, config.lrn_beta, config.lrn_k)
        elif kind == "pool":
            x, c = L.maxpool_forward(x)
        else:
            c = None
        _check_finite(x, kind)
        caches.append((kind, c))
    x, c = L.upsample_forward(x, params["up.w"], params["up.b"], config.pool_levels, config.total_stride)
    caches.append(("up", c))
    if config.final_activation == "relu":
        x, c = L.relu_forward(x)
        caches.append(("relu", c))
    _check_finite(x, "upsample")
    return x, caches


def tower_backward(dout, caches, config):
    """Gradients of all tower parameters given ``d loss / d descriptors``."""
    grads = {}
    i = sum(1 for layer in config.layers() if layer[0] == "conv")
    g = dout
    for kind, c in reversed(caches):
        if kind == "conv":
            i -= 1
            g, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = L.conv2d_backward(g, c)
        elif kind == "relu":
            g = L.relu_backward(g, c)
        elif kind == "lrn":
            g = L.lrn_backward(g, c)
        elif kind == "pool":
            g = L.maxpool_backward(g, c)
        elif kind == "up":
            g, grads["up.w"], grads["up.b"] = L.upsample_backward(g, c)
    return grads, g


@dataclass
class TrainTask:
    """One classification problem instance on one image.

    ``head`` names the classifier (a segmentation or ``"keypoints"``);
    ``targets`` and ``mask`` are ``(H, W)`` class ids and supervised pixels.
    """

    head: str
    image: int
    targets: np.ndarray
    mask: np.ndarray
    kind: str = field(default="dense")


def ensemble_loss(params, inputs, tasks, config, with_input_grad=False):
    """Sum of per-task mean cross-entropies through the shared tower.

    Parameters
    ----------
    params : dict
    inputs : ndarray, shape (N, channels, H, W)
        Images referenced by ``TrainTask.image``.
    tasks : list of TrainTask

    Returns
    -------
    loss : float
    grads : dict
        Same keys as ``params``; heads absent from the batch get zero gradient.
    per_task : list of float
    """
    if not tasks:
        raise ValueError("empty batch")
    for t in tasks:
        if f"head.{t.head}" not in params:
            raise KeyError(f"unknown task head {t.head!r}")
    used = sorted({t.image for t in tasks})
    slot = {img: j for j, img in enumerate(used)}
    f, caches = tower_forward(params, inputs[used], config)
    df = np.zeros_like(f)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    total, per_task = 0.0, []
    for t in tasks:
        j = slot[t.image]
        beta = params[f"head.{t.head}"]
        fj = f[j:j + 1]
        logits = L.head_forward(fj, beta)
        loss, dlogits = L.softmax_xent(logits, t.targets[None], t.mask[None])
        dfj, dbeta = L.head_backward(dlogits, fj, beta)
        df[j:j + 1] += dfj
        grads[f"head.{t.head}"] += dbeta
        total += loss
        per_task.append(loss)
    tower_grads, dx = tower_backward(df, caches, config)
    for k, v in tower_grads.items():
        grads[k] += v
    if config.weight_decay:
        for k in grads:
            if k.endswith(".w"):
                grads[k] += config.weight_decay * params[k]
                total += 0.5 * config.weight_decay * float((params[k] ** 2).sum())
    if with_input_grad:
        full = np.zeros_like(inputs)
        full[used] = dx
        return total, grads, per_task, full
    return total, grads, per_task


def descriptors(params, inputs, config):
    """Tower output only, ``(B, d, H, W)``."""
    return tower_forward(params, inputs, config)[0]
