"""Stage orchestration: synth, segment, render, train, extract, match, eval, report.

Every stage reads its inputs from the run directory, writes its artifacts
atomically, and records a chained config hash in ``manifest.txt``.  A stage
whose recorded hash matches and whose artifacts all exist is skipped.
"""
import csv
import hashlib
import io
import logging
import os
import time

import numpy as np

from . import correspond as C
from . import descriptor as D
from . import eval_metrics as E
from . import mesh_core as mc
from . import render as rd
from . import synth_body as sb
from . import train as T
from .arrays import atomic_write_text, load_array, load_pfm, save_array, save_pfm
from .config import STAGE_KEYS

log = logging.getLogger("bodycorr")

STAGES = ("synth", "segment", "render", "train", "extract", "match", "eval", "report")


class StageError(RuntimeError):
    pass


# ---------------------------------------------------------------- manifest

class Manifest:
    """``key = value`` records: per-stage hash and seed, per-artifact provenance."""

    def __init__(self, path):
        self.path = path
        self.entries = {}
        if os.path.exists(path):
            with open(path) as fh:
                for line in fh:
                    if "=" in line:
                        k, v = line.split("=", 1)
                        self.entries[k.strip()] = v.strip()

    def stage_hash(self, stage):
        return self.entries.get(f"stage.{stage}.hash")

    def artifacts(self, stage):
        prefix = f"artifact.{stage}."
        return [k[len(prefix):] for k in self.entries if k.startswith(prefix)]

    def record(self, stage, digest, seed, artifacts):
        for k in [k for k in self.entries if k.startswith(f"artifact.{stage}.") or k.startswith(f"stage.{stage}.")]:
            del self.entries[k]
        self.entries[f"stage.{stage}.hash"] = digest
        self.entries[f"stage.{stage}.seed"] = str(seed)
        for a in artifacts:
            self.entries[f"artifact.{stage}.{a}"] = f"config_hash={digest} seed={seed}"
        self.save()

    def save(self):
        order = {s: i for i, s in enumerate(STAGES)}

        def key(k):
            parts = k.split(".")
            return (order.get(parts[1], 99), parts[0] != "stage", k)

        atomic_write_text(self.path, "".join(f"{k} = {self.entries[k]}\n" for k in sorted(self.entries, key=key)))


def stage_hashes(cfg):
    """Chained hash per stage: own config sections plus everything upstream."""
    out, prev = {}, ""
    for s in STAGES:
        own = cfg.section_hash(STAGE_KEYS[s]) if STAGE_KEYS[s] else ""
        prev = hashlib.sha256(f"{prev}|{s}|{own}".encode()).hexdigest()[:16]
        out[s] = prev
    return out


# ---------------------------------------------------------------- helpers

def _p(cfg, *parts):
    return os.path.join(cfg["run.out_dir"], *parts)


def _need(path):
    if not os.path.exists(path):
        raise StageError(f"missing upstream artifact {path}")
    return path


def pose_names(cfg):
    return [f"train{i}" for i in range(cfg["poses.train"])] + [f"heldout{j}" for j in range(cfg["poses.heldout"])]


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write_kv(path, pairs):
    atomic_write_text(path, "".join(f"{k} = {v}\n" for k, v in pairs))


def _read_kv(path):
    out = {}
    with open(_need(path)) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------- stages

def stage_synth(cfg):
    seed = cfg["run.seed"]
    spec = sb.BodySpec(density=cfg["body.density"], shape_variation=cfg["body.shape_variation"], rng_seed=seed)
    mesh, binding = sb.generate_body(spec)
    kp = sb.keypoints(mesh, binding)
    rng = np.random.default_rng(seed)
    poses = [sb.Pose()] + [sb.random_pose(rng, cfg["poses.scale"]) for _ in range(cfg["poses.train"] - 1)]
    poses += [sb.random_pose(rng, cfg["poses.scale"]) for _ in range(cfg["poses.heldout"])]
    out = ["rest.obj", "keypoints.txt"]
    mc.save_mesh(_p(cfg, "synth", "rest.obj"), mesh)
    sb.save_keypoints(_p(cfg, "synth", "keypoints.txt"), kp)
    for name, pose in zip(pose_names(cfg), poses):
        sb.save_pose(_p(cfg, "synth", f"{name}_pose.txt"), pose)
        mc.save_mesh(_p(cfg, "synth", f"{name}.obj"), sb.pose_body(mesh, binding, pose))
        out += [f"{name}_pose.txt", f"{name}.obj"]
    log.info("synth: %d vertices, %d poses", mesh.n_vertices, len(poses))
    return [os.path.join("synth", a) for a in out]


def stage_segment(cfg):
    mesh = mc.load_mesh(_need(_p(cfg, "synth", "rest.obj")))
    seed = cfg["run.seed"]
    cands = [mc.random_segmentation(mesh, cfg["segment.k"], cfg["segment.initial_seeds"], rng_seed=seed * 1000 + c)
             for c in range(cfg["segment.candidates"])]
    chosen = mc.select_segmentation_set(cands, max_count=cfg["segment.max_count"], rng_seed=seed)
    out = []
    for s, seg in enumerate(chosen):
        mc.save_segmentation(_p(cfg, "segment", f"seg{s}.txt"), seg)
        out.append(f"seg{s}.txt")
    _write_kv(_p(cfg, "segment", "set.txt"), [
        ("count", len(chosen)), ("k", cfg["segment.k"]),
        ("candidate_indices", " ".join(str(i) for i in chosen.candidate_indices)),
        ("intersection_regions", chosen.intersection_region_count),
        ("files", " ".join(out)),
    ])
    log.info("segment: %d segmentations, %d intersection regions", len(chosen), chosen.intersection_region_count)
    return [os.path.join("segment", a) for a in out + ["set.txt"]]


def load_segmentations(cfg):
    info = _read_kv(_p(cfg, "segment", "set.txt"))
    return [mc.load_segmentation(_need(_p(cfg, "segment", f))) for f in info["files"].split()]


def cameras_for(cfg, rest, posed):
    radius = rd.default_radius(np.ptp(rest.vertices[:, 1]), cfg["render.fov"], cfg["render.body_fraction"])
    center = (posed.vertices.min(axis=0) + posed.vertices.max(axis=0)) / 2
    size = cfg["render.size"]
    return rd.sample_viewpoints(cfg["render.views"], radius, center, rng_seed=cfg["run.seed"],
                                width=size, height=size, fov=cfg["render.fov"])


def stage_render(cfg):
    rest = mc.load_mesh(_need(_p(cfg, "synth", "rest.obj")))
    kp = sb.load_keypoints(_need(_p(cfg, "synth", "keypoints.txt")))
    segs = load_segmentations(cfg)
    out = []
    for pi, name in enumerate(pose_names(cfg)):
        posed = mc.load_mesh(_need(_p(cfg, "synth", f"{name}.obj")))
        vid, labels, kp_rows = [], [], []
        for v, cam in enumerate(cameras_for(cfg, rest, posed)):
            r = rd.rasterize_depth(posed, cam, segs, kp)
            img = r.image
            if cfg["render.noise"] > 0:
                img = rd.add_salt_pepper(img, cfg["render.noise"], rng_seed=cfg["run.seed"] * 100_000 + pi * 1000 + v)
            save_pfm(_p(cfg, "render", f"{name}_view{v}_depth.pfm"), img.depth)
            out.append(f"{name}_view{v}_depth.pfm")
            vid.append(r.buffers.vertex_id)
            labels.extend(r.labels)
            kp_rows += [(v, k, row, col) for k, row, col in r.keypoint_pixels]
        save_array(_p(cfg, "render", f"{name}_vertex.bin"), np.stack(vid, axis=2))
        save_array(_p(cfg, "render", f"{name}_labels.bin"), np.stack(labels, axis=2))
        atomic_write_text(_p(cfg, "render", f"{name}_keypoints.csv"), _csv_text(["view", "keypoint", "row", "col"], kp_rows))
        out += [f"{name}_{s}" for s in ("vertex.bin", "labels.bin", "keypoints.csv")]
    log.info("render: %d poses x %d views at %dpx", len(pose_names(cfg)), cfg["render.views"], cfg["render.size"])
    return [os.path.join("render", a) for a in out]


class PoseRenders:
    """Rendered views of one pose loaded back from disk."""

    def __init__(self, cfg, name, n_segs):
        vid = load_array(_need(_p(cfg, "render", f"{name}_vertex.bin")))
        labels = load_array(_need(_p(cfg, "render", f"{name}_labels.bin")))
        V = vid.shape[2]
        self.vertex_id = np.moveaxis(vid, 2, 0)
        self.mask = self.vertex_id >= 0
        self.depth = np.stack([load_pfm(_need(_p(cfg, "render", f"{name}_view{v}_depth.pfm"))) for v in range(V)])
        H, W = self.depth.shape[1:]
        self.labels = np.moveaxis(labels, 2, 0).reshape(V, n_segs, H, W)
        self.keypoints = [[] for _ in range(V)]
        with open(_need(_p(cfg, "render", f"{name}_keypoints.csv")), newline="") as fh:
            for row in list(csv.reader(fh))[1:]:
                v, k, r, c = (int(x) for x in row)
                self.keypoints[v].append((k, r, c))

    def __len__(self):
        return len(self.depth)

    def images(self):
        return [rd.normalize_depth(rd.DepthImage(d, m)) if m.any() else rd.DepthImage(np.zeros_like(d), m)
                for d, m in zip(self.depth, self.mask)]

    def buffers(self):
        z = np.zeros(self.vertex_id.shape[1:] + (3,))
        return [rd.RenderBuffers(v, v, z, z) for v in self.vertex_id]


def training_set(cfg, names=None, seg_subset=None):
    segs = load_segmentations(cfg)
    names = names or [n for n in pose_names(cfg) if n.startswith("train")]
    depth, mask, labels, kps = [], [], [], []
    for name in names:
        pr = PoseRenders(cfg, name, len(segs))
        for img, lab, kp in zip(pr.images(), pr.labels, pr.keypoints):
            if not img.mask.any():
                continue
            depth.append(img.depth)
            mask.append(img.mask)
            labels.append(lab if seg_subset is None else lab[list(seg_subset)])
            kps.append(kp)
    chosen = segs if seg_subset is None else [segs[s] for s in seg_subset]
    return T.TrainingSet(np.array(depth), np.array(mask), np.array(labels), kps, [s.k for s in chosen],
                         n_keypoints=len(sb.KEYPOINT_NAMES))


def stage_train(cfg):
    data = training_set(cfg)
    net = cfg.net_config()
    t0 = time.perf_counter()
    res = T.train(data, net)
    log.info("train: %d images, %d iterations in %.1fs", len(data.depth), net.iterations, time.perf_counter() - t0)
    T.save_checkpoint(_p(cfg, "train", "net.bin"), res.params, net.hash())
    T.write_loss_log(_p(cfg, "train", "loss.csv"), res.log)
    return ["train/net.bin", "train/loss.csv"]


def load_network(cfg):
    net = cfg.net_config()
    params, h = T.load_checkpoint(_need(_p(cfg, "train", "net.bin")), dtype=net.dtype)
    if h != net.hash():
        raise StageError("checkpoint was trained with a different network config")
    return params, net


def stage_extract(cfg):
    params, net = load_network(cfg)
    rest = mc.load_mesh(_need(_p(cfg, "synth", "rest.obj")))
    n_segs = len(load_segmentations(cfg))
    fields, bufs = [], []
    out = []
    for name in pose_names(cfg):
        pr = PoseRenders(cfg, name, n_segs)
        f = D.extract_batch(params, pr.images(), net)
        if name.startswith("train"):
            fields += f
            bufs += pr.buffers()
        else:
            table = D.per_vertex_descriptors(f, pr.buffers(), rest.n_vertices)
            D.save_vertex_table(_p(cfg, "extract", f"{name}_vertices.bin"), table)
            for v, fv in enumerate(f):
                D.save_field(_p(cfg, "extract", f"{name}_view{v}.bin"), fv)
                out.append(f"{name}_view{v}.bin")
            out.append(f"{name}_vertices.bin")
    ref = D.per_vertex_descriptors(fields, bufs, rest.n_vertices)
    D.save_vertex_table(_p(cfg, "extract", "reference_vertices.bin"), ref)
    log.info("extract: reference covers %d/%d vertices", int(ref.usable.sum()), rest.n_vertices)
    return [os.path.join("extract", a) for a in out + ["reference_vertices.bin"]]


def heldout_names(cfg):
    return [n for n in pose_names(cfg) if n.startswith("heldout")]


def stage_match(cfg):
    rest = mc.load_mesh(_need(_p(cfg, "synth", "rest.obj")))
    ref = D.load_vertex_table(_need(_p(cfg, "extract", "reference_vertices.bin")))
    fcfg = C.FilterConfig(cfg["filter.threshold"])
    out, rows = [], []
    for name in heldout_names(cfg):
        table = D.load_vertex_table(_need(_p(cfg, "extract", f"{name}_vertices.bin")))
        m = C.match_vertices(table, ref)
        C.write_matches_csv(_p(cfg, "match", f"{name}_vertices.csv"), m)
        out.append(f"{name}_vertices.csv")
        for v in range(cfg["render.views"]):
            field = D.load_field(_need(_p(cfg, "extract", f"{name}_view{v}.bin")))
            if not field.mask.any():
                continue
            raw = C.match_pixels(field, ref)
            kept = C.spatial_filter(raw, rest.vertices, fcfg)
            C.write_matches_csv(_p(cfg, "match", f"{name}_view{v}_pixels.csv"), kept)
            out.append(f"{name}_view{v}_pixels.csv")
            rows.append((name, v, len(raw), len(kept)))
    atomic_write_text(_p(cfg, "match", "filter.csv"), _csv_text(["pose", "view", "matched", "kept"], rows))
    return [os.path.join("match", a) for a in out + ["filter.csv"]]


def _geodesic_pairs(mesh):
    def fn(i, j):
        src, inv = np.unique(i, return_inverse=True)
        return mc.geodesic_matrix(mesh, src)[inv, j]
    return fn


def stage_eval(cfg):
    rest = mc.load_mesh(_need(_p(cfg, "synth", "rest.obj")))
    ref = D.load_vertex_table(_need(_p(cfg, "extract", "reference_vertices.bin")))
    geo = _geodesic_pairs(rest) if cfg["eval.geodesic"] else None
    identity = np.arange(rest.n_vertices)
    n_segs = len(load_segmentations(cfg))
    v_err, v_names, b_err, p_err, p_names, metrics = [], [], [], [], [], []
    for name in heldout_names(cfg):
        m = C.read_matches_csv(_need(_p(cfg, "match", f"{name}_vertices.csv")))
        v_err.append(E.match_errors(m, identity, rest.vertices, geodesic=geo))
        v_names.append(name)
        b_err.append(E.random_baseline_errors(m.source_ids, identity, rest.vertices, np.nonzero(ref.usable)[0],
                                              rng_seed=cfg["run.seed"]))
        pr = PoseRenders(cfg, name, n_segs)
        for v in range(len(pr)):
            path = _p(cfg, "match", f"{name}_view{v}_pixels.csv")
            if not pr.mask[v].any():
                continue
            pm = C.read_matches_csv(_need(path), "pixel", "vertex", pr.mask[v].shape)
            p_err.append(E.match_errors(pm, pr.vertex_id[v].ravel(), rest.vertices, geodesic=geo))
            p_names.append(f"{name}/view{v}")
        table = D.load_vertex_table(_p(cfg, "extract", f"{name}_vertices.bin"))
        metrics.append((f"{name}.pose_stability_ratio", f"{D.pose_stability_ratio(table, ref, rng_seed=cfg['run.seed']):.6f}"))
    rho = D.geodesic_rank_correlation(ref, _geodesic_pairs(rest), rng_seed=cfg["run.seed"])
    metrics.insert(0, ("spearman_geodesic_descriptor", f"{rho:.6f}"))
    vertex = E.summarize(v_err, cfg.radii, v_names)
    base = E.summarize(b_err, cfg.radii, v_names)
    pixel = E.summarize(p_err, cfg.radii, p_names) if p_err else None
    E.write_errors_csv(_p(cfg, "eval", "vertex_errors.csv"), vertex)
    E.write_errors_csv(_p(cfg, "eval", "baseline_errors.csv"), base)
    out = ["vertex_errors.csv", "baseline_errors.csv"]
    if pixel is not None:
        E.write_errors_csv(_p(cfg, "eval", "pixel_errors.csv"), pixel)
        out.append("pixel_errors.csv")
    metrics.append(("baseline_over_method_ae", f"{base.ae / max(vertex.ae, 1e-12):.6f}"))
    _write_kv(_p(cfg, "eval", "metrics.txt"), metrics)
    log.info("eval: vertex AE %.2f cm, random AE %.2f cm", vertex.ae, base.ae)
    return [os.path.join("eval", a) for a in out + ["metrics.txt"]]


def _read_errors(path):
    with open(_need(path), newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    names, errs = [], {}
    for name, _, e in rows:
        if name not in errs:
            names.append(name)
            errs[name] = []
        errs[name].append(float(e))
    return names, [np.array(errs[n]) for n in names]


def report_tables(cfg):
    """Load evaluation artifacts into ``{label: ErrorReport}``."""
    out = {}
    for label, fname in (("descriptor NN (vertices)", "vertex_errors.csv"),
                         ("descriptor NN + filter (pixels)", "pixel_errors.csv"),
                         ("random matching (vertices)", "baseline_errors.csv")):
        path = _p(cfg, "eval", fname)
        if fname == "pixel_errors.csv" and not os.path.exists(path):
            continue
        names, errs = _read_errors(path)
        out[label] = E.summarize(errs, cfg.radii, names)
    return out


def stage_report(cfg):
    tables = report_tables(cfg)
    metrics = _read_kv(_p(cfg, "eval", "metrics.txt"))
    radii = cfg.radii
    rows = [[label, f"{r.ae:.4f}", f"{r.worst_ae:.4f}"] + [f"{r.recall(x):.4f}" for x in radii]
            for label, r in tables.items()]
    header = ["method", "AE_cm", "worst_AE_cm"] + [f"recall@{x:g}cm" for x in radii]
    atomic_write_text(_p(cfg, "report", "report.csv"), _csv_text(header, rows))
    out = ["report.csv"]
    for label, slug in (("descriptor NN (vertices)", "vertices"), ("descriptor NN + filter (pixels)", "pixels"),
                        ("random matching (vertices)", "baseline")):
        if label in tables:
            E.write_curve_csv(_p(cfg, "report", f"curve_{slug}.csv"), tables[label])
            out.append(f"curve_{slug}.csv")
    lines = ["Correspondence report", "=" * 21, ""]
    lines.append(f"{'method':<34}{'AE':>8}{'worst AE':>10}" + "".join(f"{'R@%gcm' % x:>10}" for x in radii))
    for label, r in tables.items():
        lines.append(f"{label:<34}{r.ae:>8.2f}{r.worst_ae:>10.2f}" + "".join(f"{r.recall(x):>10.3f}" for x in radii))
    lines.append("")
    lines += [f"{k} = {v}" for k, v in metrics.items()]
    lines.append("")
    lines.append("Published reference values (full-scale training on real scans, not comparable):")
    for name, vals in E.REFERENCE.items():
        lines.append(f"  {name}: " + ", ".join(f"{k} {v:g}" for k, v in vals.items()))
    atomic_write_text(_p(cfg, "report", "summary.txt"), "\n".join(lines) + "\n")
    out.append("summary.txt")
    return [os.path.join("report", a) for a in out]


STAGE_FUNCS = {
    "synth": stage_synth, "segment": stage_segment, "render": stage_render, "train": stage_train,
    "extract": stage_extract, "match": stage_match, "eval": stage_eval, "report": stage_report,
}


def run_stage(stage, cfg, force=False):
    """Run one stage unless its manifest record is current.  Returns True if it ran."""
    if stage not in STAGE_FUNCS:
        raise StageError(f"unknown stage {stage!r}")
    os.makedirs(cfg["run.out_dir"], exist_ok=True)
    atomic_write_text(_p(cfg, "config.txt"), cfg.dump())
    manifest = Manifest(_p(cfg, "manifest.txt"))
    digest = stage_hashes(cfg)[stage]
    recorded = manifest.stage_hash(stage)
    if not force and recorded == digest:
        arts = manifest.artifacts(stage)
        if arts and all(os.path.exists(_p(cfg, a)) for a in arts):
            log.info("%s: up to date", stage)
            return False
    if recorded is not None and recorded != digest:
        log.warning("%s: stale artifacts (config hash %s, now %s); recomputing", stage, recorded, digest)
    t0 = time.perf_counter()
    artifacts = STAGE_FUNCS[stage](cfg)
    manifest = Manifest(_p(cfg, "manifest.txt"))
    manifest.record(stage, digest, cfg["run.seed"], artifacts)
    log.info("%s: done in %.1fs", stage, time.perf_counter() - t0)
    return True


def run_all(cfg, force=False):
    return [s for s in STAGES if run_stage(s, cfg, force)]
