"""Correspondence error metrics: AE, worst AE, recall at radius, cumulative curves."""
import csv
import io
from dataclasses import dataclass

import numpy as np

from .arrays import atomic_write_text

# Published reference values (cm), for report annotation only.
REFERENCE = {
    "CNN-S intra": {"AE": 2.00, "worst AE": 9.98, "10cm-recall": 0.975},
    "CNN-S inter": {"AE": 2.35, "worst AE": 10.12, "10cm-recall": 0.972},
    "CNN intra": {"AE": 5.65, "worst AE": 18.67, "10cm-recall": 0.918},
    "CNN inter": {"AE": 5.73, "worst AE": 18.03, "10cm-recall": 0.917},
    "Chen et al. intra": {"AE": 4.49, "worst AE": 10.96},
    "Chen et al. inter": {"AE": 5.95, "worst AE": 14.18},
}

DEFAULT_RADII = (1.0, 2.0, 5.0, 10.0, 20.0)


def match_errors(matches, ground_truth, target_positions=None, geodesic=None):
    """Per-match error in centimeters between matched and true targets.

    Parameters
    ----------
    matches : CorrespondenceSet
    ground_truth : mapping or int ndarray
        True target id for each source id.  Arrays use -1 for "undefined".
    target_positions : ndarray, shape (n, 3), optional
        Meters; Euclidean error.
    geodesic : callable, optional
        ``(i, j) -> meters`` for index arrays; used instead of positions.
    """
    src = np.asarray(matches.source_ids)
    if isinstance(ground_truth, dict):
        missing = [int(s) for s in src if int(s) not in ground_truth]
        true = np.array([ground_truth.get(int(s), -1) for s in src], dtype=np.int64)
    else:
        gt = np.asarray(ground_truth)
        if len(src) and src.max() >= len(gt):
            raise KeyError("source id beyond ground truth")
        true = gt[src]
        missing = src[true < 0].tolist()
    if missing:
        raise KeyError(f"no ground truth for sources {missing[:5]}")
    tgt = np.asarray(matches.target_ids)
    if geodesic is not None:
        err = np.asarray(geodesic(tgt, true), float)
    elif target_positions is not None:
        p = np.asarray(target_positions, float)
        err = np.linalg.norm(p[tgt] - p[true], axis=1)
    else:
        raise ValueError("need target positions or a geodesic function")
    return 100.0 * err


def recall(errors, radius):
    """Fraction of errors at most ``radius`` centimeters."""
    errors = np.asarray(errors, float)
    if len(errors) == 0:
        raise ValueError("no errors")
    return float(np.count_nonzero(errors <= radius) / len(errors))


def cumulative_curve(errors, step=1.0, max_radius=None):
    """``(radius_cm, fraction)`` sampled every ``step`` cm up to where it reaches 1."""
    errors = np.asarray(errors, float)
    if len(errors) == 0:
        raise ValueError("no errors")
    top = np.ceil(errors.max() / step) * step if max_radius is None else max_radius
    radii = np.arange(0.0, top + step / 2, step)
    s = np.sort(errors)
    frac = np.searchsorted(s, radii, side="right") / len(s)
    return radii, frac


@dataclass
class ErrorReport:
    errors: list  # per-pair arrays (cm)
    names: list
    radii: tuple

    @property
    def pair_ae(self):
        return [float(np.mean(e)) for e in self.errors]

    @property
    def ae(self):
        """Mean over all matches of all pairs."""
        return float(np.mean(np.concatenate(self.errors)))

    @property
    def worst_ae(self):
        return max(self.pair_ae)

    def recall(self, r):
        return recall(np.concatenate(self.errors), r)

    def curve(self, step=1.0):
        return cumulative_curve(np.concatenate(self.errors), step)


def summarize(errors_per_pair, radii=DEFAULT_RADII, names=None):
    """Build an :class:`ErrorReport` from per-pair error lists (cm)."""
    errs = [np.asarray(e, float) for e in errors_per_pair]
    if not errs or any(len(e) == 0 for e in errs):
        raise ValueError("empty error list")
    names = names or [f"pair{i}" for i in range(len(errs))]
    return ErrorReport(errs, list(names), tuple(radii))


def random_baseline_errors(source_ids, ground_truth, target_positions, candidates, rng_seed=0):
    """Errors (cm) of matching each source to a uniformly random candidate target."""
    rng = np.random.default_rng(rng_seed)
    candidates = np.asarray(candidates)
    pick = candidates[rng.integers(len(candidates), size=len(source_ids))]
    true = np.asarray(ground_truth)[np.asarray(source_ids)]
    p = np.asarray(target_positions, float)
    return 100.0 * np.linalg.norm(p[pick] - p[true], axis=1)


def _fmt(x):
    return f"{x:.6f}"


def write_errors_csv(path, report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair", "index", "error_cm"])
    for name, e in zip(report.names, report.errors):
        for i, v in enumerate(e):
            w.writerow([name, i, _fmt(v)])
    atomic_write_text(path, buf.getvalue())


def write_curve_csv(path, report, step=1.0):
    radii, frac = report.curve(step)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["radius_cm", "fraction"])
    for r, f in zip(radii, frac):
        w.writerow([f"{r:.1f}", _fmt(f)])
    atomic_write_text(path, buf.getvalue())


def summary_text(report, title="correspondence", baseline=None):
    """Plain-text table: one row per pair, then the overall AE / worst AE / recall lines."""
    lines = [f"# {title}", f"{'pair':<16}{'AE(cm)':>10}{'matches':>10}"]
    for name, e in zip(report.names, report.errors):
        lines.append(f"{name:<16}{np.mean(e):>10.2f}{len(e):>10d}")
    lines.append(f"AE = {report.ae:.2f}")
    lines.append(f"worst AE = {report.worst_ae:.2f}")
    for r in report.radii:
        lines.append(f"recall@{r:g}cm = {report.recall(r):.3f}")
    if baseline is not None:
        lines.append(f"random baseline AE = {baseline.ae:.2f}")
        lines.append(f"AE ratio (baseline / method) = {baseline.ae / max(report.ae, 1e-12):.2f}")
    lines.append("# published reference (full-scale training on real scans)")
    for name, vals in REFERENCE.items():
        lines.append(name + ": " + ", ".join(f"{k} {v:g}" for k, v in vals.items()))
    return "\n".join(lines) + "\n"
