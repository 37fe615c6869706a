"""Endpoint error and spherical distance on equirect flow, plus tables and heatmaps."""
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import projections as pj
from .flowfield import field_endpoints
from .sphere import TWO_PI, great_circle_angle, wrap_delta_theta

CSV_FIELDS = ("method", "dataset", "sd_mean", "epe_mean", "sd_weighted", "epe_weighted", "n_valid")
AVERAGE = "Average"


def _check_pair(pred, gt):
    if pred.spec != gt.spec:
        raise ValueError(f"spec mismatch: {pred.spec} vs {gt.spec}")
    if pred.spec.kind != pj.EQUIRECT:
        raise ValueError("metrics are defined on equirect fields; reproject first")


def epe_map(pred, gt):
    """Per-pixel endpoint error in equirect pixels (longitude difference taken the short way)."""
    _check_pair(pred, gt)
    W, H = pred.spec.width, pred.spec.height
    du = wrap_delta_theta(pred.u - gt.u) * W / TWO_PI
    dv = (pred.v - gt.v) * H / np.pi
    return np.hypot(du, dv)


def sd_map(pred, gt):
    """Per-pixel great-circle distance between flow endpoints, scaled to pixels by W / 2pi."""
    _check_pair(pred, gt)
    ep, _, _ = field_endpoints(pred)
    eg, _, _ = field_endpoints(gt)
    return great_circle_angle(ep, eg) * pred.spec.width / TWO_PI


def chart_epe_map(pred, gt):
    """Debug only: endpoint error in the native chart pixels of a shared non-equirect spec."""
    if pred.spec != gt.spec:
        raise ValueError(f"spec mismatch: {pred.spec} vs {gt.spec}")
    du = pj.wrap_coord_delta(pred.spec, pred.u - gt.u)
    return np.hypot(du, pred.v - gt.v)


def mean(values):
    values = np.asarray(values, dtype=np.float64).ravel()
    return math.fsum(values) / values.size if values.size else float("nan")


def weighted_mean(values, weights):
    values = np.asarray(values, dtype=np.float64).ravel()
    weights = np.asarray(weights, dtype=np.float64).ravel()
    total = math.fsum(weights)
    return math.fsum(values * weights) / total if total > 0 else float("nan")


@dataclass
class EvalReport:
    """Aggregates over pixels valid in both fields (and the optional mask).

    SD and EPE are in equirect pixel units; weighted variants use owned
    solid-angle weights.  Maps are NaN outside the evaluated pixels.
    """

    sd_mean: float
    epe_mean: float
    sd_weighted: float
    epe_weighted: float
    n_valid: int
    n_masked: int
    sd_map: np.ndarray = field(repr=False)
    epe_map: np.ndarray = field(repr=False)
    meta: dict = field(default_factory=dict)

    def row(self, method, dataset):
        return {
            "method": method,
            "dataset": dataset,
            "sd_mean": self.sd_mean,
            "epe_mean": self.epe_mean,
            "sd_weighted": self.sd_weighted,
            "epe_weighted": self.epe_weighted,
            "n_valid": self.n_valid,
        }


def evaluate(pred, gt, mask=None, sd_source=None, epe_source=None):
    """Evaluate ``pred`` against ``gt``.

    ``sd_source`` / ``epe_source`` let a caller score SD and EPE on
    different fields (used for oracle selections made per metric).
    """
    sd_pred = sd_source if sd_source is not None else pred
    epe_pred = epe_source if epe_source is not None else pred
    sel = sd_pred.valid & epe_pred.valid & gt.valid
    if mask is not None:
        sel &= np.asarray(mask, dtype=bool)
    sd = np.where(sel, sd_map(sd_pred, gt), np.nan)
    ep = np.where(sel, epe_map(epe_pred, gt), np.nan)
    wm = pj.solid_angle_weights(gt.spec)
    w = np.where(sel & wm.owned, wm.weights, 0.0)
    return EvalReport(
        sd_mean=mean(sd[sel]),
        epe_mean=mean(ep[sel]),
        sd_weighted=weighted_mean(np.nan_to_num(sd), w),
        epe_weighted=weighted_mean(np.nan_to_num(ep), w),
        n_valid=int(sel.sum()),
        n_masked=int(sel.size - sel.sum()),
        sd_map=sd,
        epe_map=ep,
    )


# ---------------------------------------------------------------------------
# heatmaps


def hot_colormap(x):
    """Black -> red -> yellow -> white for x in [0, 1]."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.clip(3 * x, 0, 1), np.clip(3 * x - 1, 0, 1), np.clip(3 * x - 2, 0, 1)], axis=-1)


def error_map_image(report, which="epe", vmax=None):
    """Heatmap of a report's per-pixel error; NaN pixels are black.

    The normaliser (the map's max unless given) is stored in
    ``report.meta[f"{which}_vmax"]`` and returned alongside the image.
    """
    emap = report.epe_map if which == "epe" else report.sd_map
    finite = np.isfinite(emap)
    if vmax is None:
        vmax = float(emap[finite].max()) if finite.any() else 0.0
    vmax = float(vmax)
    scaled = np.where(finite, emap, 0.0) / vmax if vmax > 0 else np.zeros(emap.shape)
    report.meta[f"{which}_vmax"] = vmax
    return hot_colormap(scaled), vmax


# ---------------------------------------------------------------------------
# comparison tables


_MEANS = ("sd_mean", "epe_mean", "sd_weighted", "epe_weighted")


def pool_rows(rows):
    """Merge rows sharing (method, dataset): means are averaged, pixel counts summed."""
    groups = {}
    for r in rows:
        groups.setdefault((r["method"], r["dataset"]), []).append(r)
    out = []
    for (method, dataset), grp in groups.items():
        row = {"method": method, "dataset": dataset, "n_valid": sum(r["n_valid"] for r in grp)}
        for key in _MEANS:
            row[key] = math.fsum(r[key] for r in grp) / len(grp)
        out.append(row)
    return out


def add_averages(rows):
    """Append an Average row per method that covers several datasets."""
    rows = list(rows)
    methods = list(dict.fromkeys(r["method"] for r in rows))
    for m in methods:
        mine = [r for r in rows if r["method"] == m and r["dataset"] != AVERAGE]
        if len(mine) < 2:
            continue
        avg = pool_rows([dict(r, dataset=AVERAGE) for r in mine])[0]
        rows.append(avg)
    return rows


def table_rows(entries):
    """Rows for ``(method, dataset, report)`` entries, pooled, with Average rows."""
    return add_averages(pool_rows([report.row(method, dataset) for method, dataset, report in entries]))


def table_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: repr(float(r[k])) if k.endswith(("_mean", "_weighted")) else r[k] for k in CSV_FIELDS})
    return buf.getvalue()


def parse_table_csv(text):
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        for k in ("sd_mean", "epe_mean", "sd_weighted", "epe_weighted"):
            r[k] = float(r[k])
        r["n_valid"] = int(r["n_valid"])
        rows.append(r)
    return rows


def table_text(rows, precision=2):
    """Aligned text: one line per method, one "SD/EPE" column per dataset."""
    datasets = list(dict.fromkeys(r["dataset"] for r in rows if r["dataset"] != AVERAGE))
    if any(r["dataset"] == AVERAGE for r in rows):
        datasets.append(AVERAGE)
    methods = list(dict.fromkeys(r["method"] for r in rows))
    cell = {(r["method"], r["dataset"]): f"{r['sd_mean']:.{precision}f}/{r['epe_mean']:.{precision}f}" for r in rows}
    header = ["method (SD/EPE)"] + datasets
    body = [[m] + [cell.get((m, d), "-") for d in datasets] for m in methods]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]

    def fmt(line):
        return "  ".join(s.ljust(w) if i == 0 else s.rjust(w) for i, (s, w) in enumerate(zip(line, widths)))

    return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(line) for line in body]) + "\n"


def compare_table(entries):
    """(csv_text, aligned_text) for ``(method, dataset, report)`` entries."""
    rows = table_rows(entries)
    return table_csv(rows), table_text(rows)
