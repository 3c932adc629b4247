"""Per-patient and dataset-level explanation artifacts built from attribution maps.

Net, positive and negative importances are all divided by the same
normaliser (the L1 norm of the per-predictor net sums), so ``net = positive +
negative`` holds after normalisation as well as before.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from mortnet.attribution import AttributionMap
from mortnet.ingest import FEATURE_NAMES, SPEC_BY_NAME

SCHEMA_VERSION = 1
NORMALIZATION = "l1 norm of per-predictor net sums (shared by net/positive/negative)"
FORMATS = ("json", "csv", "svg")


@dataclass
class PosNegSplit:
    positive: np.ndarray
    negative: np.ndarray
    feature_names: tuple[str, ...] = FEATURE_NAMES
    patient_id: str | None = None

    @property
    def net(self) -> np.ndarray:
        return self.positive + self.negative


@dataclass
class PredictorSummary:
    net_importance: np.ndarray
    positive_importance: np.ndarray
    negative_importance: np.ndarray
    raw_net: np.ndarray
    norm: float
    patient_id: str | None = None
    probability: float | None = None
    feature_names: tuple[str, ...] = FEATURE_NAMES


@dataclass
class HourlyGrid:
    grid: np.ndarray
    feature_names: tuple[str, ...] = FEATURE_NAMES
    patient_id: str | None = None

    def to_dict(self) -> dict:
        return {"schema": f"mortnet.hourly/v{SCHEMA_VERSION}", "patient_id": self.patient_id,
                "feature_names": list(self.feature_names), "hours": list(range(self.grid.shape[1])),
                "grid": self.grid.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "HourlyGrid":
        return cls(np.array(d["grid"], dtype=np.float64), tuple(d["feature_names"]), d.get("patient_id"))


@dataclass
class DatasetImportanceStats:
    """``stats[cls][sign][statistic]`` is a per-predictor array.

    ``cls`` is the true label (0/1), ``sign`` is ``positive``/``negative`` and
    statistic is one of ``whisker_low, q1, median, q3, whisker_high, mean``.
    """

    stats: dict[int, dict[str, dict[str, np.ndarray]]]
    counts: dict[int, int]
    feature_names: tuple[str, ...] = FEATURE_NAMES


STATISTICS = ("whisker_low", "q1", "median", "q3", "whisker_high", "mean")


def _check_channels(amap: AttributionMap, feature_names):
    c = np.asarray(amap.contributions)
    if c.ndim != 2 or c.shape[0] != len(feature_names):
        raise ValueError(f"map has shape {c.shape}; expected {len(feature_names)} channels")
    return c


def pos_neg_split(amap: AttributionMap, feature_names=FEATURE_NAMES) -> PosNegSplit:
    c = _check_channels(amap, feature_names)
    return PosNegSplit(np.where(c > 0, c, 0.0).sum(axis=1), np.where(c < 0, c, 0.0).sum(axis=1),
                       tuple(feature_names), amap.patient_id)


def marginal_importance(amap: AttributionMap, feature_names=FEATURE_NAMES,
                        probability: float | None = None) -> PredictorSummary:
    """Sum each predictor over the hours, then L1-normalise across predictors."""
    split = pos_neg_split(amap, feature_names)
    raw = split.net
    norm = float(np.abs(raw).sum())
    scale = 1.0 / norm if norm > 0 else 0.0
    if probability is None and amap.target == "probability":
        probability = amap.actual_output
    pos, neg = split.positive * scale, split.negative * scale
    # net is formed from the scaled parts so pos + neg == net holds bit for bit
    return PredictorSummary(pos + neg, pos, neg, raw, norm, amap.patient_id, probability,
                            tuple(feature_names))


def hourly_importance(amap: AttributionMap, feature_names=FEATURE_NAMES) -> HourlyGrid:
    c = _check_channels(amap, feature_names)
    return HourlyGrid(np.array(c, dtype=np.float64), tuple(feature_names), amap.patient_id)


def _five_numbers(values: np.ndarray) -> dict[str, np.ndarray]:
    """Column-wise box statistics; whiskers reach the most extreme points within 1.5 IQR."""
    q1, med, q3 = np.percentile(values, [25, 50, 75], axis=0)
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside_lo = np.where(values >= lo_fence, values, np.inf).min(axis=0)
    inside_hi = np.where(values <= hi_fence, values, -np.inf).max(axis=0)
    return {"whisker_low": inside_lo, "q1": q1, "median": med, "q3": q3,
            "whisker_high": inside_hi, "mean": values.mean(axis=0)}


def dataset_importance(maps: Sequence[AttributionMap], labels, feature_names=FEATURE_NAMES,
                       min_per_class: int = 5) -> DatasetImportanceStats:
    """Per-class box statistics of normalised positive and negative importance.

    Grouping uses the true labels passed in, never the model's predictions.
    """
    labels = np.asarray(labels).astype(int)
    if len(labels) != len(maps):
        raise ValueError("one label per map is required")
    summaries = [marginal_importance(m, feature_names) for m in maps]
    pos = np.stack([s.positive_importance for s in summaries]) if summaries else np.empty((0, 0))
    neg = np.stack([s.negative_importance for s in summaries]) if summaries else np.empty((0, 0))
    stats, counts = {}, {}
    for cls in (0, 1):
        sel = labels == cls
        counts[cls] = int(sel.sum())
        if counts[cls] < min_per_class:
            raise ValueError(f"class {cls} has {counts[cls]} patients; need at least {min_per_class}")
        stats[cls] = {"positive": _five_numbers(pos[sel]), "negative": _five_numbers(neg[sel])}
    return DatasetImportanceStats(stats, counts, tuple(feature_names))


# ---------------------------------------------------------------------------
# serialisation


def _label(name: str) -> str:
    spec = SPEC_BY_NAME.get(name)
    return spec.label if spec is not None and spec.label else name


def to_dict(obj) -> dict:
    if isinstance(obj, PredictorSummary):
        return {"schema": f"mortnet.marginal/v{SCHEMA_VERSION}", "normalization": NORMALIZATION,
                "patient_id": obj.patient_id, "probability": obj.probability,
                "feature_names": list(obj.feature_names), "norm": obj.norm,
                "net": obj.net_importance.tolist(), "positive": obj.positive_importance.tolist(),
                "negative": obj.negative_importance.tolist(), "raw_net": obj.raw_net.tolist()}
    if isinstance(obj, HourlyGrid):
        return obj.to_dict()
    if isinstance(obj, PosNegSplit):
        return {"schema": f"mortnet.posneg/v{SCHEMA_VERSION}", "patient_id": obj.patient_id,
                "feature_names": list(obj.feature_names), "positive": obj.positive.tolist(),
                "negative": obj.negative.tolist(), "net": obj.net.tolist()}
    if isinstance(obj, DatasetImportanceStats):
        return {"schema": f"mortnet.dataset/v{SCHEMA_VERSION}", "normalization": NORMALIZATION,
                "feature_names": list(obj.feature_names),
                "counts": {str(k): v for k, v in obj.counts.items()},
                "stats": {str(c): {s: {k: v.tolist() for k, v in d.items()} for s, d in per.items()}
                          for c, per in obj.stats.items()}}
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _csv_rows(obj) -> list[list]:
    names = list(obj.feature_names)
    if isinstance(obj, PredictorSummary):
        head = ["quantity", *names]
        return [head, ["net", *obj.net_importance], ["positive", *obj.positive_importance],
                ["negative", *obj.negative_importance], ["raw_net", *obj.raw_net]]
    if isinstance(obj, HourlyGrid):
        return [["hour", *names]] + [[h, *obj.grid[:, h]] for h in range(obj.grid.shape[1])]
    if isinstance(obj, PosNegSplit):
        return [["quantity", *names], ["positive", *obj.positive], ["negative", *obj.negative],
                ["net", *obj.net]]
    if isinstance(obj, DatasetImportanceStats):
        rows = [["class", "sign", "statistic", *names]]
        for cls, per in obj.stats.items():
            for sign, d in per.items():
                for stat in STATISTICS:
                    rows.append([cls, sign, stat, *d[stat]])
        return rows
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _csv_text(obj) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in _csv_rows(obj):
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def read_csv_table(text: str) -> tuple[list[str], list[list[str]]]:
    rows = list(csv.reader(io.StringIO(text)))
    return rows[0], rows[1:]


NEUTRAL = (0xDD, 0xDD, 0xDD)
RED = (0xB2, 0x18, 0x2B)
BLUE = (0x21, 0x66, 0xAC)


def diverging_color(value: float, vmax: float) -> str:
    """Gray at zero, red for positive (death evidence), blue for negative (survival evidence)."""
    t = 0.0 if vmax <= 0 else max(-1.0, min(1.0, value / vmax))
    end = RED if t > 0 else BLUE
    a = abs(t)
    rgb = [round(n + (e - n) * a) for n, e in zip(NEUTRAL, end)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _svg(width, height, body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">')
    return "\n".join([head, f"<title>{_esc(title)}</title>",
                      f'<rect width="{width}" height="{height}" fill="#ffffff"/>', *body, "</svg>\n"])


def _esc(s) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _svg_bars(names, values, title, vmax=None) -> str:
    row, label_w, bar_w = 18, 140, 300
    vmax = float(np.max(np.abs(values))) if vmax is None else vmax
    mid = label_w + bar_w / 2
    body = [f'<text x="4" y="14" font-weight="bold">{_esc(title)}</text>']
    for i, (name, v) in enumerate(zip(names, values)):
        y = 24 + i * row
        length = 0.0 if vmax <= 0 else (bar_w / 2) * abs(v) / vmax
        x0 = mid if v >= 0 else mid - length
        body.append(f'<rect x="0" y="{y}" width="{label_w + bar_w + 80}" height="{row - 2}" '
                    f'fill="{diverging_color(v, vmax)}" fill-opacity="0.35"/>')
        body.append(f'<text x="4" y="{y + 12}">{_esc(_label(name))}</text>')
        body.append(f'<rect x="{x0:.2f}" y="{y + 3}" width="{length:.2f}" height="{row - 8}" '
                    f'fill="{diverging_color(v, vmax)}"/>')
        body.append(f'<text x="{label_w + bar_w + 4}" y="{y + 12}">{v:+.4f}</text>')
    body.append(f'<line x1="{mid}" y1="22" x2="{mid}" y2="{24 + len(names) * row}" stroke="#555"/>')
    return _svg(label_w + bar_w + 80, 30 + len(names) * row, body, title)


def _svg_heatmap(grid: np.ndarray, names, title) -> str:
    cell, label_w = 12, 140
    vmax = float(np.max(np.abs(grid))) if grid.size else 0.0
    body = [f'<text x="4" y="14" font-weight="bold">{_esc(title)}</text>']
    for r, name in enumerate(names):
        y = 24 + r * cell
        body.append(f'<text x="4" y="{y + 10}">{_esc(_label(name))}</text>')
        for h in range(grid.shape[1]):
            body.append(f'<rect x="{label_w + h * cell}" y="{y}" width="{cell}" height="{cell}" '
                        f'fill="{diverging_color(float(grid[r, h]), vmax)}"/>')
    for h in range(0, grid.shape[1], 6):
        body.append(f'<text x="{label_w + h * cell}" y="{30 + len(names) * cell + 8}">{h}</text>')
    return _svg(label_w + grid.shape[1] * cell + 10, 50 + len(names) * cell, body, title)


def _svg_posneg(obj: PosNegSplit, title) -> str:
    row, label_w, bar_w = 18, 140, 300
    vmax = float(max(np.max(np.abs(obj.positive)), np.max(np.abs(obj.negative)), 0.0))
    mid = label_w + bar_w / 2
    body = [f'<text x="4" y="14" font-weight="bold">{_esc(title)}</text>']
    for i, name in enumerate(obj.feature_names):
        y = 24 + i * row
        body.append(f'<text x="4" y="{y + 12}">{_esc(_label(name))}</text>')
        for v in (obj.positive[i], obj.negative[i]):
            length = 0.0 if vmax <= 0 else (bar_w / 2) * abs(v) / vmax
            x0 = mid if v >= 0 else mid - length
            color = diverging_color(float(np.sign(v)), 1.0) if v != 0 else diverging_color(0.0, 1.0)
            body.append(f'<rect x="{x0:.2f}" y="{y + 3}" width="{length:.2f}" height="{row - 8}" '
                        f'fill="{color}"/>')
    body.append(f'<line x1="{mid}" y1="22" x2="{mid}" y2="{24 + len(obj.feature_names) * row}" stroke="#555"/>')
    return _svg(label_w + bar_w + 20, 30 + len(obj.feature_names) * row, body, title)


def _svg_dataset(obj: DatasetImportanceStats, title) -> str:
    row, label_w, plot_w = 22, 140, 360
    lo = min(float(np.min(d["whisker_low"])) for per in obj.stats.values() for d in per.values())
    hi = max(float(np.max(d["whisker_high"])) for per in obj.stats.values() for d in per.values())
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    span = hi - lo if hi > lo else 1.0

    def sx(v):
        return label_w + plot_w * (v - lo) / span

    offsets = {(0, "positive"): 2, (0, "negative"): 6, (1, "positive"): 11, (1, "negative"): 15}
    body = [f'<text x="4" y="14" font-weight="bold">{_esc(title)}</text>']
    for i, name in enumerate(obj.feature_names):
        y = 24 + i * row
        body.append(f'<text x="4" y="{y + 13}">{_esc(_label(name))}</text>')
        for (cls, sign), dy in offsets.items():
            d = obj.stats[cls][sign]
            color = diverging_color(1.0 if sign == "positive" else -1.0, 1.0)
            opacity = "1.0" if cls == 1 else "0.5"
            yy = y + dy
            body.append(f'<line x1="{sx(d["whisker_low"][i]):.2f}" y1="{yy + 1.5}" '
                        f'x2="{sx(d["whisker_high"][i]):.2f}" y2="{yy + 1.5}" stroke="#444"/>')
            body.append(f'<rect x="{sx(d["q1"][i]):.2f}" y="{yy}" '
                        f'width="{max(sx(d["q3"][i]) - sx(d["q1"][i]), 0.5):.2f}" height="3" '
                        f'fill="{color}" fill-opacity="{opacity}"/>')
            body.append(f'<line x1="{sx(d["median"][i]):.2f}" y1="{yy - 1}" x2="{sx(d["median"][i]):.2f}" '
                        f'y2="{yy + 4}" stroke="#000"/>')
    zero = sx(0.0)
    body.append(f'<line x1="{zero:.2f}" y1="22" x2="{zero:.2f}" y2="{24 + len(obj.feature_names) * row}" '
                f'stroke="#888" stroke-dasharray="2,2"/>')
    return _svg(label_w + plot_w + 20, 30 + len(obj.feature_names) * row, body, title)


def render(obj, fmt: str, path=None) -> bytes:
    """Serialise a report object as json, csv or svg; identical input gives identical bytes."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; choose from {FORMATS}")
    if fmt == "json":
        text = json.dumps(to_dict(obj), indent=2, sort_keys=True) + "\n"
    elif fmt == "csv":
        text = _csv_text(obj)
    else:
        pid = getattr(obj, "patient_id", None)
        suffix = f" (patient {pid})" if pid else ""
        if isinstance(obj, PredictorSummary):
            text = _svg_bars(obj.feature_names, obj.net_importance, "Marginal predictor importance" + suffix)
        elif isinstance(obj, HourlyGrid):
            text = _svg_heatmap(obj.grid, obj.feature_names, "Predictor importance by hour" + suffix)
        elif isinstance(obj, PosNegSplit):
            text = _svg_posneg(obj, "Positive and negative importance" + suffix)
        elif isinstance(obj, DatasetImportanceStats):
            text = _svg_dataset(obj, "Dataset importance by true class (faded: survived)")
        else:
            raise TypeError(f"cannot render {type(obj).__name__}")
    data = text.encode("utf-8")
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    return data


def map_to_dict(amap: AttributionMap, feature_names=FEATURE_NAMES, label: int | None = None) -> dict:
    return {"schema": f"mortnet.attribution/v{SCHEMA_VERSION}", "patient_id": amap.patient_id,
            "label": label, "target": amap.target, "feature_names": list(feature_names),
            "reference_output": amap.reference_output, "actual_output": amap.actual_output,
            "delta_t": amap.delta_t, "summation_residual": amap.residual,
            "contributions": np.asarray(amap.contributions).tolist()}


def map_from_dict(d: dict) -> tuple[AttributionMap, int | None]:
    amap = AttributionMap(np.array(d["contributions"], dtype=np.float64), d["reference_output"],
                          d["actual_output"], d["delta_t"], d["target"], d.get("patient_id"))
    return amap, d.get("label")
