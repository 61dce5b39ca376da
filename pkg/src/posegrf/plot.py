"""Curve CSV files and static SVG force plots with detected peaks marked."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import UndefinedMetricError, detect_peaks, mean_k_peaks, sequence_rmse  # noqa: E402

CURVE_HEADER = ("frame", "gt_N", "pred_N")
PLOT_PEAKS = 3
_SVG_RC = {"svg.hashsalt": "posegrf", "svg.fonttype": "none", "font.family": "DejaVu Sans"}


class CurveFormatError(ValueError):
    pass


def curve_filename(video, group):
    return f"{video}__{group}.csv"


def write_curve(path, gt, pred):
    gt = np.asarray(gt, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if gt.shape != pred.shape or gt.ndim != 1:
        raise ValueError("gt and pred must be 1-D arrays of equal length")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for i, (g, p) in enumerate(zip(gt, pred)):
            w.writerow([i, repr(float(g)), repr(float(p))])


def write_curves(directory, curves):
    """``curves`` maps video -> group -> (gt_N, pred_N); returns the written paths."""
    paths = []
    for video in sorted(curves):
        for group in sorted(curves[video]):
            path = Path(directory) / curve_filename(video, group)
            write_curve(path, *curves[video][group])
            paths.append(path)
    return paths


def read_curve(path):
    """Return (frames, gt, pred); malformed rows raise CurveFormatError naming the line."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CurveFormatError(f"{path}: empty curve file")
    if tuple(c.strip() for c in rows[0]) != CURVE_HEADER:
        raise CurveFormatError(f"{path}:1: expected header {','.join(CURVE_HEADER)}, got {','.join(rows[0])}")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise CurveFormatError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
        try:
            frame, g, p = int(row[0]), float(row[1]), float(row[2])
        except ValueError:
            raise CurveFormatError(f"{path}:{lineno}: non-numeric value in {row}") from None
        if not (math.isfinite(g) and math.isfinite(p)):
            raise CurveFormatError(f"{path}:{lineno}: non-finite value")
        data.append((frame, g, p))
    if not data:
        raise CurveFormatError(f"{path}: curve file has no data rows")
    arr = np.array(data, dtype=float)
    frames = arr[:, 0].astype(int)
    if np.any(np.diff(frames) <= 0):
        raise CurveFormatError(f"{path}: frame numbers must increase")
    return frames, arr[:, 1], arr[:, 2]


def curve_summary(gt, pred, k=PLOT_PEAKS, min_distance=10):
    """RMSE and mean k-peaks of one curve; k-peaks is None when gt has no peaks."""
    rmse = sequence_rmse(pred[:, None], gt[:, None])
    try:
        kp = mean_k_peaks(pred, gt, k, min_distance)
    except UndefinedMetricError:
        kp = None
    return rmse, kp


def _draw(ax, frames, gt, pred, label, k, min_distance, tag):
    ax.plot(frames, gt, color="black", lw=1.5, label="ground truth", gid=f"{tag}-gt")
    ax.plot(frames, pred, color="tab:red", lw=1.2, ls="--", label=label, gid=f"{tag}-pred")
    for name, sig, color in (("gt", gt, "black"), ("pred", pred, "tab:red")):
        for i, (_, value) in enumerate(detect_peaks(sig, k, min_distance).peaks):
            ax.axhline(value, color=color, lw=0.6, alpha=0.6, gid=f"{tag}-peak-{name}-{i}")
    rmse, kp = curve_summary(gt, pred, k, min_distance)
    kp_text = "n/a" if kp is None else f"{kp:.2f} N"
    ax.text(0.02, 0.97, f"RMSE {rmse:.2f} N\n{k}-peaks {kp_text}", transform=ax.transAxes, va="top",
            fontsize=8, gid=f"{tag}-annotation")
    ax.set_xlabel("frame")
    ax.set_ylabel("force (N)")
    ax.set_title(label, fontsize=9)
    ax.legend(loc="upper right", fontsize=7)
    return rmse, kp


def plot_curves(panels, output, title="", k=PLOT_PEAKS, min_distance=10):
    """Render one SVG with a panel per (label, csv path); returns per-panel (rmse, kpeaks)."""
    if not panels:
        raise ValueError("nothing to plot")
    curves = [(label, read_curve(path)) for label, path in panels]
    with plt.rc_context(_SVG_RC):
        fig, axes = plt.subplots(1, len(curves), figsize=(5.0 * len(curves), 3.5), squeeze=False, sharey=True)
        stats = []
        for i, (ax, (label, (frames, gt, pred))) in enumerate(zip(axes[0], curves)):
            stats.append(_draw(ax, frames, gt, pred, label, k, min_distance, f"panel{i}"))
        if title:
            fig.suptitle(title, fontsize=10)
        fig.tight_layout()
        Path(output).parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(output, format="svg", metadata={"Date": None})
        plt.close(fig)
    return stats


def collect_curves(source):
    """Map curve file name -> path for a CSV file, a directory of CSVs or a run directory."""
    source = Path(source)
    if source.is_file():
        return {source.name: source}
    if (source / "curves").is_dir():
        source = source / "curves"
    if not source.is_dir():
        raise FileNotFoundError(f"no curve files at {source}")
    found = {p.name: p for p in sorted(source.glob("*.csv"))}
    if not found:
        raise FileNotFoundError(f"no curve files in {source}")
    return found


def plot_sources(sources, labels, out_dir, groups=("net",), k=PLOT_PEAKS, min_distance=10):
    """One SVG per curve file; several sources are drawn side by side on matching file names."""
    tables = [collect_curves(s) for s in sources]
    names = sorted(set(tables[0]).intersection(*tables[1:]))
    if len(tables) > 1 and not names:
        raise ValueError("the compared runs share no curve files")
    written = []
    for name in names:
        stem = Path(name).stem
        group = stem.rsplit("__", 1)[-1]
        if groups and "__" in stem and group not in groups:
            continue
        panels = [(label, table[name]) for label, table in zip(labels, tables)]
        out = Path(out_dir) / f"{stem}.svg"
        plot_curves(panels, out, title=stem.replace("__", " / "), k=k, min_distance=min_distance)
        written.append(out)
    if not written:
        raise ValueError(f"no curve files match groups {list(groups)}")
    return written
