"""Result tables and plots from the registry.

The table mirrors the result-table layout: methods as rows, the nine
(W,A) columns in fixed order, best top-1 per cell, DNC/DIV markers, and
dashes where no record exists.
"""

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .quantizers import DISPLAY_NAMES, QuantMethod
from .sweep import PAPER_PAIRS

ROW_ORDER = [QuantMethod.QNN, QuantMethod.DOREFA, QuantMethod.XNORNET,
             QuantMethod.TWN, QuantMethod.TTQ]

BITS_AXIS = [1, 2, 3, 4, 8, 32]


def _column_label(pair):
    return f"W{pair[0]}A{pair[1]}"


def _cell(records):
    """Render the best record of a (method, W, A) group."""
    if not records:
        return "-"
    completed = [r for r in records if r.status == "completed"]
    if completed:
        return f"{max(r.best_top1 for r in completed):.2f}%"
    if any(r.status == "dnc" for r in records):
        return "DNC"
    return "DIV"


def select_records(records, dataset, model):
    return [r for r in records if r.dataset == dataset and r.model == model]


def export_table(records, dataset, model, out_prefix=None):
    """Text table plus a machine-readable CSV; returns the text."""
    rows = select_records(records, dataset, model)
    headers = ["Method"] + [_column_label(p) for p in PAPER_PAIRS]
    lines = []
    csv_rows = []
    for method in ROW_ORDER:
        cells = [DISPLAY_NAMES[method]]
        for w, a in PAPER_PAIRS:
            group = [r for r in rows
                     if r.method == method.value and r.weight_bits == w and r.act_bits == a]
            cells.append(_cell(group))
            for r in group:
                csv_rows.append({
                    "dataset": dataset, "model": model, "method": method.value,
                    "weight_bits": w, "act_bits": a, "status": r.status,
                    "best_top1": r.best_top1, "best_top5": r.best_top5,
                    "run_id": r.run_id,
                })
        lines.append(cells)

    widths = [max(len(str(row[i])) for row in [headers] + lines) for i in range(len(headers))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    text = "\n".join([fmt.format(*headers)] + [fmt.format(*row) for row in lines]) + "\n"

    if out_prefix:
        os.makedirs(os.path.dirname(os.path.abspath(out_prefix)), exist_ok=True)
        with open(out_prefix + ".txt", "w") as f:
            f.write(text)
        with open(out_prefix + ".csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=[
                "dataset", "model", "method", "weight_bits", "act_bits",
                "status", "best_top1", "best_top5", "run_id"])
            writer.writeheader()
            writer.writerows(csv_rows)
    return text


def read_table_csv(path):
    with open(path, newline="") as f:
        out = []
        for row in csv.DictReader(f):
            row["weight_bits"] = int(row["weight_bits"])
            row["act_bits"] = int(row["act_bits"])
            row["best_top1"] = float(row["best_top1"])
            row["best_top5"] = float(row["best_top5"])
            out.append(row)
        return out


def _best_by(records, method, fixed_axis, fixed_value, moving_axis):
    """(bits, top1) points for completed runs along one bit-width axis."""
    points = {}
    for r in records:
        if r.method != method.value or r.status != "completed":
            continue
        if getattr(r, fixed_axis) != fixed_value:
            continue
        b = getattr(r, moving_axis)
        points[b] = max(points.get(b, 0.0), r.best_top1)
    bits = [b for b in BITS_AXIS if b in points]
    return bits, [points[b] for b in bits]


def _save_curve_csv(path, series):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "bits", "best_top1"])
        for method, bits, tops in series:
            for b, t in zip(bits, tops):
                writer.writerow([method, b, t])


def export_plots(records, dataset, model, out_dir):
    """Accuracy curves along each bit axis plus the full W x A grid.

    Writes SVG figures and CSV data files; returns the file list.
    """
    rows = select_records(records, dataset, model)
    os.makedirs(out_dir, exist_ok=True)
    written = []

    curve_specs = [
        ("weights_a32", "act_bits", 32, "weight_bits", "weight bits (A=32)"),
        ("acts_w1", "weight_bits", 1, "act_bits", "activation bits (W=1)"),
    ]
    for stem, fixed_axis, fixed_value, moving_axis, xlabel in curve_specs:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        series = []
        for method in ROW_ORDER:
            bits, tops = _best_by(rows, method, fixed_axis, fixed_value, moving_axis)
            if not bits:
                continue
            xs = [BITS_AXIS.index(b) for b in bits]
            ax.plot(xs, tops, marker="o", label=DISPLAY_NAMES[method])
            series.append((method.value, bits, tops))
        ax.set_xticks(range(len(BITS_AXIS)))
        ax.set_xticklabels([str(b) for b in BITS_AXIS])
        ax.set_xlabel(xlabel)
        ax.set_ylabel("top-1 accuracy [%]")
        ax.set_title(f"{model} / {dataset}")
        if series:
            ax.legend(fontsize=7)
        fig.tight_layout()
        svg = os.path.join(out_dir, f"{dataset}_{model}_{stem}.svg")
        fig.savefig(svg)
        plt.close(fig)
        data = os.path.join(out_dir, f"{dataset}_{model}_{stem}.csv")
        _save_curve_csv(data, series)
        written.extend([svg, data])

    # full W x A grid, one panel per method with any completed grid runs
    for method in (QuantMethod.QNN, QuantMethod.DOREFA):
        grid = np.full((len(BITS_AXIS), len(BITS_AXIS)), np.nan)
        cells = []
        for r in rows:
            if r.method != method.value or r.status != "completed":
                continue
            if r.weight_bits in BITS_AXIS and r.act_bits in BITS_AXIS:
                i = BITS_AXIS.index(r.weight_bits)
                j = BITS_AXIS.index(r.act_bits)
                if np.isnan(grid[i, j]) or r.best_top1 > grid[i, j]:
                    grid[i, j] = r.best_top1
                    cells.append((r.weight_bits, r.act_bits, r.best_top1))
        if not cells:
            continue
        fig, ax = plt.subplots(figsize=(4.5, 4))
        im = ax.imshow(grid, origin="lower", cmap="viridis")
        ax.set_xticks(range(len(BITS_AXIS)))
        ax.set_xticklabels([str(b) for b in BITS_AXIS])
        ax.set_yticks(range(len(BITS_AXIS)))
        ax.set_yticklabels([str(b) for b in BITS_AXIS])
        ax.set_xlabel("activation bits")
        ax.set_ylabel("weight bits")
        ax.set_title(f"{DISPLAY_NAMES[method]}: {model} / {dataset}")
        fig.colorbar(im, ax=ax, label="top-1 [%]")
        fig.tight_layout()
        svg = os.path.join(out_dir, f"{dataset}_{model}_grid_{method.value}.svg")
        fig.savefig(svg)
        plt.close(fig)
        data = os.path.join(out_dir, f"{dataset}_{model}_grid_{method.value}.csv")
        with open(data, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["weight_bits", "act_bits", "best_top1"])
            writer.writerows(sorted(cells))
        written.extend([svg, data])
    return written
