"""Turn training logs and metric reports into CSV tables and SVG figures."""
from __future__ import annotations

import csv
import json
from pathlib import Path


def read_train_log(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_csv(rows, path):
    keys = list(rows[0]) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def _svg_curves(rows, keys, path, title):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(len(keys), 1, figsize=(6, 1.8 * len(keys)), sharex=True)
    axes = [axes] if len(keys) == 1 else axes
    x = [r.get("epoch", i) for i, r in enumerate(rows)]
    for ax, k in zip(axes, keys):
        ax.plot(x, [r[k] for r in rows], lw=1.2)
        ax.set_ylabel(k, fontsize=8)
    axes[-1].set_xlabel("epoch")
    axes[0].set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def render(path, out_dir, svg=True):
    """Render a ``train_report.jsonl`` or ``metrics_*.json`` file.

    Always writes a CSV into ``out_dir``; training logs also get an SVG, which needs
    matplotlib. Returns the list of written paths.
    """
    path, out = Path(path), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if path.suffix == ".jsonl":
        rows = read_train_log(path)
        csv_path = out / (path.stem + ".csv")
        _write_csv(rows, csv_path)
        written.append(csv_path)
        if svg and rows:
            keys = [k for k in rows[0] if k != "epoch"]
            svg_path = out / (path.stem + ".svg")
            _svg_curves(rows, keys, svg_path, path.stem)
            written.append(svg_path)
    else:
        summary = json.loads(path.read_text(encoding="utf-8"))["summary"]
        rows = [dict(name=summary["name"], **h) for h in summary["horizons"]]
        csv_path = out / (path.stem + ".csv")
        _write_csv(rows, csv_path)
        written.append(csv_path)
    return written
