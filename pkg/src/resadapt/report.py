"""Run artifacts: CSV metrics, key=value summaries, manifests and figures."""
from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

CSV_HEADER = ("epoch", "split", "loss", "accuracy")
STYLE = {"figure.figsize": (5.0, 3.2), "axes.spines.top": False, "axes.spines.right": False,
         "axes.grid": True, "grid.alpha": 0.3, "font.size": 9, "legend.frameon": False}


def write_csv(path, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for epoch, split, loss, acc in rows:
            w.writerow([epoch, split, f"{loss:.8g}", f"{acc:.8g}"])
    return path


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return [(int(r["epoch"]), r["split"], float(r["loss"]), float(r["accuracy"]))
                for r in csv.DictReader(fh)]


def write_key_values(path, values: dict) -> Path:
    path = Path(path)
    lines = [f"{k} = {_flat(v)}" for k, v in values.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def _flat(v) -> str:
    if isinstance(v, (dict, list, tuple)):
        return json.dumps(v, sort_keys=True, default=str)
    return str(v)


def file_digest(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for q in files:
        h.update(q.name.encode())
        h.update(q.read_bytes())
    return h.hexdigest()


def write_manifest(out_dir, command: str, config: dict, inputs: dict | None = None,
                   outputs: list | None = None) -> Path:
    """Resolved config, seeds and input digests; enough to replay the run."""
    manifest = {"command": command, "config": config,
                "inputs": {k: {"path": str(v), "sha256": file_digest(v)}
                           for k, v in (inputs or {}).items()},
                "outputs": sorted(Path(o).name for o in outputs or [])}
    path = Path(out_dir) / "manifest.json"
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    os.replace(tmp, path)
    return path


def plot_curves(rows, path, title: str = "") -> Path:
    """Loss and accuracy against epoch, one line per split."""
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(8.0, 3.0))
        for split in sorted({r[1] for r in rows}):
            pts = [r for r in rows if r[1] == split]
            ep = [r[0] + 1 for r in pts]
            ax_l.plot(ep, [r[2] for r in pts], marker="o", ms=3, label=split)
            ax_a.plot(ep, [100 * r[3] for r in pts], marker="o", ms=3, label=split)
        ax_l.set(xlabel="epoch", ylabel="cross-entropy")
        ax_a.set(xlabel="epoch", ylabel="top-1 accuracy (%)", ylim=(0, 101))
        ax_a.legend()
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return Path(path)


def plot_budget(budget: dict, path, title: str = "parameters per domain") -> Path:
    """Stacked bars of domain-specific parameters as a fraction of the universal count."""
    domains = sorted(budget["domains"])
    parts = ("adapters", "bn", "head", "filters")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        bottom = [0.0] * len(domains)
        for part in parts:
            vals = [budget["domains"][d].get(part, 0) / budget["universal"] for d in domains]
            if any(vals):
                ax.bar(domains, vals, bottom=bottom, label=part)
                bottom = [b + v for b, v in zip(bottom, vals)]
        ax.set(xlabel="domain", ylabel="fraction of universal params", title=title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return Path(path)


def plot_regimes(results: dict, path, title: str = "") -> Path:
    """Grouped bars: ``results[regime][domain] = accuracy``."""
    regimes = list(results)
    domains = sorted({d for r in results.values() for d in r})
    width = 0.8 / max(1, len(regimes))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for k, regime in enumerate(regimes):
            xs = [i + k * width for i in range(len(domains))]
            ax.bar(xs, [100 * results[regime].get(d, 0.0) for d in domains], width, label=regime)
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(domains))], domains)
        ax.set(xlabel="domain", ylabel="top-1 accuracy (%)", ylim=(0, 125), title=title)
        ax.set_yticks(range(0, 101, 20))
        ax.legend(fontsize=7, ncols=2, loc="upper center")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return Path(path)


def write_run(report, out_dir, stem: str = "run") -> list:
    """``<stem>.csv``, ``<stem>_summary.txt`` and ``<stem>_curves.png`` for one RunReport."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_csv(out / f"{stem}.csv", report.rows),
             write_key_values(out / f"{stem}_summary.txt", report.summary())]
    if report.rows:
        paths.append(plot_curves(report.rows, out / f"{stem}_curves.png",
                                 f"domain {report.domain} ({report.regime})"))
    return paths
