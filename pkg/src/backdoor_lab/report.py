"""Tables and figures from finished runs. Read-only over run directories."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .errors import ContractError, FittingError
from .evaluation import TradeoffCurve, fit_tradeoff_curve, logistic4, write_tradeoff_csv
from .pipeline import RunManifest


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _as_manifest(m) -> RunManifest:
    return m if isinstance(m, RunManifest) else RunManifest.load(m)


def result_rows(manifests: Sequence[RunManifest]) -> List[Dict[str, object]]:
    rows = []
    for m in manifests:
        cfg = m.config()
        for which in ("teacher", "student"):
            rep = m.report(which)
            if rep is None:
                continue
            row = {"run": cfg.name, "seed": cfg.seed, "attack": cfg.attack.kind,
                   "trigger": rep.metadata.get("trigger"),
                   "method": "backdoored" if which == "teacher" else cfg.erase.method}
            row.update({k: v for k, v in rep.csv_row().items() if k not in ("model", "trigger", "seed")})
            rows.append(row)
    return rows


def results_table(rows) -> str:
    """Markdown with one row per (attack, trigger) and ACC / ASR column
    pairs per method, averaged over seeds."""
    methods = list(dict.fromkeys(r["method"] for r in rows))
    cells = defaultdict(lambda: defaultdict(list))
    for r in rows:
        cells[(r["attack"], r["trigger"])][r["method"]].append((r["acc"], r.get("asr_x1", float("nan"))))
    head = ["attack", "trigger"] + [f"{m} {c}" for m in methods for c in ("ACC", "ASR")]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for (attack, trig), per in cells.items():
        vals = []
        for m in methods:
            if per[m]:
                a = np.mean([p[0] for p in per[m]]) * 100
                s = np.mean([p[1] for p in per[m]]) * 100
                vals += [f"{a:.2f}", f"{s:.2f}"]
            else:
                vals += ["-", "-"]
        lines.append("| " + " | ".join([str(attack), str(trig)] + vals) + " |")
    return "\n".join(lines) + "\n"


def write_rows_csv(rows, path) -> Path:
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    return Path(path)


# ---------------------------------------------------------------------------
# figures


def plot_activation_boxplots(manifests: Sequence[RunManifest], path) -> Path:
    plt = _plt()
    keys = sorted({k for m in manifests for w in ("teacher", "student") if m.report(w)
                   for k in m.report(w).activation_diffs})
    fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 3.5), squeeze=False)
    for ax, key in zip(axes[0], keys):
        stats, labels = [], []
        for m in manifests:
            cfg = m.config()
            for w in ("teacher", "student"):
                rep = m.report(w)
                if rep is None or key not in rep.activation_diffs:
                    continue
                s = rep.activation_diffs[key]
                # the summary is stored, not the samples, so whiskers span min..max
                stats.append({"med": s["median"], "q1": s["q1"], "q3": s["q3"],
                              "whislo": s["min"], "whishi": s["max"], "fliers": []})
                labels.append(f"{cfg.name}\n{'backdoored' if w == 'teacher' else cfg.erase.method}")
        ax.bxp(stats, showfliers=False)
        ax.set_xticks(range(1, len(labels) + 1), labels, fontsize=7)
        ax.set_title(key)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_lambda_sweep(manifests: Sequence[RunManifest], path, key: str = "fc/l1") -> Path:
    plt = _plt()
    pts = []
    for m in manifests:
        rep = m.report("student")
        if rep is None:
            continue
        lam = m.config().erase.dhbe.lam
        diff = rep.activation_diffs.get(key, {}).get("median", np.nan)
        pts.append((lam, rep.acc, rep.asr_by_amplification.get(1, np.nan), diff))
    pts.sort()
    lam = [p[0] for p in pts]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    for ax, col, name in zip(axes, (1, 2, 3), ("ACC", "ASR", f"activation diff ({key}, median)")):
        ax.plot(lam, [p[col] for p in pts], marker="o")
        ax.set_xlabel("lambda")
        ax.set_title(name)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_tradeoff(points_by_method: Dict[str, list], path) -> Path:
    """Scatter of (ACC, ASR) per method with a fitted logistic overlay."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 4))
    for method, pts in points_by_method.items():
        acc = np.array([p[1] for p in pts])
        asr = np.array([p[2] for p in pts])
        sc = ax.scatter(acc * 100, asr * 100, label=method, s=18)
        try:
            curve = fit_tradeoff_curve(pts, method)
        except FittingError:
            continue
        grid = np.linspace(acc.min(), acc.max(), 200)
        ax.plot(grid * 100, logistic4(grid, *curve.params) * 100, color=sc.get_facecolor()[0])
    ax.set_xlabel("ACC (%)")
    ax.set_ylabel("ASR (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def tradeoff_points(manifests: Sequence[RunManifest]) -> Dict[str, list]:
    out: Dict[str, list] = defaultdict(list)
    for m in manifests:
        cfg = m.config()
        rep = m.report("student")
        if rep is None or cfg.tags.get("sweep") != "tradeoff":
            continue
        out[cfg.erase.method].append((float(cfg.tags["lr"]), rep.acc, rep.asr_by_amplification.get(1, np.nan)))
    return dict(out)


def emit_report(manifests, out_dir, plots: bool = True) -> Dict[str, Path]:
    """Write results.csv / results.md and, when the runs support them, the
    activation boxplot, lambda-sweep and trade-off figures."""
    manifests = [_as_manifest(m) for m in manifests]
    if not manifests:
        raise ContractError("emit_report needs at least one manifest")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = result_rows(manifests)
    files = {"csv": write_rows_csv(rows, out / "results.csv")}
    (out / "results.md").write_text(results_table(rows))
    files["markdown"] = out / "results.md"
    if not plots:
        return files
    if any(m.report("teacher") and m.report("teacher").activation_diffs for m in manifests):
        files["boxplot"] = plot_activation_boxplots(manifests, out / "activation_diffs.png")
    lam_runs = [m for m in manifests if m.config().tags.get("sweep") == "lambda"]
    if len(lam_runs) >= 2:
        files["lambda"] = plot_lambda_sweep(lam_runs, out / "lambda_sweep.png")
    pts = tradeoff_points(manifests)
    if pts:
        files["tradeoff"] = plot_tradeoff(pts, out / "tradeoff.png")
        curves = []
        for method, p in pts.items():
            try:
                curves.append(fit_tradeoff_curve(p, method))
            except FittingError:
                curves.append(TradeoffCurve(p, method_name=method))
        files["tradeoff_csv"] = write_tradeoff_csv(curves, out / "tradeoff.csv")
    return files
