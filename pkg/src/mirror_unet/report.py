"""Static report emission from a sweep CSV: box-plot tables, version lines, θ table, plots."""
from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as C
from .training import SETTING_LABELS, sweep_grid

log = logging.getLogger(__name__)

ORDER_EPS = 0.005  # half a Dice point on the [0, 1] scale


@dataclass
class ReportBundle:
    out_dir: Path
    files: dict = field(default_factory=dict)
    ordering: dict = field(default_factory=dict)
    missing: list = field(default_factory=list)


def read_sweep(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [r for r in rows if r.get("status", "ok") == "ok" and r.get("dice", "") != ""]


def _shared_key(s: str) -> str:
    return C.format_shared(C.parse_shared(s))


def _shared_order(keys) -> list[str]:
    canon = [C.format_shared(s) for s in C.SHARING_SCHEMES]
    return sorted(keys, key=lambda k: (canon.index(k) if k in canon else len(canon), k))


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _box(values) -> dict:
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"n": len(v), "min": _fmt(v.min()), "q1": _fmt(q1), "median": _fmt(med),
            "q3": _fmt(q3), "max": _fmt(v.max()), "mean": _fmt(v.mean())}


def _write(path: Path, fields, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cell_means(rows) -> dict:
    """Mean Dice over seeds per (version, L, setting)."""
    acc = defaultdict(list)
    for r in rows:
        acc[(r["version"], _shared_key(r["shared"]), r["setting"])].append(float(r["dice"]))
    return {k: float(np.mean(v)) for k, v in acc.items()}


def missing_cells(rows) -> list[tuple]:
    """Grid cells absent from the sweep, for every version that appears in it."""
    present = {(r["version"], _shared_key(r["shared"]), r["setting"]) for r in rows}
    versions = {r["version"] for r in rows}
    expected = [(c.version, C.format_shared(c.shared), c.setting)
                for c in sweep_grid(tuple(v for v in ("v1", "v2", "v3", "v4") if v in versions))]
    return [cell for cell in expected if cell not in present]


def version_ordering(best: dict, eps: float = ORDER_EPS) -> dict:
    """For consecutive versions count the L-sets where the later one is not worse by more than eps."""
    out = {}
    for lo, hi in (("v4", "v1"), ("v1", "v2"), ("v2", "v3")):
        ls = sorted({l for (v, l) in best if v == lo} & {l for (v, l) in best if v == hi})
        if not ls:
            continue
        held = sum(best[(hi, l)] >= best[(lo, l)] - eps for l in ls)
        out[f"{lo}<{hi}"] = f"{held}/{len(ls)} L-sets"
    return out


def emit_report(sweep_csv, out_dir, eps: float = ORDER_EPS, plots: bool = True) -> ReportBundle:
    rows = read_sweep(sweep_csv)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = ReportBundle(out)
    means = cell_means(rows)

    # self-supervision comparison: v1-v3 cells pooled over L, one box per corruption
    by_corr = defaultdict(list)
    for (v, l, s), d in sorted(means.items()):
        if v in ("v1", "v2", "v3"):
            by_corr[s].append(d)
    corr_rows = [{"setting": s, **_box(by_corr[s])} for s in SETTING_LABELS.values() if s in by_corr]
    box_fields = ["n", "min", "q1", "median", "q3", "max", "mean"]
    _write(out / "box_by_corruption.csv", ["setting", *box_fields], corr_rows)

    # θ sensitivity: v4 cells pooled over θ, one box per L
    by_l = defaultdict(list)
    for (v, l, s), d in sorted(means.items()):
        if v == "v4":
            by_l[l].append(d)
    l_rows = [{"shared": l, **_box(by_l[l])} for l in _shared_order(by_l)]
    _write(out / "box_by_shared.csv", ["shared", *box_fields], l_rows)

    # version lines: best setting per (version, L)
    best, best_setting = {}, {}
    for (v, l, s), d in sorted(means.items()):
        if (v, l) not in best or d > best[(v, l)]:
            best[(v, l)], best_setting[(v, l)] = d, s
    line_rows = [{"version": v, "shared": l, "setting": best_setting[(v, l)], "dice": _fmt(best[(v, l)])}
                 for v in sorted({v for v, _ in best}) for l in _shared_order({l for vv, l in best if vv == v})]
    _write(out / "version_lines.csv", ["version", "shared", "setting", "dice"], line_rows)

    # θ table: rows θ setting, columns L
    ls = _shared_order({l for (v, l, s) in means if v == "v4"})
    thetas = [s for s in [f"theta={t:.1f}" for t in C.THETA_SETTINGS[:-1]] + ["learnable"]
              if any((("v4", l, s) in means) for l in ls)]
    theta_rows = [{"setting": s, **{l: _fmt(means[("v4", l, s)]) if ("v4", l, s) in means else "" for l in ls}}
                  for s in thetas]
    _write(out / "theta_table.csv", ["setting", *ls], theta_rows)

    bundle.ordering = version_ordering(best, eps)
    _write(out / "ordering.csv", ["pair", "held"], [{"pair": k, "held": v} for k, v in bundle.ordering.items()])

    bundle.missing = missing_cells(rows)
    manifest = {"missing": [{"version": v, "shared": l, "setting": s} for v, l, s in bundle.missing]}
    (out / "warnings.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if bundle.missing:
        log.warning("%d sweep cells missing; plots are partial (see warnings.json)", len(bundle.missing))

    bundle.files = {n: out / n for n in ("box_by_corruption.csv", "box_by_shared.csv", "version_lines.csv",
                                         "theta_table.csv", "ordering.csv", "warnings.json")}
    if plots:
        bundle.files.update(_plots(out, by_corr, by_l, best))
    return bundle


def _plots(out: Path, by_corr, by_l, best) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = {}
    if by_corr:
        fig, ax = plt.subplots(figsize=(5, 4))
        labels = [s for s in SETTING_LABELS.values() if s in by_corr]
        ax.boxplot([by_corr[s] for s in labels])
        ax.set_xticks(range(1, len(labels) + 1), labels)
        ax.set_ylabel("Dice")
        fig.tight_layout()
        fig.savefig(out / "box_by_corruption.png")
        plt.close(fig)
        files["box_by_corruption.png"] = out / "box_by_corruption.png"
    if by_l:
        fig, ax = plt.subplots(figsize=(7, 4))
        labels = _shared_order(by_l)
        ax.boxplot([by_l[l] for l in labels])
        ax.set_xticks(range(1, len(labels) + 1), labels)
        ax.set_xlabel("shared stages")
        ax.set_ylabel("Dice (v4, pooled over θ)")
        fig.tight_layout()
        fig.savefig(out / "box_by_shared.png")
        plt.close(fig)
        files["box_by_shared.png"] = out / "box_by_shared.png"
    if best:
        fig, ax = plt.subplots(figsize=(7, 4))
        all_l = _shared_order({l for _, l in best})
        for v in sorted({v for v, _ in best}):
            xs = [i for i, l in enumerate(all_l) if (v, l) in best]
            ax.plot(xs, [best[(v, all_l[i])] for i in xs], marker="o", label=v)
        ax.set_xticks(range(len(all_l)), all_l)
        ax.set_xlabel("shared stages")
        ax.set_ylabel("best Dice")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "version_lines.png")
        plt.close(fig)
        files["version_lines.png"] = out / "version_lines.png"
    return files
