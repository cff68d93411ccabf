"""Report serialization: canonical JSON plus aligned text tables."""
from __future__ import annotations

import csv
import json
from pathlib import Path


def to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _fmt(x):
    return "   -   " if x is None else f"{x:.4f}"


def group_table(report: dict, key: str = "auc_pooled") -> str:
    variants = list(report["variants"])
    header = ["Group"] + variants
    rows = []
    n = len(report["variants"][variants[0]]["groups"])
    for j in range(n):
        label = f"Group {j + 1}"
        rows.append([label] + [_fmt(report["variants"][v]["groups"][j][key]) for v in variants])
    return _align(header, rows)


def user_table(report: dict, k_values) -> str:
    variants = list(report["variants"])
    metrics = ["auc"] + [f"{m}@{k}" for k in k_values for m in ("hr", "ndcg")]
    header = ["Method"] + [m.upper() if m == "auc" else m for m in metrics]
    rows = [[v] + [_fmt(report["variants"][v]["user_level"].get(m)) for m in metrics]
            for v in variants]
    return _align(header, rows)


def _align(header, rows):
    widths = [max(len(str(r[c])) for r in [header] + rows) for c in range(len(header))]
    lines = ["  ".join(str(cell).rjust(w) if c else str(cell).ljust(w)
                       for c, (cell, w) in enumerate(zip(r, widths))) for r in [header] + rows]
    rule = "-" * len(lines[0])
    return "\n".join([lines[0], rule] + lines[1:])


def to_text(report: dict) -> str:
    meta = report["metadata"]
    k_values = meta.get("k", [5, 10])
    parts = [
        f"dataset: {meta.get('dataset')}  arch: {meta.get('arch')}  seed: {meta.get('seed')}  "
        f"config: {meta.get('config_hash', '')[:12]}",
        "",
        "Group-level AUC (all samples of a group pooled)",
        group_table(report, "auc_pooled"),
        "",
        "Group-level AUC (per-user AUC averaged within group)",
        group_table(report, "auc_user_mean"),
        "",
        "User-level performance",
        user_table(report, k_values),
    ]
    return "\n".join(parts) + "\n"


def write_csv_tables(report: dict, group_path, user_path) -> None:
    """Long-format CSVs: one row per (variant, group) and one per variant."""
    rows = [{"variant": v, **g} for v, body in report["variants"].items() for g in body["groups"]]
    _write_rows(group_path, rows)
    _write_rows(user_path, [{"variant": v, **body["user_level"]}
                            for v, body in report["variants"].items()])


def _write_rows(path, rows):
    cols = []
    for r in rows:
        cols += [c for c in r if c not in cols]
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({c: "" if r.get(c) is None else r.get(c) for c in cols})


def write_report(report: dict, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"json": out_dir / "report.json", "text": out_dir / "report.txt",
             "groups_csv": out_dir / "group_level.csv", "users_csv": out_dir / "user_level.csv"}
    paths["json"].write_text(to_json(report))
    paths["text"].write_text(to_text(report))
    write_csv_tables(report, paths["groups_csv"], paths["users_csv"])
    return paths
