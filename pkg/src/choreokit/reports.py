"""Machine-readable reports with derived plain-text tables.

Reports are JSON-first; each emitted file carries the producing config digest
and the package version so results stay traceable. The text renderings mirror
the published result tables: primitive/family success rates with a macro
average, retrieval similarity percentiles with acceptance rates, and the
guidance-scale trade-off grid.
"""

from __future__ import annotations

import json
from pathlib import Path

from . import __version__
from .errors import SchemaError
from .kps import FAMILIES, FAMILY_ORDER

REPORT_KINDS = ("kps", "retrieval", "tradeoff")


def _fmt_pct(value: float, signed: bool = False) -> str:
    pct = 100.0 * value
    return f"{pct:+.1f}" if signed else f"{pct:.1f}"


def _table(rows, header) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    def render(row):
        return "  ".join(str(cell).ljust(w) if i == 0 else str(cell).rjust(w)
                         for i, (cell, w) in enumerate(zip(row, widths)))
    sep = "-" * (sum(widths) + 2 * (len(header) - 1))
    return "\n".join([render(header), sep] + [render(r) for r in rows])


def format_kps_table(report: dict) -> str:
    rows = []
    ordered = sorted(report["primitives"],
                     key=lambda n: (FAMILY_ORDER.index(FAMILIES[n]), n))
    for name in ordered:
        r = report["primitives"][name]
        rows.append((f"{FAMILIES[name]}-level", name, _fmt_pct(r["prompt_rate"]),
                     _fmt_pct(r["null_rate"]), _fmt_pct(r["lift"], signed=True)))
    macro = report["macro_average"]
    rows.append(("Macro-average", "", _fmt_pct(macro["prompt_rate"]),
                 _fmt_pct(macro["null_rate"]), _fmt_pct(macro["lift"], signed=True)))
    primitive_table = _table(rows, ("Family", "Primitive", "Prompt%", "Null%", "Lift%"))

    family_rows = [
        (family, _fmt_pct(r["prompt_rate"]), _fmt_pct(r["null_rate"]),
         _fmt_pct(r["lift"], signed=True))
        for family, r in report["families"].items()
    ]
    family_table = _table(family_rows, ("Family", "Prompt%", "Null%", "Lift%"))
    header = (f"Kinematic primitive success "
              f"(R={report['replicates']}, G={report['groups']})")
    return f"{header}\n\n{primitive_table}\n\nFamily-level aggregates\n\n{family_table}\n"


def format_retrieval_table(report: dict) -> str:
    sim_rows, rate_rows = [], []
    for direction, stats in report["directions"].items():
        s = stats["similarity"]
        sim_rows.append((direction, f"{s['min']:.3f}", f"{s['p10']:.3f}",
                         f"{s['median']:.3f}", f"{s['p90']:.3f}", f"{s['max']:.3f}",
                         f"{s['mean']:.3f}"))
        rate_rows.append((direction, _fmt_pct(stats["acceptance_rate"]),
                          _fmt_pct(stats["null_replaced_rate"])))
    sim_table = _table(sim_rows, ("Direction", "Min", "P10", "Median", "P90", "Max", "Mean"))
    rate_table = _table(rate_rows, ("Direction", "Acceptance%", "Null%"))
    return (f"Top-1 retrieval similarity before thresholding\n\n{sim_table}\n\n"
            f"Acceptance at threshold {report['threshold']:.2f}\n\n{rate_table}\n")


def format_tradeoff_table(report: dict) -> str:
    rows = []
    for cell in report["grid"]:
        lifts = cell.get("lifts") or {}
        def lift(family):
            return _fmt_pct(lifts[family], signed=True) if family in lifts else "--"
        rows.append((cell["text"], f"{cell['music']:g}", f"{cell['diversity']:.3f}",
                     f"{cell['bas']:.4f}", lift("Pose"), lift("Trajectory"),
                     lift("Rotation"), lift("Temporal")))
    table = _table(rows, ("Text", "Music", "Div", "BAS", "Pose", "Traj.", "Rot.", "Temp."))
    return f"Controllability-quality trade-off over guidance scales\n\n{table}\n"


_FORMATTERS = {
    "kps": format_kps_table,
    "retrieval": format_retrieval_table,
    "tradeoff": format_tradeoff_table,
}

_REQUIRED_KEYS = {
    "kps": ("primitives", "families", "macro_average", "replicates", "groups"),
    "retrieval": ("directions", "threshold"),
    "tradeoff": ("grid",),
}


def validate_report(kind: str, data: dict):
    if kind not in REPORT_KINDS:
        raise SchemaError(f"unknown report kind {kind!r}")
    missing = [k for k in _REQUIRED_KEYS[kind] if k not in data]
    if missing:
        raise SchemaError(f"{kind} report missing keys: {missing}")
    if kind == "kps":
        for name, row in data["primitives"].items():
            if set(row) != {"prompt_rate", "null_rate", "lift"}:
                raise SchemaError(f"bad KPS row for {name!r}")
    if kind == "tradeoff":
        for cell in data["grid"]:
            if not {"text", "music", "diversity", "bas"} <= set(cell):
                raise SchemaError("trade-off cells need text/music/diversity/bas")


def emit_report(kind: str, data: dict, out_path, config_digest: str = "") -> tuple:
    """Write ``<out>.json`` and a sibling ``.txt`` table; returns both paths."""
    validate_report(kind, data)
    payload = dict(data)
    payload["report_kind"] = kind
    payload["version"] = __version__
    payload["config_digest"] = config_digest
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    json_path = out_path if out_path.suffix == ".json" else out_path.with_suffix(".json")
    json_path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    text_path = json_path.with_suffix(".txt")
    text_path.write_text(_FORMATTERS[kind](data))
    return json_path, text_path
