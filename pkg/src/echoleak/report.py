"""Report emission: JSON (canonical), CSV, markdown, and PNG figures.

JSON is the machine format with stable key order; CSV flattens matrix cells;
markdown renders the matrix with the ✓/×/– legend so it can be eyeballed
against the published grid. When an output path is given, a matplotlib figure
is rendered next to the delimited output (same stem, ``.png``).
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .frameworks import STEP_TO_ROW, annotate_frameworks
from .matrix import (
    CELL_GLYPHS,
    CellValue,
    DEFENSE_LABELS,
    MATRIX_STEPS,
    MitigationMatrix,
    STEP_LABELS,
)
from .pipeline import AttackStep, StepStatus, Trace

LEGEND = "✓ = defense succeeded; × = defense failed; – = not applicable."

_STEP_GLYPHS = {
    StepStatus.ACHIEVED: "achieved",
    StepStatus.BLOCKED: "blocked",
    StepStatus.NOT_APPLICABLE: "n/a",
}


class ReportFormatError(ValueError):
    """Unknown report format."""


# ---------------------------------------------------------------------------
# Matrix reports
# ---------------------------------------------------------------------------

def matrix_to_csv(matrix: MitigationMatrix) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["defense"] + [STEP_LABELS[s] for s in MATRIX_STEPS])
    for defense, row in matrix.rows():
        values = {step: value for step, value in row}
        writer.writerow([DEFENSE_LABELS[defense]] + [values[s].value for s in MATRIX_STEPS])
    return buf.getvalue()


def matrix_to_markdown(matrix: MitigationMatrix) -> str:
    lines = []
    header = ["Mitigation / Malicious Step"] + [STEP_LABELS[s] for s in MATRIX_STEPS]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "|".join(["---"] * len(header)) + "|")
    for defense, row in matrix.rows():
        values = {step: value for step, value in row}
        cells = [CELL_GLYPHS[values[s]] for s in MATRIX_STEPS]
        lines.append("| " + " | ".join([DEFENSE_LABELS[defense]] + cells) + " |")
    lines.append("")
    lines.append(f"Legend: {LEGEND}")
    lines.append("")
    lines.append("Framework annotations per attack step:")
    for step in MATRIX_STEPS:
        ann = annotate_frameworks(step)
        lines.append(
            f"- {STEP_LABELS[step]}: {', '.join(ann.owasp_llm)} | "
            f"{', '.join(ann.owasp_web)} | NIST {', '.join(ann.nist_controls)}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Trace reports
# ---------------------------------------------------------------------------

def trace_to_json(trace: Trace) -> str:
    return json.dumps(trace.to_dict(), indent=2, ensure_ascii=False, sort_keys=True) + "\n"


def trace_to_csv(trace: Trace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "kind", "detail"])
    for i, event in enumerate(trace.events):
        writer.writerow([i, event.kind, json.dumps(dict(event.detail), sort_keys=True)])
    return buf.getvalue()


def trace_to_markdown(trace: Trace) -> str:
    """Human-readable kill-chain narrative."""
    lines = [f"# Kill-chain trace: {trace.scenario_name}", ""]
    lines.append("## Step outcomes")
    for step in MATRIX_STEPS:
        outcome = trace.step_outcomes[step]
        suffix = f" (by {outcome.blocked_by})" if outcome.blocked_by else ""
        ann = annotate_frameworks(step)
        lines.append(
            f"- {STEP_LABELS[step]}: {_STEP_GLYPHS[outcome.status]}{suffix} — "
            f"{', '.join(ann.owasp_llm)}"
        )
    lines.append("")
    lines.append("## Events")
    for event in trace.events:
        detail = ", ".join(f"{k}={v}" for k, v in event.detail.items() if v not in ("", [], None))
        lines.append(f"- {event.kind}: {detail}" if detail else f"- {event.kind}")
    if trace.attacker_entries:
        lines.append("")
        lines.append("## Attacker log")
        for entry in trace.attacker_entries:
            got = entry.extracted_secret or "no secret"
            lines.append(f"- {entry.url} ({entry.cause.value}) -> {got}")
    if trace.findings:
        lines.append("")
        lines.append("## Findings")
        for f in trace.findings:
            lines.append(f"- [{f.severity.value}] {f.stage.value}/{f.rule}: {f.evidence}")
    if trace.notes:
        lines.append("")
        lines.append("## Notes")
        for key, value in sorted(trace.notes.items()):
            lines.append(f"- {key}: {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

_CELL_COLOR = {
    CellValue.DEFENSE_SUCCEEDED: "#2e7d32",
    CellValue.DEFENSE_FAILED: "#c62828",
    CellValue.NOT_APPLICABLE: "#9e9e9e",
}

_STATUS_COLOR = {
    StepStatus.ACHIEVED: "#c62828",
    StepStatus.BLOCKED: "#2e7d32",
    StepStatus.NOT_APPLICABLE: "#9e9e9e",
}


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_matrix_figure(matrix: MitigationMatrix, path: str | Path) -> Path:
    """Grid figure of the matrix, one colored cell per (defense, step)."""
    plt = _pyplot()
    defenses = [d for d, _ in matrix.rows()]
    fig, ax = plt.subplots(figsize=(9.5, 4.2))
    for y, (defense, row) in enumerate(matrix.rows()):
        values = {step: value for step, value in row}
        for x, step in enumerate(MATRIX_STEPS):
            value = values[step]
            ax.add_patch(
                plt.Rectangle((x, y), 1, 1, color=_CELL_COLOR[value], alpha=0.85, ec="white")
            )
            ax.text(
                x + 0.5, y + 0.5, CELL_GLYPHS[value],
                ha="center", va="center", fontsize=13, color="white",
            )
    ax.set_xlim(0, len(MATRIX_STEPS))
    ax.set_ylim(len(defenses), 0)
    ax.set_xticks([x + 0.5 for x in range(len(MATRIX_STEPS))])
    ax.set_xticklabels([STEP_LABELS[s] for s in MATRIX_STEPS], fontsize=8)
    ax.set_yticks([y + 0.5 for y in range(len(defenses))])
    ax.set_yticklabels([DEFENSE_LABELS[d] for d in defenses], fontsize=8)
    ax.set_title("Defense × attack-step mitigation matrix")
    ax.tick_params(length=0)
    for spine in ax.spines.values():
        spine.set_visible(False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_trace_figure(trace: Trace, path: str | Path) -> Path:
    """Kill-chain bar chart: one bar per step, colored by outcome."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(8, 3.2))
    for y, step in enumerate(MATRIX_STEPS):
        outcome = trace.step_outcomes[step]
        ax.barh(y, 1.0, color=_STATUS_COLOR[outcome.status], alpha=0.85)
        label = outcome.status.value
        if outcome.blocked_by:
            label += f" ({outcome.blocked_by})"
        ax.text(0.02, y, label, va="center", fontsize=8, color="white")
    ax.set_yticks(range(len(MATRIX_STEPS)))
    ax.set_yticklabels([STEP_LABELS[s] for s in MATRIX_STEPS], fontsize=8)
    ax.invert_yaxis()
    ax.set_xticks([])
    ax.set_title(f"Kill-chain outcomes: {trace.scenario_name}")
    for spine in ax.spines.values():
        spine.set_visible(False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def emit_report(
    obj: MitigationMatrix | Trace,
    fmt: str,
    out_path: str | Path | None = None,
    figures: bool = True,
) -> str:
    """Render a matrix or trace in the requested format.

    Writes to ``out_path`` when given, rendering a PNG figure alongside it
    (same stem) unless figures are disabled.
    """
    if isinstance(obj, MitigationMatrix):
        renderers = {"json": lambda: obj.to_json(), "csv": lambda: matrix_to_csv(obj),
                     "md": lambda: matrix_to_markdown(obj)}
        figure = render_matrix_figure
    elif isinstance(obj, Trace):
        renderers = {"json": lambda: trace_to_json(obj), "csv": lambda: trace_to_csv(obj),
                     "md": lambda: trace_to_markdown(obj)}
        figure = render_trace_figure
    else:
        raise TypeError(f"cannot report on {type(obj).__name__}")
    if fmt not in renderers:
        raise ReportFormatError(f"unknown format {fmt!r}; expected one of json, csv, md")
    content = renderers[fmt]()
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(content, encoding="utf-8")
        if figures:
            figure(obj, out_path.with_suffix(".png"))
    return content
