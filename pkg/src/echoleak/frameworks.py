"""Security-framework annotations for kill-chain rows.

A static transcription table maps each chain row to OWASP LLM Top-10, OWASP
Web App Top-10, and NIST SP 800-53 control labels. The sandbox only emits
these as report annotations; it does not implement the controls.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

from .pipeline import AttackStep


@dataclass(frozen=True)
class FrameworkAnnotation:
    row: str
    description: str
    owasp_llm: tuple[str, ...]
    owasp_web: tuple[str, ...]
    nist_controls: tuple[str, ...]


CHAIN_ROWS = (
    "external_email_injection",
    "retrieval_scope",
    "external_link_in_answer",
    "image_auto_fetch",
    "teams_proxy",
    "source_suppression",
)

# The proxy row both opens the CSP hole and completes the exfiltration, so
# the terminal step maps onto it as well.
STEP_TO_ROW = {
    AttackStep.CLASSIFIER_BYPASS: "external_email_injection",
    AttackStep.SCOPE_VIOLATION: "retrieval_scope",
    AttackStep.REDACTION_BYPASS: "external_link_in_answer",
    AttackStep.AUTO_FETCH_IMAGE: "image_auto_fetch",
    AttackStep.PROXY_CSP_HOLE: "teams_proxy",
    AttackStep.ZERO_CLICK_EXFIL: "teams_proxy",
}


def _load_table() -> dict[str, FrameworkAnnotation]:
    raw = resources.files("echoleak.fixtures").joinpath("framework_mappings.json").read_text("utf-8")
    data = json.loads(raw)
    return {
        row: FrameworkAnnotation(
            row=row,
            description=entry["description"],
            owasp_llm=tuple(entry["owasp_llm"]),
            owasp_web=tuple(entry["owasp_web"]),
            nist_controls=tuple(entry["nist_controls"]),
        )
        for row, entry in data.items()
    }


def annotate_frameworks(step_or_row: AttackStep | str) -> FrameworkAnnotation:
    """Framework labels for an attack step or a chain-row key."""
    table = _load_table()
    if isinstance(step_or_row, AttackStep):
        return table[STEP_TO_ROW[step_or_row]]
    if step_or_row not in table:
        known = ", ".join(CHAIN_ROWS)
        raise KeyError(f"unknown chain row {step_or_row!r}; known rows: {known}")
    return table[step_or_row]
