"""Deterministic sandbox for the EchoLeak-style zero-click exfiltration chain.

Emulates a RAG assistant (corpus, retrieval, surrogate model), the markdown
render surface, a simulated network with CSP and proxy semantics, and a
pluggable defense stack — then replays the kill chain and regenerates the
defense-by-attack-step mitigation matrix.
"""

__version__ = "0.1.0"

from .corpus import (  # noqa: F401
    AttackPayload,
    Camouflage,
    ContentItem,
    Secret,
    TrustTier,
    Variant,
    build_attack_email,
    load_corpus,
    proxy_wrap,
)
from .defenses import Defense, DefenseConfig  # noqa: F401
from .netsim import ClickModel  # noqa: F401
from .pipeline import AttackStep, Scenario, StepStatus, Trace, run_scenario  # noqa: F401
