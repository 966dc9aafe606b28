"""Deterministic stand-in for the assistant LLM.

Worst-case instruction follower: every directive found in an Authoritative
chunk is obeyed, every directive in a NonAuthoritative chunk is refused, and
the answer is a byte-stable function of its inputs. That determinism is what
makes the mitigation matrix reproducible — a probabilistic complier would
turn every cell into a coin flip.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from urllib.parse import quote

from . import grammar
from .corpus import ContentItem, Secret, TrustTier
from .markdown import SanitizePolicy, collect_resources, md_parse, render, sanitize_full


class DirectiveAction(Enum):
    EMIT_INLINE_LINK = "EmitInlineLink"
    EMIT_REFERENCE_LINK = "EmitReferenceLink"
    EMIT_REFERENCE_IMAGE = "EmitReferenceImage"
    SUPPRESS_SOURCE_MENTION = "SuppressSourceMention"


class Authority(Enum):
    AUTHORITATIVE = "Authoritative"
    NON_AUTHORITATIVE = "NonAuthoritative"


@dataclass(frozen=True)
class Directive:
    action: DirectiveAction
    endpoint_template: str
    source_item: str


@dataclass(frozen=True)
class PromptContext:
    system_directives: tuple[str, ...]
    chunks: tuple[tuple[ContentItem, Authority], ...]
    user_query: str


@dataclass(frozen=True)
class ObeyedConstruct:
    """Bookkeeping for one emitted exfil construct: who asked, what URL resulted."""

    directive: Directive
    url: str
    source_tier: TrustTier


@dataclass(frozen=True)
class MarkdownAnswer:
    text: str
    cited_sources: tuple[str, ...]
    obeyed_directives: tuple[Directive, ...]
    refused_directives: tuple[Directive, ...] = ()
    constructs: tuple[ObeyedConstruct, ...] = ()


_ACTION_PATTERNS = (
    (grammar.INLINE_LINK_RE, DirectiveAction.EMIT_INLINE_LINK),
    (grammar.REFERENCE_LINK_RE, DirectiveAction.EMIT_REFERENCE_LINK),
    (grammar.REFERENCE_IMAGE_RE, DirectiveAction.EMIT_REFERENCE_IMAGE),
)


def extract_directives(item: ContentItem) -> list[Directive]:
    """Recognize the sandbox's directive grammar in document order."""
    found: list[tuple[int, Directive]] = []
    for pattern, action in _ACTION_PATTERNS:
        for m in pattern.finditer(item.body):
            endpoint = grammar.strip_url_punctuation(m.group(1))
            if not endpoint.startswith(("http://", "https://")):
                continue
            found.append((m.start(), Directive(action, endpoint, item.id)))
    for m in grammar.SUPPRESS_RE.finditer(item.body):
        found.append((m.start(), Directive(DirectiveAction.SUPPRESS_SOURCE_MENTION, "", item.id)))
    found.sort(key=lambda pair: pair[0])
    return [d for _, d in found]


def strip_directives(body: str) -> str:
    """Body with directive sentences elided — the surrogate summarizes content,
    never repeats instructions."""
    sentences = re.split(r"(?<=[.!?])\s+", body)
    kept = []
    for sentence in sentences:
        if grammar.SUPPRESS_RE.search(sentence):
            continue
        if any(p.search(sentence) for p, _ in _ACTION_PATTERNS):
            continue
        kept.append(sentence)
    return " ".join(kept).strip()


def _excerpt(body: str, limit: int = 140) -> str:
    flat = " ".join(body.split())
    if len(flat) <= limit:
        return flat
    return flat[: limit - 1].rstrip() + "…"


def _priority_secret(
    chunks: tuple[tuple[ContentItem, Authority], ...], secrets: list[Secret]
) -> Secret | None:
    """Secret hosted in the highest-ranked Internal chunk; ties by secret id."""
    by_id = {s.id: s for s in secrets}
    for item, _authority in chunks:
        if item.tier is not TrustTier.INTERNAL:
            continue
        hosted = sorted(ref for ref in item.secret_refs if ref in by_id)
        if hosted:
            return by_id[hosted[0]]
    return None


def substitute_secret(endpoint_template: str, secret_value: str) -> str:
    """Fill the placeholder in raw and percent-encoded positions."""
    encoded_value = quote(secret_value, safe="")
    url = endpoint_template.replace(grammar.SECRET_PLACEHOLDER, secret_value)
    return url.replace(grammar.SECRET_PLACEHOLDER_ENCODED, encoded_value)


def compose_answer(ctx: PromptContext, secrets: list[Secret]) -> MarkdownAnswer:
    """Summarize the context and obey directives from Authoritative chunks.

    Refused directives are recorded and leave no trace in the text; an obeyed
    suppression directive removes its source from both the summary and the
    citation list.
    """
    obeyed: list[Directive] = []
    refused: list[Directive] = []
    constructs: list[ObeyedConstruct] = []
    suppressed: set[str] = set()
    tier_by_item = {item.id: item.tier for item, _ in ctx.chunks}

    for item, authority in ctx.chunks:
        for directive in extract_directives(item):
            if authority is Authority.AUTHORITATIVE:
                obeyed.append(directive)
                if directive.action is DirectiveAction.SUPPRESS_SOURCE_MENTION:
                    suppressed.add(directive.source_item)
            else:
                refused.append(directive)

    secret = _priority_secret(ctx.chunks, secrets)
    secret_value = secret.value if secret is not None else ""

    lines = [f"Summary for: {ctx.user_query}", ""]
    cited: list[str] = []
    for item, _authority in ctx.chunks:
        if item.id in suppressed:
            continue
        content = strip_directives(item.body)
        if not content:
            continue
        title = item.subject or item.id
        lines.append(f"- {title} [{item.id}]: {_excerpt(content)}")
        cited.append(item.id)

    ref_count = 0
    trailer: list[str] = []
    for directive in obeyed:
        if directive.action is DirectiveAction.SUPPRESS_SOURCE_MENTION:
            continue
        url = substitute_secret(directive.endpoint_template, secret_value)
        constructs.append(
            ObeyedConstruct(directive, url, tier_by_item[directive.source_item])
        )
        ref_count += 1
        label = "ref" if ref_count == 1 else f"ref{ref_count}"
        if directive.action is DirectiveAction.EMIT_INLINE_LINK:
            lines.append("")
            lines.append(f"See [this document]({url}).")
        elif directive.action is DirectiveAction.EMIT_REFERENCE_LINK:
            lines.append("")
            lines.append(f"Please see [this document][{label}]")
            trailer.append(f"[{label}]: {url}")
        elif directive.action is DirectiveAction.EMIT_REFERENCE_IMAGE:
            lines.append("")
            lines.append(f"![image alt text][{label}]")
            trailer.append(f"[{label}]: {url}")
    if trailer:
        lines.extend(["", "---", ""])
        lines.extend(trailer)

    return MarkdownAnswer(
        text="\n".join(lines),
        cited_sources=tuple(cited),
        obeyed_directives=tuple(obeyed),
        refused_directives=tuple(refused),
        constructs=tuple(constructs),
    )


def apply_constrained_decoding(
    answer: MarkdownAnswer, policy: SanitizePolicy
) -> tuple[MarkdownAnswer, list]:
    """Re-emit the answer with disallowed constructs dropped; returns the drops.

    Modeled as post-hoc filtering inside the surrogate boundary: parse, apply
    the schema policy, render.
    """
    tree, findings = sanitize_full(md_parse(answer.text), policy)
    new_text = render(tree)
    return replace_answer_text(answer, new_text), findings


def replace_answer_text(answer: MarkdownAnswer, new_text: str) -> MarkdownAnswer:
    """New text, construct bookkeeping re-derived from what actually survived."""
    res = collect_resources(md_parse(new_text))
    kept_urls = set(res.auto_fetch) | set(res.click_only)
    return MarkdownAnswer(
        text=new_text,
        cited_sources=answer.cited_sources,
        obeyed_directives=answer.obeyed_directives,
        refused_directives=answer.refused_directives,
        constructs=tuple(c for c in answer.constructs if c.url in kept_urls),
    )
