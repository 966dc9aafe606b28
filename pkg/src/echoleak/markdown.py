"""Markdown-subset parser, resource extractor, and the two redactors.

The subset is exactly what the kill chain exercises: plain text, emphasis,
inline links/images, reference-style uses with separate definitions, and
autolinks. Anything else degrades to text instead of erroring, which keeps the
parser lenient and its behavior auditable.

Two redactors live here on purpose:

* ``redact_inline_only`` — the intentionally flawed baseline that strips
  ``[text](url)`` and ``![alt](url)`` but leaves reference-style constructs
  alone. This is the surface the reference-link payloads walk through.
* ``sanitize_full`` — the policy-driven sanitizer that removes every
  construct a policy forbids, including unresolved reference uses and orphan
  definitions, emitting a structured finding per removal.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Callable


class NodeKind(Enum):
    TEXT = "Text"
    EMPHASIS = "Emphasis"
    INLINE_LINK = "InlineLink"
    INLINE_IMAGE = "InlineImage"
    REFERENCE_LINK_USE = "ReferenceLinkUse"
    REFERENCE_IMAGE_USE = "ReferenceImageUse"
    AUTOLINK = "Autolink"
    REF_DEFINITION = "RefDefinition"


LINK_KINDS = frozenset({NodeKind.INLINE_LINK, NodeKind.REFERENCE_LINK_USE, NodeKind.AUTOLINK})
IMAGE_KINDS = frozenset({NodeKind.INLINE_IMAGE, NodeKind.REFERENCE_IMAGE_USE})
ALL_KINDS = frozenset(NodeKind)


@dataclass(frozen=True)
class MdNode:
    """One node of the flat document tree.

    ``text`` holds visible text (link text, image alt, emphasis body, or raw
    text); ``dest`` the URL for inline constructs, autolinks and definitions;
    ``label`` the raw reference label for uses and definitions.
    """

    kind: NodeKind
    text: str = ""
    dest: str = ""
    label: str = ""


@dataclass(frozen=True)
class ResourceSet:
    auto_fetch: tuple[str, ...] = ()
    click_only: tuple[str, ...] = ()


@dataclass(frozen=True)
class SanitizeFinding:
    kind: NodeKind
    url: str
    reason: str


# url_ok callbacks return (allowed, reason-for-denial)
UrlPredicate = Callable[[str], tuple[bool, str]]


@dataclass(frozen=True)
class SanitizePolicy:
    """Allowed node kinds plus an optional URL predicate.

    TEXT is always retained; a policy cannot forbid plain prose.
    """

    allowed_kinds: frozenset[NodeKind]
    url_ok: UrlPredicate | None = None


_REFDEF_RE = re.compile(r"^ {0,3}\[([^\[\]]+)\]:\s*(\S+)\s*$")

_INLINE_RE = re.compile(
    r"!\[(?P<imgref_text>[^\[\]]*)\]\[(?P<imgref_label>[^\[\]]+)\]"
    r"|!\[(?P<img_text>[^\[\]]*)\]\((?P<img_dest>[^()\s]*)\)"
    r"|\[(?P<linkref_text>[^\[\]]*)\]\[(?P<linkref_label>[^\[\]]+)\]"
    r"|\[(?P<link_text>[^\[\]]*)\]\((?P<link_dest>[^()\s]*)\)"
    r"|<(?P<auto_dest>https?://[^<>\s]+)>"
    r"|\*(?P<emph_text>[^*\n]+)\*"
)


def normalize_label(label: str) -> str:
    """Case-fold and collapse internal whitespace, per common markdown behavior."""
    return " ".join(label.split()).casefold()


def _merge_text(nodes: list[MdNode]) -> list[MdNode]:
    """Canonical form: adjacent text nodes merged, empty text dropped."""
    out: list[MdNode] = []
    for node in nodes:
        if node.kind is NodeKind.TEXT:
            if not node.text:
                continue
            if out and out[-1].kind is NodeKind.TEXT:
                out[-1] = MdNode(NodeKind.TEXT, text=out[-1].text + node.text)
                continue
        out.append(node)
    return out


def _parse_inline(line: str, nodes: list[MdNode]) -> None:
    pos = 0
    for m in _INLINE_RE.finditer(line):
        if m.start() > pos:
            nodes.append(MdNode(NodeKind.TEXT, text=line[pos : m.start()]))
        g = m.groupdict()
        if g["imgref_label"] is not None:
            nodes.append(
                MdNode(NodeKind.REFERENCE_IMAGE_USE, text=g["imgref_text"], label=g["imgref_label"])
            )
        elif g["img_dest"] is not None:
            nodes.append(MdNode(NodeKind.INLINE_IMAGE, text=g["img_text"], dest=g["img_dest"]))
        elif g["linkref_label"] is not None:
            nodes.append(
                MdNode(NodeKind.REFERENCE_LINK_USE, text=g["linkref_text"], label=g["linkref_label"])
            )
        elif g["link_dest"] is not None:
            nodes.append(MdNode(NodeKind.INLINE_LINK, text=g["link_text"], dest=g["link_dest"]))
        elif g["auto_dest"] is not None:
            nodes.append(MdNode(NodeKind.AUTOLINK, text=g["auto_dest"], dest=g["auto_dest"]))
        else:
            nodes.append(MdNode(NodeKind.EMPHASIS, text=g["emph_text"]))
        pos = m.end()
    if pos < len(line):
        nodes.append(MdNode(NodeKind.TEXT, text=line[pos:]))


def md_parse(text: str) -> list[MdNode]:
    """Parse into the flat node list; unknown syntax is preserved as text."""
    nodes: list[MdNode] = []
    for i, line in enumerate(text.split("\n")):
        if i > 0:
            nodes.append(MdNode(NodeKind.TEXT, text="\n"))
        m = _REFDEF_RE.match(line)
        if m:
            nodes.append(MdNode(NodeKind.REF_DEFINITION, dest=m.group(2), label=m.group(1)))
        else:
            _parse_inline(line, nodes)
    return _merge_text(nodes)


def render(nodes: list[MdNode]) -> str:
    """Inverse pretty-printer; reparses to an equivalent tree, not identical bytes."""
    parts: list[str] = []
    for node in nodes:
        if node.kind is NodeKind.TEXT:
            parts.append(node.text)
        elif node.kind is NodeKind.EMPHASIS:
            parts.append(f"*{node.text}*")
        elif node.kind is NodeKind.INLINE_LINK:
            parts.append(f"[{node.text}]({node.dest})")
        elif node.kind is NodeKind.INLINE_IMAGE:
            parts.append(f"![{node.text}]({node.dest})")
        elif node.kind is NodeKind.REFERENCE_LINK_USE:
            parts.append(f"[{node.text}][{node.label}]")
        elif node.kind is NodeKind.REFERENCE_IMAGE_USE:
            parts.append(f"![{node.text}][{node.label}]")
        elif node.kind is NodeKind.AUTOLINK:
            parts.append(f"<{node.dest}>")
        elif node.kind is NodeKind.REF_DEFINITION:
            parts.append(f"[{node.label}]: {node.dest}")
    return "".join(parts)


def resolve_definitions(nodes: list[MdNode]) -> dict[str, str]:
    """Normalized label -> destination; first definition wins, later dupes ignored."""
    defs: dict[str, str] = {}
    for node in nodes:
        if node.kind is NodeKind.REF_DEFINITION:
            defs.setdefault(normalize_label(node.label), node.dest)
    return defs


def _resolved_dest(node: MdNode, defs: dict[str, str]) -> str | None:
    if node.kind in (NodeKind.REFERENCE_LINK_USE, NodeKind.REFERENCE_IMAGE_USE):
        return defs.get(normalize_label(node.label))
    return node.dest or None


def collect_resources(nodes: list[MdNode]) -> ResourceSet:
    """Split resolvable destinations into auto-fetched (images) vs click-only (links)."""
    defs = resolve_definitions(nodes)
    auto: list[str] = []
    click: list[str] = []
    for node in nodes:
        dest = _resolved_dest(node, defs)
        if dest is None:
            continue
        if node.kind in IMAGE_KINDS:
            auto.append(dest)
        elif node.kind in LINK_KINDS:
            click.append(dest)
    return ResourceSet(auto_fetch=tuple(auto), click_only=tuple(click))


def redact_inline_only(nodes: list[MdNode]) -> list[MdNode]:
    """BASELINE redactor: flawed by design.

    Strips inline link/image destinations (keeping the visible text) and does
    not touch reference-style uses, definitions, or autolinks — exactly the
    gap the reference-style payloads walk through.
    """
    out: list[MdNode] = []
    for node in nodes:
        if node.kind in (NodeKind.INLINE_LINK, NodeKind.INLINE_IMAGE):
            out.append(MdNode(NodeKind.TEXT, text=node.text))
        else:
            out.append(node)
    return _merge_text(out)


def sanitize_full(
    nodes: list[MdNode], policy: SanitizePolicy
) -> tuple[list[MdNode], list[SanitizeFinding]]:
    """Remove every construct the policy forbids; one finding per removal.

    Reference uses are judged by their resolved destination; unresolved uses
    and orphan/duplicate definitions are always removed (they are dormant
    payload). Idempotent: a second pass removes nothing.
    """
    defs = resolve_definitions(nodes)

    def check_url(url: str) -> tuple[bool, str]:
        if policy.url_ok is None:
            return True, ""
        return policy.url_ok(url)

    # First sweep decides uses so definition survival can depend on them.
    kept_labels: set[str] = set()
    decisions: dict[int, tuple[bool, str, str]] = {}  # idx -> (keep, url, reason)
    for idx, node in enumerate(nodes):
        if node.kind is NodeKind.TEXT or node.kind is NodeKind.REF_DEFINITION:
            continue
        allowed = node.kind in policy.allowed_kinds
        if node.kind in (NodeKind.REFERENCE_LINK_USE, NodeKind.REFERENCE_IMAGE_USE):
            # A use cannot outlive its definition or it would dangle.
            allowed = allowed and NodeKind.REF_DEFINITION in policy.allowed_kinds
        if not allowed:
            dest = _resolved_dest(node, defs) or ""
            decisions[idx] = (False, dest, "construct not allowed")
            continue
        if node.kind is NodeKind.EMPHASIS:
            decisions[idx] = (True, "", "")
            continue
        dest = _resolved_dest(node, defs)
        if dest is None:
            decisions[idx] = (False, "", "unresolved reference")
            continue
        ok, reason = check_url(dest)
        if not ok:
            decisions[idx] = (False, dest, reason)
            continue
        decisions[idx] = (True, dest, "")
        if node.kind in (NodeKind.REFERENCE_LINK_USE, NodeKind.REFERENCE_IMAGE_USE):
            kept_labels.add(normalize_label(node.label))

    out: list[MdNode] = []
    findings: list[SanitizeFinding] = []
    seen_defs: set[str] = set()
    for idx, node in enumerate(nodes):
        if node.kind is NodeKind.TEXT:
            out.append(node)
            continue
        if node.kind is NodeKind.REF_DEFINITION:
            norm = normalize_label(node.label)
            if node.kind not in policy.allowed_kinds:
                findings.append(SanitizeFinding(node.kind, node.dest, "construct not allowed"))
            elif norm in seen_defs:
                findings.append(SanitizeFinding(node.kind, node.dest, "duplicate definition"))
            elif norm not in kept_labels:
                findings.append(SanitizeFinding(node.kind, node.dest, "orphan definition"))
            else:
                ok, reason = check_url(node.dest)
                if not ok:
                    findings.append(SanitizeFinding(node.kind, node.dest, reason))
                else:
                    seen_defs.add(norm)
                    out.append(node)
            continue
        keep, url, reason = decisions[idx]
        if keep:
            out.append(node)
        else:
            findings.append(SanitizeFinding(node.kind, url, reason))
            if node.kind is not NodeKind.AUTOLINK and node.text:
                out.append(MdNode(NodeKind.TEXT, text=node.text))
    return _merge_text(out), findings
