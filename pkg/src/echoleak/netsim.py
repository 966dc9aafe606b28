"""Simulated client renderer and network.

Hosts are registry entries and fetches are log events: no sockets, no DNS, no
wall clock. The pieces modeled here are exactly the ones the kill chain
touches — CSP evaluation at the render surface, automatic image fetching, the
allow-listed preview proxy (the CSP hole), its hardened variants (SSRF guard,
signed media proxy, egress policy), and the attacker's server log.
"""

from __future__ import annotations

import hashlib
import hmac
import ipaddress
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence
from urllib.parse import parse_qsl, quote, unquote, urlsplit

from .markdown import collect_resources, md_parse

PROXY_HOSTS = frozenset({"teams.microsoft.com", "asyncgw.teams.microsoft.com"})
PROXY_PATH_PREFIX = "/urlp"

SIGNED_PROXY_HOST = "media.company.test"
SIGNED_PROXY_PATH = "/signed"


class CspError(ValueError):
    """Raised for CSP text the restricted grammar does not accept."""


class SourceKind(Enum):
    NONE = "None"
    SELF = "SelfOrigin"
    HOST = "Host"


@dataclass(frozen=True)
class CspSource:
    kind: SourceKind
    pattern: str = ""


KNOWN_DIRECTIVES = ("img-src", "connect-src", "script-src", "object-src")


@dataclass(frozen=True)
class CspPolicy:
    """Parsed policy; a directive missing from the map denies its whole class."""

    directives: tuple[tuple[str, tuple[CspSource, ...]], ...] = ()

    def sources(self, directive: str) -> tuple[CspSource, ...] | None:
        for name, sources in self.directives:
            if name == directive:
                return sources
        return None


def parse_csp(text: str) -> CspPolicy:
    """Parse the restricted textual CSP form; unknown directives are rejected."""
    directives: list[tuple[str, tuple[CspSource, ...]]] = []
    seen: set[str] = set()
    for clause in text.split(";"):
        clause = clause.strip()
        if not clause:
            continue
        tokens = clause.split()
        name = tokens[0].lower()
        if name not in KNOWN_DIRECTIVES:
            raise CspError(f"unknown directive {name!r}")
        if name in seen:
            raise CspError(f"duplicate directive {name!r}")
        seen.add(name)
        sources: list[CspSource] = []
        for token in tokens[1:]:
            low = token.lower()
            if low == "'none'":
                sources.append(CspSource(SourceKind.NONE))
            elif low == "'self'":
                sources.append(CspSource(SourceKind.SELF))
            elif low.startswith("'"):
                raise CspError(f"unsupported keyword source {token!r}")
            else:
                sources.append(CspSource(SourceKind.HOST, pattern=low))
        directives.append((name, tuple(sources)))
    return CspPolicy(directives=tuple(directives))


@dataclass(frozen=True)
class CspVerdict:
    allowed: bool
    reason: str = ""


def _host_matches(pattern: str, host: str) -> bool:
    if pattern.startswith("*."):
        return host.endswith(pattern[1:])
    return host == pattern


def csp_allows(policy: CspPolicy, directive: str, url: str, self_origin: str) -> CspVerdict:
    """Default-deny source matching for one directive."""
    try:
        host = (urlsplit(url).hostname or "").lower()
    except ValueError:
        host = ""
    if not host:
        return CspVerdict(False, "malformed")
    sources = policy.sources(directive)
    if sources is None:
        return CspVerdict(False, f"{directive} unset (default deny)")
    for source in sources:
        if source.kind is SourceKind.NONE:
            return CspVerdict(False, f"{directive} 'none'")
        if source.kind is SourceKind.SELF and host == self_origin:
            return CspVerdict(True)
        if source.kind is SourceKind.HOST and _host_matches(source.pattern, host):
            return CspVerdict(True)
    return CspVerdict(False, f"host {host!r} not in {directive}")


class FetchOrigin(Enum):
    CLIENT = "Client"
    PROXY_SERVICE = "ProxyService"


class FetchCause(Enum):
    AUTO_IMAGE = "AutoImage"
    USER_CLICK = "UserClick"
    PROXY_FORWARD = "ProxyForward"


class ClickModel(Enum):
    NO_CLICKS = "NoClicks"
    CLICK_ALL = "ClickAll"


@dataclass(frozen=True)
class FetchRequest:
    origin: FetchOrigin
    url: str
    cause: FetchCause
    scenario_id: str


def csp_check(policy: CspPolicy, req: FetchRequest, self_origin: str) -> CspVerdict:
    """CSP verdict for a client-caused request; only auto image loads map here."""
    if req.cause is not FetchCause.AUTO_IMAGE:
        raise ValueError(f"{req.cause} is governed at its own layer, not by csp_check")
    return csp_allows(policy, "img-src", req.url, self_origin)


# ---------------------------------------------------------------------------
# Client renderer
# ---------------------------------------------------------------------------

# Named fetch-time check: returns (allowed, denial detail).
FetchCheck = tuple[str, Callable[[str], tuple[bool, str]]]


@dataclass(frozen=True)
class FetchAttempt:
    url: str
    cause: FetchCause
    allowed: bool
    rule: str = ""
    detail: str = ""


@dataclass(frozen=True)
class RenderResult:
    requests: tuple[FetchRequest, ...]
    attempts: tuple[FetchAttempt, ...]


def client_render(
    answer_text: str,
    csp: CspPolicy,
    hitl: Callable[[str], tuple[bool, str]] | None,
    click_model: ClickModel,
    *,
    self_origin: str,
    checks: Sequence[FetchCheck] = (),
    scenario_id: str = "",
) -> RenderResult:
    """Parse the answer and emit the fetches a real client would make.

    Auto-fetched images run the consent gate, then CSP, then any extra
    fetch-time checks. Click-only links fire only under ClickAll and model
    user navigation, which CSP resource directives do not govern.
    """
    resources = collect_resources(md_parse(answer_text))
    requests: list[FetchRequest] = []
    attempts: list[FetchAttempt] = []

    for url in resources.auto_fetch:
        if hitl is not None:
            ok, detail = hitl(url)
            if not ok:
                attempts.append(FetchAttempt(url, FetchCause.AUTO_IMAGE, False, "hitl-consent", detail))
                continue
        verdict = csp_allows(csp, "img-src", url, self_origin)
        if not verdict.allowed:
            attempts.append(FetchAttempt(url, FetchCause.AUTO_IMAGE, False, "csp", verdict.reason))
            continue
        denied = False
        for name, check in checks:
            ok, detail = check(url)
            if not ok:
                attempts.append(FetchAttempt(url, FetchCause.AUTO_IMAGE, False, name, detail))
                denied = True
                break
        if denied:
            continue
        attempts.append(FetchAttempt(url, FetchCause.AUTO_IMAGE, True))
        requests.append(FetchRequest(FetchOrigin.CLIENT, url, FetchCause.AUTO_IMAGE, scenario_id))

    if click_model is ClickModel.CLICK_ALL:
        for url in resources.click_only:
            attempts.append(FetchAttempt(url, FetchCause.USER_CLICK, True))
            requests.append(FetchRequest(FetchOrigin.CLIENT, url, FetchCause.USER_CLICK, scenario_id))

    return RenderResult(requests=tuple(requests), attempts=tuple(attempts))


# ---------------------------------------------------------------------------
# SSRF guard
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SsrfRules:
    block_private_ips: bool = True
    block_ip_literals: bool = True
    permit_hosts: frozenset[str] | None = None
    max_redirects: int = 3
    max_response_kb: int = 512
    max_response_ms: int = 3000


@dataclass(frozen=True)
class UrlMetadata:
    """Static per-URL fetch attributes; stands in for live redirect/size/time behavior."""

    redirects: int = 0
    response_kb: int = 0
    response_ms: int = 0


@dataclass(frozen=True)
class GuardVerdict:
    permitted: bool
    reason: str = ""


def ssrf_guard_check(
    url: str, rules: SsrfRules, metadata: UrlMetadata | None = None
) -> GuardVerdict:
    """Deterministic verdict; the first failing rule names the reason."""
    try:
        parts = urlsplit(url)
    except ValueError:
        return GuardVerdict(False, "malformed URL")
    if parts.scheme not in ("http", "https"):
        return GuardVerdict(False, "scheme not allowed")
    host = (parts.hostname or "").lower()
    if not host:
        return GuardVerdict(False, "malformed URL")
    ip = None
    try:
        ip = ipaddress.ip_address(host)
    except ValueError:
        pass
    if host == "localhost" or (ip is not None and (ip.is_private or ip.is_loopback or ip.is_reserved)):
        if rules.block_private_ips:
            return GuardVerdict(False, "private IP")
    if ip is not None and rules.block_ip_literals:
        return GuardVerdict(False, "IP-literal host")
    if rules.permit_hosts is not None and host not in rules.permit_hosts:
        return GuardVerdict(False, "external host")
    meta = metadata or UrlMetadata()
    if meta.redirects > rules.max_redirects:
        return GuardVerdict(False, "too many redirects")
    if meta.response_kb > rules.max_response_kb:
        return GuardVerdict(False, "response too large")
    if meta.response_ms > rules.max_response_ms:
        return GuardVerdict(False, "response too slow")
    return GuardVerdict(True)


# ---------------------------------------------------------------------------
# Allow-listed preview proxy (the CSP hole) and its hardened variants
# ---------------------------------------------------------------------------

def is_proxy_url(url: str) -> bool:
    try:
        parts = urlsplit(url)
    except ValueError:
        return False
    host = (parts.hostname or "").lower()
    return host in PROXY_HOSTS and parts.path.startswith(PROXY_PATH_PREFIX)


@dataclass(frozen=True)
class ProxyDecision:
    forward: FetchRequest | None
    rule: str = ""
    detail: str = ""


def proxy_service(
    req: FetchRequest,
    guard: SsrfRules | None,
    *,
    require_signed: bool = False,
    url_allowlist: frozenset[str] | None = None,
    egress_policy: CspPolicy | None = None,
    self_origin: str = "",
    metadata: UrlMetadata | None = None,
) -> ProxyDecision:
    """Fetch-on-behalf service: extracts `url=` and forwards when permitted.

    With no guard and no hardening this reproduces the vulnerability: any
    inner URL is fetched server-side from an allow-listed host. The optional
    checks model the patched deployments (fixed order: signature requirement,
    inner-host allowlist, egress policy, SSRF guard).
    """
    try:
        query = urlsplit(req.url).query
    except ValueError:
        return ProxyDecision(None, "missing-url-param", "malformed proxy URL")
    inner = ""
    for key, value in parse_qsl(query, keep_blank_values=True):
        if key == "url":
            inner = value
            break
    if not inner:
        return ProxyDecision(None, "missing-url-param", "no url parameter")
    if require_signed:
        return ProxyDecision(None, "signature-required", "proxy accepts only signed requests")
    if url_allowlist is not None:
        host = (urlsplit(inner).hostname or "").lower()
        if host not in url_allowlist:
            return ProxyDecision(None, "url-allowlist", f"inner host {host!r} not allowlisted")
    if egress_policy is not None:
        verdict = csp_allows(egress_policy, "connect-src", inner, self_origin)
        if not verdict.allowed:
            return ProxyDecision(None, "egress-csp", verdict.reason)
    if guard is not None:
        verdict = ssrf_guard_check(inner, guard, metadata)
        if not verdict.permitted:
            return ProxyDecision(None, "ssrf-guard", verdict.reason)
    forward = FetchRequest(FetchOrigin.PROXY_SERVICE, inner, FetchCause.PROXY_FORWARD, req.scenario_id)
    return ProxyDecision(forward=forward)


# ---------------------------------------------------------------------------
# Signed media proxy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SignedUrl:
    inner: str
    expiry: int
    signature: str


def _sign(key: str, inner: str, expiry: int) -> str:
    msg = f"{inner}|{expiry}".encode()
    return hmac.new(key.encode(), msg, hashlib.sha256).hexdigest()


def signed_url_mint(inner: str, key: str, ttl_seconds: int, now: int) -> SignedUrl:
    """Keyed authentication code over (inner, expiry); expiry = now + ttl."""
    if ttl_seconds <= 0:
        raise ValueError("ttl_seconds must be positive")
    expiry = now + ttl_seconds
    return SignedUrl(inner=inner, expiry=expiry, signature=_sign(key, inner, expiry))


def signed_url_verify(key: str, surl: SignedUrl, now: int) -> tuple[bool, str]:
    if not hmac.compare_digest(surl.signature, _sign(key, surl.inner, surl.expiry)):
        return False, "bad signature"
    if now > surl.expiry:
        return False, "expired"
    return True, ""


def signed_url_to_url(surl: SignedUrl) -> str:
    return (
        f"https://{SIGNED_PROXY_HOST}{SIGNED_PROXY_PATH}"
        f"?url={quote(surl.inner, safe='')}&exp={surl.expiry}&sig={surl.signature}"
    )


def parse_signed_url(url: str) -> SignedUrl | None:
    try:
        parts = urlsplit(url)
    except ValueError:
        return None
    if (parts.hostname or "").lower() != SIGNED_PROXY_HOST or parts.path != SIGNED_PROXY_PATH:
        return None
    params = dict(parse_qsl(parts.query, keep_blank_values=True))
    if not {"url", "exp", "sig"} <= params.keys():
        return None
    try:
        expiry = int(params["exp"])
    except ValueError:
        return None
    return SignedUrl(inner=params["url"], expiry=expiry, signature=params["sig"])


def signed_proxy_fetch(
    surl: SignedUrl,
    key: str,
    now: int,
    permit_hosts: frozenset[str],
    scenario_id: str = "",
) -> tuple[FetchRequest | None, str]:
    """Forward only valid, unexpired, permit-listed inners; forgeries never verify."""
    ok, reason = signed_url_verify(key, surl, now)
    if not ok:
        return None, reason
    host = (urlsplit(surl.inner).hostname or "").lower()
    if host not in permit_hosts:
        return None, "inner host not permitted"
    return (
        FetchRequest(FetchOrigin.PROXY_SERVICE, surl.inner, FetchCause.PROXY_FORWARD, scenario_id),
        "",
    )


# ---------------------------------------------------------------------------
# Attacker server
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttackerLogEntry:
    url: str
    extracted_secret: str | None
    cause: FetchCause


@dataclass
class AttackerLog:
    host: str
    entries: list[AttackerLogEntry] = field(default_factory=list)

    def secret_entries(self) -> list[AttackerLogEntry]:
        return [e for e in self.entries if e.extracted_secret is not None]


def attacker_server_receive(log: AttackerLog, req: FetchRequest, secrets: Sequence) -> AttackerLogEntry:
    """Append the request; a known secret in the decoded path/query is extracted."""
    decoded = unquote(req.url)
    extracted = None
    for secret in sorted(secrets, key=lambda s: s.id):
        if secret.value in decoded:
            extracted = secret.value
            break
    entry = AttackerLogEntry(url=req.url, extracted_secret=extracted, cause=req.cause)
    log.entries.append(entry)
    return entry
