"""Caption revision through a chat-completion endpoint, with offline fallback.

Builds the revision prompt from a versioned template fixture, posts it to
an OpenAI-style chat-completions endpoint, parses the ``Answer:`` block
out of the reply, and validates the result against the template's own
rules (no boilerplate openers, no leaked headers). When the provider is
down or keeps producing rejected output, a deterministic offline cleaner
strips figure references and citation markers from the raw caption
instead, and the output is marked accordingly.

Revised captions are weak supervision only; nothing here judges factual
fidelity.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable

import requests

from .errors import (
    AllAttemptsRejected,
    EmptyCaption,
    EmptyResponse,
    ProviderUnreachable,
)
from .jats_corpus import FigurePair, normalize_whitespace, scan_caption_issues

LLM_URL_ENV = "VOLMO_LLM_URL"
LLM_KEY_ENV = "VOLMO_LLM_KEY"

TEMPLATE_VERSION = "caption-revision-v1"

FORBIDDEN_OPENERS = ("This image depicts", "The image shows", "Based on the provided")

_BACKOFF_INITIAL = 1.0
_BACKOFF_CAP = 30.0


def _load_template() -> str:
    text = resources.files("volmo").joinpath("templates/caption_revision.txt").read_text("utf-8")
    return text.removesuffix("\n")  # prompts carry no terminal newline


_TEMPLATE = _load_template()


def build_revision_prompt(raw_caption: str) -> str:
    """Substitute the caption into the template, touching nothing else.

    The placeholder is replaced exactly once, so a caption containing the
    literal placeholder text cannot trigger recursive substitution.
    """
    if not raw_caption.strip():
        raise EmptyCaption("cannot build a revision prompt for an empty caption")
    return _TEMPLATE.replace("{caption}", raw_caption, 1)


def parse_revision_response(raw_response: str) -> str:
    """Text after the first ``Answer:`` line; the whole reply if absent."""
    lines = raw_response.split("\n")
    for idx, line in enumerate(lines):
        stripped = line.strip()
        if stripped.lower().startswith("answer:"):
            remainder = stripped[len("answer:"):].strip()
            tail = "\n".join(lines[idx + 1:]).strip()
            result = f"{remainder}\n{tail}".strip() if remainder and tail else (remainder or tail)
            break
    else:
        result = raw_response.strip()
    if not result:
        raise EmptyResponse("revision response is empty after trimming")
    return result


@dataclass
class ValidationVerdict:
    accepted: bool
    violations: list[str] = field(default_factory=list)


def validate_revision(revised: str) -> ValidationVerdict:
    """Check a revised caption against the template's output rules."""
    violations: list[str] = []
    text = revised.strip()
    if not text:
        violations.append("empty")
    else:
        lowered = text.lower()
        if any(lowered.startswith(op.lower()) for op in FORBIDDEN_OPENERS):
            violations.append("forbidden_opener")
        if "answer:" in lowered:
            violations.append("contains_answer_header")
        # template scaffold lines leaking through on their own line
        scaffold = ("description:", "output your answer")
        for line in lowered.split("\n")[1:]:
            if line.strip().startswith(scaffold):
                violations.append("multiline_header_leak")
                break
    return ValidationVerdict(accepted=not violations, violations=violations)


def offline_clean(raw_caption: str) -> str:
    """Deterministic fallback: delete figure-reference and citation spans.

    Deletions never touch characters outside detected issue spans, and the
    result is re-normalized, so the cleaned caption is never longer than
    the input.
    """
    spans = [
        issue.span
        for issue in scan_caption_issues(raw_caption)
        if issue.kind in ("figure_reference", "citation_marker")
    ]
    if not spans:
        return normalize_whitespace(raw_caption)
    merged: list[list[int]] = []
    for start, end in sorted(spans):
        if merged and start <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    out, cursor = [], 0
    for start, end in merged:
        out.append(raw_caption[cursor:start])
        cursor = end
    out.append(raw_caption[cursor:])
    return normalize_whitespace("".join(out))


# ---------------------------------------------------------------------------
# Provider client
# ---------------------------------------------------------------------------


@dataclass
class ProviderConfig:
    endpoint_url: str
    model_name: str
    temperature: float = 0.0
    max_attempts: int = 3
    timeout: float = 60.0
    api_key: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")

    @classmethod
    def from_env(cls, model_name: str, **kwargs) -> "ProviderConfig":
        url = os.environ.get(LLM_URL_ENV)
        if not url:
            raise ProviderUnreachable(f"{LLM_URL_ENV} is not set")
        return cls(endpoint_url=url, model_name=model_name,
                   api_key=os.environ.get(LLM_KEY_ENV), **kwargs)


@dataclass
class RevisionRequest:
    figure: FigurePair
    prompt: str
    provider: ProviderConfig

    @classmethod
    def for_figure(cls, figure: FigurePair, provider: ProviderConfig) -> "RevisionRequest":
        return cls(figure, build_revision_prompt(figure.raw_caption), provider)


def idempotency_key(figure: FigurePair) -> str:
    payload = f"{figure.article}\x1f{figure.figure_id}\x1f{TEMPLATE_VERSION}"
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _http_transport(config: ProviderConfig, prompt: str, key: str) -> str:
    """One chat-completions call; returns the assistant message content."""
    headers = {"Content-Type": "application/json", "Idempotency-Key": key}
    if config.api_key:
        headers["Authorization"] = f"Bearer {config.api_key}"
    body = {
        "model": config.model_name,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": config.temperature,
    }
    resp = requests.post(config.endpoint_url, json=body, headers=headers, timeout=config.timeout)
    resp.raise_for_status()
    data = resp.json()
    return data["choices"][0]["message"]["content"]


def revise_caption(
    request: RevisionRequest,
    transport: Callable[[ProviderConfig, str, str], str] | None = None,
    offline_fallback: bool = True,
    sleep: Callable[[float], None] = time.sleep,
) -> FigurePair:
    """Revise one caption, retrying until a revision validates.

    Tries the endpoint up to ``max_attempts`` times with exponential
    backoff (1 s doubling, capped at 30 s). On exhaustion the offline
    cleaner runs instead when ``offline_fallback`` is enabled; otherwise
    ``ProviderUnreachable`` (network trouble) or ``AllAttemptsRejected``
    (validation trouble) propagates. The returned figure always carries a
    revised caption that passes :func:`validate_revision`.
    """
    config = request.provider
    call = transport or _http_transport
    key = idempotency_key(request.figure)

    network_failure = None
    backoff = _BACKOFF_INITIAL
    for attempt in range(config.max_attempts):
        if attempt:
            sleep(min(backoff, _BACKOFF_CAP))
            backoff *= 2
        try:
            raw = call(config, request.prompt, key)
        except (requests.RequestException, ConnectionError, OSError) as exc:
            network_failure = exc
            continue
        try:
            revised = parse_revision_response(raw)
        except EmptyResponse:
            continue
        if validate_revision(revised).accepted:
            return _with_revision(request.figure, revised, "llm")

    if not offline_fallback:
        if network_failure is not None:
            raise ProviderUnreachable(str(network_failure)) from network_failure
        raise AllAttemptsRejected(
            f"{config.max_attempts} attempts produced no valid revision"
        )

    cleaned = offline_clean(request.figure.raw_caption)
    if not validate_revision(cleaned).accepted:
        # a raw caption that itself opens with forbidden boilerplate cannot
        # be fixed by span deletion; surface it rather than emit bad output
        raise AllAttemptsRejected(
            "offline-cleaned caption still fails validation; manual review needed"
        )
    return _with_revision(request.figure, cleaned, "offline_cleaned")


def _with_revision(figure: FigurePair, revised: str, provenance: str) -> FigurePair:
    return FigurePair(
        article=figure.article,
        figure_id=figure.figure_id,
        graphic_uri=figure.graphic_uri,
        raw_caption=figure.raw_caption,
        issues=figure.issues,
        revised_caption=revised,
        revision_provenance=provenance,
        weak_supervision=True,
    )


def revise_figures_file(
    figures_in,
    figures_out,
    provider: ProviderConfig | None,
    transport=None,
    offline_fallback: bool = True,
    offline_only: bool = False,
    concurrency: int = 4,
) -> dict:
    """Revise a ``figures.jsonl`` file into ``figures.revised.jsonl``.

    Figures are processed independently with a bounded worker pool and
    written in input order. Per-figure failures land in the returned
    stats instead of aborting the run.
    """
    with open(figures_in, encoding="utf-8") as fh:
        figures = [_figure_from_json(json.loads(line)) for line in fh if line.strip()]

    stats = {"revised": 0, "llm": 0, "offline_cleaned": 0, "failed": 0, "errors": []}

    def process(figure: FigurePair) -> FigurePair | None:
        try:
            if offline_only:
                cleaned = offline_clean(figure.raw_caption)
                if not validate_revision(cleaned).accepted:
                    raise AllAttemptsRejected("offline clean failed validation")
                return _with_revision(figure, cleaned, "offline_cleaned")
            request = RevisionRequest.for_figure(figure, provider)
            return revise_caption(request, transport=transport, offline_fallback=offline_fallback)
        except Exception as exc:  # noqa: BLE001 - per-figure isolation
            stats["errors"].append(
                {"figure_id": figure.figure_id, "article": figure.article,
                 "error": type(exc).__name__, "message": str(exc)}
            )
            return None

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        results = list(pool.map(process, figures))

    with open(figures_out, "w", encoding="utf-8") as fh:
        for figure, result in zip(figures, results):
            if result is None:
                stats["failed"] += 1
                fh.write(json.dumps(figure.to_json_dict(), ensure_ascii=False) + "\n")
                continue
            stats["revised"] += 1
            stats[result.revision_provenance] += 1
            fh.write(json.dumps(result.to_json_dict(), ensure_ascii=False) + "\n")
    return stats


def _figure_from_json(data: dict) -> FigurePair:
    from .jats_corpus import CaptionIssue

    return FigurePair(
        article=data["article"],
        figure_id=data["figure_id"],
        graphic_uri=data.get("graphic_uri", ""),
        raw_caption=data["raw_caption"],
        issues=[
            CaptionIssue(i["kind"], tuple(i["span"]), i["matched_text"])
            for i in data.get("issues", [])
        ],
        revised_caption=data.get("revised_caption"),
        revision_provenance=data.get("revision_provenance"),
        weak_supervision=data.get("weak_supervision"),
    )
