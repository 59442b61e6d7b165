"""JATS full-text parsing: figure-caption extraction and caption triage.

Parses journal ``article`` XML documents, pulls every figure that has
both a graphic reference and a non-empty caption, flattens caption markup
to plain text, and flags the caption artifacts (figure references,
citation markers, cross-references, leading panel-letter fragments,
unexplained imaging shorthand) that motivate downstream revision.

Parsing is pure and per-document, so corpora can be processed with any
degree of parallelism. Image binaries are never fetched; only the
``graphic`` URI is carried.
"""

from __future__ import annotations

import json
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator

from .errors import MalformedXml, NotJats

ARTICLE_TYPES = ("research", "case_report", "review", "other")
LICENSES = ("CC-BY", "CC-BY-NC", "CC-BY-NC-SA", "CC0", "other")

#: phrases whose presence in title or body marks an article as a case report
CASE_REPORT_PHRASES = ("case report", "case presentation")

#: imaging shorthand tokens flagged for expansion during revision
DEFAULT_SHORTHAND_LEXICON = ("T1WI", "T2WI", "T2-tse-fs-cor", "T2-tse-fs-tra", "fs")

_FIGURE_REF = re.compile(r"Fig(ure)?s?\.?\s*\d+[A-Za-z]?")
_CITATION = re.compile(r"\[\d+(?:\s*[,–—-]\s*\d+)*\]|\(\d+(?:\s*[,–—-]\s*\d+)*\)")
_CROSS_REF = re.compile(
    r"(?:[Ss]ee\s+)?(?:Supplementary\s+)?(?:Table|Section|Appendix)s?\.?\s*[A-Z0-9][A-Za-z0-9.]*"
)
_FRAGMENT = re.compile(r"^[A-Z](?=\s+[A-Z][a-z])")


def normalize_whitespace(text: str) -> str:
    """Collapse internal whitespace runs to single spaces and trim the ends."""
    return " ".join(text.split())


@dataclass(frozen=True)
class CaptionIssue:
    kind: str  # figure_reference | citation_marker | cross_reference | fragment | imaging_shorthand
    span: tuple[int, int]  # [start, end) character offsets into raw_caption
    matched_text: str

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "span": list(self.span), "matched_text": self.matched_text}


@dataclass
class FigurePair:
    article: str
    figure_id: str
    graphic_uri: str
    raw_caption: str
    issues: list[CaptionIssue] = field(default_factory=list)
    revised_caption: str | None = None
    revision_provenance: str | None = None  # "llm" | "offline_cleaned"
    weak_supervision: bool | None = None

    def to_json_dict(self) -> dict:
        return {
            "article": self.article,
            "figure_id": self.figure_id,
            "graphic_uri": self.graphic_uri,
            "raw_caption": self.raw_caption,
            "issues": [i.to_json_dict() for i in self.issues],
            "revised_caption": self.revised_caption,
            "revision_provenance": self.revision_provenance,
            "weak_supervision": self.weak_supervision,
        }


@dataclass
class ArticleRecord:
    pmcid: str
    journal: str
    title: str
    article_type: str
    license: str
    figure_count: int

    def to_json_dict(self) -> dict:
        return {
            "pmcid": self.pmcid,
            "journal": self.journal,
            "title": self.title,
            "article_type": self.article_type,
            "license": self.license,
            "figure_count": self.figure_count,
        }


@dataclass
class ArticleParse:
    record: ArticleRecord
    figures: list[FigurePair]
    skipped_figures: int


def _localname(tag) -> str:
    return tag.rsplit("}", 1)[-1] if isinstance(tag, str) else ""


def _find_all(root, name: str) -> Iterator[ET.Element]:
    for el in root.iter():
        if _localname(el.tag) == name:
            yield el


def _first(root, name: str) -> ET.Element | None:
    return next(_find_all(root, name), None)


def _flat_text(el: ET.Element | None) -> str:
    return normalize_whitespace("".join(el.itertext())) if el is not None else ""


def _map_license(candidates: Iterable[str]) -> str:
    blob = " ".join(c.lower() for c in candidates if c)
    if "by-nc-sa" in blob or "by nc sa" in blob:
        return "CC-BY-NC-SA"
    if "by-nc" in blob or "by nc" in blob:
        return "CC-BY-NC"
    if "cc0" in blob or "zero/1.0" in blob or "publicdomain" in blob:
        return "CC0"
    if "creativecommons.org/licenses/by" in blob or "cc by" in blob or "cc-by" in blob:
        return "CC-BY"
    return "other"


def _map_article_type(attr: str) -> str:
    attr = (attr or "").strip().lower()
    if attr == "case-report":
        return "case_report"
    if attr == "research-article":
        return "research"
    if attr in ("review-article", "review"):
        return "review"
    return "other"


def scan_caption_issues(
    raw_caption: str, shorthand_lexicon: Iterable[str] = DEFAULT_SHORTHAND_LEXICON
) -> list[CaptionIssue]:
    """Flag revision-worthy artifacts; every span indexes its matched text."""
    issues: list[CaptionIssue] = []

    for pattern, kind in ((_FIGURE_REF, "figure_reference"), (_CITATION, "citation_marker"),
                          (_CROSS_REF, "cross_reference")):
        for m in pattern.finditer(raw_caption):
            issues.append(CaptionIssue(kind, (m.start(), m.end()), m.group(0)))

    m = _FRAGMENT.match(raw_caption)
    if m:
        issues.append(CaptionIssue("fragment", (m.start(), m.end()), m.group(0)))

    claimed: list[tuple[int, int]] = []
    for token in sorted(set(shorthand_lexicon), key=len, reverse=True):
        boundary = re.compile(
            rf"(?<![A-Za-z0-9-]){re.escape(token)}(?![A-Za-z0-9-])"
        )
        for m in boundary.finditer(raw_caption):
            span = (m.start(), m.end())
            if any(span[0] < c[1] and c[0] < span[1] for c in claimed):
                continue  # a longer lexicon entry already owns this region
            claimed.append(span)
            issues.append(CaptionIssue("imaging_shorthand", span, m.group(0)))

    issues.sort(key=lambda i: (i.span[0], i.span[1], i.kind))
    return issues


def detect_case_report(
    record: ArticleRecord, body_text: str, phrases: Iterable[str] = CASE_REPORT_PHRASES
) -> bool:
    """Metadata short-circuit, then case-insensitive phrase search."""
    if record.article_type == "case_report":
        return True
    haystack = f"{record.title}\n{body_text}".lower()
    return any(p.lower() in haystack for p in phrases)


def parse_article(
    jats_document: str, shorthand_lexicon: Iterable[str] = DEFAULT_SHORTHAND_LEXICON
) -> ArticleParse:
    """Parse one JATS document into an article record plus figure pairs.

    Figures lacking a ``graphic`` reference or a non-empty caption are
    skipped and counted. Raises ``MalformedXml`` for unparseable input
    and ``NotJats`` when the root element is not ``article``.
    """
    try:
        root = ET.fromstring(jats_document)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from exc
    if _localname(root.tag) != "article":
        raise NotJats(f"root element is {_localname(root.tag)!r}, expected 'article'")

    pmcid = ""
    for id_el in _find_all(root, "article-id"):
        id_type = (id_el.get("pub-id-type") or "").lower()
        if id_type in ("pmc", "pmcid"):
            pmcid = (id_el.text or "").strip()
            break
        if not pmcid:
            pmcid = (id_el.text or "").strip()
    pmcid = pmcid or "unknown"

    journal = _flat_text(_first(root, "journal-title"))
    title = _flat_text(_first(root, "article-title"))

    license_candidates: list[str] = []
    for lic in _find_all(root, "license"):
        license_candidates.append(lic.get("license-type") or "")
        for key, value in lic.attrib.items():
            if _localname(key) == "href":
                license_candidates.append(value)
        license_candidates.append(_flat_text(lic))
        for child in lic.iter():
            for key, value in child.attrib.items():
                if _localname(key) == "href":
                    license_candidates.append(value)
    license_name = _map_license(license_candidates)

    figures: list[FigurePair] = []
    skipped = 0
    for ordinal, fig in enumerate(_find_all(root, "fig"), 1):
        graphic = _first(fig, "graphic")
        uri = ""
        if graphic is not None:
            for key, value in graphic.attrib.items():
                if _localname(key) == "href":
                    uri = value
                    break
        caption = _flat_text(_first(fig, "caption"))
        if not uri or not caption:
            skipped += 1
            continue
        figures.append(
            FigurePair(
                article=pmcid,
                figure_id=fig.get("id") or f"fig-{ordinal}",
                graphic_uri=uri,
                raw_caption=caption,
                issues=scan_caption_issues(caption, shorthand_lexicon),
            )
        )

    record = ArticleRecord(
        pmcid=pmcid,
        journal=journal,
        title=title,
        article_type=_map_article_type(root.get("article-type")),
        license=license_name,
        figure_count=len(figures),
    )
    if record.article_type != "case_report":
        body_text = _flat_text(_first(root, "body"))
        if detect_case_report(record, body_text):
            record.article_type = "case_report"
    return ArticleParse(record, figures, skipped)


# ---------------------------------------------------------------------------
# Corpus runs
# ---------------------------------------------------------------------------


def load_journal_whitelist() -> list[str]:
    """The shipped ophthalmology journal list (filtering is opt-in)."""
    data = resources.files("volmo").joinpath("data/ophthalmology_journals.txt")
    return [line.strip() for line in data.read_text("utf-8").splitlines() if line.strip()]


def iter_jats_files(path: str | Path) -> Iterator[Path]:
    path = Path(path)
    if path.is_file():
        yield path
        return
    for p in sorted(path.rglob("*")):
        if p.suffix.lower() in (".xml", ".nxml") and p.is_file():
            yield p


@dataclass
class CorpusStats:
    articles: int = 0
    figures: int = 0
    skipped_figures: int = 0
    filtered_articles: int = 0
    errors: list[dict] = field(default_factory=list)


def extract_corpus(
    input_path: str | Path,
    articles_out: str | Path,
    figures_out: str | Path,
    journal_whitelist: Iterable[str] | None = None,
) -> CorpusStats:
    """Run the parser over a file or directory tree, writing JSONL outputs.

    With a whitelist, articles whose journal is not on it are dropped
    (case-insensitive exact match) and counted as filtered.
    """
    whitelist = {j.lower() for j in journal_whitelist} if journal_whitelist is not None else None
    stats = CorpusStats()
    with open(articles_out, "w", encoding="utf-8") as af, open(
        figures_out, "w", encoding="utf-8"
    ) as ff:
        for path in iter_jats_files(input_path):
            try:
                parsed = parse_article(path.read_text(encoding="utf-8"))
            except (MalformedXml, NotJats, OSError) as exc:
                stats.errors.append({"file": str(path), "error": type(exc).__name__,
                                     "message": str(exc)})
                continue
            if whitelist is not None and parsed.record.journal.lower() not in whitelist:
                stats.filtered_articles += 1
                continue
            af.write(json.dumps(parsed.record.to_json_dict(), ensure_ascii=False) + "\n")
            for fig in parsed.figures:
                ff.write(json.dumps(fig.to_json_dict(), ensure_ascii=False) + "\n")
            stats.articles += 1
            stats.figures += len(parsed.figures)
            stats.skipped_figures += parsed.skipped_figures
    return stats
