"""Readable term lists from token-level saliency over a source text."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .integrated_gradients import IGConfig, integrated_gradients

DEFAULT_NEGATORS = frozenset({"no", "not", "denies", "without", "non"})
DEFAULT_WHITELIST = frozenset({"nsr", "hr", "bp"})
DEFAULT_STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are as at be because been
    before being below between both but by can could did do does doing down during
    each few for from further had has have having he her here hers herself him
    himself his how i if in into is it its itself just me more most my myself no
    nor not of off on once only or other our ours out over own same she should so
    some such than that the their theirs them then there these they this those
    through to too under until up very was we were what when where which while who
    whom why will with would you your yours
    """.split()
)
_SENTENCE_END = re.compile(r"[.!?\n]")


@dataclass(frozen=True)
class TokenAttribution:
    tokens: tuple[str, ...]
    spans: tuple[tuple[int, int], ...]
    saliency: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "spans", tuple((int(a), int(b)) for a, b in self.spans))
        object.__setattr__(self, "saliency", np.asarray(self.saliency, dtype=float))
        if not len(self.tokens) == len(self.spans) == len(self.saliency):
            raise ValueError("tokens, spans and saliency differ in length")
        prev_end = 0
        for a, b in self.spans:
            if a < prev_end or b < a:
                raise ValueError("token spans must be ordered and non-overlapping")
            prev_end = b

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "spans": [list(s) for s in self.spans], "saliency": self.saliency.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TokenAttribution":
        return cls(tuple(d["tokens"]), tuple(tuple(s) for s in d["spans"]), np.asarray(d["saliency"], float))


@dataclass
class Term:
    text: str
    saliency: float
    span: tuple[int, int]


@dataclass(frozen=True)
class TokenReportOptions:
    negators: frozenset = DEFAULT_NEGATORS
    stopwords: frozenset = DEFAULT_STOPWORDS
    whitelist: frozenset = DEFAULT_WHITELIST
    sign_frac: float = 0.20
    snippet_cap: int = 200
    continuation_prefix: str = "##"


@dataclass
class TokenReport:
    increasing: list[tuple[str, float]]
    reducing: list[tuple[str, float]]
    snippets: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "risk_increasing": [{"term": t, "saliency": s} for t, s in self.increasing],
            "risk_reducing": [{"term": t, "saliency": s} for t, s in self.reducing],
            "snippets": self.snippets,
        }

    def render(self) -> str:
        lines = ["Risk-increasing terms:"]
        lines += [f"  {t:<30} {s:+.4f}" for t, s in self.increasing] or ["  (none)"]
        lines.append("Risk-reducing terms:")
        lines += [f"  {t:<30} {s:+.4f}" for t, s in self.reducing] or ["  (none)"]
        for sign in ("positive", "negative"):
            if sign in self.snippets:
                sn = self.snippets[sign]
                lines.append(f'Context for "{sn["term"]}": {sn["text"]}')
        return "\n".join(lines)


def _merge_subwords(ta: TokenAttribution, text: str, prefix: str) -> list[Term]:
    words: list[Term] = []
    for tok, (a, b), s in zip(ta.tokens, ta.spans, ta.saliency):
        if prefix and tok.startswith(prefix) and words:
            w = words[-1]
            w.span = (w.span[0], b)
            w.saliency += float(s)
            w.text = text[w.span[0] : b]
        else:
            words.append(Term(text[a:b], float(s), (a, b)))
    return words


def _negation_bigrams(words: list[Term], negators) -> list[Term]:
    out: list[Term] = []
    i = 0
    while i < len(words):
        w = words[i]
        nxt_is_word = i + 1 < len(words) and any(ch.isalnum() for ch in words[i + 1].text)
        if w.text.lower() in negators and nxt_is_word:
            nxt = words[i + 1]
            out.append(Term(f"{w.text} {nxt.text}", w.saliency + nxt.saliency, (w.span[0], nxt.span[1])))
            i += 2
        else:
            out.append(w)
            i += 1
    return out


def _collapse_duplicates(terms: list[Term]) -> list[Term]:
    best: dict[str, Term] = {}
    for t in terms:
        key = t.text.lower()
        cur = best.get(key)
        if cur is None or abs(t.saliency) > abs(cur.saliency):
            best[key] = t
    return list(best.values())


def _keep(term: Term, opts: TokenReportOptions) -> bool:
    low = term.text.lower()
    if low in opts.whitelist:
        return True
    if " " in low:
        return True
    if not any(ch.isalnum() for ch in low):
        return False
    return low not in opts.stopwords


def context_snippet(text: str, span: tuple[int, int], cap: int = 200) -> str:
    """Sentence around ``span``; if longer than ``cap``, a window centred on the span with ellipses."""
    a, b = span
    start = 0
    for m in _SENTENCE_END.finditer(text, 0, a):
        start = m.end()
    m = _SENTENCE_END.search(text, b)
    end = m.end() if m else len(text)
    while start < a and text[start].isspace():
        start += 1
    while end > b and text[end - 1].isspace():
        end -= 1
    if end - start <= cap:
        return text[start:end]
    width = cap - 2
    centre = (a + b) // 2
    lo = max(start, centre - width // 2)
    hi = min(end, lo + width)
    lo = max(start, hi - width)
    return ("…" if lo > start else "") + text[lo:hi] + ("…" if hi < end else "")


def token_report(ta: TokenAttribution, source_text: str, opts: TokenReportOptions | None = None) -> TokenReport:
    """Turn token saliency into ranked risk-increasing and risk-reducing terms.

    Steps: merge subword pieces into words (saliency summed); join each
    negator with the following word; keep the peak-|saliency| occurrence of
    repeated terms; drop stopwords unless whitelisted; per sign keep terms at
    or above ``sign_frac`` of that sign's largest magnitude; attach a context
    snippet for the strongest term of each sign.
    """
    opts = opts or TokenReportOptions()
    if ta.spans and ta.spans[-1][1] > len(source_text):
        raise ValueError("token span runs past the end of the source text")
    words = _merge_subwords(ta, source_text, opts.continuation_prefix)
    terms = _negation_bigrams(words, {n.lower() for n in opts.negators})
    terms = _collapse_duplicates(terms)
    lowered = replace(
        opts,
        whitelist=frozenset(w.lower() for w in opts.whitelist),
        stopwords=frozenset(w.lower() for w in opts.stopwords),
    )
    terms = [t for t in terms if _keep(t, lowered)]

    pos = sorted((t for t in terms if t.saliency > 0), key=lambda t: -t.saliency)
    neg = sorted((t for t in terms if t.saliency < 0), key=lambda t: t.saliency)
    if pos:
        cut = opts.sign_frac * pos[0].saliency
        pos = [t for t in pos if t.saliency >= cut]
    if neg:
        cut = opts.sign_frac * abs(neg[0].saliency)
        neg = [t for t in neg if abs(t.saliency) >= cut]

    snippets = {}
    for sign, lst in (("positive", pos), ("negative", neg)):
        if lst:
            top = lst[0]
            snippets[sign] = {
                "term": top.text,
                "saliency": top.saliency,
                "text": context_snippet(source_text, top.span, opts.snippet_cap),
            }
    return TokenReport(
        increasing=[(t.text, t.saliency) for t in pos],
        reducing=[(t.text, t.saliency) for t in neg],
        snippets=snippets,
    )


def tokenize_whitespace(text: str) -> tuple[list[str], list[tuple[int, int]]]:
    """Word/punctuation tokens with character spans; a convenience for tests and demos."""
    toks, spans = [], []
    for m in re.finditer(r"\w+|[^\w\s]", text):
        toks.append(m.group())
        spans.append(m.span())
    return toks, spans


def attribute_tokens(scorer, embeddings, pad_embedding, steps: int = 25) -> np.ndarray:
    """Per-token IG saliency: integrate over an (n_tokens, dim) embedding matrix, sum over dim."""
    E = np.asarray(embeddings, dtype=float)
    base = np.broadcast_to(np.asarray(pad_embedding, dtype=float), E.shape).copy()
    attr = integrated_gradients(scorer, E, IGConfig(steps=steps, baseline=base))
    return attr.sum(axis=1)


def options(
    negators: Sequence[str] | None = None,
    stopwords: Sequence[str] | None = None,
    whitelist: Sequence[str] | None = None,
    **kw,
) -> TokenReportOptions:
    """Build :class:`TokenReportOptions`, replacing only the lists given."""
    upd = dict(kw)
    if negators is not None:
        upd["negators"] = frozenset(negators)
    if stopwords is not None:
        upd["stopwords"] = frozenset(stopwords)
    if whitelist is not None:
        upd["whitelist"] = frozenset(whitelist)
    return replace(TokenReportOptions(), **upd)
