"""Word n-gram decontamination of training text against evaluation text."""

from __future__ import annotations

import json
import sys
import unicodedata
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator

from .errors import InputDomainError

DEFAULT_NGRAM = 10


@dataclass(frozen=True)
class NormalizedText:
    tokens: tuple[str, ...]

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def __len__(self):
        return len(self.tokens)


@lru_cache(maxsize=1)
def _separator_table() -> dict[int, str]:
    """Every Unicode punctuation (P*) and symbol (S*) code point maps to a space."""
    return {
        cp: " "
        for cp in range(sys.maxunicode + 1)
        if unicodedata.category(chr(cp))[0] in "PS"
    }


def decode_text(raw, offset: int = 0) -> str:
    if isinstance(raw, str):
        return raw
    try:
        return bytes(raw).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InputDomainError(f"invalid UTF-8 at byte offset {offset + exc.start}") from None


def _tokens(text: str) -> list[str]:
    return text.lower().translate(_separator_table()).split()


def normalize(raw) -> NormalizedText:
    """Lower-case, turn punctuation and symbols into separators, split on whitespace."""
    return NormalizedText(tuple(_tokens(decode_text(raw))))


def _records(records: Iterable) -> Iterator[tuple[object, str]]:
    for i, rec in enumerate(records):
        if isinstance(rec, tuple):
            yield rec[0], decode_text(rec[1])
        else:
            yield i, decode_text(rec)


@dataclass
class NGramIndex:
    n: int = DEFAULT_NGRAM
    # gram -> id of the first evaluation record containing it
    grams: dict = field(default_factory=dict)
    source_count: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise InputDomainError("gram length must be >= 1")

    def __len__(self):
        return len(self.grams)

    def __contains__(self, gram) -> bool:
        return tuple(gram) in self.grams

    def add(self, source_id, text: str) -> None:
        toks = _tokens(text)
        n = self.n
        self.source_count += 1
        if len(toks) < n:
            return
        for gram in zip(*(toks[i:] for i in range(n))):
            self.grams.setdefault(gram, source_id)

    def first_match(self, toks: list[str]):
        n = self.n
        if len(toks) < n:
            return None
        grams = self.grams
        for gram in zip(*(toks[i:] for i in range(n))):
            if gram in grams:
                return gram
        return None


def build_index(eval_sets: Iterable, n: int = DEFAULT_NGRAM) -> NGramIndex:
    """Index every ``n``-token window of every normalized evaluation record.

    Records are plain strings (identified by position) or ``(source_id, text)`` pairs.
    """
    index = NGramIndex(n)
    for source_id, text in _records(eval_sets):
        index.add(source_id, text)
    return index


def filter_corpus(train: Iterable, index: NGramIndex):
    """Split ``train`` into records with no indexed window and records with one.

    Returns ``(kept, removed, report)``; ``kept`` and ``removed`` hold the input
    records in their original order, ``report`` has one entry per removal.
    """
    kept, removed, report = [], [], []
    for i, rec in enumerate(train):
        rid, text = (rec[0], rec[1]) if isinstance(rec, tuple) else (i, rec)
        hit = index.first_match(_tokens(decode_text(text)))
        if hit is None:
            kept.append(rec)
        else:
            removed.append(rec)
            report.append({"record_id": rid, "matched_window": list(hit), "eval_source": index.grams[hit]})
    return kept, removed, report


def read_records(path, text_field: str | None = None) -> list[tuple[object, str, str]]:
    """``(record_id, text, raw_line)`` for each line of ``path``.

    With ``text_field`` every non-blank line is a JSON object and the text is
    read from that field; the id comes from its ``id`` key when present.
    """
    out = []
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh):
            line = decode_text(raw, offset).rstrip("\r\n")
            offset += len(raw)
            if text_field is None:
                out.append((lineno, line, line))
            elif line.strip():
                obj = json.loads(line)
                out.append((obj.get("id", lineno), obj[text_field], line))
    return out


def run_decontam(train_path, eval_paths, kept_path, removed_path=None, report_path=None, n=DEFAULT_NGRAM, text_field=None) -> dict:
    index = NGramIndex(n)
    for ep in eval_paths:
        for rid, text, _ in read_records(ep, text_field):
            index.add(f"{Path(ep).name}:{rid}", text)
    records = read_records(train_path, text_field)
    kept, removed, report = filter_corpus(records, index)

    def dump(path, recs):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for rec in recs:
                fh.write(rec[2] + "\n")

    dump(kept_path, kept)
    if removed_path:
        dump(removed_path, removed)
    if report_path:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        with open(report_path, "w", encoding="utf-8") as fh:
            for row in report:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    return {"n": n, "eval_grams": len(index), "input": len(records), "kept": len(kept), "removed": len(removed)}
