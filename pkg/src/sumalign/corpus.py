"""Code/summary corpora, train-test dedup and action-word tables."""

from __future__ import annotations

import json
import logging
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "valid", "test")
TRAILING_PUNCT = ".,;:!?"
DEFAULT_K = 40


@dataclass(frozen=True)
class Sample:
    code: str
    summary: str
    id: int

    def __post_init__(self):
        if not self.code.strip():
            raise ValueError(f"sample {self.id}: empty code")
        if not self.summary.split():
            raise ValueError(f"sample {self.id}: summary has no words")


@dataclass
class CorpusSplit:
    name: str
    samples: list[Sample]
    skipped: int = 0

    def __post_init__(self):
        if self.name not in SPLIT_NAMES:
            raise ValueError(f"split name must be one of {SPLIT_NAMES}, got {self.name!r}")
        for i, s in enumerate(self.samples):
            if s.id != i:
                raise ValueError(f"sample ids must be contiguous from 0 (position {i} has id {s.id})")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @classmethod
    def from_pairs(cls, name: str, pairs: Iterable[tuple[str, str]]) -> "CorpusSplit":
        return cls(name, [Sample(code, summary, i) for i, (code, summary) in enumerate(pairs)])

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.samples:
                fh.write(json.dumps({"code": s.code, "summary": s.summary}, ensure_ascii=False) + "\n")


def load_corpus(path: str | Path, split_name: str) -> CorpusSplit:
    """Read a JSON-Lines file of ``{"code": ..., "summary": ...}`` objects.

    Malformed lines (bad JSON, missing or non-string fields, empty code or
    summary) are skipped with a warning; the number skipped is stored on
    the returned split.  A missing file raises ``FileNotFoundError``.
    """
    path = Path(path)
    pairs: list[tuple[str, str]] = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                obj = None
            code = obj.get("code") if isinstance(obj, dict) else None
            summary = obj.get("summary") if isinstance(obj, dict) else None
            if not isinstance(code, str) or not isinstance(summary, str):
                logger.warning("%s:%d: missing 'code' or 'summary' field, skipped", path, lineno)
                skipped += 1
                continue
            if not code.strip() or not summary.split():
                logger.warning("%s:%d: empty code or summary, skipped", path, lineno)
                skipped += 1
                continue
            pairs.append((code, summary))
    split = CorpusSplit.from_pairs(split_name, pairs)
    split.skipped = skipped
    if skipped:
        logger.warning("%s: %d malformed line(s) skipped", path, skipped)
    return split


def normalize_code(code: str) -> str:
    return " ".join(code.split())


def dedup_against(train: CorpusSplit, test: CorpusSplit) -> CorpusSplit:
    """Drop train samples whose whitespace-normalized code also occurs in test."""
    test_keys = {normalize_code(s.code) for s in test}
    kept = [(s.code, s.summary) for s in train if normalize_code(s.code) not in test_keys]
    return CorpusSplit.from_pairs(train.name, kept)


def extract_action_word(summary: str) -> str:
    words = summary.split()
    if not words:
        raise ValueError("cannot extract an action word from an empty summary")
    return words[0].lower().rstrip(TRAILING_PUNCT)


@dataclass
class ActionWordTable:
    words: list[str]
    counts: dict[str, int]
    k: int = DEFAULT_K
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("duplicate words in action table")

    @property
    def other_id(self) -> int:
        return len(self.words)

    @property
    def n_classes(self) -> int:
        return len(self.words) + 1

    def label_of(self, summary: str) -> int:
        return self.index.get(extract_action_word(summary), self.other_id)

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "words": self.words, "counts": self.counts},
                          ensure_ascii=False, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ActionWordTable":
        obj = json.loads(text)
        return cls(words=list(obj["words"]), counts=dict(obj["counts"]), k=int(obj["k"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ActionWordTable":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_action_table(train: CorpusSplit, k: int = DEFAULT_K) -> ActionWordTable:
    """Top-``k`` action words by training frequency, ties broken lexicographically.

    ``counts`` records the frequency of every action word seen in the
    split, not only the retained ones.
    """
    if len(train) == 0:
        raise ValueError("cannot build an action table from an empty split")
    counts = Counter(extract_action_word(s.summary) for s in train)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if len(ranked) < k:
        logger.warning("only %d distinct action words (< k=%d); table shrinks to %d classes",
                       len(ranked), k, len(ranked) + 1)
    words = [w for w, _ in ranked[:k]]
    return ActionWordTable(words=words, counts={w: c for w, c in ranked}, k=k)


def label_of(table: ActionWordTable, summary: str) -> int:
    return table.label_of(summary)


def coverage(table: ActionWordTable, split: CorpusSplit) -> float:
    """Fraction of samples whose action word is inside the table."""
    if len(split) == 0:
        return 0.0
    hits = sum(1 for s in split if table.label_of(s.summary) != table.other_id)
    return hits / len(split)


# ---------------------------------------------------------------------------
# synthetic corpus, used by the tests and the CLI smoke paths

_VERBS = {
    "get": ("return {obj};", "get the {words}"),
    "set": ("this.{obj} = value;", "set the {words}"),
    "is": ("return {obj} != null;", "is {words} present"),
    "add": ("{obj}List.add(item);", "add an item to the {words} list"),
    "remove": ("{obj}List.remove(item);", "remove an item from the {words} list"),
    "reset": ("{obj} = 0;", "reset the {words} counter"),
    "create": ("return new {cls}();", "create a new {words}"),
    "close": ("{obj}.close();", "close the {words}"),
}
_NOUNS = ["node", "backup", "partition", "user", "name", "index", "buffer", "stream",
          "session", "file", "cache", "token", "value", "count", "table", "entry"]


def _camel(parts: Sequence[str]) -> str:
    return parts[0] + "".join(p.capitalize() for p in parts[1:])


def synthetic_pairs(n: int, seed: int = 0) -> list[tuple[str, str]]:
    """Java-like getter/setter style methods with templated summaries.

    Every pair is unique; the action word is always the method's verb.
    """
    rng = random.Random(seed)
    verbs = sorted(_VERBS)
    seen: set[str] = set()
    out: list[tuple[str, str]] = []
    while len(out) < n:
        verb = verbs[rng.randrange(len(verbs))]
        nouns = rng.sample(_NOUNS, rng.choice((1, 2)))
        obj = _camel(nouns)
        cls = "".join(w.capitalize() for w in nouns)
        body, summ = _VERBS[verb]
        code = f"public void {verb}{cls}() {{ {body.format(obj=obj, cls=cls)} }}"
        if code in seen:
            continue
        seen.add(code)
        out.append((code, summ.format(words=" ".join(nouns))))
    return out


def synthetic_corpus(n: int, seed: int = 0, name: str = "train") -> CorpusSplit:
    return CorpusSplit.from_pairs(name, synthetic_pairs(n, seed))


_WORD_RE = re.compile(r"\S+")


def summary_length(summary: str) -> int:
    """Comment length in words."""
    return len(_WORD_RE.findall(summary))


def code_length(code: str) -> int:
    """Code length in (non-blank) lines."""
    return sum(1 for line in code.splitlines() if line.strip())
