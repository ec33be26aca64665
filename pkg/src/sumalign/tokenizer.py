"""Byte-pair subword vocabulary and sequence assembly.

Text is pre-tokenized into runs of word characters and single punctuation
marks.  Each pre-token is split into characters with an end-of-word marker
glued to its last character, so decoding can restore pre-token boundaries.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import CorpusSplit, Sample, extract_action_word

PAD, SOS, EOS, MASK, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<sos>", "<eos>", "<mask>", "<unk>")
END_OF_WORD = "</w>"

MAX_CODE_LEN = 256
MAX_SUMMARY_LEN = 128
DEFAULT_VOCAB_SIZE = 8192

_PRETOKEN_RE = re.compile(r"\w+|[^\w\s]")


def pretokenize(text: str) -> list[str]:
    return _PRETOKEN_RE.findall(text)


def normalize_text(text: str) -> str:
    """The form that ``decode(encode(text))`` reproduces."""
    return " ".join(pretokenize(text))


def _symbols(word: str) -> list[str]:
    chars = list(word)
    chars[-1] = chars[-1] + END_OF_WORD
    return chars


@dataclass
class Vocabulary:
    tokens: list[str]
    merges: list[tuple[str, str]]
    index: dict[str, int] = field(init=False, repr=False)
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False)
    _cache: dict[str, list[int]] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("special tokens must occupy the lowest ids")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.merges = [tuple(m) for m in self.merges]
        self._ranks = {m: r for r, m in enumerate(self.merges)}
        self._cache = {}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def specials(self) -> dict[str, int]:
        return {"pad": PAD, "sos": SOS, "eos": EOS, "mask": MASK, "unk": UNK}

    def _encode_word(self, word: str) -> list[int]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        parts = _symbols(word)
        while len(parts) > 1:
            ranked = [(self._ranks.get((a, b)), i) for i, (a, b) in enumerate(zip(parts, parts[1:]))]
            ranked = [(r, i) for r, i in ranked if r is not None]
            if not ranked:
                break
            _, i = min(ranked)
            parts[i:i + 2] = [parts[i] + parts[i + 1]]
        ids = [self.index.get(p, UNK) for p in parts]
        self._cache[word] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for word in pretokenize(text):
            ids.extend(self._encode_word(word))
        return ids

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        pieces = []
        n = len(self.tokens)
        for i in ids:
            i = int(i)
            if not 0 <= i < n:
                raise IndexError(f"token id {i} out of range for vocabulary of size {n}")
            if i < len(SPECIAL_TOKENS):
                if i == UNK or not skip_special:
                    pieces.append(self.tokens[i] + END_OF_WORD)
                continue
            pieces.append(self.tokens[i])
        return "".join(pieces).replace(END_OF_WORD, " ").strip()

    def to_json(self) -> str:
        obj = {
            "special_ids": self.specials,
            "tokens": self.tokens,
            "merges": [list(m) for m in self.merges],
        }
        return json.dumps(obj, ensure_ascii=False, indent=0)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        obj = json.loads(text)
        vocab = cls(tokens=list(obj["tokens"]), merges=[tuple(m) for m in obj["merges"]])
        if obj.get("special_ids", vocab.specials) != vocab.specials:
            raise ValueError("vocabulary file has an incompatible special-token layout")
        return vocab

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def corpus_texts(corpus: CorpusSplit | Iterable[Sample]) -> list[str]:
    texts = []
    for s in corpus:
        texts.append(s.code)
        texts.append(s.summary)
    return texts


def train_vocab(corpus: CorpusSplit | Sequence[str], target_size: int = DEFAULT_VOCAB_SIZE) -> Vocabulary:
    """Greedy most-frequent-pair BPE.

    ``corpus`` is a split (code and summary texts share one vocabulary) or
    a plain list of strings.  Merging stops at ``target_size`` tokens or
    when no adjacent pair occurs at least twice.  Pair-count ties go to the
    lexicographically smallest pair.
    """
    texts = list(corpus) if corpus and isinstance(next(iter(corpus)), str) else corpus_texts(corpus)
    if not texts:
        raise ValueError("cannot train a vocabulary on an empty corpus")

    word_freq = Counter(w for t in texts for w in pretokenize(t))
    words = sorted(word_freq)
    seqs = [_symbols(w) for w in words]
    freqs = [word_freq[w] for w in words]

    base = sorted({sym for seq in seqs for sym in seq})
    if target_size <= len(SPECIAL_TOKENS) + len(base):
        raise ValueError(
            f"target_size={target_size} leaves no room for merges "
            f"({len(SPECIAL_TOKENS)} special + {len(base)} base symbols)")

    tokens = list(SPECIAL_TOKENS) + base
    known = set(tokens)
    merges: list[tuple[str, str]] = []

    pair_counts: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, seq in enumerate(seqs):
        for pair in zip(seq, seq[1:]):
            pair_counts[pair] += freqs[wi]
            where[pair].add(wi)
    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    while len(tokens) < target_size and heap:
        neg, pair = heapq.heappop(heap)
        if pair_counts.get(pair, 0) != -neg:
            continue  # stale entry
        if -neg < 2:
            break
        merged = pair[0] + pair[1]
        merges.append(pair)
        if merged not in known:
            known.add(merged)
            tokens.append(merged)

        touched: Counter = Counter()
        for wi in sorted(where.pop(pair, ())):
            seq, f = seqs[wi], freqs[wi]
            for p in zip(seq, seq[1:]):
                pair_counts[p] -= f
                touched[p] += 1
            new = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == pair[0] and seq[i + 1] == pair[1]:
                    new.append(merged)
                    i += 2
                else:
                    new.append(seq[i])
                    i += 1
            seqs[wi] = new
            for p in zip(new, new[1:]):
                pair_counts[p] += f
                touched[p] += 1
                where[p].add(wi)
        pair_counts.pop(pair, None)
        for p in touched:
            c = pair_counts.get(p, 0)
            if c <= 0:
                pair_counts.pop(p, None)
            else:
                heapq.heappush(heap, (-c, p))

    return Vocabulary(tokens=tokens, merges=merges)


@dataclass(frozen=True)
class TokenizedPair:
    code_ids: tuple[int, ...]
    summary_ids: tuple[int, ...]
    action_word: str = ""
    truncated: bool = False

    def __post_init__(self):
        c, s = self.code_ids, self.summary_ids
        if len(c) < 2 or c[0] != SOS or c[-1] != EOS:
            raise ValueError("code region must be framed <sos> ... <eos>")
        if len(s) < 1 or s[-1] != EOS:
            raise ValueError("summary region must end with <eos>")
        if PAD in c or PAD in s:
            raise ValueError("PAD inside a sequence region")


def assemble(vocab: Vocabulary, sample: Sample,
             max_code_len: int = MAX_CODE_LEN,
             max_summary_len: int = MAX_SUMMARY_LEN) -> TokenizedPair:
    """Frame the code as ``<sos> code <eos>`` and the summary as ``summary <eos>``.

    Both regions keep their prefix when too long; the closing ``<eos>``
    always survives truncation.
    """
    code = vocab.encode(sample.code)
    summ = vocab.encode(sample.summary)
    truncated = len(code) > max_code_len - 2 or len(summ) > max_summary_len - 1
    code_ids = (SOS, *code[:max_code_len - 2], EOS)
    summary_ids = (*summ[:max_summary_len - 1], EOS)
    return TokenizedPair(code_ids, summary_ids, extract_action_word(sample.summary), truncated)


def assemble_all(vocab: Vocabulary, corpus: Iterable[Sample], **kw) -> list[TokenizedPair]:
    return [assemble(vocab, s, **kw) for s in corpus]
