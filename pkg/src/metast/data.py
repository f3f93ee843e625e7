"""Datasets: CoNLL column files, K-shot splits, synthetic corpora, label noise."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .labels import LabelScheme, SchemeError, TaggedSentence, bio_encode, Span
from .model import Vocab

log = logging.getLogger(__name__)


class ConllParseError(ValueError):
    def __init__(self, lineno: int, line: str, reason: str):
        super().__init__(f"line {lineno}: {reason}: {line!r}")
        self.lineno = lineno


@dataclass
class Dataset:
    sentences: list[TaggedSentence]
    scheme: LabelScheme
    vocab: Vocab | None = None

    def __len__(self):
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)

    def tag_lists(self) -> list[np.ndarray]:
        return [s.tags for s in self.sentences]

    def subset(self, idx) -> "Dataset":
        return Dataset([self.sentences[i] for i in idx], self.scheme, self.vocab)

    def with_vocab(self, vocab: Vocab) -> "Dataset":
        return Dataset(self.sentences, self.scheme, vocab)

    def slot_types_in(self, i: int) -> set[str]:
        return {self.scheme.slot_of(int(t)) for t in self.sentences[i].tags if t != 0}


# -------------------------------------------------------------------- CoNLL

def parse_conll(text: str, scheme: LabelScheme | None = None) -> Dataset:
    """Parse ``token tag`` lines; blank lines end sentences, ``-DOCSTART-`` is skipped.

    Extra middle columns (CoNLL-2003 POS/chunk) are tolerated: the first
    field is the token and the last is the tag.
    """
    raw: list[tuple[list[str], list[str]]] = []
    toks, tags = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            if toks:
                raw.append((toks, tags))
                toks, tags = [], []
            continue
        if line.startswith("-DOCSTART-"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise ConllParseError(lineno, line, "expected 'token tag'")
        tag = parts[-1]
        if scheme is not None and tag not in scheme.tag_index:
            raise SchemeError(f"line {lineno}: tag {tag!r} not in scheme")
        toks.append(parts[0])
        tags.append(tag)
    if toks:
        raw.append((toks, tags))

    if scheme is None:
        scheme = LabelScheme.from_tags(t for _, ts in raw for t in ts)
    sentences = [TaggedSentence(tk, [scheme.id(t) for t in tg]) for tk, tg in raw]
    return Dataset(sentences, scheme, Vocab.build(tk for tk, _ in raw))


def serialize_conll(data: Dataset) -> str:
    blocks = []
    for s in data.sentences:
        blocks.append("\n".join(f"{tok} {data.scheme.tags[t]}" for tok, t in zip(s.tokens, s.tags)))
    return "\n\n".join(blocks) + ("\n" if blocks else "")


def read_conll(path, scheme: LabelScheme | None = None) -> Dataset:
    with open(path, encoding="utf-8") as f:
        return parse_conll(f.read(), scheme)


# ------------------------------------------------------------------ K-shot

@dataclass
class FewShotSplit:
    labeled: Dataset
    unlabeled: Dataset
    test: Dataset
    seed: int
    # gold tags of the unlabeled pool, kept only for diagnostics
    unlabeled_gold: list[np.ndarray] = field(default_factory=list, repr=False)
    warnings: list[str] = field(default_factory=list)


def kshot_sample(train: Dataset, K: int, seed: int, test: Dataset | None = None) -> FewShotSplit:
    """Greedy covering sampler: a sentence credits every slot type it contains.

    Slot types are visited in scheme order; for each, sentences containing it
    are drawn uniformly without replacement until K credits are reached or
    the candidates run out. Everything else becomes the unlabeled pool.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(seed)
    types_of = [train.slot_types_in(i) for i in range(len(train))]
    credits = Counter()
    chosen: list[int] = []
    taken = np.zeros(len(train), dtype=bool)
    warnings = []
    for slot in train.scheme.slot_types:
        cands = [i for i, ts in enumerate(types_of) if slot in ts]
        if not cands:
            msg = f"slot type {slot!r} absent from training data; skipped"
            log.warning(msg)
            warnings.append(msg)
            continue
        for i in rng.permutation(cands):
            if credits[slot] >= K:
                break
            if taken[i]:
                continue
            taken[i] = True
            chosen.append(int(i))
            credits.update(types_of[i])

    vocab = Vocab.build(s.tokens for s in train.sentences)
    rest = [i for i in range(len(train)) if not taken[i]]
    hidden = [TaggedSentence(train.sentences[i].tokens, np.zeros(len(train.sentences[i]), dtype=np.int64))
              for i in rest]
    test = test if test is not None else Dataset([], train.scheme)
    return FewShotSplit(
        labeled=Dataset([train.sentences[i] for i in chosen], train.scheme, vocab),
        unlabeled=Dataset(hidden, train.scheme, vocab),
        test=test.with_vocab(vocab),
        seed=seed,
        unlabeled_gold=[train.sentences[i].tags.copy() for i in rest],
        warnings=warnings,
    )


def subsample_unlabeled(split: FewShotSplit, fraction: float, seed: int) -> FewShotSplit:
    """Keep a random ``fraction`` of the unlabeled pool (at least one sentence)."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    n = len(split.unlabeled)
    keep = np.sort(np.random.default_rng(seed).permutation(n)[:max(1, round(fraction * n))])
    return replace(split, unlabeled=split.unlabeled.subset(keep),
                   unlabeled_gold=[split.unlabeled_gold[i] for i in keep] if split.unlabeled_gold else [])


# --------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SynthSpec:
    n_slot_types: int = 2
    vocab_size: int = 200
    n_sentences: int = 500
    length_range: tuple[int, int] = (6, 14)
    span_rate: float = 0.15
    slot_word_disjointness: float = 1.0
    seed: int = 0
    # probability that a span is preceded by a cue word specific to its type
    cue_rate: float = 0.0
    # words per slot-type lexicon; 0 means vocab_size // (2 * n_slot_types)
    slot_lexicon_size: int = 0

    def __post_init__(self):
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad length_range {self.length_range}")
        if not 0 <= self.span_rate < 1:
            raise ValueError("span_rate must be in [0, 1)")
        if not 0 <= self.slot_word_disjointness <= 1:
            raise ValueError("slot_word_disjointness must be in [0, 1]")
        if not 0 <= self.cue_rate <= 1:
            raise ValueError("cue_rate must be in [0, 1]")
        if self.n_slot_types < 1 or self.n_sentences < 0:
            raise ValueError("need at least one slot type and n_sentences >= 0")


@dataclass
class _Lexicon:
    slot_words: list[list[str]]
    background: list[str]
    cues: list[str]


def _lexicon(spec: SynthSpec) -> _Lexicon:
    k = spec.n_slot_types
    per_slot = spec.slot_lexicon_size or spec.vocab_size // (2 * k)
    n_excl = round(spec.slot_word_disjointness * per_slot)
    n_cue = k if spec.cue_rate > 0 else 0
    n_background = spec.vocab_size - k * n_excl - n_cue
    if per_slot < 1 or n_background < max(1, per_slot - n_excl):
        raise ValueError(f"vocab_size {spec.vocab_size} too small for {k} slot types "
                         f"at disjointness {spec.slot_word_disjointness}")
    rng = np.random.default_rng([spec.seed, 1])
    background = [f"w{i}" for i in range(n_background)]
    slot_words = []
    for s in range(k):
        own = [f"s{s}_{i}" for i in range(n_excl)]
        shared = [background[i] for i in rng.choice(n_background, per_slot - n_excl, replace=False)]
        slot_words.append(own + shared)
    return _Lexicon(slot_words, background, [f"c{s}" for s in range(n_cue)])


def slot_name(i: int) -> str:
    return "ABCDEFGHIJKLMNOPQRSTUVWXYZ"[i] if i < 26 else f"T{i}"


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Sentences of background words with inserted slot spans of length 1-3.

    Spans are always followed by an ``O`` token when room remains, so every
    emitted sequence is valid BIO and adjacent spans never touch.
    """
    lex = _lexicon(spec)
    scheme = LabelScheme(tuple(slot_name(i) for i in range(spec.n_slot_types)))
    rng = np.random.default_rng([spec.seed, 2])
    lo, hi = spec.length_range
    sentences = []
    for _ in range(spec.n_sentences):
        length = int(rng.integers(lo, hi + 1))
        toks: list[str] = []
        spans: list[Span] = []
        while len(toks) < length:
            room = length - len(toks)
            if rng.random() < spec.span_rate:
                slot = int(rng.integers(spec.n_slot_types))
                if lex.cues and room >= 2 and rng.random() < spec.cue_rate:
                    toks.append(lex.cues[slot])
                    room -= 1
                span_len = min(int(rng.integers(1, 4)), room)
                words = lex.slot_words[slot]
                start = len(toks)
                toks += [words[int(j)] for j in rng.integers(len(words), size=span_len)]
                spans.append(Span(start, start + span_len - 1, scheme.slot_types[slot]))
                if len(toks) < length:
                    toks.append(lex.background[int(rng.integers(len(lex.background)))])
            else:
                toks.append(lex.background[int(rng.integers(len(lex.background)))])
        sentences.append(TaggedSentence(toks, bio_encode(spans, len(toks), scheme)))
    return Dataset(sentences, scheme, Vocab.build(s.tokens for s in sentences))


def corrupt_labels(data: Dataset, flip_rate: float, seed) -> tuple[Dataset, list[np.ndarray]]:
    """Replace each tag, with probability ``flip_rate``, by a uniformly drawn different tag.

    Returns the corrupted dataset and a boolean mask per sentence marking
    flipped tokens.
    """
    if not 0 <= flip_rate <= 1:
        raise ValueError("flip_rate must be in [0, 1]")
    rng = np.random.default_rng(seed)
    n_tags = data.scheme.n_tags
    out, masks = [], []
    for s in data.sentences:
        flip = rng.random(len(s)) < flip_rate
        shift = rng.integers(1, n_tags, size=len(s))
        tags = np.where(flip, (s.tags + shift) % n_tags, s.tags)
        out.append(TaggedSentence(s.tokens, tags))
        masks.append(flip)
    return Dataset(out, data.scheme, data.vocab), masks


# ---------------------------------------------------------------- baseline

def lookup_baseline(train: Dataset, sentences: list[list[str]]) -> list[np.ndarray]:
    """Majority slot type per word, then BIO-encode maximal same-type runs.

    Unknown words and words seen mostly outside spans are tagged ``O``.
    """
    scheme = train.scheme
    counts: dict[str, Counter] = {}
    for s in train.sentences:
        for tok, t in zip(s.tokens, s.tags):
            counts.setdefault(tok, Counter())[scheme.slot_of(int(t))] += 1
    best = {tok: c.most_common(1)[0][0] for tok, c in counts.items()}
    out = []
    for toks in sentences:
        types = [best.get(t) for t in toks]
        tags = np.zeros(len(toks), dtype=np.int64)
        for i, ty in enumerate(types):
            if ty is None:
                continue
            cont = i > 0 and types[i - 1] == ty
            tags[i] = scheme.inside_id(ty) if cont else scheme.begin_id(ty)
        out.append(tags)
    return out
