"""Corpora: synthetic two-domain generation, JSONL loading/writing, and paired source/target batching."""

import hashlib
import itertools
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from untl.common import ConfigError, DataFormatError
from untl.encoder import (DEFAULT_MAX_LEN, DEFAULT_NUM_CLASSES, DOMAINS, SOURCE, TARGET, Example, Vocab,
                          tokenize)
from untl.keys import DEFAULT_PROMPT_TEXT

logger = logging.getLogger(__name__)

TRAIN = 'train'
DEV = 'dev'
TEST = 'test'
SPLITS = (TRAIN, DEV, TEST)

RECORD_FIELDS = {'text', 'label', 'domain'}
VOCAB_FILE = 'vocab.txt'


def corpus_filename(domain: str, split: str) -> str:
    return f"{domain}_{split}.jsonl"


@dataclass(frozen=True)
class Corpus:
    examples: Tuple[Example, ...]
    domain: Optional[str]
    split: str
    provenance: str

    def __post_init__(self):
        domains = {ex.domain for ex in self.examples}
        if len(domains) > 1:
            raise DataFormatError(f"{self.provenance}: corpus mixes domains {sorted(domains)}")
        if domains and self.domain not in domains:
            raise DataFormatError(f"{self.provenance}: corpus tagged {self.domain!r} holds {domains.pop()!r} examples")

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def is_labeled(self) -> bool:
        return bool(self.examples) and all(ex.label is not None for ex in self.examples)

    @property
    def token_ids(self) -> List[Tuple[int, ...]]:
        return [ex.token_ids for ex in self.examples]

    @property
    def labels(self) -> np.ndarray:
        if not self.is_labeled:
            raise DataFormatError(f"{self.provenance}: corpus is not fully labeled")
        return np.array([ex.label for ex in self.examples], dtype=np.int64)

    def label_distribution(self) -> Dict[int, int]:
        return dict(sorted(Counter(ex.label for ex in self.examples if ex.label is not None).items()))

    def records(self) -> List[str]:
        return [_record_line(ex) for ex in self.examples]

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for line in self.records():
            digest.update(line.encode('utf-8'))
            digest.update(b'\n')
        return digest.hexdigest()


def _record_line(example: Example) -> str:
    record = {'text': example.text, 'domain': example.domain}
    if example.label is not None:
        record['label'] = example.label
    return json.dumps(record, sort_keys=True, ensure_ascii=False)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """
    Two domains that share label-signal tokens and differ in marker tokens.

    Each example holds ``signal_per_example`` tokens from its label's pool,
    ``markers_per_example`` tokens from its domain's pool and noise tokens up to
    ``seq_len`` content tokens.
    """
    num_classes: int = DEFAULT_NUM_CLASSES
    signal_tokens_per_class: int = 6
    marker_tokens_per_domain: int = 12
    noise_tokens: int = 60
    seq_len: int = 14
    signal_per_example: int = 3
    markers_per_example: int = 4
    train_size: int = 2000
    dev_size: int = 250
    test_size: int = 250
    seed: int = 13
    signal_prefix: str = 'sig'
    source_marker_prefix: str = 'src'
    target_marker_prefix: str = 'tgt'
    noise_prefix: str = 'w'
    extra_tokens: str = DEFAULT_PROMPT_TEXT

    def __post_init__(self):
        counts = ('num_classes', 'signal_tokens_per_class', 'marker_tokens_per_domain', 'noise_tokens',
                  'seq_len', 'signal_per_example', 'markers_per_example', 'train_size', 'dev_size', 'test_size')
        for name in counts:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"synthetic spec: {name} must be an integer >= 1, got {value!r}")
        if self.signal_per_example + self.markers_per_example > self.seq_len:
            raise ConfigError("synthetic spec: seq_len must hold the signal and marker tokens")

    def pools(self) -> Dict[str, List[str]]:
        pools = {f"signal[{c}]": [f"{self.signal_prefix}{c}_{i}" for i in range(self.signal_tokens_per_class)]
                 for c in range(self.num_classes)}
        pools[f"marker[{SOURCE}]"] = [f"{self.source_marker_prefix}_{i}"
                                      for i in range(self.marker_tokens_per_domain)]
        pools[f"marker[{TARGET}]"] = [f"{self.target_marker_prefix}_{i}"
                                      for i in range(self.marker_tokens_per_domain)]
        pools['noise'] = [f"{self.noise_prefix}_{i}" for i in range(self.noise_tokens)]
        return {name: [token.lower() for token in tokens] for name, tokens in pools.items()}

    def split_sizes(self) -> Dict[str, int]:
        return {TRAIN: self.train_size, DEV: self.dev_size, TEST: self.test_size}

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]


@dataclass
class GeneratedData:
    vocab: Vocab
    source: Dict[str, Corpus]
    target: Dict[str, Corpus]

    def corpora(self) -> Dict[Tuple[str, str], Corpus]:
        out = {(SOURCE, split): corpus for split, corpus in self.source.items()}
        out.update({(TARGET, split): corpus for split, corpus in self.target.items()})
        return out


def check_pools(pools: Dict[str, List[str]]) -> None:
    for (name_a, pool_a), (name_b, pool_b) in itertools.combinations(pools.items(), 2):
        shared = set(pool_a) & set(pool_b)
        if shared:
            raise ConfigError(f"synthetic spec: pools {name_a} and {name_b} overlap on {sorted(shared)[:3]}")


def _balanced_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % num_classes
    return labels[rng.permutation(n)]


def _generate_split(spec: SyntheticSpec, pools: Dict[str, List[str]], vocab: Vocab, domain: str,
                    split: str, max_len: int) -> Corpus:
    rng = np.random.default_rng([spec.seed, DOMAINS.index(domain), SPLITS.index(split)])
    n = spec.split_sizes()[split]
    markers = pools[f"marker[{domain}]"]
    noise = pools['noise']
    noise_count = spec.seq_len - spec.signal_per_example - spec.markers_per_example
    keep_labels = not (domain == TARGET and split == TRAIN)

    examples = []
    for label in _balanced_labels(n, spec.num_classes, rng):
        signal = pools[f"signal[{label}]"]
        tokens = ([signal[i] for i in rng.integers(0, len(signal), spec.signal_per_example)]
                  + [markers[i] for i in rng.integers(0, len(markers), spec.markers_per_example)]
                  + [noise[i] for i in rng.integers(0, len(noise), noise_count)])
        text = ' '.join(tokens[i] for i in rng.permutation(len(tokens)))
        examples.append(Example(token_ids=tuple(tokenize(text, vocab, max_len)),
                                label=int(label) if keep_labels else None,
                                domain=domain, text=text))
    return Corpus(tuple(examples), domain, split, provenance=f"synthetic(seed={spec.seed})")


def generate_synthetic(spec: SyntheticSpec, max_len: int = DEFAULT_MAX_LEN) -> GeneratedData:
    """Source and target train/dev/test corpora; target train carries no labels"""
    pools = spec.pools()
    check_pools(pools)
    tokens = [token for pool in pools.values() for token in pool] + spec.extra_tokens.lower().split()
    vocab = Vocab.build(tokens)

    source = {split: _generate_split(spec, pools, vocab, SOURCE, split, max_len) for split in SPLITS}
    target = {split: _generate_split(spec, pools, vocab, TARGET, split, max_len) for split in SPLITS}
    logger.info("generated synthetic corpora: %s",
                {f"{d}_{s}": len(c) for (d, s), c in GeneratedData(vocab, source, target).corpora().items()})
    return GeneratedData(vocab, source, target)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_corpus(corpus: Corpus, path) -> None:
    lines = corpus.records()
    Path(path).write_text(''.join(f"{line}\n" for line in lines), encoding='utf-8')


def _parse_record(raw: str, where: str, num_classes: int) -> Tuple[str, Optional[int], str]:
    try:
        record = json.loads(raw)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{where}: malformed record ({e.msg})") from None
    if not isinstance(record, dict):
        raise DataFormatError(f"{where}: record must be an object")
    unknown = set(record) - RECORD_FIELDS
    if unknown:
        raise DataFormatError(f"{where}: unknown fields {sorted(unknown)}")
    text = record.get('text')
    if not isinstance(text, str):
        raise DataFormatError(f"{where}: missing text")
    domain = record.get('domain')
    if domain not in DOMAINS:
        raise DataFormatError(f"{where}: domain must be one of {DOMAINS}, got {domain!r}")
    label = record.get('label')
    if label is not None:
        if not isinstance(label, int) or isinstance(label, bool) or not 0 <= label < num_classes:
            raise DataFormatError(f"{where}: unknown label value {label!r} (expected 0..{num_classes - 1})")
    return text, label, domain


def load_corpus(path, vocab: Vocab, num_classes: int = DEFAULT_NUM_CLASSES, max_len: int = DEFAULT_MAX_LEN,
                split: Optional[str] = None) -> Corpus:
    """Parse a line-delimited corpus file; errors name the offending line"""
    path = Path(path)
    examples = []
    with path.open(encoding='utf-8') as handle:
        for line_no, raw in enumerate(handle, start=1):
            if not raw.strip():
                continue
            where = f"{path}:{line_no}"
            text, label, domain = _parse_record(raw, where, num_classes)
            try:
                examples.append(Example(tuple(tokenize(text, vocab, max_len)), label, domain, text))
            except DataFormatError as e:
                raise DataFormatError(f"{where}: {e}") from None

    if split is None:
        stem_split = path.stem.rsplit('_', 1)[-1]
        split = stem_split if stem_split in SPLITS else TRAIN
    domain = examples[0].domain if examples else None
    return Corpus(tuple(examples), domain, split, provenance=str(path))


def save_generated(data: GeneratedData, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for (domain, split), corpus in data.corpora().items():
        path = out_dir / corpus_filename(domain, split)
        write_corpus(corpus, path)
        written.append(path)
    vocab_path = out_dir / VOCAB_FILE
    data.vocab.save(vocab_path)
    written.append(vocab_path)
    return written


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairedBatch:
    step: int
    epoch: int
    source: Tuple[Example, ...]
    target: Tuple[Example, ...]

    @property
    def source_ids(self) -> List[Tuple[int, ...]]:
        return [ex.token_ids for ex in self.source]

    @property
    def target_ids(self) -> List[Tuple[int, ...]]:
        return [ex.token_ids for ex in self.target]

    @property
    def source_labels(self) -> List[int]:
        return [ex.label for ex in self.source]


def steps_per_epoch(n_source: int, n_target: int, batch_size: int) -> int:
    return math.ceil(max(n_source, n_target) / batch_size)


def _cycle(examples: Sequence[Example], rng: np.random.Generator) -> Iterator[Example]:
    while True:
        for index in rng.permutation(len(examples)):
            yield examples[index]


def _validate_batching(corpora: Sequence[Corpus], batch_size: int, epochs: int) -> None:
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    for corpus in corpora:
        if not len(corpus):
            raise ConfigError(f"{corpus.provenance}: cannot batch an empty corpus")
        if batch_size > len(corpus):
            raise ConfigError(f"batch_size {batch_size} exceeds the {len(corpus)} examples of {corpus.provenance}")


def paired_batches(source: Corpus, target: Corpus, batch_size: int, seed: int,
                   epochs: int = 1) -> Iterator[PairedBatch]:
    """
    Equal-sized (S, T) batches. The longer corpus is walked once per epoch in
    a fresh shuffled order; the shorter one cycles, reshuffling each pass.
    """
    _validate_batching((source, target), batch_size, epochs)
    return _pairs(source, target, batch_size, seed, epochs)


def _pairs(source: Corpus, target: Corpus, batch_size: int, seed: int, epochs: int) -> Iterator[PairedBatch]:
    source_is_longer = len(source) >= len(target)
    longer, shorter = (source, target) if source_is_longer else (target, source)
    rng_long = np.random.default_rng([seed, 0])
    short_stream = _cycle(shorter.examples, np.random.default_rng([seed, 1]))

    step = 0
    for epoch in range(epochs):
        order = rng_long.permutation(len(longer))
        for start in range(0, len(longer), batch_size):
            chunk = tuple(longer.examples[i] for i in order[start:start + batch_size])
            other = tuple(itertools.islice(short_stream, len(chunk)))
            src, tgt = (chunk, other) if source_is_longer else (other, chunk)
            yield PairedBatch(step, epoch, src, tgt)
            step += 1


def source_batches(source: Corpus, batch_size: int, seed: int, epochs: int = 1) -> Iterator[PairedBatch]:
    """Source-only schedule for plain training; target halves are empty"""
    _validate_batching((source,), batch_size, epochs)
    return _singles(source, batch_size, seed, epochs)


def _singles(source: Corpus, batch_size: int, seed: int, epochs: int) -> Iterator[PairedBatch]:
    rng = np.random.default_rng([seed, 0])
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(source))
        for start in range(0, len(source), batch_size):
            yield PairedBatch(step, epoch, tuple(source.examples[i] for i in order[start:start + batch_size]), ())
            step += 1
