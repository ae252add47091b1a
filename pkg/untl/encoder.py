"""
The feature extractor: whitespace tokenizer, embedding table, one single-head
self-attention block with a position-wise feed-forward layer, CLS pooling, and
the two linear heads (task classifier and domain classifier).
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from untl import diffcore as D
from untl.common import EVAL_BATCH, ConfigError, DataFormatError
from untl.diffcore import Tensor

PAD = 0
CLS = 1
UNK = 2
RESERVED_TOKENS = ('[PAD]', '[CLS]', '[UNK]')

SOURCE = 'source'
TARGET = 'target'
DOMAINS = (SOURCE, TARGET)

DEFAULT_D_MODEL = 64
DEFAULT_MAX_LEN = 32
DEFAULT_NUM_CLASSES = 3

MASKED_SCORE = -1e9

EmbeddingTransform = Callable[[Tensor], Tensor]


@dataclass
class Vocab:
    """Dense token <-> id map whose first entries are the reserved tokens"""
    id_to_token: List[str]
    token_to_id: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ConfigError(f"vocabulary must start with {RESERVED_TOKENS}")
        self.token_to_id = {}
        for index, token in enumerate(self.id_to_token):
            if token in self.token_to_id:
                raise ConfigError(f"duplicate vocabulary token {token!r}")
            self.token_to_id[token] = index

    @classmethod
    def build(cls, tokens: Iterable[str]) -> 'Vocab':
        """Vocabulary over ``tokens`` in first-seen order, case-folded"""
        entries = list(RESERVED_TOKENS)
        seen = set(entries)
        for token in tokens:
            token = token.lower()
            if token not in seen:
                seen.add(token)
                entries.append(token)
        return cls(entries)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    @property
    def content_tokens(self) -> List[str]:
        return self.id_to_token[len(RESERVED_TOKENS):]

    def save(self, path) -> None:
        """One token per line; line i holds id i + len(RESERVED_TOKENS)"""
        text = ''.join(f"{token}\n" for token in self.content_tokens)
        Path(path).write_text(text, encoding='utf-8')

    @classmethod
    def load(cls, path) -> 'Vocab':
        path = Path(path)
        entries = list(RESERVED_TOKENS)
        for line_no, line in enumerate(path.read_text(encoding='utf-8').splitlines(), start=1):
            token = line.strip()
            if not token or any(ch.isspace() for ch in token):
                raise DataFormatError(f"{path}:{line_no}: invalid vocabulary entry {line!r}")
            entries.append(token)
        try:
            return cls(entries)
        except ConfigError as e:
            raise DataFormatError(f"{path}: {e}") from None


def tokenize(text: str, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN) -> List[int]:
    """Lowercased whitespace split mapped through ``vocab``, truncated, with CLS at position 0"""
    if max_len < 2:
        raise ConfigError(f"max_len must be at least 2, got {max_len}")
    ids = [vocab.lookup(token) for token in text.lower().split()]
    return [CLS] + ids[:max_len - 1]


@dataclass(frozen=True)
class Example:
    token_ids: Tuple[int, ...]
    label: Optional[int]
    domain: str
    text: str = ''

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise DataFormatError(f"unknown domain {self.domain!r}")
        if self.domain == SOURCE and self.label is None:
            raise DataFormatError("source examples must carry a label")


@dataclass
class EncoderParams:
    """psi (embedding + attention block + feed-forward) plus the task and domain heads"""
    embedding: Tensor   # |V| x d
    w_q: Tensor         # d x d
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_1: Tensor         # d x 4d
    w_2: Tensor         # 4d x d
    w_cls: Tensor       # d x C
    b_cls: Tensor       # C
    w_dc: Tensor        # d x 2
    b_dc: Tensor        # 2

    EXTRACTOR = ('embedding', 'w_q', 'w_k', 'w_v', 'w_o', 'w_1', 'w_2')
    TASK_HEAD = ('w_cls', 'b_cls')
    DOMAIN_HEAD = ('w_dc', 'b_dc')

    @classmethod
    def init(cls, vocab_size: int, d: int = DEFAULT_D_MODEL, num_classes: int = DEFAULT_NUM_CLASSES,
             seed: int = 0) -> 'EncoderParams':
        rng = np.random.default_rng(seed)

        def normal(rows, cols):
            return D.parameter(rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, cols)))

        return cls(
            embedding=D.parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(vocab_size, d))),
            w_q=normal(d, d),
            w_k=normal(d, d),
            w_v=normal(d, d),
            w_o=normal(d, d),
            w_1=normal(d, 4 * d),
            w_2=normal(4 * d, d),
            w_cls=normal(d, num_classes),
            b_cls=D.parameter(np.zeros(num_classes)),
            w_dc=normal(d, 2),
            b_dc=D.parameter(np.zeros(2)),
        )

    @classmethod
    def zeros(cls, vocab_size: int, d: int = DEFAULT_D_MODEL,
              num_classes: int = DEFAULT_NUM_CLASSES) -> 'EncoderParams':
        shapes = cls.shapes(vocab_size, d, num_classes)
        return cls(**{name: D.parameter(np.zeros(shape)) for name, shape in shapes.items()})

    @staticmethod
    def shapes(vocab_size: int, d: int, num_classes: int) -> Dict[str, Tuple[int, ...]]:
        return {
            'embedding': (vocab_size, d),
            'w_q': (d, d), 'w_k': (d, d), 'w_v': (d, d), 'w_o': (d, d),
            'w_1': (d, 4 * d), 'w_2': (4 * d, d),
            'w_cls': (d, num_classes), 'b_cls': (num_classes,),
            'w_dc': (d, 2), 'b_dc': (2,),
        }

    @property
    def d(self) -> int:
        return self.embedding.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def num_classes(self) -> int:
        return self.w_cls.shape[1]

    def named_tensors(self) -> Dict[str, Tensor]:
        names = self.EXTRACTOR + self.TASK_HEAD + self.DOMAIN_HEAD
        return {name: getattr(self, name) for name in names}

    def group(self, names: Sequence[str]) -> List[Tensor]:
        return [getattr(self, name) for name in names]


def pad_batch(sequences: Sequence[Sequence[int]], vocab_size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad with PAD; returns (ids, key mask) of shape (B, L)"""
    if not sequences:
        raise DataFormatError("cannot encode an empty batch")
    length = max(len(s) for s in sequences)
    if length == 0 or any(len(s) == 0 for s in sequences):
        raise DataFormatError("token sequences must be non-empty (CLS is always present)")
    ids = np.full((len(sequences), length), PAD, dtype=np.int64)
    mask = np.zeros((len(sequences), length), dtype=bool)
    for row, seq in enumerate(sequences):
        ids[row, :len(seq)] = seq
        mask[row, :len(seq)] = True
    bad = ids[(ids < 0) | (ids >= vocab_size)]
    if bad.size:
        raise DataFormatError(f"token id {int(bad[0])} out of range for vocabulary of {vocab_size}")
    return ids, mask


def encode_batch(params: EncoderParams, sequences: Sequence[Sequence[int]],
                 embedding_transform: Optional[EmbeddingTransform] = None) -> Tensor:
    """h = psi(x) for every sequence: the CLS row after attention and feed-forward, shape (B, d)"""
    ids, mask = pad_batch(sequences, params.vocab_size)
    x = D.take(params.embedding, ids, axis=0)
    if embedding_transform is not None:
        x = embedding_transform(x)

    q = x @ params.w_q
    k = x @ params.w_k
    v = x @ params.w_v
    scores = (q @ D.transpose(k)) * (1.0 / np.sqrt(params.d))
    scores = scores + D.constant(np.where(mask, 0.0, MASKED_SCORE)[:, None, :])
    context = D.softmax(scores, axis=-1) @ v @ params.w_o
    x = x + context

    # one block: only the CLS row reaches h, so the feed-forward runs on it alone
    cls = D.take(x, 0, axis=1)
    return cls + D.relu(cls @ params.w_1) @ params.w_2


def encode(params: EncoderParams, token_ids: Sequence[int]) -> np.ndarray:
    return encode_batch(params, [token_ids]).data[0].copy()


def encode_all(params: EncoderParams, sequences: Sequence[Sequence[int]],
               embedding_transform: Optional[EmbeddingTransform] = None,
               batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Features for many sequences, chunked, with nothing recorded for backward"""
    chunks = [encode_batch(params, sequences[start:start + batch_size], embedding_transform).data
              for start in range(0, len(sequences), batch_size)]
    if not chunks:
        return np.zeros((0, params.d))
    return np.concatenate(chunks, axis=0)


def _linear(h, weight: Tensor, bias: Tensor) -> Tensor:
    h = h if isinstance(h, Tensor) else D.constant(h)
    if h.ndim == 1:
        return D.reshape(D.reshape(h, (1, h.shape[0])) @ weight + bias, (weight.shape[1],))
    return h @ weight + bias


def classify(params: EncoderParams, h) -> Tensor:
    """Task logits W_cls h + b; no softmax"""
    return _linear(h, params.w_cls, params.b_cls)


def domain_logits(params: EncoderParams, h) -> Tensor:
    """Domain logits: index 0 is source, 1 is target"""
    return _linear(h, params.w_dc, params.b_dc)


def predict(logits) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index"""
    values = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(values, axis=-1)
