"""
Checkpoint file: one JSON header line (format, version, mode, config,
manifest, vocabulary, prompt key text, best score), then the flat parameter
vector as little-endian float64 in manifest order.
"""

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from untl import diffcore as D
from untl.common import CHECKPOINT_VERSION, CheckpointError, UNTLError
from untl.encoder import DEFAULT_MAX_LEN, RESERVED_TOKENS, EncoderParams, Vocab
from untl.keys import AdapterParams, make_prompt_key
from untl.objectives import KeyedModel

FORMAT_NAME = 'untl-checkpoint'
ENCODER_PREFIX = 'encoder.'
ADAPTER_PREFIX = 'adapter.'


@dataclass
class Checkpoint:
    mode: str
    config: Dict[str, Any]
    manifest: List[Tuple[str, Tuple[int, ...]]]
    vector: np.ndarray
    vocab_tokens: List[str]
    prompt_text: Optional[str] = None
    best_score: float = float('-inf')
    best_step: int = 0
    seed: int = 0
    version: int = CHECKPOINT_VERSION
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype='<f8')
        expected = sum(int(np.prod(shape)) for _, shape in self.manifest)
        if expected != self.vector.size:
            raise CheckpointError(f"manifest describes {expected} values but the vector holds {self.vector.size}")

    @classmethod
    def from_model(cls, model: KeyedModel, mode: str, config: Dict[str, Any], vocab: Vocab,
                   best_score: float, best_step: int, seed: int) -> 'Checkpoint':
        named = [(ENCODER_PREFIX + name, t) for name, t in model.params.named_tensors().items()]
        if model.adapter is not None:
            named += [(ADAPTER_PREFIX + name, t) for name, t in model.adapter.named_tensors().items()]
        manifest = [(name, tuple(t.shape)) for name, t in named]
        vector = np.concatenate([t.data.ravel() for _, t in named])
        return cls(mode=mode, config=config, manifest=manifest, vector=vector,
                   vocab_tokens=vocab.content_tokens,
                   prompt_text=model.prompt.text if model.prompt is not None else None,
                   best_score=float(best_score), best_step=best_step, seed=seed)

    @property
    def vocab(self) -> Vocab:
        return Vocab(list(RESERVED_TOKENS) + list(self.vocab_tokens))

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        offset = 0
        for name, shape in self.manifest:
            size = int(np.prod(shape))
            out[name] = self.vector[offset:offset + size].reshape(shape).astype(np.float64)
            offset += size
        return out

    def to_model(self) -> KeyedModel:
        arrays = self.arrays()
        try:
            params = EncoderParams(**{name[len(ENCODER_PREFIX):]: D.parameter(value)
                                      for name, value in arrays.items() if name.startswith(ENCODER_PREFIX)})
            adapter_arrays = {name[len(ADAPTER_PREFIX):]: D.parameter(value)
                              for name, value in arrays.items() if name.startswith(ADAPTER_PREFIX)}
            adapter = AdapterParams(**adapter_arrays) if adapter_arrays else None
        except TypeError as e:
            raise CheckpointError(f"manifest does not describe a model: {e}") from None
        max_len = int(self.config.get('max_len', DEFAULT_MAX_LEN))
        prompt = make_prompt_key(self.prompt_text, self.vocab, max_len) if self.prompt_text else None
        return KeyedModel(params=params, prompt=prompt, adapter=adapter, max_len=max_len)

    def header(self) -> Dict[str, Any]:
        return {
            'format': FORMAT_NAME,
            'version': self.version,
            'mode': self.mode,
            'config': self.config,
            'manifest': [[name, list(shape)] for name, shape in self.manifest],
            'vocab': self.vocab_tokens,
            'prompt_text': self.prompt_text,
            'best_score': self.best_score,
            'best_step': self.best_step,
            'seed': self.seed,
            'extra': self.extra,
        }

    def to_bytes(self) -> bytes:
        header = json.dumps(self.header(), sort_keys=True).encode('utf-8')
        return header + b'\n' + self.vector.astype('<f8').tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes, source: str = '<bytes>') -> 'Checkpoint':
        head, sep, payload = blob.partition(b'\n')
        if not sep:
            raise CheckpointError(f"{source}: missing checkpoint header")
        try:
            header = json.loads(head.decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise CheckpointError(f"{source}: corrupt checkpoint header") from None
        if not isinstance(header, dict) or header.get('format') != FORMAT_NAME:
            raise CheckpointError(f"{source}: not a checkpoint file")
        if header.get('version') != CHECKPOINT_VERSION:
            raise CheckpointError(f"{source}: checkpoint version {header.get('version')!r} does not match "
                                  f"supported version {CHECKPOINT_VERSION}")
        if len(payload) % 8:
            raise CheckpointError(f"{source}: parameter block is truncated")
        vector = np.frombuffer(payload, dtype='<f8').copy()
        if not np.all(np.isfinite(vector)):
            raise CheckpointError(f"{source}: parameter block holds non-finite values")
        try:
            return cls(mode=header['mode'], config=header['config'],
                       manifest=[(name, tuple(shape)) for name, shape in header['manifest']],
                       vector=vector, vocab_tokens=list(header['vocab']),
                       prompt_text=header.get('prompt_text'), best_score=header['best_score'],
                       best_step=header['best_step'], seed=header['seed'], version=header['version'],
                       extra=header.get('extra') or {})
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"{source}: incomplete checkpoint header ({e})") from None

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> 'Checkpoint':
        path = Path(path)
        try:
            blob = path.read_bytes()
        except OSError as e:
            raise CheckpointError(f"{path}: cannot read checkpoint ({e.strerror})") from None
        checkpoint = cls.from_bytes(blob, str(path))
        try:
            checkpoint.to_model()
        except UNTLError as e:
            raise CheckpointError(f"{path}: {e}") from None
        return checkpoint


def atomic_write(path, payload: bytes) -> None:
    """Write to a temp file in the same directory, then rename over ``path``"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix='.tmp', dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
