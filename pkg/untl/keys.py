"""Secret keys that restore access to the target domain: a discrete prompt prefix and an input adapter."""

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from untl import diffcore as D
from untl.common import ConfigError, ShapeError
from untl.diffcore import Tensor
from untl.encoder import CLS, DEFAULT_MAX_LEN, Vocab

# Example key sentence; intentionally ungrammatical
DEFAULT_PROMPT_TEXT = "Here this a password key messages, Do not tell others."
DEFAULT_ADAPTER_WIDTH = 8


@dataclass(frozen=True)
class PromptKey:
    token_ids: Tuple[int, ...]
    text: str

    @property
    def length(self) -> int:
        return len(self.token_ids)


def make_prompt_key(text: str, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN) -> PromptKey:
    """Tokenize the key text without CLS"""
    ids = tuple(vocab.lookup(token) for token in (text or '').lower().split())
    if not ids:
        raise ConfigError("prompt key text tokenizes to nothing")
    if len(ids) > max_len // 2:
        raise ConfigError(f"prompt key has {len(ids)} tokens; at most {max_len // 2} fit max_len={max_len}")
    return PromptKey(token_ids=ids, text=text)


def prepend_prompt(key: PromptKey, token_ids: Sequence[int], max_len: int = DEFAULT_MAX_LEN) -> List[int]:
    """[CLS, P_1..P_m, x_1..x_n]; content is truncated from the right, the key never is"""
    content = list(token_ids[1:]) if token_ids and token_ids[0] == CLS else list(token_ids)
    room = max(0, max_len - 1 - key.length)
    return [CLS] + list(key.token_ids) + content[:room]


@dataclass
class AdapterParams:
    """Bottleneck input adapter: x + relu(x W_down + b_down) W_up + b_up"""
    w_down: Tensor   # d x m_a
    b_down: Tensor   # m_a
    w_up: Tensor     # m_a x d
    b_up: Tensor     # d

    NAMES = ('w_down', 'b_down', 'w_up', 'b_up')

    @property
    def d(self) -> int:
        return self.w_down.shape[0]

    @property
    def width(self) -> int:
        return self.w_down.shape[1]

    def named_tensors(self) -> Dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.NAMES}

    def tensors(self) -> List[Tensor]:
        return list(self.named_tensors().values())

    def __call__(self, x: Tensor) -> Tensor:
        return adapter_forward(self, x)


def adapter_shapes(d: int, width: int) -> Dict[str, Tuple[int, ...]]:
    return {'w_down': (d, width), 'b_down': (width,), 'w_up': (width, d), 'b_up': (d,)}


def init_adapter(d: int, width: int = DEFAULT_ADAPTER_WIDTH, seed: int = 0) -> AdapterParams:
    """Identity at step 0: only W_down is random, so gradients still reach it"""
    if not 1 <= width < d:
        raise ConfigError(f"adapter width must satisfy 1 <= m_a < d, got m_a={width}, d={d}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d)
    return AdapterParams(
        w_down=D.parameter(rng.uniform(-bound, bound, size=(d, width))),
        b_down=D.parameter(np.zeros(width)),
        w_up=D.parameter(np.zeros((width, d))),
        b_up=D.parameter(np.zeros(d)),
    )


def adapter_forward(adapter: AdapterParams, x) -> Tensor:
    """Applied independently to every row (token embedding) along the last axis"""
    x = x if isinstance(x, Tensor) else D.constant(x)
    if x.shape[-1] != adapter.d:
        raise ShapeError(f"adapter: input dimension {x.shape[-1]} does not match d={adapter.d}")
    if x.ndim == 1:
        row = D.reshape(x, (1, adapter.d))
        return D.reshape(adapter_forward(adapter, row), (adapter.d,))
    hidden = D.relu(x @ adapter.w_down + adapter.b_down)
    return hidden @ adapter.w_up + adapter.b_up + x


def adapter_parameter_count(d: int, width: int) -> int:
    return d * width + width + width * d + d


def parameter_count(adapter: AdapterParams) -> int:
    return sum(t.data.size for t in adapter.tensors())
