"""
Losses for plain, non-transferable and secret-key training.

Every function here builds diffcore ops, so any value it returns can be
back-propagated into the encoder, heads and adapter.
"""

import math
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from untl import diffcore as D
from untl.common import ConfigError, DataFormatError, ShapeError
from untl.diffcore import Tensor
from untl.encoder import DEFAULT_MAX_LEN, EncoderParams, classify, domain_logits, encode_batch
from untl.keys import AdapterParams, PromptKey, prepend_prompt

PLAIN = 'plain'
UNTL = 'untl'
PROMPT = 'prompt'
ADAPTER = 'adapter'
MODES = (PLAIN, UNTL, PROMPT, ADAPTER)
KEY_MODES = (PROMPT, ADAPTER)

SOURCE_LABEL = 0
TARGET_LABEL = 1


@dataclass(frozen=True)
class HyperParams:
    """alpha: key attraction, beta: DC weight, lam: MMD weight, c: MMD clamp, omega: CE scale"""
    alpha: float = 1.0
    beta: float = 0.5
    lam: float = 0.1
    c: float = 10.0
    omega: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ConfigError(f"hyperparameter {name} must be a finite number, got {value!r}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.beta < 0 or self.lam < 0:
            raise ConfigError(f"beta and lam must be >= 0, got beta={self.beta}, lam={self.lam}")
        if self.c <= 0:
            raise ConfigError(f"c must be > 0, got {self.c}")
        if self.omega <= 0:
            raise ConfigError(f"omega must be > 0, got {self.omega}")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> 'HyperParams':
        if mode not in MODE_DEFAULTS:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        return cls(**{**MODE_DEFAULTS[mode], **overrides})

    def ablated(self, disable_mmd: bool = False, disable_dc: bool = False) -> 'HyperParams':
        return replace(self,
                       lam=0.0 if disable_mmd else self.lam,
                       beta=0.0 if disable_dc else self.beta)


MODE_DEFAULTS: Dict[str, Dict[str, float]] = {
    PLAIN: {'beta': 0.0, 'lam': 0.0, 'c': 10.0, 'omega': 1.0},
    UNTL: {'beta': 0.5, 'lam': 0.1, 'c': 10.0, 'omega': 1.0},
    PROMPT: {'alpha': 5.0, 'beta': 2.0, 'lam': 0.1, 'c': 10.0, 'omega': 4.0},
    ADAPTER: {'alpha': 10.0, 'beta': 1.5, 'lam': 0.1, 'c': 10.0, 'omega': 2.0},
}


@dataclass
class BatchFeatures:
    """Feature rows per distribution: S, T and optionally the keyed target rows (P or A)"""
    source: Tensor
    target: Tensor
    keyed: Optional[Tensor] = None


@dataclass
class KeyedModel:
    """Everything a forward pass needs: encoder + heads and whichever key the mode uses"""
    params: EncoderParams
    prompt: Optional[PromptKey] = None
    adapter: Optional[AdapterParams] = None
    max_len: int = DEFAULT_MAX_LEN

    def tensors(self) -> List[Tensor]:
        tensors = list(self.params.named_tensors().values())
        if self.adapter is not None:
            tensors += self.adapter.tensors()
        return tensors

    def keyed_sequences(self, sequences: Sequence[Sequence[int]]) -> List[List[int]]:
        if self.prompt is None:
            raise ConfigError("model has no prompt key")
        return [prepend_prompt(self.prompt, seq, self.max_len) for seq in sequences]


@dataclass
class LossTerms:
    total: Tensor
    parts: Dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, float]:
        return {'loss': self.total.item(), **self.parts}


# ---------------------------------------------------------------------------
# Kernel and distances
# ---------------------------------------------------------------------------

def rbf_kernel(z, z_prime) -> float:
    """k(z, z') = exp(-||z - z'||^2)"""
    z = np.asarray(z, dtype=np.float64)
    z_prime = np.asarray(z_prime, dtype=np.float64)
    if z.shape != z_prime.shape:
        raise ShapeError(f"rbf_kernel: dimension mismatch {z.shape} vs {z_prime.shape}")
    diff = z - z_prime
    return float(np.exp(-np.dot(diff, diff)))


def rbf_gram(a: Tensor, b: Tensor) -> Tensor:
    """Kernel matrix between the rows of a (n x d) and b (m x d)"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"rbf_gram: feature shapes {a.shape} and {b.shape} are incompatible")
    a_sq = D.sum(a * a, axis=1, keepdims=True)
    b_sq = D.sum(b * b, axis=1, keepdims=True)
    sq_dists = a_sq + D.transpose(b_sq) - (a @ D.transpose(b)) * 2.0
    return D.exp(-sq_dists)


def _as_rows(feats) -> Tensor:
    if isinstance(feats, Tensor):
        return feats
    if isinstance(feats, (list, tuple)) and feats and all(isinstance(f, Tensor) for f in feats):
        return D.concat_rows(list(feats))
    return D.constant(np.atleast_2d(feats))


def mmd_distance(source_feats, target_feats) -> Tensor:
    """Biased (V-statistic) squared MMD with the unit-bandwidth RBF kernel"""
    s = _as_rows(source_feats)
    t = _as_rows(target_feats)
    if s.shape[0] == 0 or t.shape[0] == 0:
        raise ShapeError("mmd_distance: both feature sets must be non-empty")
    within = D.mean(rbf_gram(s, s)) + D.mean(rbf_gram(t, t))
    # averaging both orientations keeps d(S, T) == d(T, S) bit for bit
    cross = (D.mean(rbf_gram(s, t)) + D.mean(rbf_gram(t, s))) * 0.5
    # float cancellation can leave a tiny negative on near-identical batches
    return D.relu(within - cross * 2.0)


def mmd_loss(source_feats, target_feats, c: float) -> Tensor:
    """-min(c, d(S, T)); flat (zero gradient) once the distance reaches c"""
    if c <= 0:
        raise ConfigError(f"MMD clamp c must be > 0, got {c}")
    return -D.clamp_max(mmd_distance(source_feats, target_feats), c)


def prompt_mmd_loss(keyed_feats, source_feats, target_feats, alpha: float, c: float) -> Tensor:
    """alpha * d(P, S) - min(c, d(S, T)): pull the keyed target towards source, push plain target away"""
    attraction = D.scale(mmd_distance(keyed_feats, source_feats), alpha)
    return attraction - D.clamp_max(mmd_distance(source_feats, target_feats), c)


# ---------------------------------------------------------------------------
# Cross entropies
# ---------------------------------------------------------------------------

def ce_loss(logits: Tensor, labels: Sequence[int], omega: float = 1.0) -> Tensor:
    """omega * mean(-log softmax(logits)[label])"""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"ce_loss: {labels.size} labels for logits of shape {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DataFormatError(f"ce_loss: label out of range [0, {logits.shape[1]})")
    one_hot = np.zeros(logits.shape)
    one_hot[np.arange(labels.size), labels] = 1.0
    nll = -D.sum(D.log_softmax(logits, axis=-1) * D.constant(one_hot))
    return D.scale(nll, omega / labels.size)


def dc_loss(src_like_feats, tgt_feats, params: EncoderParams) -> Tensor:
    """Domain-classifier CE: label 0 for every source-like row, 1 for every target row"""
    src_like = _as_rows(src_like_feats)
    tgt = _as_rows(tgt_feats)
    if src_like.shape[0] == 0 or tgt.shape[0] == 0:
        raise ShapeError("dc_loss: both feature sets must be non-empty")
    logits = domain_logits(params, D.concat_rows([src_like, tgt]))
    labels = [SOURCE_LABEL] * src_like.shape[0] + [TARGET_LABEL] * tgt.shape[0]
    return ce_loss(logits, labels)


def adapter_ce_loss(source_ids: Sequence[Sequence[int]], source_labels: Sequence[int],
                    params: EncoderParams, adapter: AdapterParams, omega: float = 1.0) -> Tensor:
    """CE of the adapter-converted source copies; keeps task information flowing through the adapter"""
    feats = encode_batch(params, source_ids, adapter)
    return ce_loss(classify(params, feats), source_labels, omega)


# ---------------------------------------------------------------------------
# Composite objectives
# ---------------------------------------------------------------------------

def _features(batch, model: KeyedModel, keyed: Optional[str] = None) -> BatchFeatures:
    source = encode_batch(model.params, batch.source_ids)
    target = encode_batch(model.params, batch.target_ids)
    keyed_feats = None
    if keyed == PROMPT:
        keyed_feats = encode_batch(model.params, model.keyed_sequences(batch.target_ids))
    elif keyed == ADAPTER:
        keyed_feats = encode_batch(model.params, batch.target_ids, model.adapter)
    return BatchFeatures(source, target, keyed_feats)


def untl_terms(batch, model: KeyedModel, hp: HyperParams) -> LossTerms:
    feats = _features(batch, model)
    ce = ce_loss(classify(model.params, feats.source), batch.source_labels, hp.omega)
    dc = dc_loss(feats.source, feats.target, model.params)
    mmd = mmd_loss(feats.source, feats.target, hp.c)
    total = ce + D.scale(dc, hp.beta) + D.scale(mmd, hp.lam)
    return LossTerms(total, {'ce': ce.item(), 'dc': dc.item(), 'mmd_loss': mmd.item()})


def prompt_terms(batch, model: KeyedModel, hp: HyperParams) -> LossTerms:
    if model.prompt is None:
        raise ConfigError("prompt objective needs a prompt key")
    feats = _features(batch, model, PROMPT)
    ce = ce_loss(classify(model.params, feats.source), batch.source_labels, hp.omega)
    dc = dc_loss([feats.keyed, feats.source], feats.target, model.params)
    key_mmd = prompt_mmd_loss(feats.keyed, feats.source, feats.target, hp.alpha, hp.c)
    total = ce + D.scale(dc, hp.beta) + D.scale(key_mmd, hp.lam)
    return LossTerms(total, {'ce': ce.item(), 'dc': dc.item(), 'key_mmd_loss': key_mmd.item()})


def adapter_terms(batch, model: KeyedModel, hp: HyperParams) -> LossTerms:
    if model.adapter is None:
        raise ConfigError("adapter objective needs adapter parameters")
    feats = _features(batch, model, ADAPTER)
    ce = ce_loss(classify(model.params, feats.source), batch.source_labels, hp.omega)
    key_ce = adapter_ce_loss(batch.source_ids, batch.source_labels, model.params, model.adapter, hp.omega)
    dc = dc_loss([feats.keyed, feats.source], feats.target, model.params)
    key_mmd = prompt_mmd_loss(feats.keyed, feats.source, feats.target, hp.alpha, hp.c)
    total = ce + key_ce + D.scale(dc, hp.beta) + D.scale(key_mmd, hp.lam)
    return LossTerms(total, {'ce': ce.item(), 'adapter_ce': key_ce.item(), 'dc': dc.item(),
                             'key_mmd_loss': key_mmd.item()})


def untl_objective(batch, model: KeyedModel, hp: HyperParams) -> Tensor:
    """omega*CE + beta*DC(S, T) + lam*MMD-loss(S, T)"""
    return untl_terms(batch, model, hp).total


def prompt_objective(batch, model: KeyedModel, hp: HyperParams) -> Tensor:
    """omega*CE + beta*DC([P, S], T) + lam*(alpha*d(P, S) - min(c, d(S, T)))"""
    return prompt_terms(batch, model, hp).total


def adapter_objective(batch, model: KeyedModel, hp: HyperParams) -> Tensor:
    """omega*CE + omega*CE_adapter + beta*DC([A, S], T) + lam*(alpha*d(A, S) - min(c, d(S, T)))"""
    return adapter_terms(batch, model, hp).total


class Objective(ABC):
    """Training objective for one mode"""

    mode: str = ''

    def __init__(self, hp: HyperParams):
        self.hp = hp

    @abstractmethod
    def terms(self, batch, model: KeyedModel) -> LossTerms:
        pass


class PlainObjective(Objective):
    mode = PLAIN

    def terms(self, batch, model: KeyedModel) -> LossTerms:
        feats = encode_batch(model.params, batch.source_ids)
        ce = ce_loss(classify(model.params, feats), batch.source_labels, self.hp.omega)
        return LossTerms(ce, {'ce': ce.item()})


class UNTLObjective(Objective):
    mode = UNTL

    def terms(self, batch, model: KeyedModel) -> LossTerms:
        return untl_terms(batch, model, self.hp)


class PromptObjective(Objective):
    mode = PROMPT

    def terms(self, batch, model: KeyedModel) -> LossTerms:
        return prompt_terms(batch, model, self.hp)


class AdapterObjective(Objective):
    mode = ADAPTER

    def terms(self, batch, model: KeyedModel) -> LossTerms:
        return adapter_terms(batch, model, self.hp)


class ObjectiveFactory:
    """Maps a mode name to its objective"""

    _REGISTRY = {cls.mode: cls for cls in (PlainObjective, UNTLObjective, PromptObjective, AdapterObjective)}

    @staticmethod
    def create(mode: str, hp: HyperParams) -> Objective:
        try:
            return ObjectiveFactory._REGISTRY[mode](hp)
        except KeyError:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}") from None
