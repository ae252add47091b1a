"""
Training loop for the four modes, Adam, evaluation, checkpoint selection and
the source/target divergence diagnostic.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm.auto import tqdm

from untl import diffcore as D
from untl.checkpoint import Checkpoint, atomic_write
from untl.common import (EVAL_BATCH, RECORD_FORMAT_VERSION, SHOW_PROGRESS, ConfigError, DataFormatError,
                         NonFiniteError, TrainingAbort)
from untl.data import Corpus, PairedBatch, paired_batches, source_batches, steps_per_epoch
from untl.diffcore import Tensor, grad_check
from untl.encoder import (DEFAULT_D_MODEL, DEFAULT_MAX_LEN, DEFAULT_NUM_CLASSES, EncoderParams, Example, Vocab,
                          classify, encode_all, encode_batch, predict)
from untl.keys import DEFAULT_ADAPTER_WIDTH, init_adapter, make_prompt_key
from untl.objectives import (ADAPTER, KEY_MODES, MODES, PLAIN, PROMPT, UNTL, HyperParams, KeyedModel,
                             ObjectiveFactory, adapter_ce_loss, adapter_objective, ce_loss, dc_loss,
                             mmd_distance, mmd_loss, prompt_mmd_loss, prompt_objective, untl_objective)

logger = logging.getLogger(__name__)

DIVERGENCE_CHUNK = 64


@dataclass
class TrainConfig:
    mode: str = UNTL
    hparams: Optional[HyperParams] = None
    lr_encoder: float = 2e-3
    lr_task_head: float = 2e-3
    lr_domain_head: float = 2e-3
    lr_adapter: float = 2e-3
    batch_size: int = 32
    epochs: int = 5
    eval_every: int = 40
    seed: int = 7
    disable_mmd: bool = False
    disable_dc: bool = False
    prompt_text: Optional[str] = None
    adapter_width: int = DEFAULT_ADAPTER_WIDTH
    d_model: int = DEFAULT_D_MODEL
    max_len: int = DEFAULT_MAX_LEN
    num_classes: int = DEFAULT_NUM_CLASSES

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.hparams is None:
            self.hparams = HyperParams.for_mode(self.mode)

    def validate(self) -> 'TrainConfig':
        for name in ('lr_encoder', 'lr_task_head', 'lr_domain_head', 'lr_adapter'):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value) or value <= 0:
                raise ConfigError(f"{name} must be a positive number, got {value!r}")
        for name, minimum in (('batch_size', 2), ('epochs', 1), ('eval_every', 1), ('d_model', 2),
                              ('max_len', 2), ('num_classes', 2)):
            value = getattr(self, name)
            if not isinstance(value, int) or value < minimum:
                raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")
        if self.mode == PLAIN and (self.disable_mmd or self.disable_dc):
            raise ConfigError("ablation flags do not apply to plain mode")
        if self.mode == PROMPT and not (self.prompt_text or '').strip():
            raise ConfigError("prompt mode needs a prompt_text secret key")
        if self.mode == ADAPTER and not 1 <= self.adapter_width < self.d_model:
            raise ConfigError(f"adapter_width must satisfy 1 <= m_a < d_model={self.d_model}")
        return self

    def effective_hparams(self) -> HyperParams:
        return self.hparams.ablated(self.disable_mmd, self.disable_dc)

    def to_dict(self) -> Dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != 'hparams'}
        out['hparams'] = asdict(self.hparams)
        return out

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> 'TrainConfig':
        raw = dict(raw)
        hparams = raw.pop('hparams', None)
        if isinstance(hparams, dict):
            hparams = HyperParams(**hparams)
        try:
            return cls(hparams=hparams, **raw)
        except TypeError as e:
            raise ConfigError(f"bad training config: {e}") from None


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> 'AdamState':
        return cls(m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam update, in place on ``params`` and ``state``"""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigError("adam_step: params, grads and state disagree in length")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ConfigError(f"adam_step: gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("adam_step: non-finite gradient")

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    step_size = lr / bc1

    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= step_size * m / (np.sqrt(v / bc2) + state.eps)
    return state


@dataclass
class ParamGroup:
    name: str
    params: List[Tensor]
    lr: float
    state: AdamState = None

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.for_params(self.params)


class Adam:
    """Adam over named parameter groups, each with its own learning rate"""

    def __init__(self, groups: Iterable[ParamGroup]):
        self.groups = [g for g in groups if g.params]

    def step(self) -> None:
        for group in self.groups:
            adam_step(group.params, [p.grad for p in group.params], group.state, group.lr)

    def zero_grad(self) -> None:
        for group in self.groups:
            D.zero_grad(group.params)


def param_groups(model: KeyedModel, config: TrainConfig) -> List[ParamGroup]:
    params = model.params
    groups = [
        ParamGroup('encoder', params.group(EncoderParams.EXTRACTOR), config.lr_encoder),
        ParamGroup('task_head', params.group(EncoderParams.TASK_HEAD), config.lr_task_head),
        ParamGroup('domain_head', params.group(EncoderParams.DOMAIN_HEAD), config.lr_domain_head),
    ]
    if model.adapter is not None:
        groups.append(ParamGroup('adapter', model.adapter.tensors(), config.lr_adapter))
    return groups


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    step: int
    mode: str
    acc_source: float
    acc_target: Optional[float] = None
    acc_target_with_key: Optional[float] = None
    acc_source_with_key: Optional[float] = None
    mmd_st: Optional[float] = None
    losses: Dict[str, float] = field(default_factory=dict)
    eps_source: float = field(init=False)
    eps_target: Optional[float] = field(init=False)
    key_gap: Optional[float] = field(init=False)
    score: float = field(init=False)

    def __post_init__(self):
        self.eps_source = 1.0 - self.acc_source
        self.eps_target = None if self.acc_target is None else 1.0 - self.acc_target
        self.key_gap = (None if self.acc_target_with_key is None or self.acc_target is None
                        else self.acc_target_with_key - self.acc_target)
        self.score = selection_score(self, self.mode)

    def as_record(self) -> Dict[str, Any]:
        record = asdict(self)
        record['format_version'] = RECORD_FORMAT_VERSION
        return record

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> 'EvalReport':
        init_names = {f.name for f in fields(cls) if f.init}
        return cls(**{k: v for k, v in record.items() if k in init_names})


def selection_score(report, mode: str) -> float:
    """plain: Acc_S; untl: Acc_S - Acc_T; key modes: Acc_S + Acc_Key - 2 Acc_T"""
    if mode == PLAIN:
        return report.acc_source
    if report.acc_target is None:
        raise ConfigError(f"{mode} selection needs the target accuracy")
    if mode == UNTL:
        return report.acc_source - report.acc_target
    if mode in KEY_MODES:
        if report.acc_target_with_key is None:
            raise ConfigError(f"{mode} selection needs the accuracy with the key")
        return report.acc_source + report.acc_target_with_key - 2 * report.acc_target
    raise ConfigError(f"unknown mode {mode!r}")


def _as_model(model_or_checkpoint) -> KeyedModel:
    if isinstance(model_or_checkpoint, Checkpoint):
        return model_or_checkpoint.to_model()
    return model_or_checkpoint


def corpus_features(model: KeyedModel, corpus: Corpus, with_key: bool = False) -> np.ndarray:
    sequences = corpus.token_ids
    transform = None
    if with_key:
        if model.prompt is not None:
            sequences = model.keyed_sequences(sequences)
        elif model.adapter is not None:
            transform = model.adapter
        else:
            raise ConfigError("model carries no secret key")
    return encode_all(model.params, sequences, transform, batch_size=EVAL_BATCH)


def evaluate(model_or_checkpoint, corpus: Corpus, with_key: bool = False) -> float:
    """Fraction of argmax-correct predictions on a labeled corpus"""
    model = _as_model(model_or_checkpoint)
    if not corpus.is_labeled:
        raise DataFormatError(f"{corpus.provenance}: evaluation needs a labeled corpus")
    feats = corpus_features(model, corpus, with_key)
    predictions = predict(classify(model.params, feats))
    return float(np.mean(predictions == corpus.labels))


def divergence_diagnostic(model_or_checkpoint, source_dev: Corpus, target_dev: Corpus,
                          chunk: int = DIVERGENCE_CHUNK) -> float:
    """MMD between source and target features, averaged over paired fixed-size chunks"""
    model = _as_model(model_or_checkpoint)
    if not len(source_dev) or not len(target_dev):
        raise DataFormatError("divergence diagnostic needs two non-empty corpora")
    fs = corpus_features(model, source_dev)
    ft = corpus_features(model, target_dev)
    n_chunks = min(math.ceil(len(fs) / chunk), math.ceil(len(ft) / chunk))
    values = [mmd_distance(D.constant(fs[i * chunk:(i + 1) * chunk]),
                           D.constant(ft[i * chunk:(i + 1) * chunk])).item()
              for i in range(n_chunks)]
    return float(np.mean(values))


def evaluate_model(model: KeyedModel, mode: str, source: Corpus, target: Optional[Corpus] = None,
                   step: int = 0, losses: Optional[Dict[str, float]] = None) -> EvalReport:
    acc_target = acc_key = acc_source_key = mmd = None
    if target is not None:
        acc_target = evaluate(model, target)
        mmd = divergence_diagnostic(model, source, target)
    if mode in KEY_MODES:
        acc_key = evaluate(model, target, with_key=True) if target is not None else None
        acc_source_key = evaluate(model, source, with_key=True)
    return EvalReport(step=step, mode=mode, acc_source=evaluate(model, source), acc_target=acc_target,
                      acc_target_with_key=acc_key, acc_source_with_key=acc_source_key, mmd_st=mmd,
                      losses=dict(losses or {}))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainingData:
    vocab: Vocab
    source_train: Corpus
    source_dev: Corpus
    target_train: Optional[Corpus] = None
    target_dev: Optional[Corpus] = None

    def check(self, mode: str) -> None:
        if not self.source_train.is_labeled or not self.source_dev.is_labeled:
            raise DataFormatError("source train/dev corpora must be labeled")
        if mode != PLAIN and (self.target_train is None or self.target_dev is None):
            raise ConfigError(f"{mode} mode needs target train and dev corpora")
        if self.target_dev is not None and not self.target_dev.is_labeled:
            raise DataFormatError("target dev corpus needs labels for evaluation")


def build_model(config: TrainConfig, vocab: Vocab) -> KeyedModel:
    params = EncoderParams.init(len(vocab), config.d_model, config.num_classes, seed=config.seed)
    prompt = make_prompt_key(config.prompt_text, vocab, config.max_len) if config.mode == PROMPT else None
    adapter = (init_adapter(config.d_model, config.adapter_width, seed=config.seed + 1)
               if config.mode == ADAPTER else None)
    return KeyedModel(params=params, prompt=prompt, adapter=adapter, max_len=config.max_len)


def _snapshot(model: KeyedModel) -> KeyedModel:
    params = EncoderParams(**{name: D.parameter(t.data) for name, t in model.params.named_tensors().items()})
    adapter = None
    if model.adapter is not None:
        adapter = type(model.adapter)(**{name: D.parameter(t.data) for name, t in model.adapter.named_tensors().items()})
    return KeyedModel(params=params, prompt=model.prompt, adapter=adapter, max_len=model.max_len)


def train(config: TrainConfig, data: TrainingData,
          show_progress: bool = SHOW_PROGRESS) -> Tuple[Checkpoint, List[EvalReport]]:
    """Run the schedule, evaluate every ``eval_every`` steps and keep the best-scoring parameters"""
    config.validate()
    data.check(config.mode)
    hp = config.effective_hparams()
    model = build_model(config, data.vocab)
    objective = ObjectiveFactory.create(config.mode, hp)
    optimizer = Adam(param_groups(model, config))

    if config.mode == PLAIN:
        batches = source_batches(data.source_train, config.batch_size, config.seed, config.epochs)
        total_steps = config.epochs * math.ceil(len(data.source_train) / config.batch_size)
    else:
        batches = paired_batches(data.source_train, data.target_train, config.batch_size, config.seed,
                                 config.epochs)
        total_steps = config.epochs * steps_per_epoch(len(data.source_train), len(data.target_train),
                                                      config.batch_size)

    logger.info("training mode=%s steps=%d hparams=%s", config.mode, total_steps, asdict(hp))
    history: List[EvalReport] = []
    best: Optional[Tuple[EvalReport, KeyedModel]] = None

    for batch in tqdm(batches, total=total_steps, desc=f"train[{config.mode}]", disable=not show_progress):
        step = batch.step + 1
        try:
            graph = D.Graph()
            with graph:
                terms = objective.terms(batch, model)
            D.backward(graph, terms.total)
            optimizer.step()
        except NonFiniteError as e:
            raise TrainingAbort(step, f"loss diverged ({e})") from e
        optimizer.zero_grad()

        if step % config.eval_every == 0 or step == total_steps:
            report = evaluate_model(model, config.mode, data.source_dev, data.target_dev, step, terms.as_dict())
            history.append(report)
            logger.info("step %d: %s", step, _summary(report))
            if best is None or report.score > best[0].score:
                best = (report, _snapshot(model))
                logger.info("new best selection score %.4f at step %d", report.score, step)

    report, best_model = best
    checkpoint = Checkpoint.from_model(best_model, config.mode, config.to_dict(), data.vocab,
                                       best_score=report.score, best_step=report.step, seed=config.seed)
    return checkpoint, history


def _summary(report: EvalReport) -> str:
    parts = [f"acc_s={report.acc_source:.3f}"]
    if report.acc_target is not None:
        parts.append(f"acc_t={report.acc_target:.3f}")
    if report.acc_target_with_key is not None:
        parts.append(f"acc_key={report.acc_target_with_key:.3f}")
    if report.mmd_st is not None:
        parts.append(f"mmd_st={report.mmd_st:.4f}")
    parts.append(f"score={report.score:.4f}")
    parts.extend(f"{k}={v:.4f}" for k, v in report.losses.items())
    return ' '.join(parts)


def save_history(history: Sequence[EvalReport], path) -> None:
    lines = ''.join(json.dumps(r.as_record(), sort_keys=True) + '\n' for r in history)
    atomic_write(path, lines.encode('utf-8'))


def load_history(path) -> List[EvalReport]:
    reports = []
    for line_no, line in enumerate(Path(path).read_text(encoding='utf-8').splitlines(), start=1):
        if not line.strip():
            continue
        try:
            reports.append(EvalReport.from_record(json.loads(line)))
        except (json.JSONDecodeError, TypeError) as e:
            raise DataFormatError(f"{path}:{line_no}: bad history record ({e})") from None
    return reports


# ---------------------------------------------------------------------------
# Gradient suite
# ---------------------------------------------------------------------------

GRADIENT_SUITE = ('ce', 'mmd_loss', 'dc', 'untl', 'prompt_mmd', 'prompt', 'adapter_ce', 'adapter')


def gradient_suite_instance(seed: int, d: int = 8, vocab_size: int = 24, batch: int = 4):
    """Small random model, prompt key, adapter and 4+4 example batch with generic (non-identity) weights"""
    rng = np.random.default_rng(seed)
    vocab = Vocab.build(f"t{i}" for i in range(vocab_size - 3))
    params = EncoderParams.init(len(vocab), d, DEFAULT_NUM_CLASSES, seed=seed)
    params.b_cls.data[...] = rng.normal(0.0, 0.5, size=params.b_cls.shape)
    params.b_dc.data[...] = rng.normal(0.0, 0.5, size=params.b_dc.shape)
    adapter = init_adapter(d, max(1, d // 4), seed=seed)
    adapter.w_up.data[...] = rng.normal(0.0, 0.3, size=adapter.w_up.shape)
    adapter.b_up.data[...] = rng.normal(0.0, 0.1, size=adapter.b_up.shape)
    adapter.b_down.data[...] = rng.normal(0.0, 0.1, size=adapter.b_down.shape)
    prompt = make_prompt_key('t0 t1', vocab, max_len=12)

    def sample(domain: str, labeled: bool) -> Tuple[Example, ...]:
        out = []
        for _ in range(batch):
            length = int(rng.integers(2, 6))
            ids = (1,) + tuple(int(i) for i in rng.integers(3, len(vocab), size=length))
            label = int(rng.integers(0, DEFAULT_NUM_CLASSES)) if labeled else None
            out.append(Example(ids, label, domain))
        return tuple(out)

    paired = PairedBatch(0, 0, sample('source', True), sample('target', False))
    model = KeyedModel(params=params, prompt=prompt, adapter=adapter, max_len=12)
    return model, paired


def gradient_suite(seed: int, hp: Optional[HyperParams] = None, step: float = 1e-5,
                   tolerance: float = 1e-5, max_entries: int = 64) -> Dict[str, float]:
    """Max relative gradient error of every objective on one random instance"""
    hp = hp or HyperParams(alpha=5.0, beta=0.5, lam=0.1, c=10.0, omega=1.5)
    model, batch = gradient_suite_instance(seed)
    p = model.params

    def source_feats():
        return encode_batch(p, batch.source_ids)

    def target_feats():
        return encode_batch(p, batch.target_ids)

    def keyed_feats():
        return encode_batch(p, model.keyed_sequences(batch.target_ids))

    functions = {
        'ce': lambda: ce_loss(classify(p, source_feats()), batch.source_labels, hp.omega),
        'mmd_loss': lambda: mmd_loss(source_feats(), target_feats(), hp.c),
        'dc': lambda: dc_loss(source_feats(), target_feats(), p),
        'untl': lambda: untl_objective(batch, model, hp),
        'prompt_mmd': lambda: prompt_mmd_loss(keyed_feats(), source_feats(), target_feats(), hp.alpha, hp.c),
        'prompt': lambda: prompt_objective(batch, model, hp),
        'adapter_ce': lambda: adapter_ce_loss(batch.source_ids, batch.source_labels, p, model.adapter, hp.omega),
        'adapter': lambda: adapter_objective(batch, model, hp),
    }
    return {name: grad_check(fn, model.tensors(), step=step, tolerance=tolerance,
                             max_entries=max_entries, seed=seed)
            for name, fn in functions.items()}
