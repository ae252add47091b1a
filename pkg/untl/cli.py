"""
Command-line entry point.

    untl gen-data --out data/
    untl train --config untl.json --data data/ --out runs/untl.ckpt
    untl eval runs/untl.ckpt data/target_test.jsonl [--with-key]
    untl export-embeddings runs/untl.ckpt data/target_test.jsonl --out feats.csv
    untl grad-check
    untl show-defaults --mode prompt
    untl ablation --config untl.json --data data/ --seeds 3
"""

import argparse
import contextlib
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from untl import __version__
from untl import diffcore as D
from untl.checkpoint import Checkpoint, atomic_write
from untl.common import (CheckpointError, ConfigError, DataFormatError, TrainingAbort, UNTLError,
                         configure_logging)
from untl.data import (DEV, TRAIN, VOCAB_FILE, SyntheticSpec, corpus_filename, generate_synthetic, load_corpus,
                       save_generated)
from untl.encoder import DEFAULT_D_MODEL, DEFAULT_MAX_LEN, DEFAULT_NUM_CLASSES, SOURCE, TARGET, Vocab
from untl.keys import DEFAULT_ADAPTER_WIDTH, DEFAULT_PROMPT_TEXT
from untl.objectives import ADAPTER, KEY_MODES, MODE_DEFAULTS, MODES, PLAIN, PROMPT, UNTL, HyperParams
from untl.training import (GRADIENT_SUITE, EvalReport, TrainConfig, TrainingData, corpus_features, evaluate,
                           gradient_suite, save_history, train)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

GRAD_TOLERANCE = 1e-5

SECTIONS = ('synthetic', 'model', 'train', 'hyperparams')
MODEL_KEYS = ('d_model', 'max_len', 'num_classes', 'prompt_text', 'adapter_width')
TRAIN_KEYS = ('lr_encoder', 'lr_task_head', 'lr_domain_head', 'lr_adapter', 'batch_size', 'epochs',
              'eval_every', 'seed', 'disable_mmd', 'disable_dc')
HYPER_KEYS = ('alpha', 'beta', 'lam', 'c', 'omega')

# section.key entries that make no sense for a mode
INAPPLICABLE = {
    PLAIN: {'hyperparams.alpha', 'hyperparams.beta', 'hyperparams.lam', 'hyperparams.c',
            'model.prompt_text', 'model.adapter_width',
            'train.lr_adapter', 'train.lr_domain_head', 'train.disable_mmd', 'train.disable_dc'},
    UNTL: {'hyperparams.alpha', 'model.prompt_text', 'model.adapter_width', 'train.lr_adapter'},
    PROMPT: {'model.adapter_width', 'train.lr_adapter'},
    ADAPTER: {'model.prompt_text'},
}

ABLATION_VARIANTS = {
    'full': (False, False),
    'no-mmd': (True, False),
    'no-dc': (False, True),
}


@dataclass
class CommandConfig:
    """Parsed structured config: the synthetic corpus spec and the training config for one mode"""
    mode: str
    synthetic: SyntheticSpec
    train: TrainConfig
    source: Optional[str] = None
    raw: Dict[str, Any] = field(default_factory=dict)


class ConfigLoader:
    """Validate and load JSON config files"""

    @staticmethod
    def defaults(mode: str = UNTL) -> Dict[str, Any]:
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        base = TrainConfig(mode=mode, prompt_text=DEFAULT_PROMPT_TEXT if mode == PROMPT else None)
        raw = {
            'mode': mode,
            'synthetic': SyntheticSpec().to_dict(),
            'model': {
                'd_model': DEFAULT_D_MODEL,
                'max_len': DEFAULT_MAX_LEN,
                'num_classes': DEFAULT_NUM_CLASSES,
                'prompt_text': base.prompt_text,
                'adapter_width': DEFAULT_ADAPTER_WIDTH,
            },
            'train': {key: getattr(base, key) for key in TRAIN_KEYS},
            'hyperparams': asdict(HyperParams.for_mode(mode)),
        }
        for entry in INAPPLICABLE[mode]:
            section, key = entry.split('.')
            raw[section].pop(key, None)
        return raw

    @staticmethod
    def validate(raw: Any, mode: str) -> None:
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - set(SECTIONS) - {'mode'}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        allowed = {
            'synthetic': set(SyntheticSpec.field_names()),
            'model': set(MODEL_KEYS),
            'train': set(TRAIN_KEYS),
            'hyperparams': set(HYPER_KEYS),
        }
        for section in SECTIONS:
            values = raw.get(section, {})
            if not isinstance(values, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            unknown = set(values) - allowed[section]
            if unknown:
                raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
            rejected = sorted(f"{section}.{key}" for key in values if f"{section}.{key}" in INAPPLICABLE[mode])
            if rejected:
                raise ConfigError(f"keys {rejected} do not apply to {mode} mode")

    @classmethod
    def from_dict(cls, raw: Any, mode: Optional[str] = None, source: Optional[str] = None) -> CommandConfig:
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        mode = mode or raw.get('mode', UNTL)
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        cls.validate(raw, mode)

        synthetic = SyntheticSpec(**raw.get('synthetic', {}))
        hparams = HyperParams.for_mode(mode, **raw.get('hyperparams', {}))
        train_config = TrainConfig(mode=mode, hparams=hparams, **raw.get('model', {}), **raw.get('train', {}))
        train_config.validate()
        return CommandConfig(mode=mode, synthetic=synthetic, train=train_config, source=source, raw=raw)

    @classmethod
    def load(cls, path: Optional[str], mode: Optional[str] = None) -> CommandConfig:
        if path is None:
            return cls.from_dict({'mode': mode or UNTL, 'model': cls._default_model(mode or UNTL)})
        try:
            raw = json.loads(Path(path).read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
        except OSError as e:
            raise ConfigError(f"{path}: cannot read config ({e.strerror})") from None
        try:
            return cls.from_dict(raw, mode, source=str(path))
        except ConfigError as e:
            raise ConfigError(f"{path}: {e}") from None

    @staticmethod
    def _default_model(mode: str) -> Dict[str, Any]:
        return {'prompt_text': DEFAULT_PROMPT_TEXT} if mode == PROMPT else {}


class ReportFormatter:
    """Text tables for people, ``RESULT <json>`` lines for scripts"""

    COLUMNS = (('step', 'step', '{:d}'), ('acc_source', 'acc_S', '{:.4f}'), ('acc_target', 'acc_T', '{:.4f}'),
               ('acc_target_with_key', 'acc_key', '{:.4f}'), ('acc_source_with_key', 'acc_S_key', '{:.4f}'),
               ('mmd_st', 'mmd_ST', '{:.4f}'), ('score', 'score', '{:.4f}'))

    @staticmethod
    def _cell(value, pattern: str) -> str:
        return '-' if value is None else pattern.format(value)

    @classmethod
    def report_table(cls, reports: Sequence[EvalReport]) -> str:
        header = ' '.join(f"{label:>9}" for _, label, _ in cls.COLUMNS)
        rows = [' '.join(f"{cls._cell(getattr(r, name), pattern):>9}" for name, _, pattern in cls.COLUMNS)
                for r in reports]
        return '\n'.join([header] + rows)

    @staticmethod
    def grad_table(errors: Dict[str, float], tolerance: float) -> str:
        lines = [f"{'objective':<12} {'max_rel_err':>12}  status"]
        for name, value in errors.items():
            lines.append(f"{name:<12} {value:>12.3e}  {'ok' if value <= tolerance else 'FAIL'}")
        return '\n'.join(lines)

    @staticmethod
    def ablation_table(rows: Dict[str, Dict[str, Optional[float]]]) -> str:
        columns = ('acc_source', 'acc_target', 'acc_target_with_key', 'key_gap', 'score')
        lines = [f"{'variant':<8} " + ' '.join(f"{c:>19}" for c in columns)]
        for variant, medians in rows.items():
            cells = ' '.join(f"{ReportFormatter._cell(medians.get(c), '{:.4f}'):>19}" for c in columns)
            lines.append(f"{variant:<8} {cells}")
        return '\n'.join(lines)

    @staticmethod
    def result_line(record: Dict[str, Any]) -> str:
        return 'RESULT ' + json.dumps(record, sort_keys=True)

    @staticmethod
    def error_line(message: str, exit_code: int) -> str:
        return f"Error {exit_code}: {message}"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _require(path: Path) -> Path:
    if not path.exists():
        raise ConfigError(f"missing file {path}")
    return path


def load_training_data(data_dir, config: TrainConfig) -> TrainingData:
    data_dir = Path(data_dir)
    vocab = Vocab.load(_require(data_dir / VOCAB_FILE))

    def corpus(domain: str, split: str, required: bool = True):
        path = data_dir / corpus_filename(domain, split)
        if not required and not path.exists():
            return None
        return load_corpus(_require(path), vocab, config.num_classes, config.max_len, split)

    needs_target = config.mode != PLAIN
    return TrainingData(vocab=vocab,
                        source_train=corpus(SOURCE, TRAIN),
                        source_dev=corpus(SOURCE, DEV),
                        target_train=corpus(TARGET, TRAIN) if needs_target else None,
                        target_dev=corpus(TARGET, DEV, required=needs_target))


def _apply_ablations(config: TrainConfig, ablate: Optional[Sequence[str]]) -> TrainConfig:
    ablate = set(ablate or ())
    if ablate:
        config = replace(config, disable_mmd=config.disable_mmd or 'mmd' in ablate,
                         disable_dc=config.disable_dc or 'dc' in ablate)
    return config.validate()


def cmd_gen_data(args) -> int:
    config = ConfigLoader.load(args.config)
    spec = config.synthetic if args.seed is None else replace(config.synthetic, seed=args.seed)
    data = generate_synthetic(spec, config.train.max_len)
    written = save_generated(data, args.out)
    counts = {f"{domain}_{split}": len(corpus) for (domain, split), corpus in data.corpora().items()}
    for name, count in counts.items():
        print(f"{name:<14} {count:>6}")
    print(f"{'vocab':<14} {len(data.vocab):>6}")
    print(ReportFormatter.result_line({'command': 'gen-data', 'counts': counts, 'vocab_size': len(data.vocab),
                                       'files': [str(p) for p in written]}))
    return EXIT_OK


def cmd_train(args) -> int:
    config = ConfigLoader.load(args.config, args.mode)
    train_config = config.train if args.seed is None else replace(config.train, seed=args.seed)
    train_config = _apply_ablations(train_config, args.ablate)
    data = load_training_data(args.data, train_config)

    checkpoint, history = train(train_config, data)
    checkpoint.extra['corpora'] = {name: corpus.fingerprint() for name, corpus in
                                   (('source_train', data.source_train), ('target_train', data.target_train))
                                   if corpus is not None}
    out = Path(args.out)
    history_path = out.with_name(out.stem + '.history.jsonl')
    # checkpoint last: its presence means every output was written
    save_history(history, history_path)
    checkpoint.save(out)
    logger.info("wrote checkpoint %s and history %s", out, history_path)

    best = next(r for r in history if r.step == checkpoint.best_step)
    print(ReportFormatter.report_table([best]))
    print(ReportFormatter.result_line({'command': 'train', 'checkpoint': str(out), 'history': str(history_path),
                                       **best.as_record()}))
    return EXIT_OK


def _load_for_corpus(checkpoint_path: str, corpus_path: str, with_key: bool):
    checkpoint = Checkpoint.load(checkpoint_path)
    if with_key and checkpoint.mode not in KEY_MODES:
        raise ConfigError(f"--with-key needs a prompt or adapter checkpoint, got {checkpoint.mode}")
    num_classes = int(checkpoint.config.get('num_classes', DEFAULT_NUM_CLASSES))
    max_len = int(checkpoint.config.get('max_len', DEFAULT_MAX_LEN))
    corpus = load_corpus(corpus_path, checkpoint.vocab, num_classes, max_len)
    return checkpoint, corpus


def cmd_eval(args) -> int:
    checkpoint, corpus = _load_for_corpus(args.checkpoint, args.corpus, args.with_key)
    accuracy = evaluate(checkpoint, corpus, with_key=args.with_key)
    record = {
        'command': 'eval',
        'checkpoint': str(args.checkpoint),
        'corpus': str(args.corpus),
        'mode': checkpoint.mode,
        'domain': corpus.domain,
        'examples': len(corpus),
        'with_key': args.with_key,
        'accuracy': accuracy,
        'best_score': checkpoint.best_score,
        'best_step': checkpoint.best_step,
    }
    key_note = ' with key' if args.with_key else ''
    print(f"accuracy{key_note}: {accuracy:.4f} on {len(corpus)} {corpus.domain} examples "
          f"(checkpoint score {checkpoint.best_score:.4f} at step {checkpoint.best_step})")
    print(ReportFormatter.result_line(record))
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    checkpoint, corpus = _load_for_corpus(args.checkpoint, args.corpus, args.with_key)
    feats = corpus_features(checkpoint.to_model(), corpus, with_key=args.with_key)

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(['domain', 'label'] + [f"f{i}" for i in range(feats.shape[1])])
    for example, row in zip(corpus.examples, feats):
        label = '' if example.label is None else example.label
        writer.writerow([example.domain, label] + [repr(float(v)) for v in row])
    atomic_write(args.out, buffer.getvalue().encode('utf-8'))

    print(ReportFormatter.result_line({'command': 'export-embeddings', 'out': str(args.out), 'rows': len(corpus),
                                       'dim': int(feats.shape[1]), 'with_key': args.with_key}))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    hp = ConfigLoader.load(args.config).train.effective_hparams() if args.config else None
    corrupt = D.corrupt_backward(args.corrupt) if args.corrupt else contextlib.nullcontext()
    worst = {name: 0.0 for name in GRADIENT_SUITE}
    with corrupt:
        for seed in range(args.seed, args.seed + args.seeds):
            for name, value in gradient_suite(seed, hp, tolerance=args.tolerance).items():
                worst[name] = max(worst[name], value)

    print(ReportFormatter.grad_table(worst, args.tolerance))
    passed = all(value <= args.tolerance for value in worst.values())
    print(ReportFormatter.result_line({'command': 'grad-check', 'max_rel_err': worst, 'passed': passed,
                                       'seeds': args.seeds, 'tolerance': args.tolerance}))
    return EXIT_OK if passed else EXIT_RUNTIME


def cmd_show_defaults(args) -> int:
    if args.table:
        print(json.dumps(MODE_DEFAULTS, indent=2, sort_keys=True))
    else:
        print(json.dumps(ConfigLoader.defaults(args.mode), indent=2, sort_keys=True))
    return EXIT_OK


def _median(values: List[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.median(present)) if present else None


def run_ablation(train_config: TrainConfig, data: TrainingData, seeds: Sequence[int],
                 variants: Optional[Sequence[str]] = None) -> Dict[str, Dict[str, Optional[float]]]:
    """Median best-checkpoint metrics per ablation variant over ``seeds``"""
    if train_config.mode == PLAIN:
        raise ConfigError("ablations need a mode with MMD and DC terms")
    rows = {}
    for variant in variants or ABLATION_VARIANTS:
        disable_mmd, disable_dc = ABLATION_VARIANTS[variant]
        bests = []
        for seed in seeds:
            config = replace(train_config, seed=seed, disable_mmd=disable_mmd, disable_dc=disable_dc)
            checkpoint, history = train(config, data)
            bests.append(next(r for r in history if r.step == checkpoint.best_step))
            logger.info("ablation %s seed %d: score %.4f", variant, seed, checkpoint.best_score)
        rows[variant] = {name: _median([getattr(r, name) for r in bests])
                         for name in ('acc_source', 'acc_target', 'acc_target_with_key', 'key_gap', 'score')}
    return rows


def cmd_ablation(args) -> int:
    config = ConfigLoader.load(args.config, args.mode)
    data = load_training_data(args.data, config.train)
    seeds = list(range(args.seed, args.seed + args.seeds))
    rows = run_ablation(config.train, data, seeds)
    print(ReportFormatter.ablation_table(rows))
    for variant, medians in rows.items():
        print(ReportFormatter.result_line({'command': 'ablation', 'mode': config.mode, 'variant': variant,
                                           'seeds': seeds, **medians}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='untl', description='Unsupervised non-transferable text classification')
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', help='write the synthetic two-domain corpora and vocabulary')
    p.add_argument('--config', help='JSON config; only the synthetic and model sections are used')
    p.add_argument('--out', required=True, help='output directory')
    p.add_argument('--seed', type=int, help='override synthetic.seed')
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser('train', help='train one mode and write the best checkpoint')
    p.add_argument('--config', help='JSON config')
    p.add_argument('--mode', choices=MODES, help='override the config mode')
    p.add_argument('--data', required=True, help='directory written by gen-data')
    p.add_argument('--out', required=True, help='checkpoint path; history goes next to it')
    p.add_argument('--ablate', action='append', choices=('mmd', 'dc'), help='drop the MMD or DC term')
    p.add_argument('--seed', type=int, help='override train.seed')
    p.set_defaults(handler=cmd_train)

    for name, handler, help_text in (('eval', cmd_eval, 'accuracy of a checkpoint on a labeled corpus'),
                                     ('export-embeddings', cmd_export_embeddings, 'write feature rows as CSV')):
        p = sub.add_parser(name, help=help_text)
        p.add_argument('checkpoint')
        p.add_argument('corpus')
        p.add_argument('--with-key', action='store_true', help='apply the prompt or adapter key')
        if name == 'export-embeddings':
            p.add_argument('--out', required=True, help='CSV output path')
        p.set_defaults(handler=handler)

    p = sub.add_parser('grad-check', help='finite-difference check of every objective')
    p.add_argument('--config', help='JSON config; the hyperparams section is used')
    p.add_argument('--seed', type=int, default=0, help='first seed')
    p.add_argument('--seeds', type=int, default=1, help='number of random instances')
    p.add_argument('--tolerance', type=float, default=GRAD_TOLERANCE)
    p.add_argument('--corrupt', help=argparse.SUPPRESS)
    p.set_defaults(handler=cmd_grad_check)

    p = sub.add_parser('show-defaults', help='print the default config for a mode')
    p.add_argument('--mode', choices=MODES, default=UNTL)
    p.add_argument('--table', action='store_true', help='print the per-mode hyperparameter defaults instead')
    p.set_defaults(handler=cmd_show_defaults)

    p = sub.add_parser('ablation', help='full / no-mmd / no-dc medians over seeds')
    p.add_argument('--config', help='JSON config')
    p.add_argument('--mode', choices=MODES, help='override the config mode')
    p.add_argument('--data', required=True, help='directory written by gen-data')
    p.add_argument('--seed', type=int, default=7, help='first seed')
    p.add_argument('--seeds', type=int, default=3)
    p.set_defaults(handler=cmd_ablation)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, DataFormatError, CheckpointError) as e:
        print(ReportFormatter.error_line(str(e), EXIT_VALIDATION), file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingAbort as e:
        print(ReportFormatter.error_line(f"training aborted at {e}", EXIT_RUNTIME), file=sys.stderr)
        return EXIT_RUNTIME
    except UNTLError as e:
        print(ReportFormatter.error_line(str(e), EXIT_RUNTIME), file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(ReportFormatter.error_line(f"{e.filename}: {e.strerror}", EXIT_RUNTIME), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
