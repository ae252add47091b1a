import csv
import json
from types import SimpleNamespace

import pytest
from sklearn.linear_model import LogisticRegression

from untl import cli
from untl.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, ConfigLoader, ReportFormatter, main, run_ablation
from untl.common import ConfigError
from untl.training import EvalReport, TrainConfig, train


def result(out):
    """The RESULT record printed by a command"""
    lines = [line for line in out.splitlines() if line.startswith('RESULT ')]
    assert lines, out
    return json.loads(lines[-1][len('RESULT '):])


@pytest.fixture
def config_file(tmp_path, tiny_spec):
    raw = {
        'mode': 'untl',
        'synthetic': tiny_spec.to_dict(),
        'model': {'d_model': 16},
        'train': {'batch_size': 10, 'epochs': 2, 'eval_every': 4},
    }
    path = tmp_path / 'untl.json'
    path.write_text(json.dumps(raw))
    return path


@pytest.fixture
def trained(tmp_path, config_file, data_dir, capsys):
    out = tmp_path / 'runs' / 'untl.ckpt'
    assert main(['train', '--config', str(config_file), '--data', str(data_dir), '--out', str(out)]) == EXIT_OK
    capsys.readouterr()
    return out


class TestGenData:
    def test_writes_corpora_and_vocab(self, tmp_path, config_file, capsys):
        out = tmp_path / 'data'
        assert main(['gen-data', '--config', str(config_file), '--out', str(out)]) == EXIT_OK
        assert len(list(out.iterdir())) == 7
        record = result(capsys.readouterr().out)
        assert record['counts']['source_train'] == 60
        assert record['counts']['target_test'] == 30

    def test_reproducible(self, tmp_path, config_file):
        main(['gen-data', '--config', str(config_file), '--out', str(tmp_path / 'a')])
        main(['gen-data', '--config', str(config_file), '--out', str(tmp_path / 'b')])
        for path in sorted((tmp_path / 'a').iterdir()):
            assert path.read_bytes() == (tmp_path / 'b' / path.name).read_bytes()

    def test_seed_override(self, tmp_path, config_file):
        main(['gen-data', '--config', str(config_file), '--out', str(tmp_path / 'a')])
        main(['gen-data', '--config', str(config_file), '--out', str(tmp_path / 'b'), '--seed', '99'])
        name = 'source_train.jsonl'
        assert (tmp_path / 'a' / name).read_bytes() != (tmp_path / 'b' / name).read_bytes()

    def test_overlapping_pools_exit_1(self, tmp_path, tiny_spec, capsys):
        raw = {'synthetic': {**tiny_spec.to_dict(), 'source_marker_prefix': 'tgt'}}
        path = tmp_path / 'bad.json'
        path.write_text(json.dumps(raw))
        assert main(['gen-data', '--config', str(path), '--out', str(tmp_path / 'data')]) == EXIT_VALIDATION
        err = capsys.readouterr().err
        assert err.startswith('Error 1:')
        assert 'marker[source]' in err and 'marker[target]' in err


class TestTrain:
    """train command"""

    def test_writes_checkpoint_and_history(self, tmp_path, config_file, data_dir, capsys):
        out = tmp_path / 'runs' / 'untl.ckpt'
        assert main(['train', '--config', str(config_file), '--data', str(data_dir), '--out', str(out)]) == EXIT_OK
        history = tmp_path / 'runs' / 'untl.history.jsonl'
        assert out.exists() and history.exists()
        record = result(capsys.readouterr().out)
        assert record['mode'] == 'untl'
        assert record['history'] == str(history)
        steps = [json.loads(line)['step'] for line in history.read_text().splitlines()]
        assert record['step'] in steps

    def test_failed_history_write_leaves_no_checkpoint(self, mocker, tmp_path, config_file, data_dir, capsys):
        """Test an I/O failure while writing the history does not leave a checkpoint behind"""
        out = tmp_path / 'runs' / 'untl.ckpt'
        history = tmp_path / 'runs' / 'untl.history.jsonl'
        mocker.patch('untl.cli.save_history', side_effect=OSError(28, 'No space left on device', str(history)))
        code = main(['train', '--config', str(config_file), '--data', str(data_dir), '--out', str(out)])
        assert code == EXIT_RUNTIME
        assert not out.exists()
        assert 'No space left on device' in capsys.readouterr().err

    def test_prompt_mode_without_key_exit_1(self, tmp_path, config_file, data_dir, capsys):
        code = main(['train', '--config', str(config_file), '--mode', 'prompt', '--data', str(data_dir),
                     '--out', str(tmp_path / 'p.ckpt')])
        assert code == EXIT_VALIDATION
        assert 'prompt_text' in capsys.readouterr().err
        assert not (tmp_path / 'p.ckpt').exists()

    def test_ablate_flag_reaches_training(self, mocker, tmp_path, config_file, data_dir):
        spy = mocker.patch('untl.cli.train', wraps=train)
        main(['train', '--config', str(config_file), '--data', str(data_dir), '--out', str(tmp_path / 'a.ckpt'),
              '--ablate', 'mmd'])
        config = spy.call_args.args[0]
        assert config.disable_mmd and not config.disable_dc
        assert config.effective_hparams().lam == 0.0

    def test_missing_data_file_exit_1(self, tmp_path, config_file, data_dir, capsys):
        (data_dir / 'target_train.jsonl').unlink()
        code = main(['train', '--config', str(config_file), '--data', str(data_dir), '--out', str(tmp_path / 'x')])
        assert code == EXIT_VALIDATION
        assert 'missing file' in capsys.readouterr().err

    def test_invalid_json_config(self, tmp_path, data_dir, capsys):
        path = tmp_path / 'broken.json'
        path.write_text('{"mode": ')
        assert main(['train', '--config', str(path), '--data', str(data_dir), '--out', str(tmp_path / 'x')]) == 1
        assert 'invalid JSON' in capsys.readouterr().err

    def test_training_abort_exit_2(self, mocker, tmp_path, config_file, data_dir, capsys):
        from untl.common import TrainingAbort
        mocker.patch('untl.cli.train', side_effect=TrainingAbort(3, 'loss diverged'))
        code = main(['train', '--config', str(config_file), '--data', str(data_dir), '--out', str(tmp_path / 'x')])
        assert code == EXIT_RUNTIME
        assert 'step 3' in capsys.readouterr().err


class TestEval:
    """eval and export-embeddings"""

    def test_result_line(self, trained, data_dir, capsys):
        corpus = data_dir / 'target_dev.jsonl'
        assert main(['eval', str(trained), str(corpus)]) == EXIT_OK
        record = result(capsys.readouterr().out)
        assert record['domain'] == 'target'
        assert record['examples'] == 30
        assert 0.0 <= record['accuracy'] <= 1.0
        assert record['with_key'] is False

    def test_with_key_on_untl_checkpoint(self, trained, data_dir, capsys):
        assert main(['eval', str(trained), str(data_dir / 'target_dev.jsonl'), '--with-key']) == EXIT_VALIDATION
        assert '--with-key' in capsys.readouterr().err

    def test_corrupted_checkpoint(self, tmp_path, data_dir, capsys):
        path = tmp_path / 'broken.ckpt'
        path.write_bytes(b'garbage')
        assert main(['eval', str(path), str(data_dir / 'source_dev.jsonl')]) == EXIT_VALIDATION
        captured = capsys.readouterr()
        assert captured.out == ''
        assert captured.err.startswith('Error 1:')

    def test_unlabeled_corpus(self, trained, data_dir, capsys):
        assert main(['eval', str(trained), str(data_dir / 'target_train.jsonl')]) == EXIT_VALIDATION
        assert 'labeled' in capsys.readouterr().err

    def test_export_rows(self, tmp_path, trained, data_dir, capsys):
        out = tmp_path / 'feats.csv'
        assert main(['export-embeddings', str(trained), str(data_dir / 'target_test.jsonl'),
                     '--out', str(out)]) == EXIT_OK
        rows = list(csv.reader(out.open()))
        assert rows[0][:3] == ['domain', 'label', 'f0']
        assert len(rows) == 31
        assert all(len(row) == 16 + 2 for row in rows)
        assert result(capsys.readouterr().out)['dim'] == 16

        first = out.read_bytes()
        main(['export-embeddings', str(trained), str(data_dir / 'target_test.jsonl'), '--out', str(out)])
        assert out.read_bytes() == first


class TestGradCheck:
    def test_passes(self, capsys):
        assert main(['grad-check']) == EXIT_OK
        record = result(capsys.readouterr().out)
        assert record['passed'] is True
        assert set(record['max_rel_err']) == set(cli.GRADIENT_SUITE)

    def test_corrupted_derivative_fails(self, capsys):
        assert main(['grad-check', '--corrupt', 'log-softmax']) == EXIT_RUNTIME
        out = capsys.readouterr().out
        assert 'FAIL' in out
        assert result(out)['passed'] is False


class TestConfig:
    """show-defaults and config validation"""

    @pytest.mark.parametrize('mode', ['plain', 'untl', 'prompt', 'adapter'])
    def test_defaults_are_loadable(self, mode, capsys):
        assert main(['show-defaults', '--mode', mode]) == EXIT_OK
        raw = json.loads(capsys.readouterr().out)
        config = ConfigLoader.from_dict(raw)
        assert config.mode == mode
        assert config.train == TrainConfig.from_dict(config.train.to_dict())

    def test_table(self, capsys):
        main(['show-defaults', '--table'])
        table = json.loads(capsys.readouterr().out)
        assert table['prompt']['alpha'] == 5.0
        assert table['untl']['beta'] == 0.5

    def test_load_without_file(self):
        assert ConfigLoader.load(None, 'prompt').train.prompt_text
        assert ConfigLoader.load(None).mode == 'untl'

    @pytest.mark.parametrize('raw,message', [
        ({'mode': 'untl', 'train': {'momentum': 0.9}}, 'unknown keys'),
        ({'mode': 'untl', 'optimizer': {}}, 'unknown config keys'),
        ({'mode': 'untl', 'hyperparams': {'alpha': 2.0}}, 'do not apply'),
        ({'mode': 'plain', 'train': {'disable_mmd': True}}, 'do not apply'),
        ({'mode': 'adapter', 'model': {'prompt_text': 'secret'}}, 'do not apply'),
        ({'mode': 'untl', 'model': []}, 'must be an object'),
        ({'mode': 'ranking'}, 'unknown mode'),
        ([], 'JSON object'),
    ])
    def test_rejected(self, raw, message):
        with pytest.raises(ConfigError, match=message):
            ConfigLoader.from_dict(raw)

    def test_hyperparams_override_mode_defaults(self):
        config = ConfigLoader.from_dict({'mode': 'untl', 'hyperparams': {'beta': 1.25}})
        assert config.train.hparams.beta == 1.25
        assert config.train.hparams.lam == 0.1

    def test_error_line_format(self):
        assert ReportFormatter.error_line('bad thing', 1) == 'Error 1: bad thing'


class TestAblation:
    def _fake_train(self, config, data):
        score = 0.4 - 0.1 * config.disable_mmd - 0.2 * config.disable_dc + 0.01 * config.seed
        report = EvalReport(step=4, mode=config.mode, acc_source=0.8, acc_target=0.8 - score)
        return SimpleNamespace(best_step=4, best_score=report.score), [report]

    def test_medians_per_variant(self, mocker, training_data):
        fake = mocker.patch('untl.cli.train', side_effect=self._fake_train)
        rows = run_ablation(TrainConfig(mode='untl'), training_data, seeds=[1, 2, 3])
        assert fake.call_count == 9
        assert list(rows) == ['full', 'no-mmd', 'no-dc']
        assert rows['full']['score'] == pytest.approx(0.42)
        assert rows['full']['score'] >= rows['no-mmd']['score'] >= rows['no-dc']['score']
        assert rows['full']['acc_target_with_key'] is None

    def test_plain_mode_rejected(self, training_data):
        with pytest.raises(ConfigError):
            run_ablation(TrainConfig(mode='plain'), training_data, seeds=[1])

    def test_command_prints_each_variant(self, mocker, config_file, data_dir, capsys):
        mocker.patch('untl.cli.train', side_effect=self._fake_train)
        assert main(['ablation', '--config', str(config_file), '--data', str(data_dir), '--seeds', '2']) == EXIT_OK
        out = capsys.readouterr().out
        variants = [json.loads(line[len('RESULT '):])['variant'] for line in out.splitlines()
                    if line.startswith('RESULT ')]
        assert variants == ['full', 'no-mmd', 'no-dc']


@pytest.mark.slow
class TestEmbeddingSeparability:
    def test_domains_separable_after_untl(self, tmp_path, capsys):
        data = tmp_path / 'data'
        assert main(['gen-data', '--out', str(data)]) == EXIT_OK
        ckpt = tmp_path / 'untl.ckpt'
        assert main(['train', '--data', str(data), '--out', str(ckpt)]) == EXIT_OK
        features, domains = [], []
        for split in ('source_test', 'target_test'):
            out = tmp_path / f"{split}.csv"
            main(['export-embeddings', str(ckpt), str(data / f"{split}.jsonl"), '--out', str(out)])
            for row in list(csv.reader(out.open()))[1:]:
                domains.append(row[0])
                features.append([float(v) for v in row[2:]])
        classifier = LogisticRegression(max_iter=2000).fit(features, domains)
        assert classifier.score(features, domains) >= 0.9
