import json
from collections import Counter

import pytest
from sklearn.feature_extraction.text import CountVectorizer
from sklearn.linear_model import LogisticRegression

from untl.common import ConfigError, DataFormatError
from untl.data import (DEV, TEST, TRAIN, VOCAB_FILE, Corpus, SyntheticSpec, check_pools, corpus_filename,
                       generate_synthetic, load_corpus, paired_batches, save_generated, source_batches,
                       steps_per_epoch, write_corpus)
from untl.encoder import CLS, Example


def make_corpus(n, domain='source', labeled=True):
    examples = tuple(Example((CLS, 3 + i % 5), i % 3 if labeled or domain == 'source' else None, domain, f"ex{i}")
                     for i in range(n))
    return Corpus(examples, domain, TRAIN, provenance=f"{domain}-{n}")


class TestSynthetic:
    """Two-domain synthetic corpus"""

    def test_labels_balanced(self):
        spec = SyntheticSpec(train_size=300, dev_size=10, test_size=10)
        data = generate_synthetic(spec)
        counts = Counter(ex.label for ex in data.source[TRAIN].examples)
        assert set(counts) == {0, 1, 2}
        assert all(99 <= c <= 101 for c in counts.values())
        assert data.source[DEV].label_distribution() in ({0: 4, 1: 3, 2: 3}, {0: 3, 1: 4, 2: 3}, {0: 3, 1: 3, 2: 4})

    def test_deterministic(self, tiny_spec):
        first, second = generate_synthetic(tiny_spec), generate_synthetic(tiny_spec)
        for key, corpus in first.corpora().items():
            assert corpus.fingerprint() == second.corpora()[key].fingerprint()
        assert first.vocab.id_to_token == second.vocab.id_to_token

    def test_seed_changes_corpus(self, tiny_spec, tiny_data):
        from dataclasses import replace
        other = generate_synthetic(replace(tiny_spec, seed=tiny_spec.seed + 1))
        assert other.source[TRAIN].fingerprint() != tiny_data.source[TRAIN].fingerprint()

    def test_target_train_is_unlabeled(self, tiny_data):
        assert all(ex.label is None for ex in tiny_data.target[TRAIN].examples)
        assert tiny_data.target[DEV].is_labeled
        assert tiny_data.target[TEST].is_labeled
        assert tiny_data.source[TRAIN].is_labeled

    def test_split_sizes(self, tiny_data):
        assert {split: len(c) for split, c in tiny_data.source.items()} == {TRAIN: 60, DEV: 30, TEST: 30}

    def test_domains_share_signal_but_not_markers(self, tiny_spec, tiny_data):
        pools = tiny_spec.pools()
        source_tokens = {t for ex in tiny_data.source[TRAIN].examples for t in ex.text.split()}
        target_tokens = {t for ex in tiny_data.target[TRAIN].examples for t in ex.text.split()}
        assert not source_tokens & set(pools['marker[target]'])
        assert not target_tokens & set(pools['marker[source]'])
        signal = {t for c in range(3) for t in pools[f"signal[{c}]"]}
        assert signal & source_tokens and signal & target_tokens

    def test_examples_carry_their_signal(self, tiny_spec, tiny_data):
        pools = tiny_spec.pools()
        for ex in tiny_data.source[TEST].examples:
            tokens = ex.text.split()
            assert sum(t in pools[f"signal[{ex.label}]"] for t in tokens) == tiny_spec.signal_per_example
            assert len(tokens) == tiny_spec.seq_len

    def test_overlapping_pools_rejected(self):
        spec = SyntheticSpec(source_marker_prefix='tgt', target_marker_prefix='tgt')
        with pytest.raises(ConfigError, match=r'marker\[source\].*marker\[target\]'):
            generate_synthetic(spec)

    def test_check_pools_passes_disjoint(self):
        check_pools({'a': ['x'], 'b': ['y']})

    @pytest.mark.parametrize('field,value', [('train_size', 0), ('num_classes', 0), ('seq_len', 2)])
    def test_invalid_spec(self, field, value):
        with pytest.raises(ConfigError):
            SyntheticSpec(**{field: value})

    def test_bag_of_words_transfers(self):
        """Test a linear model trained on source text alone also works on target text"""
        data = generate_synthetic(SyntheticSpec())
        vectorizer = CountVectorizer(token_pattern=r'\S+', lowercase=True)
        train = data.source[TRAIN]
        features = vectorizer.fit_transform([ex.text for ex in train.examples])
        model = LogisticRegression(max_iter=1000).fit(features, train.labels)

        def accuracy(corpus):
            return model.score(vectorizer.transform([ex.text for ex in corpus.examples]), corpus.labels)

        assert accuracy(data.source[TEST]) >= 0.9
        assert accuracy(data.target[TEST]) >= 0.75


class TestCorpusFiles:
    """Line-delimited corpus records"""

    def test_empty_file(self, tmp_path, small_vocab):
        path = tmp_path / 'empty.jsonl'
        path.write_text('')
        corpus = load_corpus(path, small_vocab)
        assert len(corpus) == 0
        assert not corpus.is_labeled

    def test_single_record(self, tmp_path, small_vocab):
        path = tmp_path / 'one.jsonl'
        path.write_text(json.dumps({'text': 'a b', 'label': 2, 'domain': 'source'}) + '\n\n')
        corpus = load_corpus(path, small_vocab)
        assert len(corpus) == 1
        assert corpus.examples[0].label == 2
        assert corpus.examples[0].token_ids[0] == CLS
        assert corpus.domain == 'source'

    def test_label_out_of_range(self, tmp_path, small_vocab):
        path = tmp_path / 'bad.jsonl'
        path.write_text('{"text": "a", "label": 0, "domain": "source"}\n{"text": "b", "label": 3, "domain": "source"}\n')
        with pytest.raises(DataFormatError, match=r'bad.jsonl:2.*label'):
            load_corpus(path, small_vocab)

    @pytest.mark.parametrize('line,message', [
        ('not json', 'malformed'),
        ('["a"]', 'object'),
        ('{"label": 1, "domain": "source"}', 'missing text'),
        ('{"text": "a", "label": 1, "domain": "source", "genre": "x"}', 'unknown fields'),
        ('{"text": "a", "label": 1, "domain": "elsewhere"}', 'domain'),
        ('{"text": "a", "domain": "source"}', 'label'),
        ('{"text": "a", "label": true, "domain": "source"}', 'label'),
    ])
    def test_malformed_records(self, tmp_path, small_vocab, line, message):
        path = tmp_path / 'broken.jsonl'
        path.write_text(line + '\n')
        with pytest.raises(DataFormatError, match=message):
            load_corpus(path, small_vocab)

    def test_mixed_domains_rejected(self, tmp_path, small_vocab):
        path = tmp_path / 'mixed.jsonl'
        path.write_text('{"text": "a", "label": 0, "domain": "source"}\n{"text": "b", "domain": "target"}\n')
        with pytest.raises(DataFormatError, match='mixes domains'):
            load_corpus(path, small_vocab)

    def test_write_then_load(self, tmp_path, tiny_data):
        corpus = tiny_data.target[TRAIN]
        path = tmp_path / corpus_filename('target', TRAIN)
        write_corpus(corpus, path)
        loaded = load_corpus(path, tiny_data.vocab)
        assert loaded.split == TRAIN
        assert loaded.token_ids == corpus.token_ids
        assert loaded.fingerprint() == corpus.fingerprint()

    def test_save_generated(self, tmp_path, tiny_data):
        written = save_generated(tiny_data, tmp_path)
        names = sorted(p.name for p in written)
        assert len(names) == 7
        assert VOCAB_FILE in names
        assert 'source_dev.jsonl' in names and 'target_test.jsonl' in names

    def test_save_generated_is_reproducible(self, tmp_path, tiny_spec):
        first = save_generated(generate_synthetic(tiny_spec), tmp_path / 'a')
        second = save_generated(generate_synthetic(tiny_spec), tmp_path / 'b')
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes()


class TestPairedBatches:
    """Source/target step schedule"""

    def test_equal_sizes_cover_each_once(self):
        source, target = make_corpus(100), make_corpus(100, 'target', labeled=False)
        batches = list(paired_batches(source, target, 10, seed=1))
        assert len(batches) == 10
        assert all(len(b.source) == len(b.target) == 10 for b in batches)
        assert len({ex.text for b in batches for ex in b.source}) == 100
        assert len({ex.text for b in batches for ex in b.target}) == 100

    def test_shorter_stream_cycles(self):
        source, target = make_corpus(100), make_corpus(40, 'target', labeled=False)
        batches = list(paired_batches(source, target, 10, seed=1))
        assert len(batches) == 10
        uses = Counter(ex.text for b in batches for ex in b.target)
        assert sum(uses.values()) == 100
        assert set(uses.values()) <= {2, 3}
        assert len(uses) == 40

    def test_longer_target_stream(self):
        source, target = make_corpus(30), make_corpus(50, 'target', labeled=False)
        batches = list(paired_batches(source, target, 8, seed=2, epochs=2))
        assert len(batches) == steps_per_epoch(30, 50, 8) * 2 == 14
        first_epoch = [ex.text for b in batches if b.epoch == 0 for ex in b.target]
        assert len(first_epoch) == len(set(first_epoch)) == 50

    def test_partial_last_batch_stays_paired(self):
        source, target = make_corpus(25), make_corpus(25, 'target', labeled=False)
        batches = list(paired_batches(source, target, 10, seed=0))
        assert [len(b.source) for b in batches] == [10, 10, 5]
        assert [len(b.target) for b in batches] == [10, 10, 5]

    def test_deterministic(self):
        source, target = make_corpus(50), make_corpus(20, 'target', labeled=False)
        first = [(b.source, b.target) for b in paired_batches(source, target, 7, seed=3, epochs=2)]
        second = [(b.source, b.target) for b in paired_batches(source, target, 7, seed=3, epochs=2)]
        assert first == second

    def test_epochs_reshuffle(self):
        source, target = make_corpus(40), make_corpus(40, 'target', labeled=False)
        batches = list(paired_batches(source, target, 40, seed=3, epochs=2))
        assert batches[0].source != batches[1].source
        assert [b.step for b in batches] == [0, 1]

    @pytest.mark.parametrize('batch_size', [1, 41])
    def test_bad_batch_size(self, batch_size):
        with pytest.raises(ConfigError):
            paired_batches(make_corpus(40), make_corpus(60, 'target', labeled=False), batch_size, seed=0)

    def test_empty_corpus(self):
        empty = Corpus((), 'target', TRAIN, provenance='empty')
        with pytest.raises(ConfigError, match='empty'):
            paired_batches(make_corpus(10), empty, 2, seed=0)

    def test_source_only_schedule(self):
        batches = list(source_batches(make_corpus(23), 5, seed=0, epochs=2))
        assert len(batches) == 10
        assert all(b.target == () for b in batches)
        assert batches[-1].source_labels == [ex.label for ex in batches[-1].source]
