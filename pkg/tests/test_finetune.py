"""Task encodings, concept markers, and the per-seed fine-tuning loop."""

import numpy as np
import pytest

from clinlm.encoder import (
    EncoderConfig,
    head_multilabel,
    forward,
    init_multilabel_head,
    init_params,
    token_classify_loss,
)
from clinlm.finetune import (
    FinetuneConfig,
    IGNORE_LABEL,
    TaskSpec,
    align_labels_to_pieces,
    builtin_task,
    encode_ner_example,
    extend_for_markers,
    finetune_task,
    mark_concepts,
    marker_tokens,
    predict_label_sets,
    prepare_document,
    prepare_marked_sentence,
    prepare_pair,
    read_ner_file,
    read_record_file,
    unmark_concepts,
    word_pieces,
)
from clinlm.wordpiece import CLS_ID, PAD_ID, SEP_ID, train_wordpiece


@pytest.fixture(scope="module")
def small_vocab():
    corpus = ["the patient has severe pain.", "no pain today.",
              "patient denies fever", "severe fever and pain",
              "alpha beta gamma delta", "beta alpha delta"]
    return train_wordpiece(corpus, declared_size=120, min_frequency=1)


class TestBuiltinTasks:
    def test_task_inventory(self):
        assert builtin_task("ner-2010").labels == ("problem", "treatment", "test")
        assert len(builtin_task("ner-2012").labels) == 5
        re_task = builtin_task("re-2010")
        assert len(re_task.labels) == 8 and re_task.kind == "pair"
        assert re_task.concept_types == ("problem", "treatment", "test")
        assert builtin_task("mednli").labels == ("entailment", "contradiction", "neutral")
        assert len(builtin_task("icd9-top50").labels) == 50
        assert len(builtin_task("therapeutic-class").labels) == 50

    def test_selection_metrics(self):
        assert builtin_task("ner-2010").selection_metric == "entity_f1"
        assert builtin_task("mednli").selection_metric == "accuracy"
        assert builtin_task("icd9-top50").selection_metric == "micro_f1"

    def test_unknown_task_rejected(self):
        with pytest.raises(ValueError, match="nope"):
            builtin_task("nope")

    def test_bio_tags(self):
        tags = builtin_task("ner-2010").bio_tags()
        assert tags == ["O", "B-problem", "I-problem", "B-treatment",
                        "I-treatment", "B-test", "I-test"]
        with pytest.raises(ValueError):
            builtin_task("mednli").bio_tags()

    def test_bad_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            TaskSpec("x", "regression", ("a",), "accuracy")


class TestAlignLabels:
    def test_single_piece_identity(self):
        assert align_labels_to_pieces(["B-problem"], [["pain"]]) == ["B-problem"]

    def test_multi_piece_word(self):
        out = align_labels_to_pieces(["B-problem"], [["head", "##ache", "##s"]])
        assert out == ["B-problem", IGNORE_LABEL, IGNORE_LABEL]

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            align_labels_to_pieces(["O", "O"], [["a"]])

    def test_empty_segmentation_rejected(self):
        with pytest.raises(ValueError):
            align_labels_to_pieces(["O"], [[]])

    def test_collapse_round_trip(self):
        rng = np.random.default_rng(4)
        labels_pool = ["O", "B-a", "I-a", "B-b"]
        for _ in range(50):
            n = int(rng.integers(1, 8))
            word_labels = [labels_pool[i] for i in rng.integers(0, 4, size=n)]
            segmentation = [["p"] * int(rng.integers(1, 4)) for _ in range(n)]
            flat = align_labels_to_pieces(word_labels, segmentation)
            assert len(flat) == sum(len(s) for s in segmentation)
            recovered = [lab for lab in flat if lab != IGNORE_LABEL]
            assert recovered == word_labels


class TestMarkConcepts:
    WORDS = ["the", "rash", "was", "treated", "with", "cream"]

    def test_length_grows_by_four(self):
        marked = mark_concepts(self.WORDS, (1, 2), "problem", (5, 6), "treatment")
        assert len(marked) == len(self.WORDS) + 4
        assert marked == ["the", "[problem-start]", "rash", "[problem-end]",
                          "was", "treated", "with", "[treatment-start]",
                          "cream", "[treatment-end]"]

    def test_span_order_does_not_matter(self):
        a = mark_concepts(self.WORDS, (1, 2), "problem", (5, 6), "treatment")
        b = mark_concepts(self.WORDS, (5, 6), "treatment", (1, 2), "problem")
        assert a == b

    def test_unmark_is_inverse(self):
        marked = mark_concepts(self.WORDS, (0, 2), "test", (3, 5), "problem")
        assert unmark_concepts(marked, ("test", "problem")) == self.WORDS

    def test_overlap_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            mark_concepts(self.WORDS, (1, 4), "problem", (3, 5), "test")

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="range"):
            mark_concepts(self.WORDS, (0, 1), "problem", (5, 9), "test")

    def test_marker_tokens_sorted_pairs(self):
        assert marker_tokens(["b", "a"]) == \
            ["[a-start]", "[a-end]", "[b-start]", "[b-end]"]


class TestExtendForMarkers:
    def test_grows_vocab_and_tables(self, small_vocab):
        config = EncoderConfig(vocab_size=len(small_vocab), hidden_dim=8,
                               n_layers=1, n_heads=2, ff_dim=16, max_positions=8)
        params = init_params(config, 0)
        new_vocab, new_params, new_config = extend_for_markers(
            small_vocab, params, config, ("problem", "test"), seed=5)
        assert len(new_vocab) == len(small_vocab) + 4
        assert new_config.vocab_size == config.vocab_size + 4
        assert new_params["tok_emb"].shape[0] == config.vocab_size + 4
        assert new_params["mlm_w"].shape[1] == config.vocab_size + 4
        assert new_params["mlm_b"].shape[0] == config.vocab_size + 4
        # existing rows untouched
        assert np.array_equal(new_params["tok_emb"][:config.vocab_size],
                              params["tok_emb"])
        assert new_vocab.id_of("the") == small_vocab.id_of("the")
        assert "[problem-start]" in new_vocab

    def test_idempotent_once_extended(self, small_vocab):
        config = EncoderConfig(vocab_size=len(small_vocab), hidden_dim=8,
                               n_layers=1, n_heads=2, ff_dim=16, max_positions=8)
        params = init_params(config, 0)
        v1, p1, c1 = extend_for_markers(small_vocab, params, config, ("a",), 5)
        v2, p2, c2 = extend_for_markers(v1, p1, c1, ("a",), 5)
        assert v2 is v1 and p2 is p1 and c2 is c1


class TestPrepareDocument:
    def test_padding_arithmetic(self, small_vocab):
        batch = prepare_document("the patient denies", small_vocab, 128)
        assert batch.shape == (1, 128)
        n_real = int(batch.attention_mask.sum())
        assert n_real == 2 + 3  # CLS + 3 one-piece words + SEP
        assert batch.token_ids[0, 0] == CLS_ID
        assert batch.token_ids[0, n_real - 1] == SEP_ID
        assert np.all(batch.token_ids[0, n_real:] == PAD_ID)

    def test_long_document_truncates_to_budget(self, small_vocab):
        text = " ".join(["pain"] * 900)
        batch = prepare_document(text, small_vocab, 512)
        assert batch.shape == (1, 512)
        assert int(batch.attention_mask.sum()) == 512
        content = batch.token_ids[0, 1:511]
        assert np.all(content == small_vocab.id_of("pain"))
        assert batch.token_ids[0, 511] == SEP_ID

    def test_short_vs_long_prefix_property(self, small_vocab):
        text = " ".join(["severe", "pain", "fever"] * 100)
        short = prepare_document(text, small_vocab, 128)
        long = prepare_document(text, small_vocab, 512)
        short_content = short.token_ids[0, 1:127]
        long_content = long.token_ids[0, 1:127]
        assert np.array_equal(short_content, long_content)

    def test_tiny_budget_rejected(self, small_vocab):
        with pytest.raises(ValueError):
            prepare_document("pain", small_vocab, 2)


class TestPreparePair:
    def test_segments_and_framing(self, small_vocab):
        batch = prepare_pair("no pain", "severe fever", small_vocab, 16)
        ids, segments = batch.token_ids[0], batch.segment_ids[0]
        assert ids[0] == CLS_ID
        sep_positions = np.nonzero(ids == SEP_ID)[0]
        assert len(sep_positions) == 2
        first_sep, second_sep = sep_positions
        assert np.all(segments[:first_sep + 1] == 0)
        assert np.all(segments[first_sep + 1:second_sep + 1] == 1)
        assert np.all(segments[second_sep + 1:] == 0)  # padding back to 0
        assert int(batch.attention_mask[0].sum()) == second_sep + 1

    def test_longer_side_truncated_first(self, small_vocab):
        long_a = " ".join(["pain"] * 30)
        batch = prepare_pair(long_a, "fever", small_vocab, 12)
        ids = batch.token_ids[0]
        fever_id = small_vocab.id_of("fever")
        assert fever_id in ids  # the short side survives
        assert int(batch.attention_mask[0].sum()) == 12

    def test_too_small_rejected(self, small_vocab):
        with pytest.raises(ValueError):
            prepare_pair("a", "b", small_vocab, 4)


class TestPrepareMarkedSentence:
    def test_markers_map_to_single_ids(self, small_vocab):
        config = EncoderConfig(vocab_size=len(small_vocab), hidden_dim=8,
                               n_layers=1, n_heads=2, ff_dim=16, max_positions=16)
        params = init_params(config, 0)
        vocab, params, config = extend_for_markers(
            small_vocab, params, config, ("problem",), seed=1)
        marked = mark_concepts(["severe", "pain", "today"], (0, 2), "problem",
                               (2, 3), "problem")
        batch = prepare_marked_sentence(marked, vocab, 16)
        ids = list(batch.token_ids[0])
        assert vocab.id_of("[problem-start]") in ids
        assert vocab.id_of("[problem-end]") in ids


class TestWordPieces:
    def test_attached_punctuation_is_split(self, small_vocab):
        pieces = word_pieces(small_vocab, "pain.")
        assert pieces[0] == "pain" and pieces[-1] == "."

    def test_unnormalizable_word_rejected(self, small_vocab):
        with pytest.raises(ValueError):
            word_pieces(small_vocab, " ")


class TestEncodeNerExample:
    TAG_TO_ID = {"O": 0, "B-problem": 1, "I-problem": 2}

    def test_row_structure(self, small_vocab):
        row = encode_ner_example(["severe", "pain"], ["B-problem", "I-problem"],
                                 small_vocab, self.TAG_TO_ID, 16)
        assert row.ids[0] == CLS_ID
        assert row.word_tags == ["B-problem", "I-problem"]
        assert len(row.first_piece_positions) == 2
        first = row.first_piece_positions[0]
        assert row.loss_mask[first] == 1
        assert row.label_ids[first] == 1
        assert row.loss_mask[0] == 0  # CLS carries no loss

    def test_truncation_drops_trailing_words(self, small_vocab):
        words = ["pain"] * 30
        tags = ["B-problem"] * 30
        row = encode_ner_example(words, tags, small_vocab, self.TAG_TO_ID, 8)
        assert len(row.ids) == 8
        assert len(row.word_tags) == len(row.first_piece_positions) <= 6

    def test_unknown_tag_rejected(self, small_vocab):
        with pytest.raises(ValueError, match="B-drug"):
            encode_ner_example(["x"], ["B-drug"], small_vocab, self.TAG_TO_ID, 8)

    def test_length_mismatch_rejected(self, small_vocab):
        with pytest.raises(ValueError):
            encode_ner_example(["a", "b"], ["O"], small_vocab, self.TAG_TO_ID, 8)

    def test_ignored_positions_do_not_affect_loss(self, small_vocab):
        config = EncoderConfig(vocab_size=len(small_vocab), hidden_dim=8,
                               n_layers=1, n_heads=2, ff_dim=16, max_positions=16)
        from clinlm.encoder import init_token_head
        params = init_token_head(init_params(config, 0), config, 3, seed=1)
        row = encode_ner_example(["severe", "pain"], ["B-problem", "I-problem"],
                                 small_vocab, self.TAG_TO_ID, 16)
        from clinlm.encoder import Batch
        batch = Batch(row.ids[None, :], row.mask[None, :],
                      np.zeros((1, 16), dtype=np.int64))
        labels = row.label_ids[None, :].copy()
        loss_a, _ = token_classify_loss(params, config, batch, labels,
                                        row.loss_mask[None, :])
        perturbed = labels.copy()
        perturbed[0, row.loss_mask == 0] = 2  # garbage into ignored slots
        loss_b, _ = token_classify_loss(params, config, batch, perturbed,
                                        row.loss_mask[None, :])
        assert loss_a == loss_b


class TestFinetuneConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            FinetuneConfig(epochs=0)
        with pytest.raises(ValueError):
            FinetuneConfig(lr=0.0)
        with pytest.raises(ValueError):
            FinetuneConfig(max_steps=0)


def toy_pair_setup(small_vocab):
    config = EncoderConfig(vocab_size=len(small_vocab), hidden_dim=8,
                           n_layers=1, n_heads=2, ff_dim=16, max_positions=12)
    params = init_params(config, 0)
    task = TaskSpec("toy-pair", "pair", ("match", "clash"), "accuracy")
    rows = []
    for text_a, text_b, label in [
        ("alpha beta", "alpha beta", 0), ("alpha", "alpha gamma", 0),
        ("beta delta", "beta", 0), ("alpha", "delta", 1),
        ("beta gamma", "delta", 1), ("gamma", "alpha beta", 1),
    ]:
        rows.append((prepare_pair(text_a, text_b, small_vocab, 12), label))
    return config, params, task, rows


class TestFinetuneTask:
    def test_five_seeds_five_runs(self, small_vocab):
        config, params, task, rows = toy_pair_setup(small_vocab)
        runs = finetune_task(config, params, task, rows, rows,
                             seeds=[0, 1, 2, 3, 4],
                             hyper=FinetuneConfig(epochs=1, batch_size=3, lr=1e-3))
        assert len(runs) == 5
        assert [r.seed for r in runs] == [0, 1, 2, 3, 4]
        for run in runs:
            assert 0.0 <= run.dev_metric <= 1.0
            assert "head_pair_w" in run.params
            assert run.best_epoch == 0

    def test_same_seed_reproduces_exactly(self, small_vocab):
        config, params, task, rows = toy_pair_setup(small_vocab)
        hyper = FinetuneConfig(epochs=2, batch_size=2, lr=1e-3)
        a = finetune_task(config, params, task, rows, rows, [7], hyper)[0]
        b = finetune_task(config, params, task, rows, rows, [7], hyper)[0]
        assert a.dev_metric == b.dev_metric
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_different_seeds_vary(self, small_vocab):
        config, params, task, rows = toy_pair_setup(small_vocab)
        hyper = FinetuneConfig(epochs=1, batch_size=2, lr=1e-3)
        a = finetune_task(config, params, task, rows, rows, [0], hyper)[0]
        b = finetune_task(config, params, task, rows, rows, [1], hyper)[0]
        assert any(not np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_max_steps_caps_updates(self, small_vocab):
        config, params, task, rows = toy_pair_setup(small_vocab)
        hyper = FinetuneConfig(epochs=5, batch_size=2, lr=1e-3, max_steps=1)
        run = finetune_task(config, params, task, rows, rows, [0], hyper)[0]
        assert run.best_epoch == 0

    def test_empty_train_rejected(self, small_vocab):
        config, params, task, rows = toy_pair_setup(small_vocab)
        with pytest.raises(ValueError, match="non-empty"):
            finetune_task(config, params, task, [], rows, [0], FinetuneConfig())

    def test_no_seeds_rejected(self, small_vocab):
        config, params, task, rows = toy_pair_setup(small_vocab)
        with pytest.raises(ValueError, match="seed"):
            finetune_task(config, params, task, rows, rows, [], FinetuneConfig())

    def test_multilabel_task_runs(self, small_vocab):
        config = EncoderConfig(vocab_size=len(small_vocab), hidden_dim=8,
                               n_layers=1, n_heads=2, ff_dim=16, max_positions=12)
        params = init_params(config, 0)
        task = TaskSpec("toy-multi", "multilabel", ("x", "y", "z"), "micro_f1")
        rows = [
            (prepare_document("alpha beta", small_vocab, 12), [0, 2]),
            (prepare_document("delta", small_vocab, 12), [1]),
            (prepare_document("gamma gamma", small_vocab, 12), []),
            (prepare_document("beta delta", small_vocab, 12), [0]),
        ]
        runs = finetune_task(config, params, task, rows, rows, [0],
                             FinetuneConfig(epochs=1, batch_size=2, lr=1e-3))
        assert len(runs) == 1 and 0.0 <= runs[0].dev_metric <= 1.0


class TestPredictLabelSets:
    def test_threshold_against_direct_probabilities(self, small_vocab):
        config = EncoderConfig(vocab_size=len(small_vocab), hidden_dim=8,
                               n_layers=1, n_heads=2, ff_dim=16, max_positions=12)
        params = init_multilabel_head(init_params(config, 2), config, 3, seed=3)
        labels = ["x", "y", "z"]
        batches = [prepare_document("alpha beta", small_vocab, 12),
                   prepare_document("delta gamma", small_vocab, 12)]
        sets = predict_label_sets(params, config, batches, labels)
        for batch, got in zip(batches, sets):
            probs = head_multilabel(params, forward(params, config, batch), 3)[0]
            expected = {labels[i] for i in range(3) if probs[i] > 0.5}
            assert got == expected


class TestReaders:
    def test_ner_round_trip(self, tmp_path):
        path = tmp_path / "data.tsv"
        path.write_text("the\tO\nrash\tB-problem\n\nno\tO\n", encoding="utf-8")
        sentences = read_ner_file(path)
        assert sentences == [(["the", "rash"], ["O", "B-problem"]),
                             (["no"], ["O"])]

    def test_ner_malformed_line_located(self, tmp_path):
        path = tmp_path / "data.tsv"
        path.write_text("the\tO\nbroken line\n", encoding="utf-8")
        with pytest.raises(ValueError, match=r"2"):
            read_ner_file(path)

    def test_ner_empty_file(self, tmp_path):
        path = tmp_path / "data.tsv"
        path.write_text("", encoding="utf-8")
        assert read_ner_file(path) == []

    def test_record_file_round_trip(self, tmp_path):
        path = tmp_path / "rows.jsonl"
        path.write_text('{"text": "a", "labels": []}\n\n'
                        '{"text": "b", "labels": ["x"]}\n', encoding="utf-8")
        rows = read_record_file(path, required=["text", "labels"])
        assert len(rows) == 2 and rows[1]["labels"] == ["x"]

    def test_record_missing_key_located(self, tmp_path):
        path = tmp_path / "rows.jsonl"
        path.write_text('{"text": "a"}\n', encoding="utf-8")
        with pytest.raises(ValueError, match="labels"):
            read_record_file(path, required=["text", "labels"])

    def test_record_bad_json_located(self, tmp_path):
        path = tmp_path / "rows.jsonl"
        path.write_text('{"text": }\n', encoding="utf-8")
        with pytest.raises(ValueError, match="1"):
            read_record_file(path, required=["text"])
