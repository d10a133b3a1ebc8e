import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlora.corpus import (
    DEFAULT_SIZES,
    STYLES,
    InstructionExample,
    generate_clients,
    generate_style,
    js_divergence,
    load_jsonl,
    save_jsonl,
    split_train_test,
    unigram_distribution,
    write_corpora,
)
from fedlora.errors import ContractError, CorpusParseError, CorpusSchemaError
from fedlora.model import tokenize_example


@pytest.fixture(scope="module")
def corpora():
    return generate_clients(0, DEFAULT_SIZES)


def test_two_valid_lines_in_order(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text(
        '{"instruction_input": "a", "instruction_output": "b"}\n'
        '{"instruction_input": "", "instruction_output": "\\u4f60"}\n',
        encoding="utf-8",
    )
    assert load_jsonl(p) == [InstructionExample("a", "b"), InstructionExample("", "你")]


def test_missing_field_names_the_field(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"instruction_input": "a", "instruction_output": "b"}\n{"instruction_input": "a"}\n')
    with pytest.raises(CorpusSchemaError) as info:
        load_jsonl(p)
    assert info.value.field == "instruction_output" and info.value.line_no == 2


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"instruction_input": "a", "instruction_output": "b"}\n\n{oops\n')
    with pytest.raises(CorpusParseError) as info:
        load_jsonl(p)
    assert info.value.line_no == 3


def test_empty_output_rejected(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"instruction_input": "a", "instruction_output": ""}\n')
    with pytest.raises(CorpusSchemaError):
        load_jsonl(p)
    with pytest.raises(ContractError):
        InstructionExample("x", "")


def test_roundtrip_of_generated_corpus(tmp_path, corpora):
    data = corpora.clients[1].train
    save_jsonl(data, tmp_path / "c.jsonl")
    assert load_jsonl(tmp_path / "c.jsonl") == data


def test_same_seed_gives_identical_files(tmp_path):
    a = write_corpora(generate_clients(3, (40, 20, 10)), tmp_path / "a")
    b = write_corpora(generate_clients(3, (40, 20, 10)), tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in b]
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
    c = generate_clients(4, (40, 20, 10))
    assert c.clients[0].train != load_jsonl(a[0])


def test_sizes_and_split(corpora):
    for c, n in zip(corpora.clients, DEFAULT_SIZES):
        assert len(c.train) + len(c.test) == n
        assert len(c.test) == round(0.1 * n)
    m = min(len(c.test) for c in corpora.clients)
    assert len(corpora.mixed_test) == 3 * m


def test_split_keeps_order():
    ex = [InstructionExample(str(i), "y") for i in range(20)]
    train, test = split_train_test(ex)
    assert train == ex[:18] and test == ex[18:]


def test_size_precondition():
    with pytest.raises(ContractError):
        generate_clients(0, (100, 9, 100))
    with pytest.raises(ContractError):
        generate_clients(0, (100, 100))


def test_js_divergence_hand_values():
    assert js_divergence(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(math.log(2), abs=1e-15)
    p = np.array([0.5, 0.5])
    q = np.array([1.0, 0.0])
    m = np.array([0.75, 0.25])
    want = 0.5 * (0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)) + 0.5 * math.log(1 / 0.75)
    assert js_divergence(p, q) == pytest.approx(want, abs=1e-15)
    assert js_divergence(m, m) == 0.0


@settings(max_examples=60)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=6), st.lists(st.floats(0, 1), min_size=2, max_size=6))
def test_property_jsd_symmetric_and_bounded(a, b):
    n = min(len(a), len(b))
    p, q = np.array(a[:n]) + 1e-3, np.array(b[:n]) + 1e-3
    p, q = p / p.sum(), q / q.sum()
    d = js_divergence(p, q)
    assert d == pytest.approx(js_divergence(q, p), abs=1e-15)
    assert -1e-15 <= d <= math.log(2) + 1e-15


def test_pairwise_divergence_exceeds_regression_bound(corpora):
    dists = [unigram_distribution(c.train) for c in corpora.clients]
    for i, j in itertools.combinations(range(3), 2):
        assert js_divergence(dists[i], dists[j]) > 0.05


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_heterogeneity_is_five_times_intra_client_noise(seed):
    cs = generate_clients(seed, DEFAULT_SIZES).clients
    inter = min(
        js_divergence(unigram_distribution(a.train), unigram_distribution(b.train))
        for a, b in itertools.combinations(cs, 2)
    )
    intra = max(js_divergence(unigram_distribution(c.train), unigram_distribution(c.test)) for c in cs)
    assert inter >= 5 * intra


def test_outputs_are_disjoint_across_clients(corpora):
    outs = [{ex.instruction_output for ex in c.train + c.test} for c in corpora.clients]
    for i, j in itertools.combinations(range(3), 2):
        assert not outs[i] & outs[j]


def test_every_example_fits_context(corpora):
    for c in corpora.clients:
        for ex in c.train + c.test:
            assert len(tokenize_example(ex.instruction_input, ex.instruction_output, 128)) <= 128


def test_small_context_is_enforced():
    for ex in generate_style(STYLES[2], 0, 30, max_context=64):
        assert len(ex.instruction_input.encode()) + len(ex.instruction_output.encode()) + 2 <= 64
    with pytest.raises(ContractError):
        generate_style(STYLES[0], 0, 5, max_context=20)


def test_styles_have_their_registers(corpora):
    court, consult, reason = (c.train[0] for c in corpora.clients)
    assert court.instruction_input.startswith("Facts:") and court.instruction_output.startswith("HELD:")
    assert consult.instruction_input.endswith("??") and consult.instruction_output.endswith("!!")
    assert reason.instruction_output.startswith("1)") and "=>" in reason.instruction_output


def test_length_ratios_follow_the_real_corpora(corpora):
    # inputs roughly 8 : 1 : 2 and outputs roughly 1.4 : 1 : 1 (court : consult : reasoning)
    mean_in = [np.mean([len(e.instruction_input) for e in c.train]) for c in corpora.clients]
    mean_out = [np.mean([len(e.instruction_output) for e in c.train]) for c in corpora.clients]
    assert mean_in[0] > 2.5 * mean_in[2]
    assert mean_in[2] > mean_in[1]
    assert mean_out[0] > 1.1 * max(mean_out[1], mean_out[2])
    assert max(mean_out[1], mean_out[2]) / min(mean_out[1], mean_out[2]) < 1.3


def test_written_files(tmp_path, corpora):
    paths = write_corpora(corpora, tmp_path)
    assert sorted(p.name for p in paths) == sorted(
        [f"client{i}_{s}.jsonl" for i in (1, 2, 3) for s in ("train", "test")] + ["mixed_test.jsonl"]
    )
    first = json.loads((tmp_path / "client1_train.jsonl").read_text().splitlines()[0])
    assert set(first) == {"instruction_input", "instruction_output"}
