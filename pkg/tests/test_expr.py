import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featdiff.expr import (
    OPERATORS,
    EmptyChunk,
    FeatureExpr,
    FeatureSet,
    IndexOutOfRange,
    MalformedPostfix,
    UnknownToken,
    evaluate,
    load_feature_sets,
    parse,
    random_feature_set,
    save_feature_sets,
    serialize,
)

from oracles import tree_evaluate


def test_parse_paper_example():
    fs = parse("f1 f2 *, f3 log, f4 f5 +", n_features=5)
    assert fs.count == 3
    assert fs.exprs[0].tokens == ("f1", "f2", "*")
    assert fs.exprs[1].tokens == ("f3", "log")


def test_parse_passthrough():
    fs = parse("f1", n_features=1)
    assert fs.count == 1
    assert fs.exprs[0].tokens == ("f1",)


def test_parse_errors():
    with pytest.raises(MalformedPostfix):
        parse("f1 *", n_features=2)
    with pytest.raises(MalformedPostfix):
        parse("f1 f2", n_features=2)
    with pytest.raises(UnknownToken):
        parse("f3 log", n_features=2)
    with pytest.raises(UnknownToken):
        parse("f1 exp", n_features=2)
    with pytest.raises(EmptyChunk):
        parse("f1, , f2", n_features=2)
    with pytest.raises(EmptyChunk):
        parse("", n_features=2)


def test_serialize_simple():
    fs = FeatureSet((FeatureExpr(("f1", "f2", "+")),))
    assert serialize(fs) == "f1 f2 +"
    fs2 = FeatureSet((FeatureExpr(("f1",)), FeatureExpr(("f2", "log"))))
    assert serialize(fs2) == "f1, f2 log"


def test_roundtrip_random():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        fs = random_feature_set(rng, n_features=6, t_max=5, l_max=9)
        assert parse(serialize(fs), 6) == fs


def test_evaluate_add():
    fs = parse("f1 f2 +", 2)
    table = np.array([[1.0, 3.0], [2.0, 4.0]])
    np.testing.assert_allclose(evaluate(fs, table), [[4.0], [6.0]])


def test_evaluate_mul_log():
    fs = parse("f1 f2 *, f3 log", 3)
    table = np.array([[2.0, 3.0, 1.0]])
    out = evaluate(fs, table)
    assert out[0, 0] == 6.0
    assert abs(out[0, 1] - np.log(1.0 + 1e-6)) < 1e-12


def test_evaluate_vs_tree_oracle():
    rng = np.random.default_rng(0)
    for _ in range(500):
        n = int(rng.integers(1, 8))
        fs = random_feature_set(rng, n_features=n, t_max=4, l_max=9)
        table = rng.normal(size=(int(rng.integers(2, 20)), n)) * 10
        got = evaluate(fs, table)
        want = tree_evaluate(fs, table)
        np.testing.assert_allclose(got, want, atol=1e-9)


def test_evaluate_index_out_of_range():
    fs = parse("f3", 3)
    with pytest.raises(IndexOutOfRange):
        evaluate(fs, np.zeros((2, 2)))


def test_random_feature_set_bounds():
    rng = np.random.default_rng(0)
    fs = random_feature_set(rng, n_features=5, t_max=3, l_max=5)
    assert 1 <= fs.count <= 3
    assert all(len(e) <= 5 for e in fs.exprs)
    fs1 = random_feature_set(rng, n_features=5, t_max=1, l_max=1)
    assert fs1.count == 1 and len(fs1.exprs[0]) == 1


def test_random_feature_set_always_valid():
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        fs = random_feature_set(rng, n_features=4, t_max=6, l_max=9)
        parse(serialize(fs), 4)  # revalidates; raises on failure


@pytest.mark.parametrize("name", list(OPERATORS))
def test_operator_safety_fuzz(name):
    spec = OPERATORS[name]
    rng = np.random.default_rng(42)
    # Mix of scales including extreme-but-finite values.
    vals = np.concatenate(
        [
            rng.normal(size=30_000),
            rng.normal(size=30_000) * 1e8,
            rng.uniform(-1e100, 1e100, size=30_000),
            np.array([0.0, -0.0, 1e-300, -1e-300, 1e100, -1e100]),
            rng.normal(size=10_000) * 1e-12,
        ]
    )
    if spec.arity == 1:
        out = spec.fn(vals)
    else:
        out = spec.fn(vals, vals[::-1].copy())
    assert np.all(np.isfinite(out))


@given(st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_roundtrip_property(seed):
    rng = np.random.default_rng(seed)
    fs = random_feature_set(rng, n_features=9, t_max=8, l_max=9)
    assert parse(serialize(fs), 9) == fs


def test_file_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    sets = [random_feature_set(rng, 4, 3, 7) for _ in range(20)]
    path = tmp_path / "corpus.txt"
    save_feature_sets(path, sets, n_features=4)
    loaded, n = load_feature_sets(path)
    assert n == 4
    assert loaded == sets
