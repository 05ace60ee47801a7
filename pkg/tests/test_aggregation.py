import numpy as np
import pytest

from flexmoe.aggregation import aggregate, aggregate_expert, aggregate_extractor, apply
from flexmoe.errors import DimensionMismatch, EmptyRound
from flexmoe.model import ClientFeedback, GlobalModel, ModelShape
from oracles import naive_expert_average, naive_extractor_average


def fb(cid, n, usage, ext, experts=None):
    return ClientFeedback(cid, n, dict(usage), {e: 0.0 for e in usage}, {e: 0.0 for e in usage},
                          np.asarray(ext, dtype=float), {e: np.asarray(v, dtype=float) for e, v in (experts or {}).items()})


def test_extractor_examples():
    v = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(aggregate_extractor([fb(0, 7, {}, v)]), v)
    assert np.array_equal(aggregate_extractor([fb(0, 5, {}, v), fb(1, 5, {}, -v)]), np.zeros(3))
    assert aggregate_extractor([fb(0, 1, {}, [4.0]), fb(1, 3, {}, [0.0])])[0] == 1.0


def test_expert_examples():
    ups = [fb(0, 1, {2: 1}, [0.0], {2: [8.0]}), fb(1, 1, {2: 3}, [0.0], {2: [0.0]})]
    assert aggregate_expert(2, ups, 1)[0] == 2.0
    assert np.array_equal(aggregate_expert(0, ups, 1), np.zeros(1))
    single = [fb(4, 1, {1: 9}, [0.0], {1: [0.5, -1.5]})]
    assert np.array_equal(aggregate_expert(1, single, 2), np.array([0.5, -1.5]))


def test_zero_usage_client_has_no_weight():
    ups = [fb(0, 1, {0: 0}, [0.0], {0: [100.0]}), fb(1, 1, {0: 2}, [0.0], {0: [1.0]})]
    assert aggregate_expert(0, ups, 1)[0] == 1.0


def test_empty_round():
    with pytest.raises(EmptyRound):
        aggregate_extractor([])


def random_uploads(rng, C=20, E=8, dim=100):
    ups = []
    for c in range(C):
        k = int(rng.integers(1, E + 1))
        assigned = rng.choice(E, size=k, replace=False)
        usage = {int(e): int(rng.integers(0, 50)) for e in assigned}
        ups.append(fb(c, int(rng.integers(1, 200)), usage, rng.normal(size=dim), {e: rng.normal(size=dim) for e in usage}))
    return ups


def test_matches_naive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        ups = random_uploads(rng)
        d_ext, d_exp = aggregate(ups, 8, 100)
        assert np.max(np.abs(d_ext - naive_extractor_average(ups))) <= 1e-12
        for e in range(8):
            assert np.max(np.abs(d_exp[e] - naive_expert_average(e, ups, 100))) <= 1e-12


def test_permutation_invariance():
    rng = np.random.default_rng(1)
    ups = random_uploads(rng)
    a_ext, a_exp = aggregate(ups, 8, 100)
    shuffled = [ups[i] for i in rng.permutation(len(ups))]
    b_ext, b_exp = aggregate(shuffled, 8, 100)
    # summation order is fixed by client id, so even the bits agree
    assert a_ext.tobytes() == b_ext.tobytes()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a_exp, b_exp))


def test_convexity():
    rng = np.random.default_rng(2)
    ups = random_uploads(rng, dim=10)
    d_ext, d_exp = aggregate(ups, 8, 10)
    ext = np.stack([u.extractor_delta for u in ups])
    assert np.all(d_ext >= ext.min(axis=0) - 1e-12) and np.all(d_ext <= ext.max(axis=0) + 1e-12)
    for e in range(8):
        contrib = [u.expert_deltas[e] for u in ups if u.usage.get(e, 0) > 0]
        if contrib:
            m = np.stack(contrib)
            assert np.all(d_exp[e] >= m.min(axis=0) - 1e-12) and np.all(d_exp[e] <= m.max(axis=0) + 1e-12)


def test_apply():
    shape = ModelShape(2, 3, 2, 4)
    model = GlobalModel.init(shape, 0)
    same = apply(model, np.zeros(shape.p_extractor), np.zeros((4, shape.p_expert)))
    assert same.extractor.tobytes() == model.extractor.tobytes()
    assert same.experts.tobytes() == model.experts.tobytes()
    ups = [fb(0, 3, {1: 4}, np.ones(shape.p_extractor), {1: np.ones(shape.p_expert)})]
    new = apply(model, *aggregate(ups, 4, shape.p_expert))
    for e in (0, 2, 3):
        assert new.experts[e].tobytes() == model.experts[e].tobytes()
    assert np.allclose(new.experts[1], model.experts[1] + 1)
    with pytest.raises(DimensionMismatch):
        apply(model, np.zeros(3), np.zeros((4, shape.p_expert)))
