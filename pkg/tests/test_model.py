import math

import numpy as np
import pytest

from flexmoe.data import Dataset, generate_clustered_dataset
from flexmoe.errors import DimensionMismatch, InvalidAssignment, InvalidParameter
from flexmoe.model import (
    ClientState,
    GlobalModel,
    ModelShape,
    TrainerConfig,
    evaluate,
    forward,
    load_checkpoint,
    local_train,
    loss_and_grads,
    save_checkpoint,
)
from oracles import central_difference


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


@pytest.fixture
def small():
    shape = ModelShape(d=3, h=4, K=2, E=2)
    rng = np.random.default_rng(11)
    X = rng.normal(size=(5, 3))
    y = np.array([0, 1, 1, 0, 1])
    model = GlobalModel.init(shape, 3)
    state = ClientState.init(shape, 0, 5)
    # nonzero biases so their gradients are exercised too
    model = GlobalModel(shape, model.extractor + 0.1 * rng.normal(size=shape.p_extractor), model.experts + 0.1 * rng.normal(size=model.experts.shape))
    state = ClientState(0, state.gating + 0.1 * rng.normal(size=shape.p_gating))
    return shape, model, state, X, y


def test_gradients_match_finite_differences(small):
    shape, model, state, X, y = small
    ids = [0, 1]
    thetas = [model.expert(e).copy() for e in ids]
    _, g_psi, g_thetas, g_phi = loss_and_grads(shape, model.extractor, thetas, state.gating, ids, X, y)

    def loss(psi=model.extractor, th=thetas, phi=state.gating):
        return loss_and_grads(shape, psi, th, phi, ids, X, y)[0]

    assert rel_err(g_psi, central_difference(lambda v: loss(psi=v), model.extractor.copy())) < 1e-4
    assert rel_err(g_phi, central_difference(lambda v: loss(phi=v), state.gating.copy())) < 1e-4
    for j in range(2):
        def f(v, j=j):
            th = [t.copy() for t in thetas]
            th[j] = v
            return loss(th=th)
        assert rel_err(g_thetas[j], central_difference(f, thetas[j].copy())) < 1e-4


def test_gating_gradient_is_zero_outside_assigned():
    shape = ModelShape(3, 4, 2, 3)
    model = GlobalModel.init(shape, 0)
    state = ClientState.init(shape, 0, 0)
    X = np.random.default_rng(0).normal(size=(6, 3))
    y = np.array([0, 1, 0, 1, 1, 0])
    _, _, _, g_phi = loss_and_grads(shape, model.extractor, [model.expert(2)], state.gating, [2], X, y)
    G, g = shape.split_gating(g_phi)
    assert np.all(G[:2] == 0) and np.all(g[:2] == 0)


def test_gate_weights_sum_to_one():
    shape = ModelShape(4, 5, 3, 6)
    model = GlobalModel.init(shape, 1)
    state = ClientState.init(shape, 2, 1)
    X = np.random.default_rng(1).normal(size=(20, 4))
    out = forward(shape, model.extractor, [model.expert(e) for e in (1, 3, 4)], state.gating, (1, 3, 4), X)
    assert np.allclose(out["gate"].sum(axis=1), 1.0, atol=1e-12)


def test_singleton_assignment_gets_all_usage():
    ds = generate_clustered_dataset(50, 4, 3, 0.5, seed=0)
    shape = ModelShape(4, 6, 3, 4)
    model = GlobalModel.init(shape, 0)
    state = ClientState.init(shape, 0, 0)
    cfg = TrainerConfig(local_rounds=3, lr=0.1)
    fb, _ = local_train(model, state, [2], ds, cfg, seed=0)
    assert fb.usage == {2: 3 * 50}
    out = forward(shape, model.extractor, [model.expert(2)], state.gating, [2], ds.features)
    assert np.all(out["gate"] == 1.0)


def test_oracle_backend_split():
    shape = ModelShape(2, 2, 2, 3)
    model = GlobalModel.init(shape, 0)
    A = np.array([[0.5, 0.9, 0.1]])
    ds = Dataset(np.zeros((100, 2)), np.zeros(100, dtype=np.int64), 2)
    cfg = TrainerConfig(local_rounds=3, backend="oracle", affinity=A, noise=0.0)
    fb, _ = local_train(model, ClientState.init(shape, 0, 0), [1, 2], ds, cfg, seed=0)
    assert fb.usage == {1: 270, 2: 30}
    assert fb.accuracy == {1: 0.9, 2: 0.1}
    assert fb.loss[1] == pytest.approx(-math.log(0.9))
    assert np.all(fb.extractor_delta == 0)


def test_oracle_usage_sums_exactly():
    shape = ModelShape(2, 2, 2, 5)
    model = GlobalModel.init(shape, 0)
    rng = np.random.default_rng(3)
    A = rng.uniform(size=(1, 5))
    for n in (1, 7, 33, 101):
        ds = Dataset(np.zeros((n, 2)), np.zeros(n, dtype=np.int64), 2)
        cfg = TrainerConfig(local_rounds=3, backend="oracle", affinity=A, noise=0.3)
        fb, _ = local_train(model, ClientState.init(shape, 0, 0), [0, 2, 3], ds, cfg, seed=n)
        assert sum(fb.usage.values()) == 3 * n
        assert all(0.0 <= a <= 1.0 for a in fb.accuracy.values())


def test_tiny_usage_sums_exactly():
    ds = generate_clustered_dataset(40, 3, 4, 0.5, seed=2)
    shape = ModelShape(3, 4, 4, 5)
    fb, _ = local_train(GlobalModel.init(shape, 0), ClientState.init(shape, 1, 0), [0, 3, 4], ds, TrainerConfig(), seed=0)
    assert sum(fb.usage.values()) == 3 * 40


def test_local_training_reduces_loss():
    ds = generate_clustered_dataset(200, 4, 2, 0.3, seed=4)
    shape = ModelShape(4, 6, 2, 3)
    model = GlobalModel.init(shape, 2)
    state = ClientState.init(shape, 0, 2)
    ids = [0, 2]
    before = loss_and_grads(shape, model.extractor, [model.expert(e) for e in ids], state.gating, ids, ds.features, ds.labels)[0]
    fb, new_state = local_train(model, state, ids, ds, TrainerConfig(local_rounds=3, lr=0.1), seed=0)
    thetas = [model.expert(e) + fb.expert_deltas[e] for e in ids]
    after = loss_and_grads(shape, model.extractor + fb.extractor_delta, thetas, new_state.gating, ids, ds.features, ds.labels)[0]
    assert after < before


def test_unassigned_parameters_untouched():
    ds = generate_clustered_dataset(60, 3, 3, 0.5, seed=0)
    shape = ModelShape(3, 4, 3, 5)
    model = GlobalModel.init(shape, 0)
    state = ClientState.init(shape, 0, 0)
    snapshot = model.copy()
    gating_before = state.gating.copy()
    fb, new_state = local_train(model, state, [1, 3], ds, TrainerConfig(), seed=0)
    assert set(fb.expert_deltas) == {1, 3}
    assert np.array_equal(model.experts, snapshot.experts)
    G0, g0 = shape.split_gating(gating_before)
    G1, g1 = shape.split_gating(new_state.gating)
    for e in (0, 2, 4):
        assert np.array_equal(G0[e], G1[e]) and g0[e] == g1[e]


def test_download_refuses_other_experts():
    shape = ModelShape(3, 4, 3, 5)
    down = GlobalModel.init(shape, 0).download([1, 3])
    with pytest.raises(InvalidAssignment):
        down.expert(0)


@pytest.mark.parametrize("assigned", [[], [5], [1, 1], [-1]])
def test_invalid_assignment(assigned):
    shape = ModelShape(3, 4, 3, 5)
    ds = generate_clustered_dataset(10, 3, 3, 0.5, seed=0)
    with pytest.raises(InvalidAssignment):
        local_train(GlobalModel.init(shape, 0), ClientState.init(shape, 0, 0), assigned, ds, TrainerConfig(), seed=0)


def test_trainer_config_validation():
    with pytest.raises(InvalidParameter):
        TrainerConfig(backend="oracle")
    with pytest.raises(InvalidParameter):
        TrainerConfig(lr=0.0)
    with pytest.raises(InvalidParameter):
        TrainerConfig(backend="oracle", affinity=np.array([[1.5]]))


def test_local_train_is_deterministic():
    ds = generate_clustered_dataset(80, 3, 3, 0.5, seed=1)
    shape = ModelShape(3, 4, 3, 4)
    args = (GlobalModel.init(shape, 0), ClientState.init(shape, 2, 0), [0, 1], ds, TrainerConfig())
    a, sa = local_train(*args, seed=5)
    b, sb = local_train(*args, seed=5)
    assert a.usage == b.usage and a.accuracy == b.accuracy and a.loss == b.loss
    assert a.extractor_delta.tobytes() == b.extractor_delta.tobytes()
    assert sa.gating.tobytes() == sb.gating.tobytes()


def test_unused_expert_defaults():
    # an expert that receives no sample under argmax routing reports a=0 and l=ln K
    shape = ModelShape(2, 2, 3, 2)
    model = GlobalModel.init(shape, 0)
    G = np.zeros((2, 2))
    g = np.array([50.0, -50.0])
    state = ClientState(0, np.concatenate([G.ravel(), g]))
    ds = generate_clustered_dataset(9, 2, 3, 0.1, seed=0)
    fb, _ = local_train(model, state, [0, 1], ds, TrainerConfig(local_rounds=1, lr=1e-6), seed=0)
    assert fb.usage[1] == 0
    assert fb.accuracy[1] == 0.0
    assert fb.loss[1] == pytest.approx(math.log(3))


def test_evaluate_empty_and_separable():
    shape = ModelShape(2, 4, 2, 1)
    model = GlobalModel.init(shape, 0)
    state = ClientState.init(shape, 0, 0)
    empty = Dataset(np.zeros((0, 2)), np.zeros(0, dtype=np.int64), 2)
    assert evaluate(model, state, [0], empty) == 0.0
    ds = generate_clustered_dataset(40, 2, 2, 0.01, seed=3)
    for _ in range(20):
        fb, state = local_train(model, state, [0], ds, TrainerConfig(local_rounds=10, lr=0.5), seed=0)
        model = GlobalModel(shape, model.extractor + fb.extractor_delta, model.experts + fb.expert_deltas[0])
    assert evaluate(model, state, [0], ds) == 1.0


def test_checkpoint_roundtrip(tmp_path):
    shape = ModelShape(3, 4, 2, 3)
    model = GlobalModel.init(shape, 7)
    states = {c: ClientState.init(shape, c, 1) for c in (0, 4)}
    save_checkpoint(tmp_path / "ckpt.csv", model, states)
    header = (tmp_path / "ckpt.csv").read_text().splitlines()[0]
    assert header == "# p_psi=16,p_theta=10,p_phi=15,E=3,d=3,h=4,K=2"
    back, back_states = load_checkpoint(tmp_path / "ckpt.csv")
    assert back.extractor.tobytes() == model.extractor.tobytes()
    assert back.experts.tobytes() == model.experts.tobytes()
    assert sorted(back_states) == [0, 4]
    assert back_states[4].gating.tobytes() == states[4].gating.tobytes()


def test_model_shape_checks():
    shape = ModelShape(3, 4, 2, 3)
    with pytest.raises(DimensionMismatch):
        GlobalModel(shape, np.zeros(5), np.zeros((3, shape.p_expert)))
