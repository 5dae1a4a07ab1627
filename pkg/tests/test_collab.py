import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from collabdbn import collab, dbn
from collabdbn.dataset import Dataset, SynthConfig, concat, generate_synthetic, standardize
from collabdbn.errors import ConfigError, DataError, NumericError, ProtocolError
from collabdbn.metrics import evaluate


def tiny_config(iterations=20, lr=0.05, seed=3, batch=16, **kw):
    return collab.CollabConfig(dbn.TrainConfig(hidden=(6, 4), learning_rate=lr, batch_size=batch,
                                               iterations=iterations, seed=seed), **kw)


def tiny_data(nodes=3, seed=1, per_class=(60, 20, 20, 20)):
    ds = generate_synthetic(SynthConfig(nodes=nodes, per_class=per_class, feature_dim=5, seed=seed))
    _, _, scaled = standardize(concat(ds), ds)
    return scaled


class Recorder:
    def __init__(self):
        self.trace = []

    def __call__(self, i, models):
        self.trace.append((i, {k: dbn.flatten(m).tobytes() for k, m in models.items()}))


# ---------------------------------------------------------------- averaging


def test_average_examples():
    assert collab.average_flat([np.array([1.0, 3.0]), np.array([3.0, 1.0])]).tolist() == [2.0, 2.0]
    g = np.array([0.1, -7.3, 1e-300])
    assert collab.average_flat([g, g, g]).tobytes() == g.tobytes()


@given(st.integers(0, 10**6), st.integers(1, 6))
def test_average_permutation_invariant_and_linear(seed, n):
    rng = np.random.default_rng(seed)
    vs = [rng.normal(size=7) for _ in range(n)]
    a = collab.average_flat(vs)
    assert collab.average_flat(vs[::-1]).tobytes() == a.tobytes()
    assert collab.average_flat([vs[j] for j in rng.permutation(n)]).tobytes() == a.tobytes()
    assert np.allclose(collab.average_flat([2.5 * v for v in vs]), 2.5 * a, rtol=1e-12, atol=1e-12)
    assert np.allclose(a, np.mean(vs, axis=0), rtol=1e-12, atol=1e-12)


def test_average_gradients_errors():
    arch = (3, 2, 2)
    g = dbn.unflatten_gradient(np.ones(dbn.param_count(arch)), arch)
    h = dbn.unflatten_gradient(np.ones(dbn.param_count((3, 3, 2))), (3, 3, 2))
    with pytest.raises(ProtocolError):
        collab.average_gradients([g, g], 3)
    with pytest.raises(ProtocolError):
        collab.average_gradients([g, h], 2)
    assert np.array_equal(dbn.flatten(collab.average_gradients([g, g], 2)), dbn.flatten(g))


# ---------------------------------------------------------------- rounds and schemes


def test_zero_iterations_returns_initial_models():
    data = tiny_data()
    res = collab.train_pclm(data, tiny_config(iterations=0))
    init = dbn.init_model((5, 6, 4, 4), 3)
    assert all(m.equals(init) for m in res.models.values())
    assert res.history == []


def test_pclm_models_bitwise_equal_every_round():
    rec = Recorder()
    collab.train_pclm(tiny_data(), tiny_config(), on_round=rec)
    assert len(rec.trace) == 20
    for _, models in rec.trace:
        assert len(set(models.values())) == 1


def test_l1_round_is_one_local_step():
    (data,) = tiny_data(nodes=1)
    cfg = tiny_config(iterations=1)
    res = collab.train_pclm([data], cfg)
    node = collab.make_nodes([data], cfg)[0]
    grad, _ = collab.local_gradient(node, 1, cfg.train)
    expect = dbn.apply_update(node.model, grad, cfg.train.learning_rate)
    assert res.models[1].equals(expect)


def test_scheme_degeneracy_single_node():
    (data,) = tiny_data(nodes=1)
    traces = []
    for scheme in collab.SCHEMES:
        rec = Recorder()
        collab.train(scheme, [data], tiny_config(), on_round=rec)
        traces.append([m[1] for _, m in rec.trace])
    assert traces[0] == traces[1] == traces[2]


def test_identical_nodes_match_single_node_trajectory():
    (data,) = tiny_data(nodes=1)
    single, multi = Recorder(), Recorder()
    collab.train_pclm([data], tiny_config(), on_round=single)
    collab.train_pclm([data] * 3, tiny_config(), streams=[1, 1, 1], on_round=multi)
    for (_, a), (_, b) in zip(single.trace, multi.trace):
        assert set(b.values()) == {a[1]}


def test_clm_concat_order_irrelevant():
    data = tiny_data()
    a = collab.train_clm(data, tiny_config())
    b = collab.train_clm(data[::-1], tiny_config())
    assert a.models[1].equals(b.models[1])


def test_llm_isolation():
    data = tiny_data()
    other = tiny_data(seed=99)
    a = collab.train_llm(data, tiny_config())
    b = collab.train_llm([data[0], other[1], other[2]], tiny_config())
    assert a.models[1].equals(b.models[1])
    assert not a.models[2].equals(b.models[2])


def test_llm_absent_class_gets_zero_recall():
    # node never sees class 4; with enough training it still never predicts it
    (data,) = tiny_data(nodes=1, per_class=(80, 40, 40, 0))
    (full,) = tiny_data(nodes=1, per_class=(20, 20, 20, 20), seed=5)
    res = collab.train_llm([data], tiny_config(iterations=300, lr=0.3))
    m = evaluate(res.models[1], full)
    assert m.recall[3] == 0.0


def test_history_contiguous_and_export(tmp_path):
    cfg = tiny_config(iterations=25, eval_every=10)
    eval_set = concat(tiny_data())
    res = collab.train_pclm(tiny_data(), cfg, eval_set)
    assert [r.iteration for r in res.history] == list(range(1, 26))
    assert [r.iteration for r in res.history if r.accuracies] == [10, 20, 25]
    p = tmp_path / "h.csv"
    collab.write_history(res, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "iteration,scheme,node,loss,accuracy"
    assert len(lines) == 1 + 25 * 3
    iters = [int(line.split(",")[0]) for line in lines[1:]]
    assert iters == sorted(iters)


def test_same_seed_same_trajectory_different_seed_differs():
    a = collab.train_pclm(tiny_data(), tiny_config())
    b = collab.train_pclm(tiny_data(), tiny_config())
    c = collab.train_pclm(tiny_data(), tiny_config(seed=4))
    assert a.models[1].equals(b.models[1])
    assert not a.models[1].equals(c.models[1])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_numeric_error():
    with pytest.raises(NumericError):
        collab.train_llm(tiny_data(nodes=1), tiny_config(iterations=200, lr=1e6))


def test_errors():
    with pytest.raises(DataError):
        collab.train_pclm([], tiny_config())
    a = Dataset(np.zeros((4, 2)), [0, 1, 2, 3])
    b = Dataset(np.zeros((4, 3)), [0, 1, 2, 3])
    with pytest.raises(DataError):
        collab.train_pclm([a, b], tiny_config())
    with pytest.raises(ConfigError):
        collab.train("fedavg", [a], tiny_config())


def test_plateau_early_stop():
    cfg = tiny_config(iterations=400, eval_every=5, plateau_window=50, plateau_tol=1.0)
    res = collab.train_llm(tiny_data(nodes=1), cfg, concat(tiny_data(nodes=1)))
    assert len(res.history) < 400


def test_socket_transport_matches_inproc():
    base = collab.train_pclm(tiny_data(), tiny_config(iterations=10))
    other = collab.train_pclm(tiny_data(), tiny_config(iterations=10, transport="socket"))
    assert all(base.models[k].equals(other.models[k]) for k in base.models)
