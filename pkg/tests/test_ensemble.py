import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deuq.data import make_dataset
from deuq.ensemble import (
    Ensemble,
    EnsembleConfig,
    mixture,
    predict,
    predict_batch,
    train_ensemble,
    train_member,
)
from deuq.errors import ConfigurationError, InputShapeError, TrainingDivergedError
from deuq.nn import ProbNet, forward


def test_mixture_two_members_by_hand():
    d = mixture(np.array([[1.0], [3.0]]), np.array([[1.0], [1.0]]))
    assert d.mu_hat[0] == 2.0
    assert d.var_aleatory[0] == 1.0
    assert d.var_epistemic[0] == 1.0
    assert d.var_total[0] == 2.0


def test_identical_members_no_epistemic():
    mus = np.tile(np.array([[0.3, -1.2]]), (4, 1))
    s2 = np.tile(np.array([[0.5, 2.0]]), (4, 1))
    d = mixture(mus, s2)
    assert np.all(d.var_epistemic == 0.0)
    np.testing.assert_array_equal(d.var_total, s2[0])


def _two_pass_variance(values):
    # textbook: mean first, then average squared deviations
    n = len(values)
    m = sum(values) / n
    return sum((v - m) ** 2 for v in values) / n


def test_epistemic_matches_two_pass_oracle():
    rng = np.random.default_rng(0)
    nets = [ProbNet.init(5, 6, (8, 8), seed=rng) for _ in range(5)]
    ens = Ensemble(nets)
    X = rng.uniform(-1, 1, size=(20, 5))
    d = predict_batch(ens, X)
    mus = np.stack([forward(n, X)[0] for n in nets])
    for i in range(20):
        for k in range(6):
            oracle = _two_pass_variance([float(mus[m, i, k]) for m in range(5)])
            assert abs(d.var_epistemic[i, k] - oracle) < 1e-12


def test_epistemic_nonnegative_near_cancellation():
    # large common offset: the one-pass formula E[x^2]-E[x]^2 loses precision
    mus = 1e8 + np.array([[0.0], [1e-8], [2e-8]])
    d = mixture(mus, np.ones_like(mus))
    assert d.var_epistemic[0] >= 0


@settings(max_examples=60)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 3)), elements=st.floats(-50, 50)),
    st.data(),
)
def test_mixture_invariants(mus, data):
    s2 = data.draw(arrays(np.float64, mus.shape, elements=st.floats(1e-6, 50)))
    d = mixture(mus, s2)
    np.testing.assert_allclose(d.var_total, d.var_aleatory + d.var_epistemic, rtol=0, atol=1e-12)
    assert np.all(d.var_epistemic >= 0)
    assert np.all(d.var_total >= d.var_aleatory)
    perm = data.draw(st.permutations(range(len(mus))))
    p = mixture(mus[list(perm)], s2[list(perm)])
    np.testing.assert_allclose(p.mu_hat, d.mu_hat, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(p.var_total, d.var_total, rtol=1e-10, atol=1e-12)


def test_single_member_equals_net():
    net = ProbNet.init(5, 6, (8,), seed=3)
    ens = Ensemble([net])
    x = np.linspace(-1, 1, 5)
    d = predict(ens, x)
    mu, s2 = forward(net, x)
    assert np.array_equal(d.mu_hat, mu)
    assert np.array_equal(d.var_total, s2)
    assert np.all(d.var_epistemic == 0)


def test_predict_batch_empty_and_rows():
    ens = Ensemble([ProbNet.init(5, 6, (4,), seed=i) for i in range(3)])
    empty = predict_batch(ens, np.zeros((0, 5)))
    assert empty.mu_hat.shape == (0, 6) and len(empty) == 0
    X = np.random.default_rng(1).normal(size=(4, 5))
    batch = predict_batch(ens, X)
    assert len(batch) == 4
    for i, d in enumerate(batch):
        single = predict(ens, X[i])
        np.testing.assert_allclose(d.mu_hat, single.mu_hat, atol=1e-14)
        np.testing.assert_allclose(d.var_total, single.var_total, atol=1e-14)


def test_predict_rejects_wrong_dim():
    ens = Ensemble([ProbNet.init(5, 6, (4,), seed=0)])
    with pytest.raises(InputShapeError):
        predict(ens, np.zeros(3))


def test_members_must_share_architecture():
    with pytest.raises(InputShapeError):
        Ensemble([ProbNet.init(5, 6, (4,), seed=0), ProbNet.init(5, 6, (5,), seed=0)])


def test_bad_config():
    with pytest.raises(ConfigurationError):
        EnsembleConfig(members=0)
    with pytest.raises(ConfigurationError):
        EnsembleConfig(lr=0)


@pytest.fixture(scope="module")
def tiny():
    ds = make_dataset((3, 3, 2, 2, 3), seed=1)
    return ds.part("train")


def test_training_reproducible(tiny):
    X, Y = tiny
    cfg = EnsembleConfig(members=2, epochs=5, batch_size=16, hidden=(8,), seed=4)
    a = train_ensemble(cfg, X, Y)
    b = train_ensemble(cfg, X, Y)
    for na, nb in zip(a.members, b.members):
        for pa, pb in zip(na.params(), nb.params()):
            assert np.array_equal(pa, pb)


def test_same_seed_members_identical(tiny):
    X, Y = tiny
    cfg = EnsembleConfig(members=1, epochs=5, batch_size=16, hidden=(8,), seed=9)
    n1, _ = train_member(cfg, X, Y, 0)
    n2, _ = train_member(cfg, X, Y, 0)
    d = predict_batch(Ensemble([n1, n2]), X)
    assert np.all(d.var_epistemic == 0)


def test_stack_equals_individual_training(tiny):
    X, Y = tiny
    cfg = EnsembleConfig(members=3, epochs=4, batch_size=16, hidden=(8, 8), seed=2)
    ens = train_ensemble(cfg, X, Y)
    for i in range(3):
        net, _ = train_member(cfg, X, Y, i)
        for a, b in zip(net.params(), ens.members[i].params()):
            assert np.array_equal(a, b)


def test_subset_matches_smaller_ensemble(tiny):
    X, Y = tiny
    cfg = EnsembleConfig(members=4, epochs=3, batch_size=16, hidden=(8,), seed=5)
    big = train_ensemble(cfg, X, Y)
    small = train_ensemble(EnsembleConfig(members=2, epochs=3, batch_size=16, hidden=(8,), seed=5), X, Y)
    sub = big.subset(2)
    for a, b in zip(sub.members, small.members):
        for pa, pb in zip(a.params(), b.params()):
            assert np.array_equal(pa, pb)
    with pytest.raises(ConfigurationError):
        big.subset(5)


def test_parallel_training_matches_serial(tiny):
    X, Y = tiny
    cfg = EnsembleConfig(members=3, epochs=3, batch_size=16, hidden=(8,), seed=1)
    a = train_ensemble(cfg, X, Y)
    b = train_ensemble(cfg, X, Y, n_jobs=2)
    for na, nb in zip(a.members, b.members):
        for pa, pb in zip(na.params(), nb.params()):
            assert np.array_equal(pa, pb)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_member_and_epoch(tiny):
    X, Y = tiny
    Y = Y.copy()
    Y[0, 0] = np.inf
    cfg = EnsembleConfig(members=2, epochs=3, batch_size=16, hidden=(4,), seed=0)
    with pytest.raises(TrainingDivergedError) as exc:
        train_ensemble(cfg, X, Y)
    assert exc.value.member == 0 and exc.value.epoch == 0
    assert "member 0" in str(exc.value)


def test_save_load_roundtrip(tmp_path, small_ensemble, small_dataset):
    ens = small_ensemble
    ens.save(tmp_path / "de")
    back = Ensemble.load(tmp_path / "de")
    X, _ = small_dataset.part("test")
    a = predict_batch(ens, X)
    b = predict_batch(back, X)
    assert np.array_equal(a.mu_hat, b.mu_hat)
    assert np.array_equal(a.var_total, b.var_total)
    assert back.config == ens.config


@pytest.mark.slow
def test_training_beats_constant_baseline_tenfold():
    ds = make_dataset(seed=0)
    X, Y = ds.part("train")
    Xt, Yt = ds.part("test")
    cfg = EnsembleConfig(members=4, epochs=2000, seed=0)
    ens = train_ensemble(cfg, X, Y)
    rmse = np.sqrt(np.mean((predict_batch(ens, Xt).mu_hat - Yt) ** 2))
    baseline = np.sqrt(np.mean((Y.mean(axis=0) - Yt) ** 2))
    assert rmse * 10 <= baseline
