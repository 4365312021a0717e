from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fseb import nn
from fseb.autodiff import Tensor, softmax_cross_entropy
from fseb.context import ContextBundle
from fseb.data import SynthSpec, synth_dataset
from fseb.errors import ConfigError, DataError, DimensionError
from fseb.prior import KernelConfig, build_kernel, prior_term
from fseb.trainer import (
    AdamState, BundleContext, SearchSpace, TrainBatchContext, TrainConfig, adam_update, objective_step, random_search,
    train, trials_csv,
)
from gradcheck import objective_rel_error


@pytest.fixture(scope="module")
def toy():
    ds, _ = synth_dataset(SynthSpec(kind="stripes", size=8, n_classes=3, n_per_class=40, seed=1))
    rng = np.random.default_rng(0)
    bundle = ContextBundle(
        images=(rng.random((20, 8, 8, 1)) * 255).astype(np.uint8),
        embeddings=rng.normal(size=(20, 6)).astype(np.float32),
    )
    return ds, bundle


def _net(seed=0, K=3):
    return nn.build_network("desk_mlp", K, seed=seed, input_shape=(1, 8, 8), hidden=16)


def test_objective_gradient_matches_finite_differences():
    for seed in range(3):
        err, n_params = objective_rel_error(seed)
        assert n_params == 207
        assert err <= 1e-4


def test_objective_components_without_dropout():
    net = nn.build_network("desk_mlp", 3, seed=0, input_shape=(1, 8, 8), hidden=4, rate=0.0)
    rng = np.random.default_rng(0)
    x, y = rng.random((5, 1, 8, 8)), np.array([0, 1, 2, 0, 1])
    ctx_x, ctx_h = rng.random((4, 1, 8, 8)), rng.normal(size=(4, 3))
    km_cfg = KernelConfig(tau1=0.5, tau2=2.0)
    cfg = TrainConfig(weight_decay=0.01)
    loss, comps = objective_step(net, x, y, 100, ctx_x, ctx_h, km_cfg, cfg, rng)
    out = nn.forward(net, np.concatenate([x, ctx_x])).data
    data = 100 * softmax_cross_entropy(Tensor(out[:5]), y).item()
    prior, _ = prior_term(build_kernel(ctx_h, km_cfg), out[5:])
    l2 = 0.01 * float(net.get_flat() @ net.get_flat())
    assert comps["data"] == pytest.approx(data, rel=1e-12)
    assert comps["prior"] == pytest.approx(prior, rel=1e-12)
    assert comps["l2"] == pytest.approx(l2, rel=1e-12)
    assert loss.item() == pytest.approx(data - prior + l2, rel=1e-12)


def test_objective_without_context_is_data_plus_penalty():
    net = _net()
    rng = np.random.default_rng(1)
    x, y = rng.random((4, 1, 8, 8)), np.array([0, 1, 2, 0])
    _, comps = objective_step(net, x, y, 50, None, None, KernelConfig(), TrainConfig(weight_decay=0.0), rng)
    assert comps["prior"] == 0.0 and comps["l2"] == 0.0
    assert comps["loss"] == pytest.approx(comps["data"])


def test_objective_shape_checks():
    net = _net()
    rng = np.random.default_rng(0)
    with pytest.raises(DimensionError):
        objective_step(net, rng.random((2, 1, 8, 8)), [0, 1], 10, rng.random((3, 1, 4, 4)), rng.normal(size=(3, 2)),
                       KernelConfig(), TrainConfig(), rng)
    with pytest.raises(DimensionError):
        objective_step(net, rng.random((2, 1, 8, 8)), [0, 1], 10, rng.random((3, 1, 8, 8)), rng.normal(size=(4, 2)),
                       KernelConfig(), TrainConfig(), rng)


def test_adam_first_step_hand_values():
    # after bias correction the first step is lr * g / (|g| + eps) per entry
    p = Tensor(np.array([1.0, -2.0, 0.5]))
    g = np.array([0.3, -4.0, 0.0])
    cfg = TrainConfig(lr=0.1)
    state = adam_update(AdamState.for_params([p]), [p], [g], cfg)
    assert state.t == 1
    np.testing.assert_allclose(p.data, [1.0 - 0.1 * 0.3 / (0.3 + 1e-8), -2.0 + 0.1 * 4.0 / (4.0 + 1e-8), 0.5],
                               rtol=1e-14)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(2)
    p = Tensor(rng.normal(size=4))
    ref = p.data.copy()
    cfg = TrainConfig()
    state = AdamState.for_params([p])
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_update(state, [p], [g], cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 5e-4 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-13)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(patience=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(val_fraction=1.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3})
    assert TrainConfig().lr == 5e-4 and TrainConfig().batch_size == 128 and TrainConfig().patience == 10


def test_training_smoke(toy, tmp_path):
    ds, bundle = toy
    net = _net()
    cfg = TrainConfig(max_epochs=6, patience=2, batch_size=32, context_batch=8, val_mc_samples=4, seed=3)
    rep = train(net, ds, bundle, KernelConfig(tau1=1.0, tau2=1.0), cfg, checkpoint_path=tmp_path / "c.fseb")
    nlls = [r["val_nll"] for r in rep.epochs]
    assert rep.stopped_epoch == len(rep.epochs) <= 6
    assert rep.best_val_nll == min(nlls) <= nlls[0]
    assert rep.epochs[rep.best_epoch - 1]["val_nll"] == rep.best_val_nll
    assert rep.n_train + rep.n_val == len(ds)
    np.testing.assert_array_equal(nn.load_checkpoint(tmp_path / "c.fseb").get_flat(), net.get_flat())
    assert "wall_time" not in rep.to_dict()


def test_training_is_deterministic(toy):
    ds, bundle = toy
    cfg = TrainConfig(max_epochs=2, batch_size=32, context_batch=8, val_mc_samples=2, seed=5)
    reports, flats = [], []
    for _ in range(2):
        net = _net()
        reports.append(train(net, ds, bundle, KernelConfig(), cfg).to_json())
        flats.append(net.get_flat())
    assert reports[0] == reports[1]
    np.testing.assert_array_equal(*flats)


def test_early_stopping_restores_best(toy):
    ds, _ = toy
    # a huge learning rate makes validation NLL erratic, so stopping triggers
    cfg = TrainConfig(max_epochs=8, patience=1, batch_size=16, lr=0.5, val_mc_samples=2, seed=0)
    net = _net()
    rep = train(net, ds, None, KernelConfig(), cfg)
    assert rep.stopped_epoch - rep.best_epoch <= 1
    assert rep.best_val_nll == min(r["val_nll"] for r in rep.epochs)


@pytest.mark.parametrize("schedule", ["per_step", "fixed", "sweep"])
def test_context_schedules(toy, schedule):
    _, bundle = toy
    ctx = BundleContext(bundle, schedule)
    rng = np.random.default_rng(0)
    draws = [ctx.sample(8, rng)[1] for _ in range(3)]
    assert all(d.shape == (8, 6) for d in draws)
    if schedule == "fixed":
        np.testing.assert_array_equal(draws[0], draws[2])
    else:
        assert not np.array_equal(draws[0], draws[1])


def test_train_batch_context_draws_from_batch():
    imgs = np.arange(10, dtype=np.float64).reshape(10, 1, 1, 1) / 10
    ctx = TrainBatchContext(imgs, np.arange(10, dtype=np.float64)[:, None])
    x, h = ctx.sample(3, np.random.default_rng(0), batch_idx=[2, 5, 7, 9])
    assert set(h[:, 0].astype(int)) <= {2, 5, 7, 9} and len(set(h[:, 0])) == 3
    np.testing.assert_array_equal(x[:, 0, 0, 0] * 10, h[:, 0])
    with pytest.raises(DataError):
        TrainBatchContext(imgs, np.zeros((9, 1)))


def test_bundle_without_embeddings_rejected(toy):
    with pytest.raises(DataError):
        BundleContext(ContextBundle(images=toy[1].images))


class TestSearch:
    def test_default_grid(self):
        space = SearchSpace()
        assert (len(space.weight_decay), len(space.tau1), len(space.tau2)) == (7, 9, 9)
        assert space.size == 567 and space.trials == 60

    def test_full_draw_enumerates_grid(self):
        space = SearchSpace(trials=567)
        drawn = space.draw(0)
        assert len(drawn) == 567 and set(drawn) == set(space.grid())

    @given(st.integers(1, 567), st.integers(0, 10 ** 6))
    def test_draws_are_distinct(self, trials, seed):
        drawn = SearchSpace(trials=trials).draw(seed)
        assert len(set(drawn)) == trials

    def test_invalid(self):
        with pytest.raises(ConfigError):
            SearchSpace(trials=568)
        with pytest.raises(ConfigError):
            SearchSpace(tau1=())

    def test_random_search_selects_minimum(self, toy):
        ds, bundle = toy
        space = SearchSpace(weight_decay=(1e-4, 1e-1), tau1=(1.0,), tau2=(0.1, 10.0), trials=3)
        base = TrainConfig(max_epochs=1, batch_size=32, context_batch=8, val_mc_samples=2)
        spec = {"preset": "desk_mlp", "n_classes": 3, "seed": 0, "input_shape": (1, 8, 8), "hidden": 8}
        best, table = random_search(space, base, KernelConfig(), ds, bundle, 0, spec)
        assert [r["trial"] for r in table] == [0, 1, 2]
        assert best == min(table, key=lambda r: r["val_nll"])
        assert trials_csv(table).splitlines()[0] == "trial,weight_decay,tau1,tau2,val_nll,best_epoch,stopped_epoch,status"

    def test_search_is_reproducible(self, toy):
        ds, _ = toy
        space = SearchSpace(weight_decay=(1e-4, 1e-2), tau1=(1.0,), tau2=(1.0,), trials=2)
        base = TrainConfig(max_epochs=1, batch_size=32, val_mc_samples=2)
        spec = {"preset": "desk_mlp", "n_classes": 3, "seed": 0, "input_shape": (1, 8, 8), "hidden": 8}
        a = random_search(space, base, KernelConfig(), ds, None, 4, spec)[1]
        b = random_search(space, replace(base), KernelConfig(), ds, None, 4, spec)[1]
        assert a == b
