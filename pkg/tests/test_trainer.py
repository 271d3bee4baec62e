import numpy as np
import pytest
from dataclasses import replace

from llpcs import bagging as Bg
from llpcs import losses as L
from llpcs import trainer as T
from llpcs.autodiff import Tape
from llpcs.data import Dataset
from llpcs.model import ConfigurationError, make_optimizer

from conftest import toy_dataset

SMALL = dict(hidden=(8,), epochs=2, bags_per_batch=2, lr=1e-2)


def domains(n=40, d=3):
    return toy_dataset(n, d, seed=1, domain="source"), toy_dataset(n, d, seed=2), toy_dataset(20, d, seed=3)


@pytest.mark.parametrize("method, expected", [("BL-WFA", 4), ("PL-WFA", 32), ("LR", 32), ("Bagged-Target", 0)])
def test_minibatch_source_counts(method, expected):
    target = toy_dataset(64)
    bags = Bg.random_bags(target, 8, seed=0)
    batches = list(T.make_minibatches(100, bags, method, 4, seed=0))
    assert len(batches) == 2
    for _, ids, src in batches:
        assert len(ids) == 4 and len(src) == expected


def test_minibatches_cover_every_bag_each_epoch():
    bags = Bg.random_bags(toy_dataset(30), 3, seed=0)
    seen = {}
    for epoch, ids, src in T.make_minibatches(7, bags, "LR", 4, seed=1, epochs=3):
        seen.setdefault(epoch, []).extend(ids.tolist())
        assert len(np.unique(src)) == len(src) or len(src) > 7
    for epoch, ids in seen.items():
        assert sorted(ids) == list(range(len(bags)))


def test_minibatches_need_source():
    bags = Bg.random_bags(toy_dataset(8), 2, seed=0)
    with pytest.raises(ConfigurationError):
        list(T.make_minibatches(0, bags, "BL-WFA", 2, seed=0))
    assert len(list(T.make_minibatches(0, bags, "Bagged-Target", 2, seed=0))) == 2


def test_training_is_deterministic():
    s, t, te = domains()
    bags = Bg.random_bags(t, 4, seed=0)
    cfg = T.TrainConfig(method="BL-WFA", **SMALL)
    m1, r1 = T.train(cfg, s, t, bags, te)
    m2, r2 = T.train(cfg, s, t, bags, te)
    assert r1.epoch_losses == r2.epoch_losses and r1.test_mse == r2.test_mse
    for a, b in zip(m1.parameters(), m2.parameters()):
        assert a.value.tobytes() == b.value.tobytes()


def test_seed_isolation():
    s, t, te = domains()
    bags = Bg.random_bags(t, 4, seed=0)
    base = T.TrainConfig(method="LR", **SMALL)
    ref = T.train(base, s, t, bags, te)[1].epoch_losses
    # changing the shuffle seed changes the batch order but not the initial weights
    shuffled = T.train(replace(base, shuffle_seed=5), s, t, bags, te)[1].epoch_losses
    assert shuffled != ref
    m0 = T.build_model(base, t)
    m1 = T.build_model(replace(base, shuffle_seed=5, bag_seed=9), t)
    for a, b in zip(m0.parameters(), m1.parameters()):
        np.testing.assert_array_equal(a.value, b.value)


def test_bl_wfa_without_alignment_matches_lr_on_a_batch():
    s, t, _ = domains()
    bags = Bg.random_bags(t, 4, seed=0)
    model = T.build_model(T.TrainConfig(method="LR", hidden=(8,)), t)
    batch = L.BatchView.build(s, np.arange(12), t, [bags[i] for i in range(3)])
    out = L.model_outputs(model, batch)
    bl, _ = T.step_loss(model, batch, T.TrainConfig(method="BL-WFA", lambda3=0.0).loss_spec())
    lr, _ = T.step_loss(model, batch, T.TrainConfig(method="LR").loss_spec())
    assert abs(float(bl) - float(lr)) <= 1e-12
    with Tape() as tape:
        out = L.model_outputs(model, batch)
        a, _ = L.bagcsi(out, batch, T.TrainConfig(method="BL-WFA", lambda3=0.0).loss_spec())
    ga = tape.gradient(a, model.body_parameters())
    with Tape() as tape:
        out = L.model_outputs(model, batch)
        b, _ = L.lr_loss(out, batch)
    gb = tape.gradient(b, model.body_parameters())
    for x, y in zip(ga, gb):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)


def test_dann_phases_touch_disjoint_parameters():
    s, t, _ = domains()
    bags = Bg.random_bags(t, 4, seed=0)
    cfg = T.TrainConfig(method="LR-DANN", hidden=(8,))
    model = T.build_model(cfg, t)
    batch = L.BatchView.build(s, np.arange(8), t, [bags[0], bags[1]])
    body0 = [p.value.copy() for p in model.body_parameters()]
    head0 = [p.value.copy() for p in model.domain_parameters()]

    T.dann_step(model, batch, cfg.loss_spec(), make_optimizer("sgd", 0.1), make_optimizer("sgd", 1e-300), "LR")
    assert any(not np.array_equal(a, p.value) for a, p in zip(body0, model.body_parameters()))
    for a, p in zip(head0, model.domain_parameters()):
        np.testing.assert_allclose(p.value, a, rtol=0, atol=1e-250)

    body1 = [p.value.copy() for p in model.body_parameters()]
    T.dann_step(model, batch, cfg.loss_spec(), make_optimizer("sgd", 1e-300), make_optimizer("sgd", 0.1), "LR")
    for a, p in zip(body1, model.body_parameters()):
        np.testing.assert_allclose(p.value, a, rtol=0, atol=1e-250)
    assert any(not np.array_equal(a, p.value) for a, p in zip(head0, model.domain_parameters()))


def test_dann_without_domain_weight_reduces_to_base():
    s, t, _ = domains()
    bags = Bg.random_bags(t, 4, seed=0)
    model = T.build_model(T.TrainConfig(method="LR-DANN", hidden=(8,)), t)
    batch = L.BatchView.build(s, np.arange(8), t, [bags[0], bags[1]])
    out = L.model_outputs(model, batch)
    spec = T.TrainConfig(method="LR-DANN", lambda_d=0.0).loss_spec()
    p1, _ = L.dann_phase1(model, out, batch, spec, "LR")
    lr, _ = L.lr_loss(out, batch)
    assert abs(float(p1) - float(lr)) <= 1e-12


def test_bagged_target_singletons_fit_a_linear_target():
    r = np.random.default_rng(0)
    x = r.normal(size=(200, 2))
    t = Dataset(x, x @ np.array([1.5, -0.5]) + 0.25)
    bags = Bg.random_bags(t, 1, seed=0)
    cfg = T.TrainConfig(method="Bagged-Target", hidden=(), lr=0.05, epochs=200, bags_per_batch=20)
    _, res = T.train(cfg, None, t, bags, t)
    assert res.test_mse < 1e-4


def test_evaluate_hand_cases():
    t = Dataset(np.zeros((3, 1)), np.array([1.0, 2.0, 3.0]))
    model = T.build_model(T.TrainConfig(method="LR", hidden=()), t)
    model.head_w.value[:] = 0.0
    model.head_b.value = np.asarray(2.0)
    assert T.evaluate(model, t) == pytest.approx(2.0 / 3.0)
    assert T.evaluate(model, t, chunk=1) == pytest.approx(2.0 / 3.0)
    bags = Bg.random_bags(t, 3, seed=0)
    assert T.evaluate_bags(model, t, bags) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        T.evaluate(model, t.subset(np.zeros(0, dtype=np.int64)))


def test_grid_cardinality():
    base = T.TrainConfig(method="BL-WFA")
    assert len(T.expand_grid(base, T.DEFAULT_GRIDS)) == 16
    assert len(T.expand_grid(T.TrainConfig(method="LR"), T.DEFAULT_GRIDS)) == 4
    grid = T.expand_grid(base, {"lambda": [0.5]})
    assert len(grid) == 1 and grid[0].lambda3 == 0.5
    assert T.expand_grid(T.TrainConfig(method="DMFA"), {"lambda": [0.5]})[0].lambda_d == 0.5


def test_grid_search_selects_a_listed_point():
    s, t, _ = domains()
    bags = Bg.random_bags(t, 2, seed=0)
    res = T.grid_search(T.TrainConfig(method="LR", **SMALL), {"lr": [1e-3, 1e-2]}, s, t, bags, 0.2)
    assert len(res.rows) == 2 and sum(r["best"] for r in res.rows) == 1
    best = min(res.rows, key=lambda r: r["val_bag_mse"])
    assert best["lr"] == res.best.lr


def test_multi_run_statistics():
    s, t, te = domains()
    cfg = T.TrainConfig(method="Bagged-Target", **SMALL)
    bagger = lambda ds, seed: Bg.random_bags(ds, 4, seed)
    one = T.multi_run(cfg, 1, s, t, te, bagger)
    assert one.std == 0.0 and one.mean == one.results[0].test_mse
    three = T.multi_run(cfg, 3, s, t, te, bagger)
    mses = [r.test_mse for r in three.results]
    assert three.std == pytest.approx(np.std(mses, ddof=1))
    assert [r.config.model_seed for r in three.results] == [0, 1, 2]
    assert T.format_mean_std(1.234, 0.5) == "1.23 ± 0.50"
    assert " ± " in three.formatted()


def test_training_never_reads_test_labels():
    s, t, te = domains()
    bags = Bg.random_bags(t, 4, seed=0)
    cfg = T.TrainConfig(method="BL-WFA", **SMALL)
    poisoned = Dataset(te.features, te.labels + 1e6)
    m1, _ = T.train(cfg, s, t, bags, te)
    m2, _ = T.train(cfg, s, t, bags, poisoned)
    m3, _ = T.train(cfg, s, t, bags, None)
    for a, b, c in zip(m1.parameters(), m2.parameters(), m3.parameters()):
        assert a.value.tobytes() == b.value.tobytes() == c.value.tobytes()


def test_results_csv_is_reproducible(tmp_path):
    s, t, te = domains()
    cfg = T.TrainConfig(method="DMFA", **SMALL)
    bagger = lambda ds, seed: Bg.random_bags(ds, 4, seed)
    a = T.multi_run(cfg, 2, s, t, te, bagger).results
    b = T.multi_run(cfg, 2, s, t, te, bagger).results
    assert T.results_csv(a) == T.results_csv(b)
    csv_path, json_path = T.write_results(a, tmp_path)
    assert csv_path.read_text().splitlines()[0].split(",")[0] == "method"
    assert "wall_ms" not in csv_path.read_text()
    assert "wall_ms" in (tmp_path / "timings.log").read_text()


def test_config_validation_and_round_trip():
    with pytest.raises(ConfigurationError):
        T.TrainConfig(method="SVM")
    with pytest.raises(ConfigurationError):
        T.TrainConfig(epochs=0)
    with pytest.raises(ConfigurationError):
        T.TrainConfig.from_dict({"learning_rate": 1.0})
    cfg = T.TrainConfig(method="PL-WFA", hidden=(4, 4))
    assert T.TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_all_methods_train_with_embeddings():
    s = toy_dataset(40, 3, seed=1, domain="source", n_cat=2)
    t = toy_dataset(40, 3, seed=2, n_cat=2)
    bags = Bg.random_bags(t, 4, seed=0)
    for method in L.METHODS:
        _, res = T.train(T.TrainConfig(method=method, hidden=(8,), epochs=1), s, t, bags, t)
        assert np.isfinite(res.test_mse) and res.n_steps == 2
