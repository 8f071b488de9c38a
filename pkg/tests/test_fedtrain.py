import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfeddef.data import SplitConfig, dirichlet_split, generate_mixture, partitioned_mixture
from pfeddef.fedtrain import (
    FleetState,
    HypothesisEnsemble,
    MixtureSurface,
    TrainConfig,
    fedavg_aggregate,
    fedem_aggregate,
    fedem_e_step,
    fedem_m_step,
    load_checkpoint,
    local_epoch,
    local_tuning,
    mixture_predict,
    run_training,
    save_checkpoint,
    tune_fleet,
    write_round_csv,
)
from pfeddef.models import (
    ArchitectureSpec,
    LabeledBatch,
    ParamVector,
    init_params,
    loss,
    predict,
)

RNG = np.random.default_rng(77)
SPEC = ArchitectureSpec(4, (6,), 3)


def rand_params(seed, spec=SPEC):
    return ParamVector(np.random.default_rng(seed).normal(0, 0.5, spec.param_count), spec)


def rand_batch(seed, n=6, spec=SPEC):
    rng = np.random.default_rng(seed)
    return LabeledBatch(rng.normal(size=(n, spec.input_dim)), rng.integers(0, spec.num_classes, n))


def desk_datasets(seed=0, samples=240, clients=3, beta=1.0):
    mixture = partitioned_mixture(2, 4, 8, samples)
    return dirichlet_split(generate_mixture(mixture, seed), SplitConfig(clients, beta, seed))


# ------------------------------------------------------------------ e-step


def test_e_step_equal_losses_uniform():
    params = ParamVector(np.zeros(SPEC.param_count), SPEC)
    batch = rand_batch(1)
    q = fedem_e_step(batch, [params, params], [0.5, 0.5])
    assert np.allclose(q, 0.5, atol=1e-12)


def test_e_step_degenerate_prior():
    q = fedem_e_step(rand_batch(2), [rand_params(1), rand_params(2)], [1.0, 0.0])
    assert np.allclose(q[:, 0], 1.0)
    assert np.allclose(q[:, 1], 0.0)


def test_e_step_matches_direct_oracle():
    comps = [rand_params(3), rand_params(4)]
    batch = rand_batch(5, n=3)
    pi = np.array([0.3, 0.7])
    q = fedem_e_step(batch, comps, pi)
    for i in range(3):
        single = batch.subset([i])
        weights = np.array(
            [pi[m] * math.exp(-loss(comps[m], single)) for m in range(2)]
        )
        assert np.allclose(q[i], weights / weights.sum(), atol=1e-12)


@settings(deadline=None, max_examples=25)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 4))
def test_e_step_rows_stochastic(seed, m):
    rng = np.random.default_rng(seed)
    comps = [rand_params(seed + k) for k in range(m)]
    batch = rand_batch(seed, n=4)
    pi = rng.dirichlet(np.ones(m))
    q = fedem_e_step(batch, comps, pi)
    assert np.allclose(q.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(q >= 0)


# ------------------------------------------------------------------ m-step


def test_m_step_mass_on_one_component():
    comps = [rand_params(6), rand_params(7)]
    batch = rand_batch(8, n=4)
    q = np.zeros((4, 2))
    q[:, 0] = 1.0
    pi, grads = fedem_m_step(batch, comps, q)
    assert np.allclose(pi, [1.0, 0.0])
    assert np.any(grads[0] != 0)
    assert np.array_equal(grads[1], np.zeros_like(grads[1]))


def test_m_step_uniform_q():
    comps = [rand_params(1), rand_params(2), rand_params(3)]
    batch = rand_batch(4, n=5)
    pi, _ = fedem_m_step(batch, comps, np.full((5, 3), 1 / 3))
    assert np.allclose(pi, 1 / 3)


def test_m_step_matches_finite_differences():
    comps = [rand_params(10), rand_params(11)]
    batch = rand_batch(12, n=4)
    q = np.random.default_rng(13).dirichlet(np.ones(2), size=4)
    pi, grads = fedem_m_step(batch, comps, q)
    assert np.allclose(pi, q.mean(axis=0), atol=1e-12)

    step = 1e-5
    for m in range(2):
        flat = comps[m].values.copy()
        approx = np.zeros_like(flat)
        for i in range(flat.size):
            hi, lo = flat.copy(), flat.copy()
            hi[i] += step
            lo[i] -= step

            def weighted(vals):
                return loss(
                    ParamVector(vals, SPEC), batch, sample_weights=q[:, m] / len(batch)
                )

            approx[i] = (weighted(hi) - weighted(lo)) / (2 * step)
        denom = max(np.linalg.norm(grads[m]), 1e-12)
        assert np.linalg.norm(grads[m] - approx) / denom <= 1e-4


# ------------------------------------------------------------- aggregation


def test_fedavg_aggregate_fixed_point():
    params = rand_params(20)
    merged = fedavg_aggregate([params, params, params], [1, 5, 2])
    assert np.allclose(merged.values, params.values, atol=1e-15)


def test_fedavg_aggregate_symmetry():
    params = rand_params(21)
    negated = params.with_values(-params.values)
    merged = fedavg_aggregate([params, negated], [1.0, 1.0])
    assert np.allclose(merged.values, 0.0, atol=1e-15)


def test_fedavg_aggregate_weighted_oracle():
    ps = [rand_params(30 + k) for k in range(3)]
    weights = np.array([1.0, 2.0, 3.0])
    merged = fedavg_aggregate(ps, weights)
    expected = sum(w * p.values for w, p in zip(weights, ps)) / weights.sum()
    assert np.allclose(merged.values, expected, atol=1e-12)


def test_fedavg_aggregate_rejects_zero_weights():
    with pytest.raises(ValueError):
        fedavg_aggregate([rand_params(1), rand_params(2)], [0.0, 0.0])


def test_fedem_aggregate_single_client():
    comps = [rand_params(40), rand_params(41)]
    merged = fedem_aggregate([comps], [17.0])
    for got, want in zip(merged.components, comps):
        assert np.allclose(got.values, want.values, atol=1e-15)


def test_fedem_aggregate_hand_values():
    a = [rand_params(50), rand_params(51)]
    b = [rand_params(52), rand_params(53)]
    merged = fedem_aggregate([a, b], [100.0, 300.0])
    for m in range(2):
        expected = 0.25 * a[m].values + 0.75 * b[m].values
        assert np.allclose(merged.components[m].values, expected, atol=1e-12)


def test_fedem_aggregate_mismatched_components():
    with pytest.raises(ValueError):
        fedem_aggregate([[rand_params(1)], [rand_params(2), rand_params(3)]], [1.0, 1.0])


def test_aggregation_client_order_invariant():
    ps = [rand_params(60 + k) for k in range(4)]
    weights = [1.0, 2.0, 3.0, 4.0]
    merged = fedavg_aggregate(ps, weights)
    shuffled = fedavg_aggregate(ps[::-1], weights[::-1])
    assert np.allclose(merged.values, shuffled.values, atol=1e-12)


# -------------------------------------------------------- mixture predict


def test_mixture_predict_single_component():
    params = rand_params(70)
    batch = rand_batch(71, n=10)
    labels, _ = mixture_predict([params], [1.0], batch.inputs)
    assert np.array_equal(labels, predict(params, batch.inputs))


def test_mixture_predict_degenerate_pi():
    comps = [rand_params(72), rand_params(73)]
    batch = rand_batch(74, n=10)
    labels, _ = mixture_predict(comps, [1.0, 0.0], batch.inputs)
    assert np.array_equal(labels, predict(comps[0], batch.inputs))


def test_mixture_predict_matches_softmax_average():
    comps = [rand_params(75), rand_params(76)]
    inputs = np.random.default_rng(77).normal(size=(6, SPEC.input_dim))
    _, scores = mixture_predict(comps, [0.5, 0.5], inputs)
    expected = np.zeros_like(scores)
    for comp in comps:
        from pfeddef.models import forward

        logits = forward(comp, LabeledBatch(inputs, np.zeros(6, dtype=int)))
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        expected += 0.5 * e / e.sum(axis=1, keepdims=True)
    assert np.allclose(scores, expected, atol=1e-12)
    assert np.allclose(scores.sum(axis=1), 1.0, atol=1e-9)


def test_mixture_surface_input_gradient_finite_differences():
    comps = [rand_params(80), rand_params(81)]
    surface = MixtureSurface(comps, [0.4, 0.6])
    rng = np.random.default_rng(82)
    inputs = rng.normal(size=(3, SPEC.input_dim))
    labels = rng.integers(0, SPEC.num_classes, 3)
    exact = surface.grad_input(inputs, labels)
    step = 1e-6
    approx = np.zeros_like(inputs)
    for i in range(inputs.shape[0]):
        for j in range(inputs.shape[1]):
            hi, lo = inputs.copy(), inputs.copy()
            hi[i, j] += step
            lo[i, j] -= step
            per_hi = surface.loss_per_example(hi, labels)[i]
            per_lo = surface.loss_per_example(lo, labels)[i]
            approx[i, j] = (per_hi - per_lo) / (2 * step)
    assert np.linalg.norm(exact - approx) / max(np.linalg.norm(approx), 1e-12) <= 1e-4


# ------------------------------------------------------------- local epoch


def test_local_epoch_zero_lr():
    comps = [rand_params(90)]
    batch = rand_batch(91, n=8)
    out = local_epoch(comps, batch, np.ones((8, 1)), 0.0, 4, order_seed=1)
    assert np.array_equal(out[0].values, comps[0].values)


def test_local_epoch_empty_noop():
    comps = [rand_params(92)]
    empty = LabeledBatch(np.zeros((0, SPEC.input_dim)), np.zeros(0, dtype=int))
    out = local_epoch(comps, empty, np.zeros((0, 1)), 0.1, 4, order_seed=1)
    assert np.array_equal(out[0].values, comps[0].values)


def test_local_epoch_learns_separable_client():
    rng = np.random.default_rng(93)
    n = 60
    labels = rng.integers(0, 2, n)
    inputs = rng.normal(0, 0.3, (n, 4))
    inputs[:, 0] += np.where(labels == 0, -2.0, 2.0)
    batch = LabeledBatch(inputs, labels)
    spec = ArchitectureSpec(4, (8,), 2)
    comps = [init_params(spec, 0)]
    for epoch in range(50):
        comps = local_epoch(comps, batch, np.ones((n, 1)), 0.2, 16, order_seed=epoch)
    acc = np.mean(predict(comps[0], inputs) == labels)
    assert acc >= 0.95


# ------------------------------------------------------------ run_training


def train_cfg(regime, rounds=3, mixture_size=1, seed=5, lr=0.1):
    return TrainConfig(
        arch=ArchitectureSpec(8, (16,), 4),
        regime=regime,
        rounds=rounds,
        lr=lr,
        mixture_size=mixture_size,
        batch_size=16,
        seed=seed,
    )


def test_run_training_zero_rounds_returns_init():
    datasets = desk_datasets()
    fleet, reports = run_training(datasets, train_cfg("fedavg", rounds=0))
    assert reports == []
    expected = init_params(fleet.arch, __import__("pfeddef.seeding", fromlist=["derive_seed"]).derive_seed(5, "init", 0))
    assert np.array_equal(fleet.ensembles[0].components[0].values, expected.values)


def test_run_training_invalid_regime():
    with pytest.raises(ValueError):
        train_cfg("gossip")


def test_single_client_fedavg_equals_local():
    datasets = desk_datasets(clients=2)[:1]
    fed, _ = run_training(datasets, train_cfg("fedavg", rounds=1))
    loc, _ = run_training(datasets, train_cfg("local", rounds=1))
    assert np.array_equal(
        fed.ensembles[0].components[0].values, loc.ensembles[0].components[0].values
    )


def test_fedem_m1_bitwise_equals_fedavg():
    datasets = desk_datasets(clients=4, beta=0.5)
    fedem, _ = run_training(datasets, train_cfg("fedem", rounds=4, mixture_size=1))
    fedavg, _ = run_training(datasets, train_cfg("fedavg", rounds=4))
    assert np.array_equal(
        fedem.ensembles[0].components[0].values, fedavg.ensembles[0].components[0].values
    )
    assert np.array_equal(fedem.pis, fedavg.pis)


def test_run_training_deterministic():
    datasets = desk_datasets(clients=3)
    a, _ = run_training(datasets, train_cfg("fedem", rounds=3, mixture_size=2))
    b, _ = run_training(datasets, train_cfg("fedem", rounds=3, mixture_size=2))
    for m in range(2):
        assert np.array_equal(
            a.ensembles[0].components[m].values, b.ensembles[0].components[m].values
        )
    assert np.array_equal(a.pis, b.pis)


def test_pis_stay_on_simplex():
    datasets = desk_datasets(clients=4, beta=0.4)
    fleet, reports = run_training(datasets, train_cfg("fedem", rounds=5, mixture_size=2))
    assert np.all(fleet.pis >= -1e-12)
    assert np.allclose(fleet.pis.sum(axis=1), 1.0, atol=1e-9)
    for report in reports:
        assert all(np.isfinite(v) or math.isnan(v) for v in report.train_loss)


def test_empty_client_tolerated():
    datasets = desk_datasets(clients=3)
    empty = LabeledBatch(np.zeros((0, 8)), np.zeros(0, dtype=int))
    from pfeddef.data import ClientDataset

    datasets[1] = ClientDataset(empty, empty, np.zeros(0, dtype=int), np.zeros(0, dtype=int))
    fleet, reports = run_training(datasets, train_cfg("fedem", rounds=2, mixture_size=2))
    assert 1 in reports[0].skipped_clients
    assert np.allclose(fleet.pis[1], 0.5)


# ------------------------------------------------------------ local tuning


def test_local_tuning_noop_cases():
    datasets = desk_datasets(clients=2)
    comps = [rand_params(1, ArchitectureSpec(8, (16,), 4))]
    tuned, pi = local_tuning(datasets[0], comps, [1.0], epochs=0, lr=0.1, batch_size=8, seed=0)
    assert np.array_equal(tuned[0].values, comps[0].values)
    tuned, pi = local_tuning(datasets[0], comps, [1.0], epochs=3, lr=0.0, batch_size=8, seed=0)
    assert np.array_equal(tuned[0].values, comps[0].values)
    assert np.allclose(pi, [1.0])


def mean_pairwise_distance(fleet):
    dists = []
    for a in range(fleet.num_clients):
        for b in range(a + 1, fleet.num_clients):
            va = np.concatenate([c.values for c in fleet.ensembles[a].components])
            vb = np.concatenate([c.values for c in fleet.ensembles[b].components])
            dists.append(np.linalg.norm(va - vb))
    return float(np.mean(dists))


def test_tuning_increases_divergence_from_fedavg():
    datasets = desk_datasets(clients=4, beta=0.4, samples=300)
    fleet, _ = run_training(datasets, train_cfg("fedavg", rounds=5))
    before = mean_pairwise_distance(fleet)
    tuned = tune_fleet(fleet, epochs=3, lr=0.1, batch_size=16, seed=9)
    after = mean_pairwise_distance(tuned)
    assert before == 0.0
    assert after > before


# ------------------------------------------------------------- persistence


def test_checkpoint_roundtrip(tmp_path):
    datasets = desk_datasets(clients=3)
    fleet, _ = run_training(datasets, train_cfg("fedem", rounds=2, mixture_size=2))
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, fleet, round_index=2)
    loaded, round_index = load_checkpoint(path)
    assert round_index == 2
    assert loaded.regime == "fedem"
    assert np.array_equal(loaded.pis, fleet.pis)
    for m in range(2):
        assert np.array_equal(
            loaded.ensembles[0].components[m].values, fleet.ensembles[0].components[m].values
        )


def test_round_csv(tmp_path):
    datasets = desk_datasets(clients=2)
    _, reports = run_training(datasets, train_cfg("fedavg", rounds=2))
    path = tmp_path / "rounds.csv"
    write_round_csv(reports, path, include_wall_clock=False)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "round,client,train_loss,test_acc,skipped"
    assert len(lines) == 1 + 2 * 2
