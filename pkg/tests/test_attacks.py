import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfeddef.attacks import (
    AttackConfig,
    blackbox_attack,
    ensemble_attack,
    fleet_transfer_evaluate,
    pgd_attack,
    pgd_loss_trace,
    perturbation_norms,
    project_norm_ball,
    transfer_evaluate,
    write_attack_csv,
)
from pfeddef.models import (
    ArchitectureSpec,
    LabeledBatch,
    ModelSurface,
    ParamVector,
    init_params,
    save_params,
    sgd_step,
)

RNG = np.random.default_rng(31)


def linear_sign_model():
    """1-D two-class model predicting class 0 exactly when x >= 0."""
    spec = ArchitectureSpec(1, (), 2)
    return ModelSurface(ParamVector(np.array([1.0, -1.0, 0.0, 0.0]), spec))


def trained_surface(seed=0, n=200):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    inputs = rng.normal(0, 0.3, (n, 3))
    inputs[:, 0] += np.where(labels == 0, -1.0, 1.0)
    batch = LabeledBatch(inputs, labels)
    params = init_params(ArchitectureSpec(3, (8,), 2), seed)
    for _ in range(80):
        params = sgd_step(params, batch, 0.3)
    return ModelSurface(params), batch


# -------------------------------------------------------------- projection


def test_project_inside_unchanged():
    delta = np.array([[0.3, -0.2], [0.1, 0.0]])
    assert np.array_equal(project_norm_ball(delta, "l2", 1.0), delta)
    assert np.array_equal(project_norm_ball(delta, "linf", 0.5), delta)


def test_project_l2_scales_to_budget():
    delta = np.array([3.0, 4.0])  # norm 5
    out = project_norm_ball(delta, "l2", 2.5)
    assert np.linalg.norm(out) == pytest.approx(2.5, abs=1e-12)
    assert np.allclose(out, delta / 2.0)


def test_project_linf_clamps():
    out = project_norm_ball(np.array([3.0, -0.5]), "linf", 1.0)
    assert np.array_equal(out, np.array([1.0, -0.5]))


@settings(deadline=None, max_examples=50)
@given(
    seed=st.integers(0, 10_000),
    norm=st.sampled_from(["l2", "linf"]),
    budget=st.floats(0.01, 10.0),
)
def test_project_always_within_budget_and_idempotent(seed, norm, budget):
    delta = np.random.default_rng(seed).normal(0, 5, (4, 3))
    out = project_norm_ball(delta, norm, budget)
    assert np.all(perturbation_norms(out, norm) <= budget + 1e-9)
    assert np.allclose(project_norm_ball(out, norm, budget), out, atol=1e-12)


# --------------------------------------------------------------------- pgd


def test_pgd_zero_steps():
    surface, batch = trained_surface()
    cfg = AttackConfig(norm="l2", budget=1.0, steps=0, step_size=0.1)
    result = pgd_attack(surface, batch, cfg)
    assert np.array_equal(result.perturbed, batch.inputs)
    assert np.array_equal(result.success, surface.predict(batch.inputs) != batch.labels)
    assert np.all(result.norms == 0.0)


def test_pgd_constant_model_no_motion():
    spec = ArchitectureSpec(3, (4,), 2)
    surface = ModelSurface(ParamVector(np.zeros(spec.param_count), spec))
    batch = LabeledBatch(RNG.normal(size=(5, 3)), RNG.integers(0, 2, 5))
    cfg = AttackConfig(norm="linf", budget=0.5, steps=7, step_size=0.1)
    result = pgd_attack(surface, batch, cfg)
    assert np.array_equal(result.perturbed, batch.inputs)


def test_pgd_linear_flip_step_count():
    # prediction flips once x crosses 0, i.e. after ceil(margin/alpha) steps
    surface = linear_sign_model()
    margin, alpha = 0.33, 0.1
    batch = LabeledBatch(np.array([[margin]]), [0])
    needed = math.ceil(margin / alpha)
    for steps in range(6):
        cfg = AttackConfig(norm="l2", budget=100.0, steps=steps, step_size=alpha)
        result = pgd_attack(surface, batch, cfg)
        assert bool(result.success[0]) == (steps >= needed)
        assert result.perturbed[0, 0] == pytest.approx(margin - steps * alpha, abs=1e-12)


def test_pgd_budget_invariant():
    surface, batch = trained_surface()
    for norm in ("l2", "linf"):
        cfg = AttackConfig(norm=norm, budget=0.4, steps=12, step_size=0.08)
        result = pgd_attack(surface, batch, cfg)
        assert np.all(result.norms <= 0.4 + 1e-9)


def test_pgd_deterministic():
    surface, batch = trained_surface()
    cfg = AttackConfig(norm="l2", budget=1.0, steps=10, step_size=0.05)
    a = pgd_attack(surface, batch, cfg, seed=3)
    b = pgd_attack(surface, batch, cfg, seed=3)
    assert np.array_equal(a.perturbed, b.perturbed)


def test_pgd_targeted_hits_target():
    surface = linear_sign_model()
    batch = LabeledBatch(np.array([[0.5]]), [0])
    cfg = AttackConfig(norm="l2", budget=10.0, steps=20, step_size=0.1, target=1)
    result = pgd_attack(surface, batch, cfg)
    assert bool(result.success[0])
    assert surface.predict(result.perturbed)[0] == 1


def test_pgd_clamp_box():
    surface = linear_sign_model()
    batch = LabeledBatch(np.array([[0.2]]), [0])
    cfg = AttackConfig(norm="linf", budget=5.0, steps=10, step_size=1.0, clamp=(0.0, 1.0))
    result = pgd_attack(surface, batch, cfg)
    assert 0.0 <= result.perturbed[0, 0] <= 1.0


def test_pgd_loss_trace_monotone_small_steps():
    surface, batch = trained_surface()
    cfg = AttackConfig(norm="l2", budget=1.0, steps=15, step_size=0.01)
    trace = pgd_loss_trace(surface, batch, cfg)
    diffs = np.diff(trace)
    assert np.all(diffs >= -1e-12)


# ---------------------------------------------------------------- ensemble


class StubSurface:
    """Fixed-gradient surface for ensemble arithmetic checks."""

    def __init__(self, gradient, labels_out=1):
        self.gradient = np.asarray(gradient, dtype=np.float64)
        self.labels_out = labels_out

    def predict(self, inputs):
        return np.full(len(np.atleast_2d(inputs)), self.labels_out, dtype=np.int64)

    def grad_input(self, inputs, labels):
        return np.tile(self.gradient, (len(np.atleast_2d(inputs)), 1))


def test_ensemble_single_adversary_matches_pgd():
    surface, batch = trained_surface()
    cfg = AttackConfig(norm="l2", budget=0.8, steps=8, step_size=0.05)
    single = pgd_attack(surface, batch, cfg)
    combined = ensemble_attack([surface], batch, cfg)
    assert np.array_equal(single.perturbed, combined.perturbed)
    assert np.array_equal(single.success, combined.success)


def test_ensemble_opposite_gradients_cancel():
    batch = LabeledBatch(RNG.normal(size=(4, 2)), np.zeros(4, dtype=int))
    cfg = AttackConfig(norm="linf", budget=1.0, steps=5, step_size=0.1)
    up = StubSurface([1.0, 1.0])
    down = StubSurface([-1.0, -1.0])
    result = ensemble_attack([up, down], batch, cfg)
    assert np.allclose(result.perturbed, batch.inputs, atol=1e-12)
    assert np.all(result.norms <= 1e-12)


def test_ensemble_requires_adversaries():
    batch = LabeledBatch(np.zeros((1, 2)), [0])
    with pytest.raises(ValueError):
        ensemble_attack([], batch, AttackConfig(budget=1.0))


def test_ensemble_budget_invariant():
    s1, batch = trained_surface(1)
    s2, _ = trained_surface(2)
    cfg = AttackConfig(norm="l2", budget=0.5, steps=10, step_size=0.1)
    result = ensemble_attack([s1, s2], batch, cfg)
    assert np.all(result.norms <= 0.5 + 1e-9)


# ---------------------------------------------------------------- transfer


def test_transfer_zero_steps_accuracies_equal():
    adversary, batch = trained_surface(5)
    victim, _ = trained_surface(6)
    cfg = AttackConfig(norm="l2", budget=1.0, steps=0, step_size=0.1)
    metrics = transfer_evaluate(adversary, victim, batch, cfg, n_samples=50, seed=0)
    assert metrics.adv_acc == metrics.test_acc


def test_transfer_whitebox_strong_attack_kills_accuracy():
    surface, batch = trained_surface(7)
    cfg = AttackConfig(norm="l2", budget=6.0, steps=30, step_size=0.2)
    metrics = transfer_evaluate(surface, surface, batch, cfg, n_samples=80, seed=1)
    assert metrics.adv_acc <= 0.02
    assert metrics.test_acc > 0.9


def test_transfer_requires_points():
    surface, _ = trained_surface(8)
    empty = LabeledBatch(np.zeros((0, 3)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        transfer_evaluate(surface, surface, empty, AttackConfig(budget=1.0), 5, 0)


def test_fleet_transfer_skips_self_pairs():
    surfaces = [trained_surface(k)[0] for k in range(3)]

    class FakeDataset:
        def __init__(self, test):
            self.test = test

    datasets = [FakeDataset(trained_surface(k)[1]) for k in range(3)]
    cfg = AttackConfig(norm="l2", budget=0.5, steps=5, step_size=0.05)
    report = fleet_transfer_evaluate(surfaces, datasets, cfg, n_samples=10, seed=4)
    assert len(report.pair_metrics) == 6
    assert all(a != v for a, v in report.pair_metrics)
    assert 0.0 <= report.adv_acc <= report.test_acc + 1e-9


# ---------------------------------------------------------------- blackbox


def test_blackbox_same_file_is_whitebox(tmp_path):
    surface, batch = trained_surface(9)
    path = tmp_path / "foreign.params"
    save_params(surface.params, path)
    cfg = AttackConfig(norm="l2", budget=2.0, steps=10, step_size=0.1)
    metrics = blackbox_attack(path, surface, batch, cfg)
    direct = pgd_attack(surface, batch, cfg)
    assert np.array_equal(metrics.result.perturbed, direct.perturbed)


def test_blackbox_constant_foreign_model(tmp_path):
    spec = ArchitectureSpec(3, (), 2)
    constant = ParamVector(np.zeros(spec.param_count), spec)
    path = tmp_path / "foreign.params"
    save_params(constant, path)
    victim, batch = trained_surface(10)
    cfg = AttackConfig(norm="l2", budget=2.0, steps=10, step_size=0.1)
    metrics = blackbox_attack(path, victim, batch, cfg)
    assert metrics.adv_acc == metrics.test_acc


def test_blackbox_spec_mismatch(tmp_path):
    spec = ArchitectureSpec(5, (), 2)
    save_params(init_params(spec, 0), tmp_path / "foreign.params")
    victim, batch = trained_surface(11)
    with pytest.raises(ValueError):
        blackbox_attack(tmp_path / "foreign.params", victim, batch, AttackConfig(budget=1.0))


def test_attack_csv(tmp_path):
    surface, batch = trained_surface(12)
    result = pgd_attack(surface, batch, AttackConfig(norm="l2", budget=0.5, steps=3, step_size=0.1))
    path = tmp_path / "attack.csv"
    write_attack_csv(result, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "example,norm,success"
    assert len(lines) == 1 + len(batch)
