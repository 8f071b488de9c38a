"""Evasion attacks: multi-step PGD, ensemble averaging, and the transfer
evaluation harness for internal grey-box and external black-box attacks.

An attack "surface" is anything with ``predict(inputs)`` and
``grad_input(inputs, labels)`` (per-example gradients of its own loss);
``ModelSurface`` wraps a single classifier and ``MixtureSurface`` a client's
personalized mixture. Crafting is pure in (surface, batch, config, seed),
so batches may be attacked in parallel with per-batch derived seeds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .models import LabeledBatch, ModelSurface, load_params
from .seeding import derive_rng, derive_seed

__all__ = [
    "NORMS",
    "AttackConfig",
    "AttackResult",
    "TransferMetrics",
    "FleetTransferReport",
    "project_norm_ball",
    "pgd_attack",
    "ensemble_attack",
    "transfer_evaluate",
    "fleet_transfer_evaluate",
    "blackbox_attack",
    "perturbation_norms",
    "write_attack_csv",
]

NORMS = ("l2", "linf")


@dataclass(frozen=True)
class AttackConfig:
    """PGD parameters: ball, step schedule, and optional target label.

    ``clamp`` optionally boxes perturbed inputs to a known data range;
    synthetic features are unbounded so it defaults to off.
    """

    norm: str = "l2"
    budget: float = 1.0
    steps: int = 10
    step_size: float = 0.05
    target: int | None = None
    clamp: tuple | None = None

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if not self.budget > 0:
            raise ValueError("budget must be positive")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.clamp is not None and not self.clamp[0] < self.clamp[1]:
            raise ValueError("clamp must be an increasing (low, high) pair")

    def to_dict(self) -> dict:
        return {
            "norm": self.norm,
            "budget": self.budget,
            "steps": self.steps,
            "step_size": self.step_size,
            "target": self.target,
            "clamp": list(self.clamp) if self.clamp else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AttackConfig":
        clamp = data.get("clamp")
        return cls(
            norm=data.get("norm", "l2"),
            budget=float(data.get("budget", 1.0)),
            steps=int(data.get("steps", 10)),
            step_size=float(data.get("step_size", 0.05)),
            target=None if data.get("target") is None else int(data["target"]),
            clamp=None if clamp is None else (float(clamp[0]), float(clamp[1])),
        )


@dataclass(frozen=True, eq=False)
class AttackResult:
    """Perturbed inputs plus per-example success flags and achieved norms."""

    perturbed: np.ndarray
    success: np.ndarray
    norms: np.ndarray

    def __post_init__(self):
        if not (len(self.perturbed) == len(self.success) == len(self.norms)):
            raise ValueError("result fields must share one length")


def perturbation_norms(delta: np.ndarray, norm: str) -> np.ndarray:
    delta = np.atleast_2d(delta)
    if norm == "l2":
        return np.linalg.norm(delta, axis=1)
    return np.max(np.abs(delta), axis=1) if delta.shape[1] else np.zeros(len(delta))


def project_norm_ball(delta: np.ndarray, norm: str, budget: float) -> np.ndarray:
    """Project each perturbation row into the budget ball.

    l2: radial scaling when the row norm exceeds the budget; linf: clamp
    every coordinate to [-budget, budget]. Rows already inside come back
    unchanged.
    """
    if norm not in NORMS:
        raise ValueError(f"norm must be one of {NORMS}")
    arr = np.asarray(delta, dtype=np.float64)
    flat_input = arr.ndim == 1
    rows = np.atleast_2d(arr)
    if norm == "linf":
        out = np.clip(rows, -budget, budget)
    else:
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        factor = np.where(norms > budget, budget / np.maximum(norms, 1e-300), 1.0)
        out = rows * factor
    return out[0] if flat_input else out


def _success_flags(victim, perturbed, labels, target):
    preds = victim.predict(perturbed)
    if target is None:
        return preds != labels
    return preds == target


def pgd_attack(surface, batch: LabeledBatch, cfg: AttackConfig, seed: int = 0, victim=None):
    """Iterate x <- project(x + step_size * sign(grad)) from x0 = x.

    Untargeted attacks ascend the loss at the true labels; targeted attacks
    descend the loss at the target label. There is no random start, so the
    seed only matters to callers deriving per-batch streams. Success is
    measured against ``victim`` (the crafting surface itself by default).
    """
    del seed  # crafting is deterministic; kept for stream-derivation symmetry
    origin = batch.inputs
    labels = batch.labels
    if cfg.target is None:
        step_labels, direction = labels, 1.0
    else:
        step_labels = np.full(len(batch), cfg.target, dtype=np.int64)
        direction = -1.0
    current = origin.copy()
    for _ in range(cfg.steps):
        grad = surface.grad_input(current, step_labels)
        current = current + direction * cfg.step_size * np.sign(grad)
        delta = project_norm_ball(current - origin, cfg.norm, cfg.budget)
        current = origin + delta
        if cfg.clamp is not None:
            current = np.clip(current, cfg.clamp[0], cfg.clamp[1])
    delta = current - origin
    victim = surface if victim is None else victim
    return AttackResult(
        perturbed=current,
        success=_success_flags(victim, current, labels, cfg.target),
        norms=perturbation_norms(delta, cfg.norm),
    )


def pgd_loss_trace(surface, batch: LabeledBatch, cfg: AttackConfig):
    """Mean crafting-surface loss after each untargeted PGD step."""
    if cfg.target is not None:
        raise ValueError("loss trace is defined for untargeted attacks")
    origin, labels = batch.inputs, batch.labels
    current = origin.copy()
    trace = [surface.loss(current, labels)]
    for _ in range(cfg.steps):
        grad = surface.grad_input(current, labels)
        current = origin + project_norm_ball(
            current + cfg.step_size * np.sign(grad) - origin, cfg.norm, cfg.budget
        )
        trace.append(surface.loss(current, labels))
    return trace


def ensemble_attack(surfaces, batch: LabeledBatch, cfg: AttackConfig, seed: int = 0, victim=None):
    """Average the PGD perturbations of several adversaries, re-project the
    average into the budget, and evaluate on the victim (first adversary by
    default)."""
    surfaces = list(surfaces)
    if not surfaces:
        raise ValueError("ensemble_attack needs at least one adversary")
    deltas = np.stack(
        [pgd_attack(s, batch, cfg, seed=derive_seed(seed, "member", k)).perturbed - batch.inputs
         for k, s in enumerate(surfaces)]
    )
    averaged = project_norm_ball(deltas.mean(axis=0), cfg.norm, cfg.budget)
    perturbed = batch.inputs + averaged
    if cfg.clamp is not None:
        perturbed = np.clip(perturbed, cfg.clamp[0], cfg.clamp[1])
        averaged = perturbed - batch.inputs
    victim = surfaces[0] if victim is None else victim
    return AttackResult(
        perturbed=perturbed,
        success=_success_flags(victim, perturbed, batch.labels, cfg.target),
        norms=perturbation_norms(averaged, cfg.norm),
    )


@dataclass(frozen=True)
class TransferMetrics:
    """Victim accuracy on the same points, clean versus perturbed."""

    test_acc: float
    adv_acc: float
    result: AttackResult


def transfer_evaluate(
    adversary, victim, source_data: LabeledBatch, cfg: AttackConfig, n_samples: int, seed: int
) -> TransferMetrics:
    """Craft on the adversary's model from its own test points, send to the
    victim, and report the victim's clean and adversarial accuracy."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if len(source_data) == 0:
        raise ValueError("attacking client has no test points")
    rng = derive_rng(seed, "sample")
    take = min(n_samples, len(source_data))
    picked = source_data.subset(np.sort(rng.choice(len(source_data), size=take, replace=False)))
    result = pgd_attack(adversary, picked, cfg, seed=seed, victim=victim)
    clean_preds = victim.predict(picked.inputs)
    adv_preds = victim.predict(result.perturbed)
    return TransferMetrics(
        test_acc=float(np.mean(clean_preds == picked.labels)),
        adv_acc=float(np.mean(adv_preds == picked.labels)),
        result=result,
    )


@dataclass(frozen=True, eq=False)
class FleetTransferReport:
    """Internal attacks averaged over every ordered (adversary, victim) pair."""

    test_acc: float
    adv_acc: float
    pair_metrics: dict
    results: list


def fleet_transfer_evaluate(surfaces, datasets, cfg, n_samples, seed) -> FleetTransferReport:
    pair_metrics = {}
    results = []
    for adversary in range(len(surfaces)):
        if len(datasets[adversary].test) == 0:
            continue
        for victim in range(len(surfaces)):
            if victim == adversary:
                continue
            metrics = transfer_evaluate(
                surfaces[adversary],
                surfaces[victim],
                datasets[adversary].test,
                cfg,
                n_samples,
                derive_seed(seed, "pair", adversary, victim),
            )
            pair_metrics[(adversary, victim)] = metrics
            results.append(metrics.result)
    if not pair_metrics:
        raise ValueError("no attackable (adversary, victim) pair")
    return FleetTransferReport(
        test_acc=float(np.mean([m.test_acc for m in pair_metrics.values()])),
        adv_acc=float(np.mean([m.adv_acc for m in pair_metrics.values()])),
        pair_metrics=pair_metrics,
        results=results,
    )


def blackbox_attack(foreign_model_file, victim, batch: LabeledBatch, cfg: AttackConfig):
    """PGD crafted on a separately trained, serialized foreign model."""
    foreign = ModelSurface(load_params(foreign_model_file))
    if foreign.input_dim != batch.input_dim:
        raise ValueError("foreign model input_dim does not match the batch")
    if foreign.num_classes != victim.num_classes:
        raise ValueError("foreign model num_classes does not match the victim")
    result = pgd_attack(foreign, batch, cfg, victim=victim)
    return TransferMetrics(
        test_acc=float(np.mean(victim.predict(batch.inputs) == batch.labels)),
        adv_acc=float(np.mean(victim.predict(result.perturbed) == batch.labels)),
        result=result,
    )


def write_attack_csv(result: AttackResult, path) -> None:
    """One row per example: achieved norm and success flag."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["example", "norm", "success"])
        for i, (norm, hit) in enumerate(zip(result.norms, result.success)):
            writer.writerow([i, repr(float(norm)), int(hit)])
