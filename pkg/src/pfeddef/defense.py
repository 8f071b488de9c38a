"""Adversarial-training defense with resource-aware robustness propagation.

Every ``update_period`` rounds each client rebuilds its training set so that
a fraction of points is replaced by PGD-perturbed copies crafted on its own
current personalized mixture. The per-client fractions come from the
propagation step: clients start at min(resource, global proportion), and
clients with headroom are then sampled (without replacement, seeded) and
raised in fixed increments while that strictly reduces the per-distribution
mass mismatch, so the objective never increases and no client exceeds its
resource cap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, perturbation_norms, pgd_attack
from .data import ClientDataset
from .fedtrain import FleetState, TrainConfig, run_training
from .models import LabeledBatch
from .seeding import derive_rng, derive_seed

__all__ = [
    "DefenseConfig",
    "PropagationPlan",
    "DefenseRoundTrace",
    "propagation_objective",
    "adv_prop",
    "update_advdataset",
    "run_pfeddef",
]

_EPS = 1e-12


@dataclass(frozen=True)
class DefenseConfig:
    """Knobs of the periodic adversarial augmentation.

    ``global_proportion`` is the desired adversarial share of every train
    set; ``attack`` parameterizes the training-time PGD; ``increment`` and
    ``passes`` drive the propagation heuristic (``passes=None`` samples each
    eligible client once). ``propagate=False`` pins every client at
    min(resource, global_proportion) for ablation runs.
    """

    global_proportion: float
    attack: AttackConfig
    update_period: int = 10
    increment: float = 0.05
    passes: int | None = None
    propagate: bool = True

    def __post_init__(self):
        if not 0.0 <= self.global_proportion <= 1.0:
            raise ValueError("global_proportion must be in [0, 1]")
        if self.update_period < 1:
            raise ValueError("update_period must be >= 1")
        if not 0.0 < self.increment <= 1.0:
            raise ValueError("increment must be in (0, 1]")
        if self.passes is not None and self.passes < 0:
            raise ValueError("passes must be non-negative")

    def to_dict(self) -> dict:
        return {
            "global_proportion": self.global_proportion,
            "attack": self.attack.to_dict(),
            "update_period": self.update_period,
            "increment": self.increment,
            "passes": self.passes,
            "propagate": self.propagate,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DefenseConfig":
        return cls(
            global_proportion=float(data["global_proportion"]),
            attack=AttackConfig.from_dict(data["attack"]),
            update_period=int(data.get("update_period", 10)),
            increment=float(data.get("increment", 0.05)),
            passes=None if data.get("passes") is None else int(data["passes"]),
            propagate=bool(data.get("propagate", True)),
        )


@dataclass(frozen=True, eq=False)
class PropagationPlan:
    """Per-client adversarial proportions plus the mismatch they leave."""

    proportions: np.ndarray
    objective: float
    objective_trace: tuple

    def __post_init__(self):
        object.__setattr__(
            self, "proportions", np.asarray(self.proportions, dtype=np.float64)
        )


@dataclass(frozen=True)
class DefenseRoundTrace:
    """One augmentation event: the plan used and the largest perturbation
    it actually wrote into any train set."""

    round_index: int
    plan: PropagationPlan
    max_perturbation_norm: float


def propagation_objective(proportions, client_sizes, mixture_weights, global_proportion) -> float:
    """Summed absolute gap, per underlying distribution, between the
    adversarial mass clients contribute to it and the target share of its
    total mass."""
    f = np.asarray(proportions, dtype=np.float64)
    sizes = np.asarray(client_sizes, dtype=np.float64)
    pis = np.atleast_2d(np.asarray(mixture_weights, dtype=np.float64))
    mass = (f * sizes) @ pis
    target = global_proportion * (sizes @ pis)
    return float(np.sum(np.abs(mass - target)))


def adv_prop(
    global_proportion,
    resources,
    client_sizes,
    mixture_weights,
    increment=0.05,
    passes=None,
    seed=0,
) -> PropagationPlan:
    """Allocate per-client adversarial proportions under resource caps.

    Starts from min(resource, global_proportion), then visits clients with
    headroom in a seeded order (each at most once) and raises each one in
    ``increment`` steps while the objective strictly decreases and the cap
    allows. The recorded objective trace is non-increasing by construction.
    """
    resources = np.asarray(resources, dtype=np.float64)
    sizes = np.asarray(client_sizes, dtype=np.float64)
    pis = np.atleast_2d(np.asarray(mixture_weights, dtype=np.float64))
    if np.any(resources < 0) or np.any(resources > 1):
        raise ValueError("resources must lie in [0, 1]")

    proportions = np.minimum(resources, global_proportion)
    objective = propagation_objective(proportions, sizes, pis, global_proportion)
    trace = [objective]

    eligible = np.flatnonzero(resources > proportions + _EPS)
    rng = derive_rng(seed, "advprop")
    order = eligible[rng.permutation(eligible.size)]
    if passes is not None:
        order = order[:passes]

    for client in order:
        while proportions[client] < resources[client] - _EPS:
            candidate = min(proportions[client] + increment, resources[client], 1.0)
            trial = proportions.copy()
            trial[client] = candidate
            trial_objective = propagation_objective(trial, sizes, pis, global_proportion)
            if trial_objective < objective - _EPS:
                proportions = trial
                objective = trial_objective
                trace.append(objective)
            else:
                break
    return PropagationPlan(proportions, objective, tuple(trace))


def update_advdataset(
    dataset: ClientDataset, surface, adv_proportion, attack_cfg: AttackConfig, seed
) -> ClientDataset:
    """Rebuild the train set with a seeded sample of points replaced by
    PGD-perturbed copies (labels kept), crafted on the client's current
    model. Always starts from the benign set, so earlier augmentations are
    discarded rather than compounded."""
    if not 0.0 <= adv_proportion <= 1.0:
        raise ValueError("adv_proportion must be in [0, 1]")
    train = dataset.train
    count = int(np.floor(adv_proportion * len(train)))
    if count == 0:
        return dataset
    rng = derive_rng(seed, "advdata")
    picked = np.sort(rng.choice(len(train), size=count, replace=False))
    crafted = pgd_attack(surface, train.subset(picked), attack_cfg, seed=seed)
    inputs = train.inputs.copy()
    inputs[picked] = crafted.perturbed
    return dataset.with_train(LabeledBatch(inputs, train.labels))


def run_pfeddef(datasets, train_cfg: TrainConfig, defense: DefenseConfig, resources):
    """Full defended training loop.

    Every ``update_period`` rounds: recompute the propagation plan from the
    live mixture weights, regenerate each client's adversarial train set,
    then run the configured regime on the augmented data. FedEM gives the
    personalized defense, FedAvg gives plain federated adversarial training,
    and Local gives local adversarial training. The plan history lands in
    ``fleet.propagation_trace``.
    """
    resources = np.asarray(resources, dtype=np.float64)
    if resources.shape != (len(datasets),):
        raise ValueError("one resource cap per client required")
    trace = []

    def hook(round_index, view):
        if round_index % defense.update_period != 0:
            return None
        if defense.propagate:
            plan = adv_prop(
                defense.global_proportion,
                resources,
                view.sizes,
                view.pis,
                increment=defense.increment,
                passes=defense.passes,
                seed=derive_seed(train_cfg.seed, "advprop", round_index),
            )
        else:
            pinned = np.minimum(resources, defense.global_proportion)
            objective = propagation_objective(
                pinned, view.sizes, view.pis, defense.global_proportion
            )
            plan = PropagationPlan(pinned, objective, (objective,))
        trains = []
        max_norm = 0.0
        for client, dataset in enumerate(datasets):
            augmented = update_advdataset(
                dataset,
                view.surface(client),
                plan.proportions[client],
                defense.attack,
                seed=derive_seed(train_cfg.seed, "augment", round_index, client),
            )
            if len(dataset.train):
                deltas = augmented.train.inputs - dataset.train.inputs
                norms = perturbation_norms(deltas, defense.attack.norm)
                max_norm = max(max_norm, float(norms.max()))
            trains.append(augmented.train)
        trace.append(DefenseRoundTrace(round_index, plan, max_norm))
        return trains

    fleet, reports = run_training(datasets, train_cfg, dataset_hook=hook)
    fleet.propagation_trace = trace
    return fleet, reports
