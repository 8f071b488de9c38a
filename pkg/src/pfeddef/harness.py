"""Configuration-driven experiment runner.

One experiment = one dataset draw shared by several training "arms"
(regime and defense variants), followed by the configured attack suite and
boundary analysis. Everything is a pure function of (config, master seed):
per-purpose streams are derived from the master seed, reductions run in
fixed client order, and sweep workers only parallelize independent runs, so
outputs are byte-identical across re-runs and worker counts.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .attacks import (
    AttackConfig,
    blackbox_attack,
    ensemble_attack,
    fleet_transfer_evaluate,
)
from .data import (
    MixtureSpec,
    SplitConfig,
    dirichlet_split,
    generate_mixture,
    label_flip,
    partitioned_mixture,
    shared_mixture,
)
from .defense import DefenseConfig, run_pfeddef
from .fedtrain import (
    TrainConfig,
    local_epoch,
    run_training,
    save_checkpoint,
    tune_fleet,
    write_round_csv,
)
from .models import ArchitectureSpec, LabeledBatch, init_params, save_params
from .seeding import derive_rng, derive_seed

__all__ = [
    "ConfigError",
    "DataConfig",
    "ResourceConfig",
    "ArmConfig",
    "AttackSuiteConfig",
    "BoundaryConfig",
    "ExperimentConfig",
    "MetricsRecord",
    "SWEEP_AXES",
    "SCENARIOS",
    "build_scenario",
    "run_experiment",
    "run_sweep",
    "emit_report",
    "load_records",
    "apply_axis",
]


class ConfigError(ValueError):
    """Invalid experiment configuration; the message carries the field path."""


def _build(path, builder):
    try:
        return builder()
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# ----------------------------------------------------------------- configs


@dataclass(frozen=True)
class DataConfig:
    """Synthetic mixture recipe plus the non-i.i.d. split concentration."""

    layout: str = "shared"
    num_distributions: int = 2
    num_classes: int = 4
    input_dim: int = 8
    samples_per_distribution: int = 320
    separation: float = 2.0
    overlap: float = 0.6
    scale: float = 0.32
    beta: float = 1.2

    def __post_init__(self):
        if self.layout not in ("partitioned", "shared"):
            raise ValueError("layout must be 'partitioned' or 'shared'")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.samples_per_distribution < 0:
            raise ValueError("samples_per_distribution must be non-negative")

    def mixture(self) -> MixtureSpec:
        if self.layout == "partitioned":
            return partitioned_mixture(
                self.num_distributions,
                self.num_classes,
                self.input_dim,
                self.samples_per_distribution,
                separation=self.separation,
                overlap=self.overlap,
                scale=self.scale,
            )
        return shared_mixture(
            self.num_distributions,
            self.num_classes,
            self.input_dim,
            self.samples_per_distribution,
            separation=self.separation,
            scale=self.scale,
            overlap=self.overlap,
        )


@dataclass(frozen=True)
class ResourceConfig:
    """Binary rich/poor resource profile, or an explicit per-client vector."""

    rich_fraction: float = 1.0
    rich_value: float = 0.7
    poor_value: float = 0.0
    explicit: tuple | None = None

    def __post_init__(self):
        if not 0.0 <= self.rich_fraction <= 1.0:
            raise ValueError("rich_fraction must be in [0, 1]")
        for name in ("rich_value", "poor_value"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.explicit is not None:
            object.__setattr__(self, "explicit", tuple(float(v) for v in self.explicit))

    def vector(self, num_clients: int, seed: int) -> np.ndarray:
        if self.explicit is not None:
            if len(self.explicit) != num_clients:
                raise ConfigError(
                    f"resources.explicit: expected {num_clients} entries, got {len(self.explicit)}"
                )
            return np.asarray(self.explicit, dtype=np.float64)
        rich_count = int(round(self.rich_fraction * num_clients))
        values = np.full(num_clients, self.poor_value)
        rich = derive_rng(seed, "resources").choice(num_clients, size=rich_count, replace=False)
        values[rich] = self.rich_value
        return values


@dataclass(frozen=True)
class ArmConfig:
    """One training variant evaluated on the shared dataset draw.

    ``lr=None`` inherits the experiment-level rate. Mixture regimes spread
    each batch's gradient mass over their components, so they typically run
    at a higher rate than FedAvg.
    """

    name: str
    regime: str
    mixture_size: int = 1
    defended: bool = False
    propagate: bool = True
    sybil: bool = False
    lr: float | None = None

    def __post_init__(self):
        if self.regime not in ("local", "fedavg", "fedem"):
            raise ValueError("regime must be local, fedavg, or fedem")
        if self.regime in ("local", "fedavg") and self.mixture_size != 1:
            raise ValueError(f"{self.regime} arms use exactly one component")
        if self.mixture_size < 1:
            raise ValueError("mixture_size must be >= 1")
        if self.lr is not None and self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass(frozen=True)
class AttackSuiteConfig:
    """Which evaluation attacks run, and their shared PGD parameters."""

    attack: AttackConfig = field(default_factory=lambda: AttackConfig(norm="l2", budget=1.0, steps=10, step_size=0.05))
    internal: bool = True
    blackbox: bool = False
    ensemble_sizes: tuple = ()
    n_samples: int = 20

    def __post_init__(self):
        object.__setattr__(self, "ensemble_sizes", tuple(int(s) for s in self.ensemble_sizes))
        if any(s < 1 for s in self.ensemble_sizes):
            raise ValueError("ensemble sizes must be >= 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass(frozen=True)
class BoundaryConfig:
    enabled: bool = False
    kinds: tuple = ("legitimate", "adversarial")
    n_points: int = 6
    eps_max: float | None = None
    tol: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        if any(k not in ("legitimate", "adversarial") for k in self.kinds):
            raise ValueError("kinds must be legitimate/adversarial")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    arms: tuple
    num_clients: int = 8
    data: DataConfig = field(default_factory=DataConfig)
    arch_hidden: tuple = (32, 32)
    activation: str = "relu"
    rounds: int = 60
    lr: float = 0.12
    batch_size: int = 16
    defense: DefenseConfig | None = None
    attacks: AttackSuiteConfig = field(default_factory=AttackSuiteConfig)
    boundary: BoundaryConfig = field(default_factory=BoundaryConfig)
    resources: ResourceConfig = field(default_factory=ResourceConfig)
    sybil_fraction: float = 0.0
    tuning_epochs: int = 0
    seed: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(self.arms))
        object.__setattr__(self, "arch_hidden", tuple(int(d) for d in self.arch_hidden))
        self.validate()

    def validate(self):
        if not self.arms:
            raise ConfigError("arms: at least one arm is required")
        names = [arm.name for arm in self.arms]
        if len(set(names)) != len(names):
            raise ConfigError("arms: arm names must be unique")
        if self.num_clients < 2:
            raise ConfigError("num_clients: must be >= 2")
        if self.rounds < 0:
            raise ConfigError("rounds: must be non-negative")
        if self.lr < 0:
            raise ConfigError("lr: must be non-negative")
        if not 0.0 <= self.sybil_fraction < 1.0:
            raise ConfigError("sybil_fraction: must be in [0, 1)")
        if self.tuning_epochs < 0:
            raise ConfigError("tuning_epochs: must be non-negative")
        if any(arm.defended for arm in self.arms) and self.defense is None:
            raise ConfigError("defense: required when any arm is defended")

    @property
    def arch(self) -> ArchitectureSpec:
        return ArchitectureSpec(
            input_dim=self.data.input_dim,
            hidden_dims=self.arch_hidden,
            num_classes=self.data.num_classes,
            activation=self.activation,
        )

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "num_clients": self.num_clients,
            "data": {f.name: getattr(self.data, f.name) for f in fields(DataConfig)},
            "arms": [
                {f.name: getattr(arm, f.name) for f in fields(ArmConfig)} for arm in self.arms
            ],
            "arch_hidden": list(self.arch_hidden),
            "activation": self.activation,
            "rounds": self.rounds,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "defense": None if self.defense is None else self.defense.to_dict(),
            "attacks": {
                "attack": self.attacks.attack.to_dict(),
                "internal": self.attacks.internal,
                "blackbox": self.attacks.blackbox,
                "ensemble_sizes": list(self.attacks.ensemble_sizes),
                "n_samples": self.attacks.n_samples,
            },
            "boundary": {
                "enabled": self.boundary.enabled,
                "kinds": list(self.boundary.kinds),
                "n_points": self.boundary.n_points,
                "eps_max": self.boundary.eps_max,
                "tol": self.boundary.tol,
            },
            "resources": {
                "rich_fraction": self.resources.rich_fraction,
                "rich_value": self.resources.rich_value,
                "poor_value": self.resources.poor_value,
                "explicit": None
                if self.resources.explicit is None
                else list(self.resources.explicit),
            },
            "sybil_fraction": self.sybil_fraction,
            "tuning_epochs": self.tuning_epochs,
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
        kwargs = dict(data)
        if "data" in kwargs and kwargs["data"] is not None:
            kwargs["data"] = _build("data", lambda: DataConfig(**kwargs["data"]))
        if "arms" in kwargs:
            kwargs["arms"] = tuple(
                _build(f"arms[{i}]", lambda spec=spec: ArmConfig(**spec))
                for i, spec in enumerate(kwargs["arms"])
            )
        if kwargs.get("defense") is not None:
            kwargs["defense"] = _build(
                "defense", lambda: DefenseConfig.from_dict(kwargs["defense"])
            )
        if "attacks" in kwargs and kwargs["attacks"] is not None:
            spec = dict(kwargs["attacks"])
            if "attack" in spec and spec["attack"] is not None:
                spec["attack"] = _build(
                    "attacks.attack", lambda: AttackConfig.from_dict(spec["attack"])
                )
            kwargs["attacks"] = _build("attacks", lambda: AttackSuiteConfig(**spec))
        if "boundary" in kwargs and kwargs["boundary"] is not None:
            kwargs["boundary"] = _build("boundary", lambda: BoundaryConfig(**kwargs["boundary"]))
        if "resources" in kwargs and kwargs["resources"] is not None:
            kwargs["resources"] = _build(
                "resources", lambda: ResourceConfig(**kwargs["resources"])
            )
        if "arch_hidden" in kwargs:
            kwargs["arch_hidden"] = tuple(kwargs["arch_hidden"])
        return _build("config", lambda: cls(**kwargs))


# ----------------------------------------------------------------- metrics


@dataclass
class MetricsRecord:
    """Everything one arm produced, ready for CSV/JSON emission."""

    scenario: str
    arm: str
    seed: int
    axis: str | None = None
    axis_value: float | None = None
    test_acc_mean: float = float("nan")
    test_acc_clients: tuple = ()
    internal_adv_acc: float | None = None
    internal_test_acc: float | None = None
    blackbox_adv_acc: float | None = None
    blackbox_test_acc: float | None = None
    ensemble_success: dict = field(default_factory=dict)
    boundary_gap_leg: float | None = None
    boundary_gap_adv: float | None = None
    boundary_skipped: int | None = None
    propagation: tuple = ()
    max_norm_ratio: float | None = None
    runtime_s: float = 0.0

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["test_acc_clients"] = list(self.test_acc_clients)
        out["ensemble_success"] = {str(k): v for k, v in self.ensemble_success.items()}
        out["propagation"] = [
            {
                "round": r,
                "objective": obj,
                "proportions": list(props),
            }
            for r, obj, props in self.propagation
        ]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsRecord":
        kwargs = dict(data)
        kwargs["test_acc_clients"] = tuple(kwargs.get("test_acc_clients", ()))
        kwargs["ensemble_success"] = {
            int(k): v for k, v in kwargs.get("ensemble_success", {}).items()
        }
        kwargs["propagation"] = tuple(
            (entry["round"], entry["objective"], tuple(entry["proportions"]))
            for entry in kwargs.get("propagation", [])
        )
        return cls(**kwargs)


# ------------------------------------------------------------ experiment


def _train_foreign_model(cfg: ExperimentConfig, path) -> None:
    """A standalone model on a fresh draw of the same mixture: the external
    black-box surrogate, consumed through the serialized-model interface."""
    batches = generate_mixture(cfg.data.mixture(), derive_seed(cfg.seed, "foreign-data"))
    pooled = LabeledBatch(
        np.vstack([b.inputs for b in batches if len(b)]),
        np.concatenate([b.labels for b in batches if len(b)]),
    )
    params = init_params(cfg.arch, derive_seed(cfg.seed, "foreign-init"))
    weights = np.ones((len(pooled), 1))
    for epoch in range(min(cfg.rounds, 40)):
        (params,) = local_epoch(
            [params],
            pooled,
            weights,
            cfg.lr,
            cfg.batch_size,
            derive_seed(cfg.seed, "foreign-epoch", epoch),
        )
    save_params(params, path)


def _test_accuracies(surfaces, datasets):
    accs = []
    for surface, dataset in zip(surfaces, datasets):
        if len(dataset.test) == 0:
            accs.append(float("nan"))
        else:
            accs.append(float(np.mean(surface.predict(dataset.test.inputs) == dataset.test.labels)))
    return accs


def _blackbox_metrics(surfaces, datasets, foreign_path, cfg, norms_out):
    adv, clean = [], []
    for victim in range(len(surfaces)):
        pool = datasets[victim].test
        if len(pool) == 0:
            continue
        rng = derive_rng(cfg.seed, "blackbox", victim)
        take = min(cfg.attacks.n_samples, len(pool))
        picked = pool.subset(np.sort(rng.choice(len(pool), size=take, replace=False)))
        metrics = blackbox_attack(foreign_path, surfaces[victim], picked, cfg.attacks.attack)
        adv.append(metrics.adv_acc)
        clean.append(metrics.test_acc)
        norms_out.append(metrics.result.norms)
    return (float(np.mean(clean)), float(np.mean(adv))) if adv else (None, None)


def _ensemble_success_rates(surfaces, datasets, cfg, norms_out):
    """Mean victim-misclassification rate per ensemble size.

    Each cooperating adversary contributes the view of a single component
    hypothesis (adversary j uses component j mod M of its own ensemble), so
    members genuinely disagree and the averaged perturbation has to defeat
    every component the victim's mixture might lean on. For each victim, a
    seeded permutation fixes the adversary order; size k uses its first k
    entries and points from the lead adversary's test set, so different
    sizes are paired on identical points.
    """
    rates = {}
    for size in sorted(set(cfg.attacks.ensemble_sizes)):
        per_victim = []
        for victim in range(len(surfaces)):
            others = [
                c for c in range(len(surfaces)) if c != victim and len(datasets[c].test) > 0
            ]
            if len(others) < size:
                continue
            order = derive_rng(cfg.seed, "ensemble-adv", victim).permutation(len(others))
            chosen = [others[i] for i in order[:size]]
            members = [
                surfaces[c].component_surface(j % len(surfaces[c].components))
                for j, c in enumerate(chosen)
            ]
            pool = datasets[chosen[0]].test
            take = min(cfg.attacks.n_samples, len(pool))
            picked_rng = derive_rng(cfg.seed, "ensemble-points", victim)
            picked = pool.subset(np.sort(picked_rng.choice(len(pool), size=take, replace=False)))
            result = ensemble_attack(
                members,
                picked,
                cfg.attacks.attack,
                seed=derive_seed(cfg.seed, "ensemble", victim, size),
                victim=surfaces[victim],
            )
            per_victim.append(float(np.mean(result.success)))
            norms_out.append(result.norms)
        if per_victim:
            rates[size] = float(np.mean(per_victim))
    return rates


def _boundary_gaps(surfaces, datasets, cfg):
    from .boundary import fleet_boundary_report

    gaps = {"legitimate": None, "adversarial": None}
    skipped = 0
    for kind in cfg.boundary.kinds:
        report = fleet_boundary_report(
            surfaces,
            datasets,
            kind,
            cfg.boundary.n_points,
            derive_seed(cfg.seed, "boundary", kind),
            attack_cfg=cfg.attacks.attack,
            eps_max=cfg.boundary.eps_max,
            tol=cfg.boundary.tol,
        )
        gaps[kind] = report.mean_gap
        skipped += report.skipped
    return gaps["legitimate"], gaps["adversarial"], skipped


def run_experiment(cfg: ExperimentConfig, checkpoint_dir=None) -> list:
    """Run every arm of the scenario; returns one MetricsRecord per arm.

    With ``checkpoint_dir`` set, each arm's final models and per-round log
    are saved there (round logs omit wall-clock so outputs stay
    byte-reproducible).
    """
    cfg.validate()
    mixture = cfg.data.mixture()
    per_dist = generate_mixture(mixture, derive_seed(cfg.seed, "data"))
    datasets = dirichlet_split(
        per_dist, SplitConfig(cfg.num_clients, cfg.data.beta, derive_seed(cfg.seed, "split"))
    )
    resources = cfg.resources.vector(cfg.num_clients, cfg.seed)

    sybil_count = int(np.floor(cfg.sybil_fraction * cfg.num_clients))
    sybil_clients = set(
        derive_rng(cfg.seed, "sybil").choice(cfg.num_clients, size=sybil_count, replace=False)
    ) if sybil_count else set()
    sybil_datasets = [
        label_flip(d, cfg.data.num_classes, derive_seed(cfg.seed, "flip", c))
        if c in sybil_clients
        else d
        for c, d in enumerate(datasets)
    ]

    needs_foreign = cfg.attacks.blackbox
    foreign_dir = None
    if needs_foreign:
        if cfg.out_dir:
            os.makedirs(cfg.out_dir, exist_ok=True)
            foreign_path = os.path.join(cfg.out_dir, "foreign_model.params")
        else:
            foreign_dir = tempfile.TemporaryDirectory()
            foreign_path = os.path.join(foreign_dir.name, "foreign_model.params")
        _train_foreign_model(cfg, foreign_path)

    records = []
    try:
        for arm in cfg.arms:
            started = time.perf_counter()
            arm_data = sybil_datasets if arm.sybil else datasets
            train_cfg = TrainConfig(
                arch=cfg.arch,
                regime=arm.regime,
                rounds=cfg.rounds,
                lr=cfg.lr if arm.lr is None else arm.lr,
                mixture_size=arm.mixture_size,
                batch_size=cfg.batch_size,
                seed=derive_seed(cfg.seed, "train"),
            )
            if arm.defended:
                defense = replace(cfg.defense, propagate=arm.propagate)
                fleet, reports = run_pfeddef(arm_data, train_cfg, defense, resources)
            else:
                fleet, reports = run_training(arm_data, train_cfg)
            if checkpoint_dir:
                os.makedirs(checkpoint_dir, exist_ok=True)
                save_checkpoint(
                    os.path.join(checkpoint_dir, f"{arm.name}.ckpt"), fleet, cfg.rounds
                )
                write_round_csv(
                    reports,
                    os.path.join(checkpoint_dir, f"{arm.name}_rounds.csv"),
                    include_wall_clock=False,
                )
            if cfg.tuning_epochs:
                fleet = tune_fleet(
                    fleet,
                    cfg.tuning_epochs,
                    cfg.lr,
                    cfg.batch_size,
                    derive_seed(cfg.seed, "tuning"),
                )

            surfaces = fleet.surfaces()
            record = MetricsRecord(scenario=cfg.scenario, arm=arm.name, seed=cfg.seed)
            accs = _test_accuracies(surfaces, datasets)
            record.test_acc_clients = tuple(accs)
            # fleet accuracy pools all test points (weighting by test size),
            # so near-empty clients do not dominate the mean
            sizes = np.array([len(d.test) for d in datasets], dtype=np.float64)
            valid = sizes > 0
            record.test_acc_mean = float(
                np.sum(np.array(accs)[valid] * sizes[valid]) / sizes[valid].sum()
            )

            norm_budgets = []  # (norms, budget) pairs for the audit
            if cfg.attacks.internal:
                report = fleet_transfer_evaluate(
                    surfaces,
                    datasets,
                    cfg.attacks.attack,
                    cfg.attacks.n_samples,
                    derive_seed(cfg.seed, "internal"),
                )
                record.internal_adv_acc = report.adv_acc
                record.internal_test_acc = report.test_acc
                norm_budgets.extend(
                    (r.norms, cfg.attacks.attack.budget) for r in report.results
                )
            if needs_foreign:
                bb_norms = []
                record.blackbox_test_acc, record.blackbox_adv_acc = _blackbox_metrics(
                    surfaces, datasets, foreign_path, cfg, bb_norms
                )
                norm_budgets.extend((n, cfg.attacks.attack.budget) for n in bb_norms)
            if cfg.attacks.ensemble_sizes:
                ens_norms = []
                record.ensemble_success = _ensemble_success_rates(
                    surfaces, datasets, cfg, ens_norms
                )
                norm_budgets.extend((n, cfg.attacks.attack.budget) for n in ens_norms)
            if cfg.boundary.enabled:
                leg, adv, skipped = _boundary_gaps(surfaces, datasets, cfg)
                record.boundary_gap_leg = leg
                record.boundary_gap_adv = adv
                record.boundary_skipped = skipped
            if fleet.propagation_trace:
                record.propagation = tuple(
                    (
                        entry.round_index,
                        entry.plan.objective,
                        tuple(float(v) for v in entry.plan.proportions),
                    )
                    for entry in fleet.propagation_trace
                )
                norm_budgets.extend(
                    (np.array([entry.max_perturbation_norm]), cfg.defense.attack.budget)
                    for entry in fleet.propagation_trace
                )
            if norm_budgets:
                record.max_norm_ratio = max(
                    float(np.max(norms)) / budget for norms, budget in norm_budgets if len(norms)
                )
            record.runtime_s = time.perf_counter() - started
            records.append(record)
    finally:
        if foreign_dir is not None:
            foreign_dir.cleanup()
    return records


# ---------------------------------------------------------------- sweeping


def _set_data(cfg, **changes):
    return replace(cfg, data=replace(cfg.data, **changes))


def _set_defense(cfg, **changes):
    if cfg.defense is None:
        raise ConfigError("defense: sweep axis needs a defense config")
    return replace(cfg, defense=replace(cfg.defense, **changes))


def _set_defense_attack(cfg, **changes):
    if cfg.defense is None:
        raise ConfigError("defense: sweep axis needs a defense config")
    return replace(cfg, defense=replace(cfg.defense, attack=replace(cfg.defense.attack, **changes)))


SWEEP_AXES = {
    "resource_rich_fraction": lambda cfg, v: replace(
        cfg, resources=replace(cfg.resources, rich_fraction=float(v))
    ),
    "client_count": lambda cfg, v: replace(cfg, num_clients=int(v)),
    "beta": lambda cfg, v: _set_data(cfg, beta=float(v)),
    "adv_proportion": lambda cfg, v: _set_defense(cfg, global_proportion=float(v)),
    "attack_steps": lambda cfg, v: _set_defense_attack(cfg, steps=int(v)),
    "update_period": lambda cfg, v: _set_defense(cfg, update_period=int(v)),
    "ensemble_size": lambda cfg, v: replace(
        cfg, attacks=replace(cfg.attacks, ensemble_sizes=(int(v),))
    ),
    "tuning_epochs": lambda cfg, v: replace(cfg, tuning_epochs=int(v)),
    "sybil_fraction": lambda cfg, v: replace(cfg, sybil_fraction=float(v)),
}

# short aliases for the defense overhead axes
_AXIS_ALIASES = {"G": "adv_proportion", "K": "attack_steps", "Q": "update_period"}


def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    canonical = _AXIS_ALIASES.get(axis, axis)
    if canonical not in SWEEP_AXES:
        raise ConfigError(f"axis: unknown sweep axis {axis!r}")
    return SWEEP_AXES[canonical](cfg, value)


def run_sweep(cfg: ExperimentConfig, axis: str, values, workers: int = 1) -> list:
    """One run per value, same master seed throughout for paired comparison."""
    canonical = _AXIS_ALIASES.get(axis, axis)
    configs = [apply_axis(cfg, axis, value) for value in values]

    def one(pair):
        value, sub_cfg = pair
        records = run_experiment(sub_cfg)
        for record in records:
            record.axis = canonical
            record.axis_value = float(value)
        return records

    jobs = list(zip(values, configs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            nested = list(pool.map(one, jobs))
    else:
        nested = [one(job) for job in jobs]
    return [record for records in nested for record in records]


# --------------------------------------------------------------- reporting


_CSV_COLUMNS = [
    "scenario",
    "arm",
    "seed",
    "axis",
    "axis_value",
    "test_acc_mean",
    "internal_adv_acc",
    "internal_test_acc",
    "blackbox_adv_acc",
    "blackbox_test_acc",
    "boundary_gap_leg",
    "boundary_gap_adv",
    "boundary_skipped",
    "propagation_final_objective",
    "max_norm_ratio",
]


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(records, out_dir, prefix: str = "metrics") -> dict:
    """Write metrics CSV + JSON (plus propagation and sweep long-format CSV).

    The CSV carries only deterministic fields; wall-clock runtimes live in
    the JSON detail. Returns the written paths by kind.
    """
    if not records:
        raise ValueError("emit_report needs at least one record")
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    ensemble_sizes = sorted({size for r in records for size in r.ensemble_success})
    columns = _CSV_COLUMNS + [f"ensemble_success_{size}" for size in ensemble_sizes]
    csv_path = os.path.join(out_dir, f"{prefix}.csv")
    with open(csv_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for record in records:
            row = {
                "scenario": record.scenario,
                "arm": record.arm,
                "seed": record.seed,
                "axis": record.axis,
                "axis_value": record.axis_value,
                "test_acc_mean": record.test_acc_mean,
                "internal_adv_acc": record.internal_adv_acc,
                "internal_test_acc": record.internal_test_acc,
                "blackbox_adv_acc": record.blackbox_adv_acc,
                "blackbox_test_acc": record.blackbox_test_acc,
                "boundary_gap_leg": record.boundary_gap_leg,
                "boundary_gap_adv": record.boundary_gap_adv,
                "boundary_skipped": record.boundary_skipped,
                "propagation_final_objective": record.propagation[-1][1]
                if record.propagation
                else None,
                "max_norm_ratio": record.max_norm_ratio,
            }
            for size in ensemble_sizes:
                row[f"ensemble_success_{size}"] = record.ensemble_success.get(size)
            writer.writerow([_fmt(row[c]) for c in columns])
    paths["csv"] = csv_path

    json_path = os.path.join(out_dir, f"{prefix}.json")
    with open(json_path, "w") as handle:
        json.dump([r.to_dict() for r in records], handle, sort_keys=True, indent=1)
        handle.write("\n")
    paths["json"] = json_path

    if any(r.propagation for r in records):
        prop_path = os.path.join(out_dir, f"{prefix}_propagation.csv")
        with open(prop_path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["scenario", "arm", "seed", "round", "objective", "client", "proportion"])
            for record in records:
                for round_index, objective, proportions in record.propagation:
                    for client, proportion in enumerate(proportions):
                        writer.writerow(
                            [
                                record.scenario,
                                record.arm,
                                record.seed,
                                round_index,
                                repr(objective),
                                client,
                                repr(proportion),
                            ]
                        )
        paths["propagation"] = prop_path

    axes = sorted({r.axis for r in records if r.axis})
    for axis in axes:
        axis_path = os.path.join(out_dir, f"{prefix}_sweep_{axis}.csv")
        with open(axis_path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["scenario", "arm", "seed", "axis_value", "metric", "value"])
            for record in records:
                if record.axis != axis:
                    continue
                metrics = {
                    "test_acc_mean": record.test_acc_mean,
                    "internal_adv_acc": record.internal_adv_acc,
                    "blackbox_adv_acc": record.blackbox_adv_acc,
                    "boundary_gap_leg": record.boundary_gap_leg,
                    "boundary_gap_adv": record.boundary_gap_adv,
                }
                for size, rate in sorted(record.ensemble_success.items()):
                    metrics[f"ensemble_success_{size}"] = rate
                for metric, value in metrics.items():
                    if value is None:
                        continue
                    writer.writerow(
                        [
                            record.scenario,
                            record.arm,
                            record.seed,
                            repr(record.axis_value),
                            metric,
                            repr(value),
                        ]
                    )
        paths[f"sweep_{axis}"] = axis_path
    return paths


def load_records(json_path) -> list:
    with open(json_path) as handle:
        return [MetricsRecord.from_dict(entry) for entry in json.load(handle)]


# --------------------------------------------------------------- scenarios


def _default_defense() -> DefenseConfig:
    return DefenseConfig(
        global_proportion=0.3,
        attack=AttackConfig(norm="l2", budget=1.0, steps=10, step_size=0.05),
        update_period=10,
    )


def _scenario_regimes(seed):
    return ExperimentConfig(
        scenario="regimes",
        seed=seed,
        arms=(
            ArmConfig("local", "local"),
            ArmConfig("fedavg", "fedavg"),
            ArmConfig("fedem", "fedem", mixture_size=2, lr=0.24),
        ),
        attacks=AttackSuiteConfig(internal=True),
        boundary=BoundaryConfig(enabled=True),
    )


def _scenario_defense(seed):
    return ExperimentConfig(
        scenario="defense",
        seed=seed,
        arms=(
            ArmConfig("fedem", "fedem", mixture_size=2, lr=0.24),
            ArmConfig("pfeddef", "fedem", mixture_size=2, defended=True, lr=0.24),
            ArmConfig("fat", "fedavg", defended=True),
            ArmConfig("local_adv", "local", defended=True),
        ),
        defense=_default_defense(),
        attacks=AttackSuiteConfig(internal=True, blackbox=True),
    )


def _scenario_resources(seed):
    return ExperimentConfig(
        scenario="resources",
        seed=seed,
        arms=(
            ArmConfig("pfeddef_prop", "fedem", mixture_size=2, defended=True, propagate=True, lr=0.24),
            ArmConfig("pfeddef_noprop", "fedem", mixture_size=2, defended=True, propagate=False, lr=0.24),
        ),
        defense=_default_defense(),
        attacks=AttackSuiteConfig(internal=True),
        resources=ResourceConfig(rich_fraction=0.25),
    )


def _scenario_ensemble(seed):
    return ExperimentConfig(
        scenario="ensemble",
        seed=seed,
        arms=(
            ArmConfig("fedem", "fedem", mixture_size=2, lr=0.24),
            ArmConfig("pfeddef", "fedem", mixture_size=2, defended=True, lr=0.24),
        ),
        defense=_default_defense(),
        attacks=AttackSuiteConfig(internal=False, ensemble_sizes=(1, 3)),
    )


def _scenario_sybil(seed):
    arms = []
    for name, regime, m, defended in (
        ("fedem", "fedem", 2, False),
        ("fedavg", "fedavg", 1, False),
        ("pfeddef", "fedem", 2, True),
        ("fat", "fedavg", 1, True),
    ):
        lr = 0.24 if regime == "fedem" else None
        arms.append(ArmConfig(name, regime, mixture_size=m, defended=defended, lr=lr))
        arms.append(
            ArmConfig(f"{name}_sybil", regime, mixture_size=m, defended=defended, sybil=True, lr=lr)
        )
    return ExperimentConfig(
        scenario="sybil",
        seed=seed,
        arms=tuple(arms),
        defense=_default_defense(),
        attacks=AttackSuiteConfig(internal=False),
        sybil_fraction=0.25,
    )


def _scenario_tuning(seed):
    return ExperimentConfig(
        scenario="tuning",
        seed=seed,
        arms=(
            ArmConfig("fat", "fedavg", defended=True),
            ArmConfig("pfeddef", "fedem", mixture_size=2, defended=True, lr=0.24),
        ),
        defense=_default_defense(),
        attacks=AttackSuiteConfig(internal=True),
        tuning_epochs=3,
    )


def _scenario_overhead(seed):
    return ExperimentConfig(
        scenario="overhead",
        seed=seed,
        arms=(ArmConfig("pfeddef", "fedem", mixture_size=2, defended=True, lr=0.24),),
        defense=_default_defense(),
        attacks=AttackSuiteConfig(internal=True),
    )


SCENARIOS = {
    "regimes": _scenario_regimes,
    "defense": _scenario_defense,
    "resources": _scenario_resources,
    "ensemble": _scenario_ensemble,
    "sybil": _scenario_sybil,
    "tuning": _scenario_tuning,
    "overhead": _scenario_overhead,
}


def build_scenario(name: str, seed: int = 0, **overrides) -> ExperimentConfig:
    """Instantiate a built-in scenario, optionally overriding top-level
    fields (e.g. rounds=10, out_dir=...)."""
    if name not in SCENARIOS:
        raise ConfigError(f"scenario: unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    cfg = SCENARIOS[name](seed)
    return replace(cfg, **overrides) if overrides else cfg
