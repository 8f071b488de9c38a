"""Round-based federated training: Local, FedAvg, and FedEM regimes.

One engine runs all three regimes. Internally every regime trains an
ensemble of component models with per-client mixture weights; Local and
FedAvg are the single-component case (where the E-step is exactly the
constant 1 and the weighted losses reduce bitwise to plain means), so a
FedEM run with one component is bit-identical to FedAvg under shared seeds.
Aggregation reduces clients in ascending id, which makes results independent
of worker scheduling.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .data import ClientDataset
from .models import (
    ArchitectureSpec,
    LabeledBatch,
    ModelSurface,
    ParamVector,
    _activation_grad,
    _backprop,
    _forward_cached,
    _softmax_terms,
    init_params,
)
from .seeding import derive_rng, derive_seed

__all__ = [
    "REGIMES",
    "HypothesisEnsemble",
    "ClientState",
    "RoundReport",
    "TrainConfig",
    "FleetState",
    "MixtureSurface",
    "fedavg_aggregate",
    "fedem_e_step",
    "fedem_m_step",
    "fedem_aggregate",
    "mixture_predict",
    "local_epoch",
    "run_training",
    "local_tuning",
    "tune_fleet",
    "write_round_csv",
    "save_checkpoint",
    "load_checkpoint",
]

REGIMES = ("local", "fedavg", "fedem")


@dataclass(frozen=True, eq=False)
class HypothesisEnsemble:
    """The shared component models, all on one architecture."""

    components: tuple

    def __post_init__(self):
        components = tuple(self.components)
        if not components:
            raise ValueError("ensemble needs at least one component")
        spec = components[0].spec
        if any(c.spec != spec for c in components):
            raise ValueError("all components must share one architecture")
        object.__setattr__(self, "components", components)

    @property
    def size(self) -> int:
        return len(self.components)

    @property
    def spec(self) -> ArchitectureSpec:
        return self.components[0].spec


@dataclass(eq=False)
class ClientState:
    """Per-client view: data, mixture weights, and defense bookkeeping."""

    id: int
    data: ClientDataset
    mixture_weights: np.ndarray
    resource: float = 1.0
    adv_proportion: float = 0.0

    def __post_init__(self):
        weights = np.asarray(self.mixture_weights, dtype=np.float64)
        if np.any(weights < -1e-12) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must lie on the simplex")
        if not 0.0 <= self.resource <= 1.0:
            raise ValueError("resource must be in [0, 1]")
        if self.adv_proportion > self.resource + 1e-12:
            raise ValueError("adv_proportion cannot exceed resource")
        self.mixture_weights = weights


@dataclass(frozen=True)
class RoundReport:
    round_index: int
    train_loss: tuple
    test_acc: tuple
    skipped_clients: tuple
    wall_clock: float


@dataclass(frozen=True)
class TrainConfig:
    arch: ArchitectureSpec
    regime: str
    rounds: int
    lr: float
    mixture_size: int = 1
    batch_size: int = 32
    local_epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if self.regime in ("local", "fedavg") and self.mixture_size != 1:
            raise ValueError(f"{self.regime} training uses exactly one component")
        if self.mixture_size < 1:
            raise ValueError("mixture_size must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ------------------------------------------------------------- mixture math


def _per_component_losses(components, batch: LabeledBatch) -> np.ndarray:
    """Per-example cross-entropy under each component, shape (n, M)."""
    losses = np.empty((len(batch), len(components)))
    for m, comp in enumerate(components):
        logits, _, _ = _forward_cached(comp.values, comp.spec, batch.inputs)
        losses[:, m], _ = _softmax_terms(logits, batch.labels)
    return losses


def fedem_e_step(batch: LabeledBatch, ensemble, mixture_weights) -> np.ndarray:
    """Responsibilities q[i, m] proportional to pi_m * exp(-loss_im).

    Computed in log space with max-subtraction; rows sum to one.
    """
    components = ensemble.components if isinstance(ensemble, HypothesisEnsemble) else tuple(ensemble)
    pi = np.asarray(mixture_weights, dtype=np.float64)
    losses = _per_component_losses(components, batch)
    with np.errstate(divide="ignore"):
        scores = np.log(pi)[None, :] - losses
    scores = scores - scores.max(axis=1, keepdims=True)
    q = np.exp(scores)
    q /= q.sum(axis=1, keepdims=True)
    return q


def fedem_m_step(batch: LabeledBatch, ensemble, responsibilities, sample_count=None):
    """Updated mixture weights plus each component's gradient contribution.

    The contribution for component m is the gradient of
    sum_i q[i, m] * loss_i / n, with n the client's train size.
    """
    components = ensemble.components if isinstance(ensemble, HypothesisEnsemble) else tuple(ensemble)
    q = np.asarray(responsibilities, dtype=np.float64)
    n = len(batch) if sample_count is None else sample_count
    new_pi = q.mean(axis=0)
    grads = []
    for m, comp in enumerate(components):
        flat, _ = _backprop(comp, batch, sample_weights=q[:, m] / n)
        grads.append(flat)
    return new_pi, grads


def fedavg_aggregate(params_list, weights) -> ParamVector:
    """Weighted average of parameter vectors, reduced in list order."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(params_list) != weights.size:
        raise ValueError("one weight per parameter vector required")
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    total = float(weights.sum())
    if total <= 0:
        raise ValueError("at least one weight must be positive")
    spec = params_list[0].spec
    acc = np.zeros(spec.param_count)
    for params, weight in zip(params_list, weights):
        if params.spec != spec:
            raise ValueError("parameter vectors must share one architecture")
        acc += (weight / total) * params.values
    return ParamVector(acc, spec)


def fedem_aggregate(per_client_components, weights) -> HypothesisEnsemble:
    """Average each component across clients, weighted by train-set size."""
    sizes = {len(comps) for comps in per_client_components}
    if len(sizes) != 1:
        raise ValueError("clients disagree on component count")
    (m_count,) = sizes
    merged = [
        fedavg_aggregate([comps[m] for comps in per_client_components], weights)
        for m in range(m_count)
    ]
    return HypothesisEnsemble(tuple(merged))


def _mixture_scores(components, pi, inputs) -> np.ndarray:
    """Per-class mixture scores: sum_m pi_m * softmax(logits_m)."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    scores = np.zeros((inputs.shape[0], components[0].spec.num_classes))
    for m, comp in enumerate(components):
        if pi[m] == 0.0:
            continue
        logits, _, _ = _forward_cached(comp.values, comp.spec, inputs)
        _, probs = _softmax_terms(logits, np.zeros(inputs.shape[0], dtype=np.int64))
        scores += pi[m] * probs
    return scores


def mixture_predict(ensemble, mixture_weights, inputs):
    """Labels (lowest-index tie-break) and the mixture scores behind them."""
    components = ensemble.components if isinstance(ensemble, HypothesisEnsemble) else tuple(ensemble)
    pi = np.asarray(mixture_weights, dtype=np.float64)
    scores = _mixture_scores(components, pi, inputs)
    return np.argmax(scores, axis=1), scores


class MixtureSurface:
    """Attack- and probe-facing view of one client's personalized mixture.

    The loss is the cross-entropy of the pi-weighted mixture probability,
    so input gradients flow through every component's softmax. With one
    component this is exactly the plain model surface.
    """

    def __init__(self, ensemble, mixture_weights):
        self.components = (
            ensemble.components if isinstance(ensemble, HypothesisEnsemble) else tuple(ensemble)
        )
        self.pi = np.asarray(mixture_weights, dtype=np.float64)
        if self.pi.shape != (len(self.components),):
            raise ValueError("one mixture weight per component required")

    @property
    def input_dim(self) -> int:
        return self.components[0].spec.input_dim

    @property
    def num_classes(self) -> int:
        return self.components[0].spec.num_classes

    def predict(self, inputs) -> np.ndarray:
        labels, _ = mixture_predict(self.components, self.pi, inputs)
        return labels

    def _true_class_scores(self, inputs, labels):
        scores = _mixture_scores(self.components, self.pi, inputs)
        picked = scores[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)]
        return np.maximum(picked, np.finfo(np.float64).tiny)

    def loss(self, inputs, labels) -> float:
        return float(np.mean(-np.log(self._true_class_scores(inputs, labels))))

    def loss_per_example(self, inputs, labels) -> np.ndarray:
        return -np.log(self._true_class_scores(inputs, labels))

    def grad_input(self, inputs, labels) -> np.ndarray:
        """Rows are gradients of each example's own mixture loss."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        labels = np.asarray(labels, dtype=np.int64).ravel()
        n = inputs.shape[0]
        idx = np.arange(n)
        true_score = self._true_class_scores(inputs, labels)
        grad = np.zeros_like(inputs)
        for m, comp in enumerate(self.components):
            if self.pi[m] == 0.0:
                continue
            logits, layers, layer_inputs = _forward_cached(comp.values, comp.spec, inputs)
            _, probs = _softmax_terms(logits, labels)
            # d(-log s_y)/d logits_m = (pi_m p_m[y] / s_y) * (p_m - e_y)
            coeff = self.pi[m] * probs[idx, labels] / true_score
            delta = probs * coeff[:, None]
            delta[idx, labels] -= coeff
            for index in range(len(layers) - 1, -1, -1):
                weight, _ = layers[index]
                delta = delta @ weight.T
                if index > 0:
                    delta = delta * _activation_grad(comp.spec.activation, layer_inputs[index])
            grad += delta
        return grad

    def component_surface(self, m: int) -> ModelSurface:
        """Single-component view, for attacks that skip the mixture."""
        return ModelSurface(self.components[m])


# ---------------------------------------------------------------- training


def local_epoch(components, train: LabeledBatch, responsibilities, lr, batch_size, order_seed):
    """One epoch of responsibility-weighted mini-batch SGD.

    Batch order is a seeded shuffle; responsibilities are the ones computed
    at epoch start. Returns fresh parameter vectors; empty train sets are a
    no-op.
    """
    components = list(components)
    n = len(train)
    if n == 0 or lr == 0.0:
        return components
    q = np.asarray(responsibilities, dtype=np.float64)
    order = np.random.default_rng(order_seed).permutation(n)
    values = [comp.values.copy() for comp in components]
    spec = components[0].spec
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        sub = train.subset(idx)
        inv = 1.0 / idx.size
        for m in range(len(components)):
            flat, _ = _backprop(
                ParamVector(values[m], spec), sub, sample_weights=q[idx, m] * inv
            )
            values[m] -= lr * flat
    return [ParamVector(vals, spec) for vals in values]


@dataclass(eq=False)
class FleetState:
    """Trained models for every client plus their mixture weights."""

    regime: str
    arch: ArchitectureSpec
    ensembles: list
    pis: np.ndarray
    datasets: list
    propagation_trace: list = field(default_factory=list)

    @property
    def num_clients(self) -> int:
        return len(self.ensembles)

    @property
    def mixture_size(self) -> int:
        return self.ensembles[0].size

    def surface(self, client: int) -> MixtureSurface:
        return MixtureSurface(self.ensembles[client], self.pis[client])

    def surfaces(self) -> list:
        return [self.surface(c) for c in range(self.num_clients)]


class _RoundView:
    """What a dataset hook may see mid-round: live weights and surfaces."""

    def __init__(self, engine):
        self._engine = engine
        self.pis = engine.pis
        self.sizes = engine.sizes
        self.benign_train = engine.benign_train

    def surface(self, client: int) -> MixtureSurface:
        return MixtureSurface(self._engine.components_for(client), self._engine.pis[client])


class _Engine:
    def __init__(self, datasets, cfg: TrainConfig):
        self.cfg = cfg
        self.datasets = list(datasets)
        self.sizes = np.array([len(d.train) for d in self.datasets], dtype=np.float64)
        if self.sizes.sum() == 0:
            raise ValueError("every client is empty; nothing to train")
        m_count = cfg.mixture_size
        base = [init_params(cfg.arch, derive_seed(cfg.seed, "init", m)) for m in range(m_count)]
        if cfg.regime == "local":
            self.client_components = [list(base) for _ in self.datasets]
            self.shared = None
        else:
            self.shared = list(base)
        self.pis = np.full((len(self.datasets), m_count), 1.0 / m_count)
        self.benign_train = [d.train for d in self.datasets]
        self.current_train = list(self.benign_train)

    def components_for(self, client: int):
        if self.shared is not None:
            return self.shared
        return self.client_components[client]

    def run(self, dataset_hook=None):
        cfg = self.cfg
        reports = []
        for round_index in range(cfg.rounds):
            started = time.perf_counter()
            if dataset_hook is not None:
                replacement = dataset_hook(round_index, _RoundView(self))
                if replacement is not None:
                    self.current_train = list(replacement)
            updated, skipped = [], []
            for client in range(len(self.datasets)):
                components = [comp for comp in self.components_for(client)]
                train = self.current_train[client]
                if len(train) == 0:
                    skipped.append(client)
                else:
                    q = fedem_e_step(train, components, self.pis[client])
                    self.pis[client] = q.mean(axis=0)
                    for _ in range(cfg.local_epochs):
                        components = local_epoch(
                            components,
                            train,
                            q,
                            cfg.lr,
                            cfg.batch_size,
                            derive_seed(cfg.seed, "shuffle", round_index, client),
                        )
                updated.append(components)
            if cfg.regime == "local":
                self.client_components = updated
            else:
                merged = fedem_aggregate(updated, self.sizes)
                self.shared = list(merged.components)
            reports.append(self._report(round_index, skipped, started))
        return reports

    def _report(self, round_index, skipped, started):
        losses, accuracies = [], []
        for client in range(len(self.datasets)):
            surface = MixtureSurface(self.components_for(client), self.pis[client])
            train = self.current_train[client]
            test = self.datasets[client].test
            losses.append(
                surface.loss(train.inputs, train.labels) if len(train) else float("nan")
            )
            accuracies.append(
                float(np.mean(surface.predict(test.inputs) == test.labels))
                if len(test)
                else float("nan")
            )
        return RoundReport(
            round_index=round_index,
            train_loss=tuple(losses),
            test_acc=tuple(accuracies),
            skipped_clients=tuple(skipped),
            wall_clock=time.perf_counter() - started,
        )

    def fleet(self) -> FleetState:
        if self.shared is not None:
            shared = HypothesisEnsemble(tuple(self.shared))
            ensembles = [shared for _ in self.datasets]
        else:
            ensembles = [HypothesisEnsemble(tuple(comps)) for comps in self.client_components]
        return FleetState(
            regime=self.cfg.regime,
            arch=self.cfg.arch,
            ensembles=ensembles,
            pis=self.pis.copy(),
            datasets=self.datasets,
        )


def run_training(datasets, cfg: TrainConfig, dataset_hook=None):
    """Execute the configured regime; returns (fleet, per-round reports).

    ``dataset_hook(round_index, view)`` may replace the training sets seen
    from that round on (the defense uses this for adversarial augmentation);
    ``None`` keeps the current ones.
    """
    engine = _Engine(datasets, cfg)
    reports = engine.run(dataset_hook)
    return engine.fleet(), reports


def local_tuning(dataset, ensemble, mixture_weights, epochs, lr, batch_size, seed):
    """Private continuation: E/M plus SGD epochs with no aggregation.

    Returns a tuned (components, mixture_weights) pair; the inputs are left
    untouched, matching tuning updates never being shared.
    """
    components = list(
        ensemble.components if isinstance(ensemble, HypothesisEnsemble) else ensemble
    )
    pi = np.asarray(mixture_weights, dtype=np.float64).copy()
    train = dataset.train
    if len(train) == 0 or epochs == 0 or lr == 0.0:
        return components, pi
    for epoch in range(epochs):
        q = fedem_e_step(train, components, pi)
        pi = q.mean(axis=0)
        components = local_epoch(
            components, train, q, lr, batch_size, derive_seed(seed, "tune", epoch)
        )
    return components, pi


def tune_fleet(fleet: FleetState, epochs, lr, batch_size, seed) -> FleetState:
    """Locally tune every client, giving each a private ensemble copy."""
    ensembles, pis = [], []
    for client in range(fleet.num_clients):
        components, pi = local_tuning(
            fleet.datasets[client],
            fleet.ensembles[client],
            fleet.pis[client],
            epochs,
            lr,
            batch_size,
            derive_seed(seed, "client", client),
        )
        ensembles.append(HypothesisEnsemble(tuple(components)))
        pis.append(pi)
    return FleetState(
        regime=fleet.regime,
        arch=fleet.arch,
        ensembles=ensembles,
        pis=np.vstack(pis),
        datasets=fleet.datasets,
        propagation_trace=list(fleet.propagation_trace),
    )


# -------------------------------------------------------------- persistence


def write_round_csv(reports, path, include_wall_clock=True) -> None:
    """Long-format round log: one row per (round, client)."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        header = ["round", "client", "train_loss", "test_acc", "skipped"]
        if include_wall_clock:
            header.append("wall_clock")
        writer.writerow(header)
        for report in reports:
            for client, (loss_value, acc) in enumerate(zip(report.train_loss, report.test_acc)):
                row = [
                    report.round_index,
                    client,
                    repr(loss_value),
                    repr(acc),
                    int(client in report.skipped_clients),
                ]
                if include_wall_clock:
                    row.append(repr(report.wall_clock))
                writer.writerow(row)


_CHECKPOINT_FORMAT = "pfeddef-checkpoint-v1"


def save_checkpoint(path, fleet: FleetState, round_index: int) -> None:
    """JSON header (regime, architecture, mixture weights, round) followed by
    the flat float64 payload of every stored component."""
    shared = all(e is fleet.ensembles[0] for e in fleet.ensembles)
    header = {
        "format": _CHECKPOINT_FORMAT,
        "regime": fleet.regime,
        "arch": fleet.arch.to_dict(),
        "mixture_size": fleet.mixture_size,
        "num_clients": fleet.num_clients,
        "shared": shared,
        "pis": [[float(v) for v in row] for row in fleet.pis],
        "round_index": int(round_index),
    }
    stored = [fleet.ensembles[0]] if shared else fleet.ensembles
    with open(path, "wb") as handle:
        handle.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for ensemble in stored:
            for comp in ensemble.components:
                handle.write(comp.values.astype("<f8").tobytes())


def load_checkpoint(path):
    """Load (fleet, round_index); the fleet has no datasets attached."""
    with open(path, "rb") as handle:
        header = json.loads(handle.readline().decode("utf-8"))
        payload = handle.read()
    if header.get("format") != _CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {_CHECKPOINT_FORMAT} file")
    arch = ArchitectureSpec.from_dict(header["arch"])
    values = np.frombuffer(payload, dtype="<f8")
    m_count = header["mixture_size"]
    stored = 1 if header["shared"] else header["num_clients"]
    expected = stored * m_count * arch.param_count
    if values.size != expected:
        raise ValueError(f"{path}: payload length does not match header")
    ensembles = []
    offset = 0
    for _ in range(stored):
        components = []
        for _ in range(m_count):
            components.append(ParamVector(values[offset : offset + arch.param_count].copy(), arch))
            offset += arch.param_count
        ensembles.append(HypothesisEnsemble(tuple(components)))
    if header["shared"]:
        ensembles = [ensembles[0]] * header["num_clients"]
    fleet = FleetState(
        regime=header["regime"],
        arch=arch,
        ensembles=ensembles,
        pis=np.asarray(header["pis"], dtype=np.float64),
        datasets=[],
    )
    return fleet, header["round_index"]
