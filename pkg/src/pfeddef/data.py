"""Synthetic non-i.i.d. data: class-conditional Gaussian mixtures split
across clients with a Dirichlet allocation.

Each of the M underlying distributions is a set of class-conditional
Gaussians. Two layouts are provided: ``partitioned`` assigns each class to
exactly one distribution (distributions occupy their own label subsets, with
a controllable overlap between the feature clouds of different
distributions), while ``shared`` gives every distribution all classes but
cyclically reassigns which mean belongs to which label, so the same feature
cloud carries conflicting labels across distributions.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .models import LabeledBatch
from .seeding import derive_rng

__all__ = [
    "MixtureSpec",
    "SplitConfig",
    "ClientDataset",
    "partitioned_mixture",
    "shared_mixture",
    "generate_mixture",
    "dirichlet_split",
    "label_flip",
    "load_csv",
    "save_csv",
    "load_provenance",
    "client_mix_divergence",
]


@dataclass(frozen=True, eq=False)
class MixtureSpec:
    """M underlying distributions of class-conditional Gaussians.

    ``means`` has shape (M, num_classes, input_dim), ``scales`` and
    ``class_weights`` have shape (M, num_classes). ``class_weights`` rows are
    the label-sampling distribution inside each underlying distribution; a
    zero entry means that distribution never emits that class.
    """

    means: np.ndarray
    scales: np.ndarray
    class_weights: np.ndarray
    samples_per_distribution: int

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        scales = np.asarray(self.scales, dtype=np.float64)
        weights = np.asarray(self.class_weights, dtype=np.float64)
        if means.ndim != 3:
            raise ValueError("means must have shape (M, num_classes, input_dim)")
        if scales.shape != means.shape[:2] or weights.shape != means.shape[:2]:
            raise ValueError("scales and class_weights must have shape (M, num_classes)")
        if means.shape[0] < 1:
            raise ValueError("need at least one distribution")
        if np.any(scales <= 0):
            raise ValueError("all scales must be positive")
        if np.any(weights < 0) or not np.allclose(weights.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("class_weights rows must be distributions")
        if self.samples_per_distribution < 0:
            raise ValueError("samples_per_distribution must be non-negative")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "class_weights", weights)

    @property
    def num_distributions(self) -> int:
        return self.means.shape[0]

    @property
    def num_classes(self) -> int:
        return self.means.shape[1]

    @property
    def input_dim(self) -> int:
        return self.means.shape[2]


@dataclass(frozen=True)
class SplitConfig:
    """Dirichlet allocation of each distribution's points over clients."""

    num_clients: int
    beta: float
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 2:
            raise ValueError("num_clients must be >= 2")
        if not self.beta > 0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True, eq=False)
class ClientDataset:
    """One client's local data with per-example source-distribution indices."""

    train: LabeledBatch
    test: LabeledBatch
    train_provenance: np.ndarray
    test_provenance: np.ndarray

    def __post_init__(self):
        train_prov = np.asarray(self.train_provenance, dtype=np.int64)
        test_prov = np.asarray(self.test_provenance, dtype=np.int64)
        if train_prov.shape[0] != len(self.train) or test_prov.shape[0] != len(self.test):
            raise ValueError("provenance length must match batch size")
        if (train_prov.size and train_prov.min() < 0) or (test_prov.size and test_prov.min() < 0):
            raise ValueError("provenance indices must be non-negative")
        object.__setattr__(self, "train_provenance", train_prov)
        object.__setattr__(self, "test_provenance", test_prov)

    def with_train(self, train: LabeledBatch) -> "ClientDataset":
        if len(train) != len(self.train):
            raise ValueError("replacement train set must keep its size")
        return ClientDataset(train, self.test, self.train_provenance, self.test_provenance)


def _dense_rotation(input_dim: int) -> np.ndarray:
    """A fixed orthogonal matrix with dense rows.

    Cloud means are built on coordinate axes and then rotated through this,
    which keeps every pairwise distance but spreads each discriminative
    direction over all coordinates (no privileged axes in the data).
    """
    rng = np.random.default_rng(0x5EED0F)
    q, r = np.linalg.qr(rng.standard_normal((input_dim, input_dim)))
    return q * np.sign(np.diag(r))


def _anchor_frame(num_anchors: int, input_dim: int, separation: float) -> np.ndarray:
    """Anchor points at +/- (separation/2) along successive axes."""
    needed = (num_anchors + 1) // 2
    if input_dim < needed:
        raise ValueError(f"input_dim {input_dim} too small for {num_anchors} anchors")
    anchors = np.zeros((num_anchors, input_dim))
    for k in range(num_anchors):
        axis = k // 2
        sign = 1.0 if k % 2 == 0 else -1.0
        anchors[k, axis] = sign * separation / 2.0
    return anchors


def partitioned_mixture(
    num_distributions: int,
    num_classes: int,
    input_dim: int,
    samples_per_distribution: int,
    separation: float = 1.2,
    overlap: float = 0.6,
    scale: float = 0.3,
) -> MixtureSpec:
    """Each class belongs to one distribution; distribution m's feature
    clouds sit ``m * overlap`` away (on a dedicated axis) from distribution
    0's, so clouds of different distributions interleave without sharing
    labels."""
    if num_classes < num_distributions:
        raise ValueError("need at least one class per distribution")
    owners = np.array_split(np.arange(num_classes), num_distributions)
    per_dist = max(len(chunk) for chunk in owners)
    anchors = _anchor_frame(per_dist, input_dim, separation)
    if input_dim < 1 + (per_dist + 1) // 2:
        raise ValueError("input_dim too small to offset distributions")

    means = np.zeros((num_distributions, num_classes, input_dim))
    weights = np.zeros((num_distributions, num_classes))
    for m, chunk in enumerate(owners):
        offset = np.zeros(input_dim)
        offset[-1] = m * overlap
        for local, cls in enumerate(chunk):
            means[m, cls] = anchors[local] + offset
        weights[m, chunk] = 1.0 / len(chunk)
    scales = np.full((num_distributions, num_classes), scale)
    return MixtureSpec(means @ _dense_rotation(input_dim).T, scales, weights, samples_per_distribution)


def shared_mixture(
    num_distributions: int,
    num_classes: int,
    input_dim: int,
    samples_per_distribution: int,
    separation: float = 1.2,
    scale: float = 0.3,
    overlap: float = 0.0,
) -> MixtureSpec:
    """All distributions carry all classes, but distribution m assigns class
    k to anchor (k + m) mod num_classes: the label maps rotate across
    distributions. With ``overlap`` zero the feature clouds coincide exactly
    (pure label conflict); a positive value nudges distribution m's clouds
    ``m * overlap`` along a free axis, so each anchor hosts nearby clouds
    carrying different labels instead of identical ones."""
    anchors = _anchor_frame(num_classes, input_dim, separation)
    if overlap != 0.0 and input_dim < 1 + (num_classes + 1) // 2:
        raise ValueError("input_dim too small to offset distributions")
    means = np.zeros((num_distributions, num_classes, input_dim))
    for m in range(num_distributions):
        offset = np.zeros(input_dim)
        offset[-1] = m * overlap
        for cls in range(num_classes):
            means[m, cls] = anchors[(cls + m) % num_classes] + offset
    scales = np.full((num_distributions, num_classes), scale)
    weights = np.full((num_distributions, num_classes), 1.0 / num_classes)
    return MixtureSpec(means @ _dense_rotation(input_dim).T, scales, weights, samples_per_distribution)


def generate_mixture(spec: MixtureSpec, seed: int) -> list:
    """Draw each distribution's dataset; element m is distribution m's batch."""
    batches = []
    for m in range(spec.num_distributions):
        rng = derive_rng(seed, "mixture", m)
        n = spec.samples_per_distribution
        labels = rng.choice(spec.num_classes, size=n, p=spec.class_weights[m])
        noise = rng.standard_normal((n, spec.input_dim))
        inputs = spec.means[m, labels] + noise * spec.scales[m, labels][:, None]
        if n == 0:
            inputs = np.zeros((0, spec.input_dim))
        batches.append(LabeledBatch(inputs, labels))
    return batches


def _stratified_split(inputs, labels, provenance, rng):
    """80/20 per-label split; labels with fewer than five points stay in train."""
    test_mask = np.zeros(len(labels), dtype=bool)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        test_mask[idx[: len(idx) // 5]] = True
    train_idx = np.flatnonzero(~test_mask)
    test_idx = np.flatnonzero(test_mask)
    return (
        LabeledBatch(inputs[train_idx], labels[train_idx]),
        LabeledBatch(inputs[test_idx], labels[test_idx]),
        provenance[train_idx],
        provenance[test_idx],
    )


def dirichlet_split(per_distribution, split: SplitConfig) -> list:
    """Map each distribution's points to clients with Dirichlet(beta) shares.

    Every point is assigned exactly once; clients may end up empty at low
    beta, which downstream training tolerates. Each client's pool is then
    split 80/20 into train/test, stratified by label.
    """
    C = split.num_clients
    buckets = [[] for _ in range(C)]
    rng = derive_rng(split.seed, "dirichlet")
    for m, batch in enumerate(per_distribution):
        n = len(batch)
        order = rng.permutation(n)
        shares = rng.dirichlet(np.full(C, split.beta))
        cuts = (np.cumsum(shares)[:-1] * n).astype(int)
        for c, part in enumerate(np.split(order, cuts)):
            if part.size:
                buckets[c].append((batch.inputs[part], batch.labels[part], np.full(part.size, m)))

    clients = []
    for c in range(C):
        if buckets[c]:
            inputs = np.vstack([chunk[0] for chunk in buckets[c]])
            labels = np.concatenate([chunk[1] for chunk in buckets[c]])
            provenance = np.concatenate([chunk[2] for chunk in buckets[c]])
        else:
            dim = per_distribution[0].input_dim if per_distribution else 0
            inputs = np.zeros((0, dim))
            labels = np.zeros(0, dtype=np.int64)
            provenance = np.zeros(0, dtype=np.int64)
        train, test, train_prov, test_prov = _stratified_split(
            inputs, labels, provenance, derive_rng(split.seed, "split", c)
        )
        clients.append(ClientDataset(train, test, train_prov, test_prov))
    return clients


def label_flip(dataset: ClientDataset, num_classes: int, seed: int) -> ClientDataset:
    """Scramble train labels (uniform resample per example); test untouched."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    rng = derive_rng(seed, "flip")
    flipped = rng.integers(0, num_classes, size=len(dataset.train))
    return dataset.with_train(LabeledBatch(dataset.train.inputs, flipped))


def client_mix_divergence(clients, num_distributions: int) -> float:
    """Mean over non-empty clients of the chi-squared divergence between the
    client's distribution mix and the global mix."""
    counts = np.zeros((len(clients), num_distributions))
    for c, client in enumerate(clients):
        prov = np.concatenate([client.train_provenance, client.test_provenance])
        for m in range(num_distributions):
            counts[c, m] = np.sum(prov == m)
    totals = counts.sum(axis=1)
    global_mix = counts.sum(axis=0) / max(counts.sum(), 1.0)
    divergences = []
    for c in range(len(clients)):
        if totals[c] == 0:
            continue
        mix = counts[c] / totals[c]
        positive = global_mix > 0
        divergences.append(np.sum((mix[positive] - global_mix[positive]) ** 2 / global_mix[positive]))
    return float(np.mean(divergences)) if divergences else 0.0


# ------------------------------------------------------------------ CSV IO


def save_csv(path, batch: LabeledBatch, provenance=None) -> None:
    """Write ``f0,...,f{n-1},label`` rows; provenance goes to a JSON sidecar."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow([f"f{i}" for i in range(batch.input_dim)] + ["label"])
        for row, label in zip(batch.inputs, batch.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
    if provenance is not None:
        sidecar = {"provenance": [int(m) for m in np.asarray(provenance)]}
        with open(str(path) + ".meta.json", "w") as handle:
            json.dump(sidecar, handle, sort_keys=True)
            handle.write("\n")


def load_provenance(path) -> np.ndarray:
    with open(str(path) + ".meta.json") as handle:
        return np.asarray(json.load(handle)["provenance"], dtype=np.int64)


def load_csv(path) -> LabeledBatch:
    """Parse a feature CSV; malformed rows raise with their line number."""
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: missing header") from None
        if len(header) < 2 or header[-1] != "label":
            raise ValueError(f"{path}: header must be f0,...,f{{n-1}},label")
        width = len(header) - 1
        if header[:-1] != [f"f{i}" for i in range(width)]:
            raise ValueError(f"{path}: header must be f0,...,f{{n-1}},label")
        inputs, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != width + 1:
                raise ValueError(f"{path}: line {line_no}: expected {width + 1} columns, got {len(row)}")
            try:
                features = [float(v) for v in row[:-1]]
            except ValueError:
                raise ValueError(f"{path}: line {line_no}: malformed feature value") from None
            try:
                raw = float(row[-1])
            except ValueError:
                raise ValueError(f"{path}: line {line_no}: malformed label") from None
            if not raw.is_integer():
                raise ValueError(f"{path}: line {line_no}: non-integral label {row[-1]!r}")
            inputs.append(features)
            labels.append(int(raw))
    if not inputs:
        return LabeledBatch(np.zeros((0, width)), np.zeros(0, dtype=np.int64))
    return LabeledBatch(np.asarray(inputs), np.asarray(labels))
