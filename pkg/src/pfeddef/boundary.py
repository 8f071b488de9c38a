"""Decision-boundary similarity between client models.

For a probe point x and a unit direction d, each model's boundary distance
is the smallest step along d that changes its prediction; the gap between
two models' distances along the same direction measures how far apart their
boundaries sit. Directions are either "legitimate" (toward the nearest
reference point with a different label) or "adversarial" (toward a
PGD-found misclassified point). Identical models give a gap of exactly
zero, so a FedAvg fleet reports 0 while Local fleets report large gaps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, pgd_attack
from .models import LabeledBatch
from .seeding import derive_rng

__all__ = [
    "DIRECTION_KINDS",
    "DirectionNotFound",
    "BoundaryProbe",
    "BoundaryReport",
    "direction",
    "boundary_distance",
    "inter_boundary_distance",
    "fleet_boundary_report",
    "write_boundary_csv",
]

DIRECTION_KINDS = ("legitimate", "adversarial")


class DirectionNotFound(ValueError):
    """No usable probe direction exists for this point."""


@dataclass(frozen=True)
class BoundaryProbe:
    adversary: int
    victim: int
    point_index: int
    distance_a: float
    distance_b: float
    gap: float
    status: str  # ok | no_crossing | no_direction


@dataclass(frozen=True, eq=False)
class BoundaryReport:
    probes: tuple
    mean_gap: float
    evaluated: int
    skipped: int
    short_pairs: int

    def gaps(self) -> np.ndarray:
        return np.array([p.gap for p in self.probes if p.status == "ok"])


def direction(surface, x, label, kind, reference=None, attack_cfg=None) -> np.ndarray:
    """Unit direction from x per the requested kind.

    legitimate: toward the nearest reference point carrying a different
    label. adversarial: toward a PGD-found input the surface misclassifies.
    Raises DirectionNotFound when no such point exists (no differently
    labeled reference, a zero offset, or PGD failing within its budget).
    """
    if kind not in DIRECTION_KINDS:
        raise ValueError(f"kind must be one of {DIRECTION_KINDS}")
    x = np.asarray(x, dtype=np.float64).ravel()
    if kind == "legitimate":
        if reference is None or len(reference) == 0:
            raise DirectionNotFound("legitimate directions need a reference set")
        mask = reference.labels != label
        if not np.any(mask):
            raise DirectionNotFound("no differently-labeled reference point")
        diffs = reference.inputs[mask] - x
        norms = np.linalg.norm(diffs, axis=1)
        nearest = int(np.argmin(norms))
        if norms[nearest] == 0.0:
            raise DirectionNotFound("nearest differently-labeled point coincides with x")
        return diffs[nearest] / norms[nearest]
    if attack_cfg is None:
        raise ValueError("adversarial directions need an attack config")
    result = pgd_attack(surface, LabeledBatch(x[None, :], [label]), attack_cfg)
    if not bool(result.success[0]):
        raise DirectionNotFound("PGD found no misclassified point within budget")
    delta = result.perturbed[0] - x
    norm = np.linalg.norm(delta)
    if norm == 0.0:
        raise DirectionNotFound("PGD produced a zero perturbation")
    return delta / norm


_COARSE_STEPS = 256


def _distances_along(surface, points, directions, eps_max, tol) -> np.ndarray:
    """Vectorized first-crossing search along unit directions.

    Coarse scan at step eps_max/256 followed by bisection to ``tol``;
    rows without a crossing come back NaN.
    """
    points = np.atleast_2d(points)
    directions = np.atleast_2d(directions)
    count = points.shape[0]
    if count == 0:
        return np.zeros(0)
    base = surface.predict(points)
    grid = eps_max * (np.arange(1, _COARSE_STEPS + 1) / _COARSE_STEPS)
    probes = points[:, None, :] + grid[None, :, None] * directions[:, None, :]
    preds = surface.predict(probes.reshape(count * _COARSE_STEPS, -1))
    changed = preds.reshape(count, _COARSE_STEPS) != base[:, None]
    found = changed.any(axis=1)
    first = np.argmax(changed, axis=1)

    lo = np.where(first > 0, grid[np.maximum(first - 1, 0)], 0.0)
    hi = grid[first]
    active = found.copy()
    while True:
        wide = active & (hi - lo > tol)
        if not np.any(wide):
            break
        mids = (lo[wide] + hi[wide]) / 2.0
        mid_preds = surface.predict(points[wide] + mids[:, None] * directions[wide])
        same = mid_preds == base[wide]
        lo_w, hi_w = lo[wide], hi[wide]
        lo[wide] = np.where(same, mids, lo_w)
        hi[wide] = np.where(same, hi_w, mids)

    out = np.full(count, np.nan)
    out[found] = (lo[found] + hi[found]) / 2.0
    return out


def boundary_distance(surface, x, d, eps_max, tol=1e-3):
    """Smallest step in (0, eps_max] where the prediction changes, located
    by coarse scan plus bisection; None when no crossing exists in range."""
    if eps_max <= 0:
        raise ValueError("eps_max must be positive")
    value = _distances_along(
        surface, np.asarray(x, dtype=np.float64)[None, :], np.asarray(d)[None, :], eps_max, tol
    )[0]
    return None if np.isnan(value) else float(value)


def inter_boundary_distance(surface_a, surface_b, x, d, eps_max, tol=1e-3):
    """|distance_a - distance_b| along the shared direction; None if either
    model has no crossing within range."""
    distance_a = boundary_distance(surface_a, x, d, eps_max, tol)
    distance_b = boundary_distance(surface_b, x, d, eps_max, tol)
    if distance_a is None or distance_b is None:
        return None
    return abs(distance_a - distance_b)


def fleet_boundary_report(
    surfaces,
    datasets,
    kind,
    n_points,
    seed,
    attack_cfg: AttackConfig | None = None,
    eps_max: float | None = None,
    tol: float = 1e-3,
) -> BoundaryReport:
    """Sample points per ordered model pair and aggregate boundary gaps.

    Points come from the adversary-side client's test set and must be
    correctly classified by both models; directions are computed on the
    adversary-side model (reference set: the same test set). Pairs with
    fewer eligible points than requested use what they have and are
    counted in ``short_pairs``.
    """
    if len(surfaces) < 2:
        raise ValueError("need at least two models to compare")
    if kind == "adversarial" and attack_cfg is None:
        raise ValueError("adversarial probes need an attack config")
    if eps_max is None:
        eps_max = 8.0 * attack_cfg.budget if attack_cfg is not None else 8.0

    probes = []
    short_pairs = 0
    for adversary in range(len(surfaces)):
        pool = datasets[adversary].test
        if len(pool) == 0:
            continue
        preds_a = surfaces[adversary].predict(pool.inputs)
        for victim in range(len(surfaces)):
            if victim == adversary:
                continue
            preds_b = surfaces[victim].predict(pool.inputs)
            eligible = np.flatnonzero((preds_a == pool.labels) & (preds_b == pool.labels))
            rng = derive_rng(seed, "boundary", adversary, victim)
            order = rng.permutation(eligible.size)
            chosen = eligible[order[:n_points]]
            if chosen.size < n_points:
                short_pairs += 1
            kept, xs, ds = [], [], []
            for index in chosen:
                x = pool.inputs[index]
                try:
                    d = direction(
                        surfaces[adversary],
                        x,
                        pool.labels[index],
                        kind,
                        reference=pool,
                        attack_cfg=attack_cfg,
                    )
                except DirectionNotFound:
                    probes.append(
                        BoundaryProbe(
                            adversary, victim, int(index), np.nan, np.nan, np.nan, "no_direction"
                        )
                    )
                    continue
                kept.append(int(index))
                xs.append(x)
                ds.append(d)
            if not kept:
                continue
            xs = np.vstack(xs)
            ds = np.vstack(ds)
            dist_a = _distances_along(surfaces[adversary], xs, ds, eps_max, tol)
            dist_b = _distances_along(surfaces[victim], xs, ds, eps_max, tol)
            for row, index in enumerate(kept):
                if np.isnan(dist_a[row]) or np.isnan(dist_b[row]):
                    probes.append(
                        BoundaryProbe(
                            adversary,
                            victim,
                            index,
                            float(dist_a[row]),
                            float(dist_b[row]),
                            np.nan,
                            "no_crossing",
                        )
                    )
                else:
                    probes.append(
                        BoundaryProbe(
                            adversary,
                            victim,
                            index,
                            float(dist_a[row]),
                            float(dist_b[row]),
                            abs(float(dist_a[row]) - float(dist_b[row])),
                            "ok",
                        )
                    )

    gaps = [p.gap for p in probes if p.status == "ok"]
    return BoundaryReport(
        probes=tuple(probes),
        mean_gap=float(np.mean(gaps)) if gaps else float("nan"),
        evaluated=len(gaps),
        skipped=sum(p.status != "ok" for p in probes),
        short_pairs=short_pairs,
    )


def write_boundary_csv(report: BoundaryReport, path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["adversary", "victim", "point", "distance_a", "distance_b", "gap", "status"]
        )
        for probe in report.probes:
            writer.writerow(
                [
                    probe.adversary,
                    probe.victim,
                    probe.point_index,
                    repr(probe.distance_a),
                    repr(probe.distance_b),
                    repr(probe.gap),
                    probe.status,
                ]
            )
