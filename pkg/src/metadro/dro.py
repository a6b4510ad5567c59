"""Group-robust objectives over per-group query losses.

Query losses from every task in a meta batch are pooled by group code. The
objective is then either the plain mean (``erm``), the largest group mean
(``dro``) or the largest group mean plus ``C / sqrt(n_g)`` where ``n_g`` is
the number of query examples seen for that group so far
(``group_adjusted_dro``). An optional l2 penalty on the parameters is added
after the group has been selected.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from metadro import autodiff as ad
from metadro.autodiff import Tensor
from metadro.errors import ConfigError, RankingError

MODES = ("erm", "dro", "group_adjusted_dro")
MODE_ALIASES = {"adjusted": "group_adjusted_dro", "group_adjusted": "group_adjusted_dro"}


@dataclass(frozen=True)
class DroConfig:
    mode: str = "erm"
    l2: float = 0.0
    adjust_scale: float = 1.0
    # "cumulative" counts every query seen during training; "batch" only the current batch
    count_source: str = "cumulative"

    def __post_init__(self):
        object.__setattr__(self, "mode", MODE_ALIASES.get(self.mode, self.mode))
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        for name in ("l2", "adjust_scale"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(name, f"must be finite and >= 0, got {v!r}")
        if self.count_source not in ("cumulative", "batch"):
            raise ConfigError("count_source", f"must be 'cumulative' or 'batch', got {self.count_source!r}")


@dataclass(frozen=True)
class GroupLoss:
    """Mean query loss of one group within a meta batch, and its query count."""

    mean: Tensor | float
    count: int

    @property
    def value(self) -> float:
        return self.mean.item() if isinstance(self.mean, Tensor) else float(self.mean)


@dataclass(frozen=True)
class GroupStats:
    """Running per-group loss sums and query counts. Updates return new objects."""

    sums: Mapping[str, float] = field(default_factory=dict)
    counts: Mapping[str, int] = field(default_factory=dict)

    @property
    def groups(self) -> list[str]:
        return sorted(g for g, n in self.counts.items() if n > 0)

    def count(self, group: str) -> int:
        return self.counts.get(group, 0)

    def mean(self, group: str) -> float:
        return self.sums[group] / self.counts[group]

    def means(self) -> dict[str, float]:
        return {g: self.mean(g) for g in self.groups}

    def write_csv(self, out: TextIO | str | Path) -> None:
        if isinstance(out, (str, Path)):
            with open(out, "w", newline="", encoding="utf-8") as fh:
                return self.write_csv(fh)
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["group", "n", "mean_loss"])
        for g in self.groups:
            w.writerow([g, self.counts[g], repr(self.mean(g))])


def partition_by_group(pairs: Iterable[tuple[str, float]]) -> dict[str, GroupLoss]:
    """Average ``(group, loss)`` pairs per group."""
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for g, loss in pairs:
        sums[g] = sums.get(g, 0.0) + float(loss)
        counts[g] = counts.get(g, 0) + 1
    if not counts:
        raise ValueError("no losses to partition")
    return {g: GroupLoss(sums[g] / counts[g], counts[g]) for g in sorted(counts)}


def group_losses(task_losses: Sequence[Tensor], task_groups: Sequence[Sequence[str]]) -> dict[str, GroupLoss]:
    """Differentiable version of :func:`partition_by_group`.

    ``task_losses[i]`` is the per-query loss vector of task ``i`` and
    ``task_groups[i]`` the matching group codes. Group means pool the queries
    of all tasks.
    """
    names = sorted({g for groups in task_groups for g in groups})
    if not names:
        raise ValueError("no losses to partition")
    col = {g: j for j, g in enumerate(names)}
    counts = np.zeros(len(names))
    totals = None
    for losses, groups in zip(task_losses, task_groups):
        onehot = np.zeros((len(groups), len(names)))
        onehot[np.arange(len(groups)), [col[g] for g in groups]] = 1.0
        counts += onehot.sum(axis=0)
        part = ad.matmul(ad.reshape(losses, (1, len(groups))), Tensor(onehot))
        totals = part if totals is None else ad.add(totals, part)
    means = ad.mul(totals, Tensor((1.0 / counts)[None, :]))
    out = {}
    for g, j in col.items():
        pick = np.zeros((1, len(names)))
        pick[0, j] = 1.0
        out[g] = GroupLoss(ad.reduce_sum(ad.mul(means, Tensor(pick))), int(counts[j]))
    return out


def adjusted_counts(groups: Mapping[str, GroupLoss], stats: GroupStats, config: DroConfig) -> dict[str, int]:
    if config.count_source == "batch":
        return {g: gl.count for g, gl in groups.items()}
    return {g: stats.count(g) + gl.count for g, gl in groups.items()}


def robust_objective(
    groups: Mapping[str, GroupLoss],
    stats: GroupStats,
    config: DroConfig,
    params: Iterable[Tensor] = (),
) -> tuple[Tensor, str | None]:
    """Scalar training objective and the group it selected (``None`` for erm).

    ``stats`` holds counts from earlier batches; the current batch counts are
    added before the ``1/sqrt(n_g)`` adjustment is computed.
    """
    if not groups:
        raise ValueError("group loss map is empty")
    selected = None
    if config.mode == "erm":
        n_total = sum(gl.count for gl in groups.values())
        total = None
        for g in sorted(groups):
            term = ad.scale(groups[g].mean, groups[g].count)
            total = term if total is None else ad.add(total, term)
        objective = ad.scale(total, 1.0 / n_total)
    else:
        bonus = {g: 0.0 for g in groups}
        if config.mode == "group_adjusted_dro":
            counts = adjusted_counts(groups, stats, config)
            assert all(n >= 1 for n in counts.values()), counts
            bonus = {g: config.adjust_scale / math.sqrt(counts[g]) for g in groups}
        scores = {g: groups[g].value + bonus[g] for g in groups}
        selected = min(groups, key=lambda g: (-scores[g], g))
        objective = ad.as_tensor(groups[selected].mean)
        if bonus[selected]:
            objective = ad.add(objective, Tensor(bonus[selected]))
    if config.l2 > 0:
        penalty = None
        for p in params:
            sq = ad.squared_norm(p)
            penalty = sq if penalty is None else ad.add(penalty, sq)
        if penalty is not None:
            objective = ad.add(objective, ad.scale(penalty, config.l2))
    return objective, selected


def update_stats(stats: GroupStats, groups: Mapping[str, GroupLoss]) -> GroupStats:
    sums = dict(stats.sums)
    counts = dict(stats.counts)
    for g, gl in groups.items():
        sums[g] = sums.get(g, 0.0) + gl.value * gl.count
        counts[g] = counts.get(g, 0) + gl.count
    return GroupStats(sums, counts)


def rank_groups(stats: GroupStats) -> tuple[str, str, str]:
    """(worst, best, middle) groups by running mean loss.

    Middle is the lower median. Ties go to the lexicographically smaller group.
    """
    means = stats.means()
    if not means:
        raise RankingError("no group has any recorded loss")
    ascending = sorted(means, key=lambda g: (means[g], g))
    worst = min(means, key=lambda g: (-means[g], g))
    return worst, ascending[0], ascending[(len(ascending) - 1) // 2]
