"""Meta-training and meta-testing loops, metrics records and export."""
from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from metadro import autodiff as ad
from metadro.autodiff import Tape, Tensor
from metadro.dataset import EmbeddingStore
from metadro.dro import DroConfig, GroupStats, group_losses, rank_groups, robust_objective, update_stats
from metadro.episodes import Episode, TaskSpec, sample_episode, sample_meta_batch
from metadro.errors import ConfigError, EpisodeError, NumericError, TrainingAborted
from metadro.models import MamlModel, MlpEncoder, ProtoNetModel

log = logging.getLogger(__name__)

Z95 = 1.96
CSV_COLUMNS = (
    "iteration", "avg", "avg_hw", "worst", "worst_hw", "best", "best_hw",
    "middle", "middle_hw", "worst_group", "best_group", "middle_group",
)


@dataclass(frozen=True)
class TrainConfig:
    task: TaskSpec = TaskSpec(5, 5, 1)
    model: str = "protonet"
    meta_batch_size: int = 16
    outer_lr: float = 0.01
    momentum: float = 0.0
    iterations: int = 1000
    eval_interval: int = 100
    eval_tasks: int = 100
    seed: int = 0
    dro: DroConfig = DroConfig()
    hidden: tuple[int, ...] = (64,)
    embed_dim: int = 32
    maml_order: str = "second"
    inner_lr: float = 0.1
    inner_steps: int = 1
    # "class": disjoint classes per split; "record": shared classes, disjoint records
    split: str = "class"
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        positive = ("meta_batch_size", "iterations", "eval_interval", "inner_steps", "embed_dim")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)!r}")
        if self.eval_tasks < 2:
            raise ConfigError("eval_tasks", f"must be >= 2, got {self.eval_tasks!r}")
        if not (math.isfinite(self.outer_lr) and self.outer_lr > 0):
            raise ConfigError("outer_lr", f"must be finite and > 0, got {self.outer_lr!r}")
        if not (math.isfinite(self.inner_lr) and self.inner_lr >= 0):
            raise ConfigError("inner_lr", f"must be finite and >= 0, got {self.inner_lr!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum", f"must be in [0, 1), got {self.momentum!r}")
        if self.model not in ("protonet", "maml"):
            raise ConfigError("model", f"must be 'protonet' or 'maml', got {self.model!r}")
        if self.maml_order not in ("first", "second"):
            raise ConfigError("maml_order", f"must be 'first' or 'second', got {self.maml_order!r}")
        if self.split not in ("class", "record"):
            raise ConfigError("split", f"must be 'class' or 'record', got {self.split!r}")
        fr = self.split_fractions
        if len(fr) != 3 or min(fr) < 0 or fr[0] <= 0 or fr[2] <= 0 or abs(sum(fr) - 1) > 1e-9:
            raise ConfigError("split_fractions", f"need three non-negative fractions summing to 1 "
                                                 f"with train and test > 0, got {fr!r}")
        if min(self.hidden, default=1) < 1:
            raise ConfigError("hidden", f"widths must be >= 1, got {self.hidden!r}")


def build_model(config: TrainConfig, dim: int) -> ProtoNetModel | MamlModel:
    encoder = MlpEncoder((dim, *config.hidden, config.embed_dim))
    if config.model == "protonet":
        return ProtoNetModel(encoder)
    return MamlModel(encoder, config.task.n_way, config.inner_lr, config.inner_steps, config.maml_order)


# ------------------------------------------------------------------- splits


@dataclass(frozen=True)
class Split:
    store: EmbeddingStore
    pool: tuple[str, ...]


@dataclass(frozen=True)
class Splits:
    train: Split
    val: Split | None
    test: Split


def _usable(store: EmbeddingStore, task: TaskSpec) -> tuple[str, ...]:
    need = task.k_shot + task.q_query
    return tuple(c for c in store.classes if len(store.class_index[c]) >= need)


def split_store(store: EmbeddingStore, config: TrainConfig) -> Splits:
    """Train / validation / test stores per ``config.split``.

    The validation split is ``None`` when it cannot supply an episode.
    """
    rng = np.random.default_rng([config.seed, 3])
    f_train, f_val, _ = config.split_fractions
    parts: list[list[int]] = [[], [], []]
    if config.split == "class":
        classes = list(store.classes)
        order = [classes[i] for i in rng.permutation(len(classes))]
        n_tr = int(round(f_train * len(order)))
        n_va = int(round(f_val * len(order)))
        for k, chunk in enumerate((order[:n_tr], order[n_tr:n_tr + n_va], order[n_tr + n_va:])):
            for c in chunk:
                parts[k].extend(store.class_index[c])
    else:
        for c in store.classes:
            idx = np.asarray(store.class_index[c])[rng.permutation(len(store.class_index[c]))]
            n_tr = int(round(f_train * len(idx)))
            n_va = int(round(f_val * len(idx)))
            for k, chunk in enumerate((idx[:n_tr], idx[n_tr:n_tr + n_va], idx[n_tr + n_va:])):
                parts[k].extend(chunk.tolist())
    splits = []
    for name, idx in zip(("train", "val", "test"), parts):
        sub = store.subset(sorted(idx))
        pool = _usable(sub, config.task)
        if len(pool) < config.task.n_way:
            if name == "val":
                splits.append(None)
                continue
            raise ConfigError(
                "split",
                f"{name} split has {len(pool)} classes with >= K+Q records, "
                f"{config.task.n_way}-way episodes need {config.task.n_way}",
            )
        splits.append(Split(sub, pool))
    return Splits(*splits)


# ------------------------------------------------------------------ metrics


@dataclass
class MetricsRecord:
    iteration: int
    avg: float
    avg_hw: float
    worst: float
    worst_hw: float
    best: float
    best_hw: float
    middle: float
    middle_hw: float
    worst_group: str = ""
    best_group: str = ""
    middle_group: str = ""
    avg_std: float = 0.0
    group_losses: dict[str, float] = field(default_factory=dict)
    group_counts: dict[str, int] = field(default_factory=dict)

    def group_stats(self) -> GroupStats:
        """Test-time group statistics behind this record."""
        return GroupStats({g: m * self.group_counts[g] for g, m in self.group_losses.items()},
                          dict(self.group_counts))

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS}

    def format_table(self, label: str = "") -> str:
        """Two-line table: header then ``avg±hw`` cells (Avg, Worst, Best, Middle)."""
        cells = [f"{v:.3f}±{h:.3f}" for v, h in self._pairs()]
        head = ["Type", "Avg", "Worst Case", "Best Case", "Middle Case"]
        widths = [max(len(label), 4)] + [max(len(h), len(c)) for h, c in zip(head[1:], cells)]
        fmt = " | ".join(f"{{:<{w}}}" for w in widths)
        return fmt.format(*head) + "\n" + fmt.format(label or "-", *cells)

    def format_row(self) -> str:
        return ", ".join(f"{v:.3f}±{h:.3f}" for v, h in self._pairs())

    def _pairs(self):
        return [(self.avg, self.avg_hw), (self.worst, self.worst_hw),
                (self.best, self.best_hw), (self.middle, self.middle_hw)]

    @classmethod
    def from_table_row(cls, text: str, iteration: int = 0) -> "MetricsRecord":
        """Parse four ``value±halfwidth`` cells (Avg, Worst, Best, Middle)."""
        cells = re.findall(r"([-+]?\d*\.?\d+)\s*(?:±|\$?\\pm\$?|\+/-)\s*(\d*\.?\d+)", text)
        if len(cells) != 4:
            raise ValueError(f"expected 4 'value±hw' cells, found {len(cells)} in {text!r}")
        vals = [float(x) for pair in cells for x in pair]
        return cls(iteration, *vals)


def _half_width(values: Sequence[float]) -> tuple[float, float]:
    """(sample std, 95% normal half-width of the mean)."""
    if len(values) < 2:
        return 0.0, 0.0
    std = float(np.std(values, ddof=1))
    return std, Z95 * std / math.sqrt(len(values))


def summarize(
    task_accuracies: Sequence[float],
    group_task_accuracies: Mapping[str, Sequence[float]],
    test_stats: GroupStats,
    iteration: int = 0,
) -> MetricsRecord:
    """Build a record from per-task accuracies and test-time group losses."""
    avg = float(np.mean(task_accuracies))
    std, hw = _half_width(task_accuracies)
    worst, best, middle = rank_groups(test_stats)

    def acc(g):
        v = group_task_accuracies[g]
        return float(np.mean(v)), _half_width(v)[1]

    (w, w_hw), (b, b_hw), (m, m_hw) = acc(worst), acc(best), acc(middle)
    return MetricsRecord(iteration, avg, hw, w, w_hw, b, b_hw, m, m_hw, worst, best, middle,
                         avg_std=std, group_losses=test_stats.means(),
                         group_counts={g: test_stats.count(g) for g in test_stats.groups})


# --------------------------------------------------------------- evaluation


def predict_episode(model, params: Mapping[str, np.ndarray], episode: Episode) -> tuple[np.ndarray, np.ndarray]:
    """(predicted episode labels, per-query losses) without touching ``params``."""
    if isinstance(model, MamlModel):
        tape = Tape()
        leaves = {n: tape.parameter(v, n) for n, v in params.items()}
        logits = model.query_logits(leaves, episode, order="first")
    else:
        logits = model.query_logits({n: Tensor(v) for n, v in params.items()}, episode)
    losses = ad.cross_entropy(logits.detach(), episode.query_y)
    return logits.value.argmax(axis=1), losses.numpy()


def evaluate_episodes(model, params, episodes: Sequence[Episode], iteration: int = 0) -> MetricsRecord:
    accs = []
    group_accs: dict[str, list[float]] = {}
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for ep in episodes:
        pred, losses = predict_episode(model, params, ep)
        correct = pred == ep.query_y
        accs.append(float(correct.mean()))
        groups = np.asarray(ep.query_groups)
        for g in sorted(set(ep.query_groups)):
            mask = groups == g
            group_accs.setdefault(g, []).append(float(correct[mask].mean()))
            sums[g] = sums.get(g, 0.0) + float(losses[mask].sum())
            counts[g] = counts.get(g, 0) + int(mask.sum())
    return summarize(accs, group_accs, GroupStats(sums, counts), iteration)


def meta_test(
    params: Mapping[str, np.ndarray],
    config: TrainConfig,
    store: EmbeddingStore,
    tasks: int | None = None,
    class_pool: Sequence[str] | None = None,
    seed: int | Sequence[int] | None = None,
    iteration: int = 0,
) -> MetricsRecord:
    """Evaluate ``tasks`` fresh episodes; MAML adapts per task, nothing is updated."""
    tasks = config.eval_tasks if tasks is None else tasks
    if tasks < 2:
        raise ValueError(f"meta_test needs at least 2 tasks, got {tasks}")
    model = build_model(config, store.dim)
    rng = np.random.default_rng([config.seed, 1] if seed is None else seed)
    pool = _usable(store, config.task) if class_pool is None else class_pool
    episodes = [sample_episode(store, config.task, pool, rng) for _ in range(tasks)]
    return evaluate_episodes(model, params, episodes, iteration)


# ----------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[MetricsRecord]
    stats: GroupStats
    selected: list[str | None]
    param_norms: list[float]
    splits: Splits


def _freeze(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for n, v in params.items():
        a = np.array(v, dtype=np.float64)
        a.flags.writeable = False
        out[n] = a
    return out


def _norm(params: Mapping[str, np.ndarray]) -> float:
    with np.errstate(over="ignore"):
        return math.sqrt(sum(float(np.sum(v * v)) for v in params.values()))


def meta_train(
    config: TrainConfig,
    store: EmbeddingStore,
    on_eval: Callable[[MetricsRecord, str | None], None] | None = None,
) -> TrainResult:
    """Episodic training with the configured robust objective.

    Each iteration samples a meta batch, computes query losses (after inner
    adaptation for MAML), pools them by group, takes one SGD step on the
    robust objective and then folds the batch into the running group stats.
    """
    splits = split_store(store, config)
    model = build_model(config, store.dim)
    params = _freeze(model.init(np.random.default_rng([config.seed, 2])))
    velocity = {n: np.zeros_like(v) for n, v in params.items()}
    rng = np.random.default_rng([config.seed, 0])
    stats = GroupStats()
    history: list[MetricsRecord] = []
    selected_log: list[str | None] = []
    norms = [_norm(params)]
    eval_split = splits.val or splits.test

    for it in range(1, config.iterations + 1):
        batch = sample_meta_batch(splits.train.store, config.task, splits.train.pool,
                                  config.meta_batch_size, rng)
        tape = Tape()
        leaves = {n: tape.parameter(v, n) for n, v in params.items()}
        groups = {}
        try:
            losses = [model.query_losses(leaves, ep) for ep in batch]
            groups = group_losses(losses, [ep.query_groups for ep in batch])
            objective, selected = robust_objective(groups, stats, config.dro, leaves.values())
            grads = ad.grad(objective, list(leaves.values()))
        except NumericError:
            # losses may have overflowed before they could be pooled
            diag = {g: math.nan for ep in batch for g in ep.query_groups}
            diag.update({g: gl.value for g, gl in groups.items()})
            raise TrainingAborted(it, diag) from None
        if not math.isfinite(objective.item()):
            raise TrainingAborted(it, {g: gl.value for g, gl in groups.items()})

        new = {}
        for (n, v), g in zip(params.items(), grads):
            velocity[n] = config.momentum * velocity[n] + g.value
            new[n] = v - config.outer_lr * velocity[n]
        params = _freeze(new)
        stats = update_stats(stats, groups)
        selected_log.append(selected)
        norms.append(_norm(params))

        final = it == config.iterations
        if final or it % config.eval_interval == 0:
            split = splits.test if final else eval_split
            rec = meta_test(params, config, split.store, config.eval_tasks, split.pool,
                            seed=[config.seed, 1, it], iteration=it)
            history.append(rec)
            log.info("iter %d objective %.4f selected %s | %s", it, objective.item(), selected,
                     rec.format_row())
            if on_eval is not None:
                on_eval(rec, selected)

    return TrainResult(params, history, stats, selected_log, norms, splits)


# ------------------------------------------------------------------- export


def export_metrics(history: Sequence[MetricsRecord], path: str | Path, format: str | None = None) -> None:
    if not history:
        raise ValueError("metrics history is empty")
    path = Path(path)
    format = format or ("json" if path.suffix.lower() == ".json" else "csv")
    if format == "json":
        path.write_text(json.dumps([asdict(r) for r in history], indent=1) + "\n", encoding="utf-8")
    elif format == "csv":
        with path.open("w", newline="", encoding="utf-8") as fh:
            write_metrics_csv(history, fh)
    else:
        raise ValueError(f"unknown metrics format {format!r}")


def write_metrics_csv(history: Sequence[MetricsRecord], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in history:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r.row().values()])


def import_metrics(path: str | Path, format: str | None = None) -> list[MetricsRecord]:
    """Read an exported history. CSV files carry only the CSV columns."""
    path = Path(path)
    format = format or ("json" if path.suffix.lower() == ".json" else "csv")
    if format == "json":
        return [MetricsRecord(**obj) for obj in json.loads(path.read_text(encoding="utf-8"))]
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected metrics header {reader.fieldnames}")
        types = {f.name: f.type for f in fields(MetricsRecord)}
        out = []
        for row in reader:
            kw = {}
            for k, v in row.items():
                kw[k] = int(v) if types[k] == "int" else float(v) if types[k] == "float" else v
            out.append(MetricsRecord(**kw))
        return out
