"""Ranking metrics, evaluation protocol, early stopping, and study variants.

Evaluation is leave-one-out full ranking: for each user the held-out item
is ranked against the entire target-domain vocabulary by a caller-supplied
scorer, which keeps the protocol independent of any particular model (a
popularity vector and an exhaustive oracle plug in the same way).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import MODALITIES, FinetuneData, ModalityStore, StoreSet
from .errors import ConfigError, FormatError

DEFAULT_KS = (5, 10, 20)
GROUP_BOUNDS = (0, 5, 20, 50)


def rank_of_target(scores: np.ndarray, target_idx: int) -> int:
    """1-based rank of the target among all candidates; ties break by
    ascending index, so equal-scored candidates with lower indices win."""
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ConfigError(f"scores must be a vector, got shape {scores.shape}")
    n = scores.shape[0]
    if not 0 <= target_idx < n:
        raise IndexError(f"target index {target_idx} out of range for {n} items")
    target = scores[target_idx]
    higher = int(np.sum(scores > target))
    tied_before = int(np.sum(scores[:target_idx] == target))
    return 1 + higher + tied_before


def _as_rank_array(ranks) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(ranks))
    if arr.size == 0:
        raise ConfigError("no ranks to aggregate")
    if np.any(arr < 1):
        raise ConfigError("ranks are 1-based and must be >= 1")
    return arr


def recall_at_k(ranks, k: int) -> float:
    """Fraction of ranks within the top k."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    arr = _as_rank_array(ranks)
    return float(np.mean(arr <= k))


def ndcg_at_k(ranks, k: int) -> float:
    """Mean of 1/log2(1+rank) for ranks within the top k, zero otherwise."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    arr = _as_rank_array(ranks)
    gains = np.where(arr <= k, 1.0 / np.log2(1.0 + arr), 0.0)
    return float(np.mean(gains))


@dataclass(frozen=True)
class MetricReport:
    """Recall and ndcg at each cutoff, plus how many users were measured."""

    recalls: dict[int, float]
    ndcgs: dict[int, float]
    n_users: int

    def to_tsv(self, config_echo: str | None = None) -> str:
        lines = []
        for k in sorted(self.recalls):
            lines.append(f"recall@{k}\t{self.recalls[k]:.6f}")
        for k in sorted(self.ndcgs):
            lines.append(f"ndcg@{k}\t{self.ndcgs[k]:.6f}")
        lines.append(f"users\t{self.n_users}")
        if config_echo is not None:
            lines.append(f"config\t{config_echo}")
        return "\n".join(lines) + "\n"


def parse_metric_tsv(text: str) -> tuple[MetricReport, str | None]:
    recalls: dict[int, float] = {}
    ndcgs: dict[int, float] = {}
    n_users = 0
    config_echo = None
    for line in text.splitlines():
        if not line.strip():
            continue
        name, _, value = line.partition("\t")
        if name.startswith("recall@"):
            recalls[int(name[7:])] = float(value)
        elif name.startswith("ndcg@"):
            ndcgs[int(name[5:])] = float(value)
        elif name == "users":
            n_users = int(value)
        elif name == "config":
            config_echo = value
        else:
            raise FormatError(f"unknown metric row {name!r}")
    return MetricReport(recalls=recalls, ndcgs=ndcgs, n_users=n_users), config_echo


def ranks_from_scorer(instances, scorer, item_index: dict[str, int]) -> np.ndarray:
    """Score every instance and rank its target; scorer returns one row of
    vocabulary scores per instance."""
    if not instances:
        raise ConfigError("no evaluation instances")
    scores = np.asarray(scorer(instances))
    if scores.shape != (len(instances), len(item_index)):
        raise ConfigError(f"scorer returned shape {scores.shape}, expected "
                          f"({len(instances)}, {len(item_index)})")
    return np.array([rank_of_target(scores[i], item_index[inst.target])
                     for i, inst in enumerate(instances)])


def report_from_ranks(ranks, ks=DEFAULT_KS) -> MetricReport:
    arr = _as_rank_array(ranks)
    return MetricReport(recalls={k: recall_at_k(arr, k) for k in ks},
                        ndcgs={k: ndcg_at_k(arr, k) for k in ks},
                        n_users=int(arr.size))


def evaluate(instances, scorer, item_index: dict[str, int],
             ks=DEFAULT_KS) -> MetricReport:
    """Full-vocabulary leave-one-out evaluation of a scorer."""
    return report_from_ranks(ranks_from_scorer(instances, scorer, item_index), ks)


# ---------------------------------------------------------------------------
# early stopping


@dataclass
class EarlyStopState:
    """Tracks the best metric seen and how many updates since it improved."""

    patience: int = 10
    best: float = float("-inf")
    best_epoch: int = 0
    bad_count: int = 0
    n_updates: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")


def early_stop_update(state: EarlyStopState, value: float) -> bool:
    """Record one validation value; returns True when training should stop.

    Only strict improvement resets the counter, so a flat stream stops after
    patience + 1 updates.
    """
    state.n_updates += 1
    if value > state.best:
        state.best = value
        state.best_epoch = state.n_updates
        state.bad_count = 0
        return False
    state.bad_count += 1
    return state.bad_count >= state.patience


# ---------------------------------------------------------------------------
# modality masking (robustness protocol)


def modality_mask(stores: StoreSet, modality: str, ratio: float,
                  seed: int) -> StoreSet:
    """Remove floor(ratio * n_present) of one modality's vectors, chosen
    uniformly without replacement; the other modalities are untouched."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1], got {ratio}")
    store = stores.by_modality(modality)
    present = sorted(store.vectors)
    n_drop = int(np.floor(ratio * len(present)))
    rng = np.random.default_rng(seed)
    dropped = set(rng.choice(len(present), size=n_drop, replace=False)) \
        if n_drop else set()
    kept = {item: store.vectors[item] for i, item in enumerate(present)
            if i not in dropped}
    masked = ModalityStore(dim=store.dim, vectors=kept)
    return replace(stores, **{modality: masked})


# ---------------------------------------------------------------------------
# popularity grouping


def train_frequencies(data: FinetuneData) -> dict[str, int]:
    """How often each vocabulary item occurs in users' train splits."""
    freqs = {item: 0 for item in data.vocab}
    for user in data.users:
        for item, _ in user.target[:-2]:
            freqs[item] += 1
    return freqs


def popularity_scorer(data: FinetuneData):
    """Scores every candidate by its train-split frequency, user-independent."""
    freq = train_frequencies(data)
    row = np.array([float(freq[item]) for item in data.vocab])

    def scorer(instances):
        return np.tile(row, (len(instances), 1))

    return scorer


def group_label(bounds: tuple, g: int) -> str:
    hi = bounds[g + 1] if g + 1 < len(bounds) else "inf"
    return f"[{bounds[g]},{hi})"


@dataclass(frozen=True)
class GroupReport:
    """Metrics per item-popularity band, with optional ratios vs a baseline."""

    groups: dict[str, MetricReport]
    improvement: dict[str, dict[str, float]] | None = None


def popularity_group_report(results: list[tuple[str, int]],
                            frequencies: dict[str, int],
                            bounds=GROUP_BOUNDS, ks=DEFAULT_KS,
                            baseline: dict[str, MetricReport] | None = None
                            ) -> GroupReport:
    """Split per-user (target item, rank) results into popularity bands.

    ``bounds`` are ascending lower edges; band g covers
    [bounds[g], bounds[g+1]).  Bands with no targets are omitted.  With a
    baseline, each metric gains a relative improvement ratio
    (ours - base) / base wherever the baseline is positive.
    """
    bounds = tuple(bounds)
    if list(bounds) != sorted(set(bounds)):
        raise ConfigError(f"bounds must be strictly ascending, got {bounds}")
    per_group: dict[str, list[int]] = {}
    for item, rank in results:
        freq = frequencies.get(item, 0)
        g = int(np.searchsorted(bounds, freq, side="right")) - 1
        if g < 0:
            continue  # below the lowest band
        per_group.setdefault(group_label(bounds, g), []).append(rank)
    groups = {label: report_from_ranks(ranks, ks)
              for label, ranks in per_group.items()}
    improvement = None
    if baseline is not None:
        improvement = {}
        for label, report in groups.items():
            if label not in baseline:
                continue
            base = baseline[label]
            ratios: dict[str, float] = {}
            for k, value in report.ndcgs.items():
                if base.ndcgs.get(k, 0.0) > 0.0:
                    ratios[f"ndcg@{k}"] = (value - base.ndcgs[k]) / base.ndcgs[k]
            for k, value in report.recalls.items():
                if base.recalls.get(k, 0.0) > 0.0:
                    ratios[f"recall@{k}"] = \
                        (value - base.recalls[k]) / base.recalls[k]
            improvement[label] = ratios
    return GroupReport(groups=groups, improvement=improvement)


# ---------------------------------------------------------------------------
# study variants


@dataclass(frozen=True)
class VariantSpec:
    """Which components a run keeps: projectors degraded to plain linear
    maps, the mixed-flow prediction head, the id head, and pre-training."""

    plain: frozenset[str] = frozenset()
    use_mix: bool = True
    use_id: bool = True
    pretrain: bool = True

    def __post_init__(self):
        unknown = set(self.plain) - set(MODALITIES)
        if unknown:
            raise ConfigError(f"unknown modalities: {sorted(unknown)}")


VARIANTS: dict[str, VariantSpec] = {
    "full": VariantSpec(),
    "wo_tp": VariantSpec(plain=frozenset({"text"})),
    "wo_vp": VariantSpec(plain=frozenset({"image"})),
    "wo_cp": VariantSpec(plain=frozenset({"cross"})),
    "wo_vt": VariantSpec(plain=frozenset({"text", "image"})),
    "wo_cvt": VariantSpec(plain=frozenset({"text", "image", "cross"})),
    "wo_mix": VariantSpec(use_mix=False),
    "wo_id": VariantSpec(use_id=False),
    "wo_cl": VariantSpec(pretrain=False),
}


def variant_by_name(name: str) -> VariantSpec:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; known: {sorted(VARIANTS)}")
    return VARIANTS[name]
