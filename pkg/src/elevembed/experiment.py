"""Hold-out splits, feature-subset assembly, and the evaluation grid.

The 60/20/20 split holds out one whole area group (district) for the
test set and another for validation, topped up with seeded random areas
to the 20% quotas. Three feature subsets are compared per target domain:
the remaining six indices (demographic), the pooled tile embeddings, and
their concatenation. Improvement is measured against the matching
demographic-only run of the same domain and model.

Every fitted transform and model sees training-split areas only; the
target scaler included.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .augment import derive_rng
from .errors import ConfigError
from .pooling import PooledFeatures
from .raster import AreaUnit
from .regress import (SearchBudget, fit_gbm, fit_lasso, fit_target_scaler,
                      predict, rmse, scale_targets)
from .synth import INDEX_NAMES

logger = logging.getLogger(__name__)

SUBSETS = ("demographic", "embedding", "combined")
MODELS = ("lasso", "gbm")
POOLINGS = ("mean", "max")


# ---------------------------------------------------------------------------
# Split plan
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    test_group: str
    val_group: str
    seed: int

    def part_of(self, area_id: str) -> str:
        if area_id in self._train_set:
            return "train"
        if area_id in self._val_set:
            return "val"
        if area_id in self._test_set:
            return "test"
        raise ConfigError(f"area {area_id!r} is not in the split")

    def __post_init__(self):
        object.__setattr__(self, "_train_set", frozenset(self.train))
        object.__setattr__(self, "_val_set", frozenset(self.val))
        object.__setattr__(self, "_test_set", frozenset(self.test))


def build_split(areas: list[AreaUnit], group_for_test: str, group_for_val: str,
                seed: int) -> SplitPlan:
    """Deterministic 60/20/20 plan with one full group per hold-out set."""
    if group_for_test == group_for_val:
        raise ConfigError("test and validation groups must differ")
    ids = sorted(a.id for a in areas)
    group_of = {a.id: a.group_id for a in areas}
    test_core = [i for i in ids if group_of[i] == group_for_test]
    val_core = [i for i in ids if group_of[i] == group_for_val]
    if not test_core or not val_core:
        raise ConfigError("hold-out groups must be non-empty")
    n = len(ids)
    quota = round(0.2 * n)
    if len(test_core) > quota or len(val_core) > quota:
        raise ConfigError(f"hold-out group exceeds the 20% quota ({quota} areas)")

    pool = [i for i in ids if group_of[i] not in (group_for_test, group_for_val)]
    order = derive_rng(seed).permutation(len(pool))
    shuffled = [pool[j] for j in order]
    n_test_fill = quota - len(test_core)
    n_val_fill = quota - len(val_core)
    test = sorted(test_core + shuffled[:n_test_fill])
    val = sorted(val_core + shuffled[n_test_fill:n_test_fill + n_val_fill])
    train = sorted(shuffled[n_test_fill + n_val_fill:])
    return SplitPlan(train=tuple(train), val=tuple(val), test=tuple(test),
                     test_group=group_for_test, val_group=group_for_val,
                     seed=seed)


# ---------------------------------------------------------------------------
# Feature assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    domain: str
    subset: str               # demographic | embedding | combined
    source: str = ""          # simclr | external | random-encoder ("" for demographic)
    layer: str = ""           # encoder tap for encoder-based sources
    k: int = 0                # embedding size (0 for demographic)
    pooling: str = ""         # mean | max ("" for demographic)
    model: str = "lasso"
    seed: int = 0

    def __post_init__(self):
        if self.domain not in INDEX_NAMES:
            raise ConfigError(f"unknown domain {self.domain!r}")
        if self.subset not in SUBSETS:
            raise ConfigError(f"unknown subset {self.subset!r}")
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}")

    @property
    def embedding_key(self) -> tuple[str, str, int, str]:
        return (self.source, self.layer, self.k, self.pooling)


def demographic_columns(domain: str) -> list[int]:
    """Indices of the six non-target columns, in canonical order."""
    target = INDEX_NAMES.index(domain)
    return [i for i in range(len(INDEX_NAMES)) if i != target]


def assemble_features(spec: ExperimentSpec, area_ids,
                      indices: dict[str, np.ndarray],
                      pooled: dict[str, PooledFeatures] | None,
                      ) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """(X, raw y, used area ids) for one split part.

    Areas lacking a pooled vector are dropped (with a warning) from
    subsets that need embeddings; the demographic subset keeps them all.
    """
    target_col = INDEX_NAMES.index(spec.domain)
    demo_cols = demographic_columns(spec.domain)
    needs_embedding = spec.subset in ("embedding", "combined")
    if needs_embedding and pooled is None:
        raise ConfigError(f"subset {spec.subset!r} needs pooled embeddings")

    used, dropped, feats, targets = [], [], [], []
    for area_id in sorted(area_ids):
        if area_id not in indices:
            raise ConfigError(f"area {area_id!r} has no index row")
        row = indices[area_id]
        if needs_embedding:
            pf = pooled.get(area_id)
            if pf is None:
                dropped.append(area_id)
                continue
            vec = pf.vector if spec.subset == "embedding" \
                else np.concatenate([row[demo_cols], pf.vector])
        else:
            vec = row[demo_cols]
        feats.append(vec)
        targets.append(row[target_col])
        used.append(area_id)
    if dropped:
        logger.warning("dropped %d areas without pooled vectors: %s",
                       len(dropped), dropped[:8])
    if not feats:
        raise ConfigError("no usable areas after assembly")
    return np.stack(feats), np.array(targets), used


# ---------------------------------------------------------------------------
# Grid evaluation
# ---------------------------------------------------------------------------


@dataclass
class ResultRow:
    spec: ExperimentSpec
    val_rmse: float = float("nan")
    test_rmse: float = float("nan")
    improvement_pct: float = float("nan")
    failed: bool = False

    @property
    def display_improvement(self) -> int:
        return int(round(self.improvement_pct))


def improvement_pct(rmse_demographic: float, rmse_subset: float) -> float:
    """Percentage RMSE improvement over the demographic-only run."""
    return 100.0 * (rmse_demographic - rmse_subset) / rmse_demographic


def run_single(spec: ExperimentSpec, plan: SplitPlan,
               indices: dict[str, np.ndarray],
               pooled: dict[str, PooledFeatures] | None,
               patience: int = 20, n_rounds_max: int = 300) -> ResultRow:
    x_tr, y_tr_raw, _ = assemble_features(spec, plan.train, indices, pooled)
    x_va, y_va_raw, _ = assemble_features(spec, plan.val, indices, pooled)
    x_te, y_te_raw, _ = assemble_features(spec, plan.test, indices, pooled)
    scaler = fit_target_scaler(y_tr_raw)
    y_tr = scale_targets(y_tr_raw, scaler)
    y_va = scale_targets(y_va_raw, scaler)
    y_te = scale_targets(y_te_raw, scaler)

    if spec.model == "lasso":
        model = fit_lasso(x_tr, y_tr, seed=spec.seed)
    else:
        model = fit_gbm(x_tr, y_tr, x_va, y_va, SearchBudget(seed=spec.seed),
                        patience=patience, n_rounds_max=n_rounds_max)
    return ResultRow(spec=spec,
                     val_rmse=rmse(predict(model, x_va), y_va),
                     test_rmse=rmse(predict(model, x_te), y_te))


def run_grid(specs: list[ExperimentSpec], plan: SplitPlan,
             indices: dict[str, np.ndarray],
             pooled_lookup: dict[tuple, dict[str, PooledFeatures]],
             patience: int = 20, n_rounds_max: int = 300) -> list[ResultRow]:
    """One result row per spec; failures are marked and the grid continues.

    Improvement is filled in against the demographic row sharing the
    domain and model (0 for demographic rows themselves).
    """
    rows: list[ResultRow] = []
    for spec in specs:
        pooled = None
        if spec.subset != "demographic":
            pooled = pooled_lookup.get(spec.embedding_key)
            if pooled is None:
                logger.warning("no pooled table for %s; row marked failed",
                               spec.embedding_key)
                rows.append(ResultRow(spec=spec, failed=True))
                continue
        try:
            rows.append(run_single(spec, plan, indices, pooled,
                                   patience=patience, n_rounds_max=n_rounds_max))
        except Exception as exc:  # keep the grid running
            logger.warning("spec %s failed: %s", spec, exc)
            rows.append(ResultRow(spec=spec, failed=True))

    demo_rmse: dict[tuple[str, str], float] = {}
    for row in rows:
        if row.spec.subset == "demographic" and not row.failed:
            demo_rmse[(row.spec.domain, row.spec.model)] = row.test_rmse
    for row in rows:
        if row.failed:
            continue
        base = demo_rmse.get((row.spec.domain, row.spec.model))
        if row.spec.subset == "demographic":
            row.improvement_pct = 0.0
        elif base is not None:
            row.improvement_pct = improvement_pct(base, row.test_rmse)
    return rows


def grid_specs(domains, subsets, sources, layers, ks, poolings, models,
               seed: int = 0) -> list[ExperimentSpec]:
    """Cartesian spec list; demographic rows collapse to one per
    (domain, model) since they ignore the embedding axes."""
    specs: list[ExperimentSpec] = []
    for domain in domains:
        for model in models:
            if "demographic" in subsets:
                specs.append(ExperimentSpec(domain=domain, subset="demographic",
                                            model=model, seed=seed))
            for subset in subsets:
                if subset == "demographic":
                    continue
                for source in sources:
                    for layer in layers:
                        for k in ks:
                            for pooling in poolings:
                                specs.append(ExperimentSpec(
                                    domain=domain, subset=subset, source=source,
                                    layer=layer, k=k, pooling=pooling,
                                    model=model, seed=seed))
    return specs
