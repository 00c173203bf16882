"""Result tables, summary charts, and run manifests.

CSV cells use repr() of Python floats so reruns are byte-identical;
charts are SVG with a fixed hash salt and no embedded date. Failed grid
rows keep their spec echo and leave the numeric cells empty.
"""

from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .experiment import ExperimentSpec, ResultRow

RESULTS_HEADER = ("domain,subset,source,layer,K,pooling,model,"
                  "val_rmse,test_rmse,improvement_pct")


@contextmanager
def atomic_output(path):
    """Yield a temp path that is renamed onto `path` on success."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _fmt(value: float) -> str:
    return "" if not np.isfinite(value) else repr(float(value))


def write_results_csv(rows: list[ResultRow], path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(RESULTS_HEADER + "\n")
        for r in rows:
            s = r.spec
            fh.write(",".join([s.domain, s.subset, s.source, s.layer, str(s.k),
                               s.pooling, s.model, _fmt(r.val_rmse),
                               _fmt(r.test_rmse), _fmt(r.improvement_pct)]) + "\n")


def read_results_csv(path) -> list[ResultRow]:
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        if fh.readline().rstrip("\n") != RESULTS_HEADER:
            raise ConfigError("unexpected results CSV header")
        for line in fh:
            (domain, subset, source, layer, k, pooling, model,
             val_rmse, test_rmse, imp) = line.rstrip("\n").split(",")
            spec = ExperimentSpec(domain=domain, subset=subset, source=source,
                                  layer=layer, k=int(k), pooling=pooling,
                                  model=model)
            rows.append(ResultRow(
                spec=spec,
                val_rmse=float(val_rmse) if val_rmse else float("nan"),
                test_rmse=float(test_rmse) if test_rmse else float("nan"),
                improvement_pct=float(imp) if imp else float("nan"),
                failed=not val_rmse))
    return rows


# ---------------------------------------------------------------------------
# Charts
# ---------------------------------------------------------------------------


def _improvement_groups(rows, key):
    groups: dict[str, list[float]] = {}
    for r in rows:
        if r.failed or r.spec.subset != "combined":
            continue
        if not np.isfinite(r.improvement_pct):
            continue
        groups.setdefault(str(key(r.spec)), []).append(r.improvement_pct)
    return dict(sorted(groups.items()))


def _save_svg(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def write_charts(rows: list[ResultRow], outdir) -> list[str]:
    """Improvement summaries grouped by pooling, model, source, size and
    layer, plus per-domain test RMSE bars. Returns the written paths."""
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "elevembed"
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    written = []

    panels = [("pooling", lambda s: s.pooling), ("model", lambda s: s.model),
              ("source", lambda s: s.source), ("K", lambda s: s.k)]
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 4))
    for ax, (title, key) in zip(np.atleast_1d(axes), panels):
        groups = _improvement_groups(rows, key)
        if groups:
            ax.boxplot(list(groups.values()), tick_labels=list(groups.keys()))
        ax.set_title(f"improvement by {title}")
        ax.set_ylabel("% RMSE improvement")
        ax.axhline(0.0, color="grey", lw=0.5)
    fig.tight_layout()
    p = outdir / "improvement_by_config.svg"
    _save_svg(fig, p)
    plt.close(fig)
    written.append(str(p))

    layer_groups = _improvement_groups(rows, lambda s: s.layer or "-")
    fig, ax = plt.subplots(figsize=(6, 4))
    if layer_groups:
        ax.boxplot(list(layer_groups.values()), tick_labels=list(layer_groups.keys()))
    ax.set_title("improvement by encoder layer")
    ax.set_ylabel("% RMSE improvement")
    ax.axhline(0.0, color="grey", lw=0.5)
    fig.tight_layout()
    p = outdir / "improvement_by_layer.svg"
    _save_svg(fig, p)
    plt.close(fig)
    written.append(str(p))

    by_domain: dict[str, dict[str, float]] = {}
    for r in rows:
        if r.failed or not np.isfinite(r.test_rmse):
            continue
        slot = by_domain.setdefault(r.spec.domain, {})
        prev = slot.get(r.spec.subset)
        if prev is None or r.test_rmse < prev:
            slot[r.spec.subset] = r.test_rmse
    fig, ax = plt.subplots(figsize=(8, 4))
    domains = sorted(by_domain)
    subsets = ("demographic", "embedding", "combined")
    width = 0.25
    xs = np.arange(len(domains))
    for i, subset in enumerate(subsets):
        vals = [by_domain[d].get(subset, np.nan) for d in domains]
        ax.bar(xs + (i - 1) * width, vals, width, label=subset)
    ax.set_xticks(xs)
    ax.set_xticklabels(domains, rotation=30, ha="right")
    ax.set_ylabel("best test RMSE")
    ax.legend()
    fig.tight_layout()
    p = outdir / "rmse_by_domain.svg"
    _save_svg(fig, p)
    plt.close(fig)
    written.append(str(p))
    return written


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def build_manifest(command: str, config: dict, seeds: dict[str, int],
                   inputs: dict[str, str]) -> dict:
    return {
        "command": command,
        "config_hash": config_hash(config),
        "seeds": dict(sorted(seeds.items())),
        "inputs": {name: sha256_file(p) for name, p in sorted(inputs.items())},
    }


def write_manifest(manifest: dict, outdir) -> None:
    path = Path(outdir) / "manifest.json"
    with atomic_output(path) as tmp:
        with open(tmp, "w", encoding="ascii") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
