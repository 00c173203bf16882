"""Command-line pipeline: synth, ingest, train, embed, post, pool,
evaluate, interpret, report.

Every subcommand reads one TOML run configuration (``--set section.key=v``
overrides file values), validates its inputs, writes outputs atomically,
and leaves a manifest.json recording the config hash, the seeds in play,
and digests of the input files. Exit codes: 0 ok, 1 runtime failure,
2 usage or missing input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import contrastive, embedding, encoder, interpret, pooling, raster, regress
from .augment import AugmentSpec
from .contrastive import ContrastiveConfig
from .encoder import ConvStage, EncoderConfig
from .errors import ConfigError, ElevEmbedError
from .experiment import build_split, grid_specs, run_grid
from .reports import (atomic_output, build_manifest, sha256_file, write_charts,
                      write_manifest, write_results_csv)
from .synth import default_archetypes, generate_scene, read_indices_csv, write_scene

logger = logging.getLogger("elevembed")

# section -> allowed keys; seeds are mandatory wherever listed
CONFIG_SCHEMA = {
    "synth": {"seed", "areas_x", "areas_y", "area_side", "noise_sd", "group_cols"},
    "ingest": {"tile_side", "nodata_policy"},
    "encoder": {"input_side", "conv_channels", "kernel", "stride", "head_dim",
                "projection_dim", "seed"},
    "augment": {"scale_min", "scale_max", "flip_h_prob", "flip_v_prob",
                "gain_min", "gain_max", "gamma_min", "gamma_max",
                "offset_min", "offset_max", "sigma_min", "sigma_max", "blur_prob"},
    "train": {"temperature", "batch_pairs", "epochs", "learning_rate", "seed"},
    "post": {"k_grid", "seed"},
    "split": {"test_group", "val_group", "seed"},
    "evaluate": {"domains", "subsets", "sources", "layers", "ks", "poolings",
                 "models", "patience", "gbm_rounds_max", "seed"},
    "interpret": {"k", "m_representatives", "seed"},
}

SEED_SECTIONS = ("synth", "encoder", "train", "post", "split", "evaluate",
                 "interpret")


def load_config(path, overrides: list[str] | None = None) -> dict:
    """Parse and validate the run configuration; flags override the file."""
    with open(path, "rb") as fh:
        config = tomllib.load(fh)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not section.key=value")
        dotted, value = item.split("=", 1)
        if dotted.count(".") != 1:
            raise ConfigError(f"override key {dotted!r} is not section.key")
        section, key = dotted.split(".")
        try:
            parsed = tomllib.loads(f"x = {value}")["x"]
        except tomllib.TOMLDecodeError:
            parsed = value  # bare strings are taken literally
        config.setdefault(section, {})[key] = parsed

    for section, keys in config.items():
        if section not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        unknown = set(keys) - CONFIG_SCHEMA[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    for section in SEED_SECTIONS:
        if section in config and "seed" not in config[section]:
            raise ConfigError(f"[{section}] must declare its seed explicitly")
    return config


def _section(config: dict, name: str) -> dict:
    if name not in config:
        raise ConfigError(f"config is missing the [{name}] section")
    return config[name]


def encoder_config(config: dict) -> EncoderConfig:
    sec = _section(config, "encoder")
    stages = tuple(ConvStage(int(c), int(sec.get("kernel", 3)),
                             int(sec.get("stride", 2)))
                   for c in sec.get("conv_channels", [16, 32, 64, 128]))
    head = int(sec.get("head_dim", 512))
    return EncoderConfig(input_side=int(sec.get("input_side", 64)),
                         conv_stages=stages, head_dims=(head,) * 4,
                         projection_dim=int(sec.get("projection_dim", 64)))


def augment_spec(config: dict) -> AugmentSpec:
    sec = config.get("augment", {})
    spec = AugmentSpec(
        scale_min=sec.get("scale_min", 0.6), scale_max=sec.get("scale_max", 1.0),
        flip_h_prob=sec.get("flip_h_prob", 0.5), flip_v_prob=sec.get("flip_v_prob", 0.5),
        gain_range=(sec.get("gain_min", 0.8), sec.get("gain_max", 1.2)),
        gamma_range=(sec.get("gamma_min", 0.8), sec.get("gamma_max", 1.25)),
        offset_range=(sec.get("offset_min", -0.5), sec.get("offset_max", 0.5)),
        sigma_range=(sec.get("sigma_min", 0.1), sec.get("sigma_max", 2.0)),
        blur_prob=sec.get("blur_prob", 0.5))
    spec.validate()
    return spec


def split_plan(config: dict, areas):
    sec = _section(config, "split")
    return build_split(areas, sec["test_group"], sec["val_group"], int(sec["seed"]))


def train_tile_ids(plan, assignment) -> set[int]:
    train_areas = set(plan.train)
    return {t for t, a in assignment.area_for_tile.items() if a in train_areas}


def collect_seeds(config: dict) -> dict[str, int]:
    return {section: int(config[section]["seed"])
            for section in SEED_SECTIONS if section in config}


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing {what}: {p}")
    return p


def _finish(args, config, inputs: dict[str, str]) -> None:
    manifest = build_manifest(args.command, config, collect_seeds(config), inputs)
    write_manifest(manifest, args.out)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, config):
    sec = _section(config, "synth")
    scene = generate_scene(seed=int(sec["seed"]), areas_x=int(sec["areas_x"]),
                           areas_y=int(sec["areas_y"]),
                           area_side=int(sec["area_side"]),
                           params=default_archetypes(),
                           noise_sd=float(sec.get("noise_sd", 0.0)),
                           group_cols=int(sec.get("group_cols", 2)),
                           tile_side=int(config.get("ingest", {}).get("tile_side", 0))
                           or None)
    write_scene(scene, Path(args.out))
    _finish(args, config, {})


def cmd_ingest(args, config):
    sec = _section(config, "ingest")
    surface = raster.load_raster(_require(args.surface, "surface raster"))
    terrain = raster.load_raster(_require(args.terrain, "terrain raster"))
    normalized = raster.normalize_elevation(surface, terrain)
    tiles = raster.tile_grid(normalized, int(sec["tile_side"]),
                             sec.get("nodata_policy", "impute-zero"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with atomic_output(out / "tiles.bin") as tmp:
        raster.write_tile_store(tiles, tmp)
    logger.info("wrote %d tiles of side %d", len(tiles), tiles.side)
    _finish(args, config, {"surface": args.surface, "terrain": args.terrain})


def cmd_train(args, config):
    tiles = raster.read_tile_store(_require(args.tiles, "tile store"))
    areas = raster.load_areas(_require(args.areas, "area file"))
    plan = split_plan(config, areas)
    assignment = raster.assign_by_centroid(tiles, areas)
    keep = np.array([int(t) in train_tile_ids(plan, assignment)
                     for t in tiles.ids])
    train_tiles = tiles.subset(keep)
    logger.info("training on %d of %d tiles (train split only)",
                len(train_tiles), len(tiles))

    sec = _section(config, "train")
    cfg = ContrastiveConfig(temperature=float(sec.get("temperature", 0.5)),
                            batch_pairs=int(sec.get("batch_pairs", 64)),
                            epochs=int(sec.get("epochs", 30)),
                            learning_rate=float(sec.get("learning_rate", 1e-3)),
                            seed=int(sec["seed"]))
    model = encoder.init_encoder(encoder_config(config),
                                 seed=int(_section(config, "encoder")["seed"]))
    trained, trace = contrastive.train_simclr(train_tiles, model,
                                              augment_spec(config), cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with atomic_output(out / "weights.bin") as tmp:
        encoder.save_weights(trained, tmp)
    with atomic_output(out / "loss_trace.csv") as tmp:
        contrastive.write_loss_trace(trace, tmp)
    _finish(args, config, {"tiles": args.tiles, "areas": args.areas})


def cmd_embed(args, config):
    tiles = raster.read_tile_store(_require(args.tiles, "tile store"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {"tiles": args.tiles}

    if args.source == "external":
        ids, matrix, missing = encoder.import_external_features(
            _require(args.external_csv, "external feature CSV"), tiles.ids)
        if missing:
            logger.warning("external features missing %d tile ids: %s...",
                           len(missing), missing[:5])
            with atomic_output(out / "missing_tiles.json") as tmp:
                tmp.write_text(json.dumps(missing))
        tag = "external+none"
        inputs["external_csv"] = args.external_csv
    else:
        if args.source == "simclr":
            model = encoder.load_weights(_require(args.weights, "weight file"))
            inputs["weights"] = args.weights
        elif args.source == "random-encoder":
            model = encoder.init_encoder(encoder_config(config),
                                         seed=int(_section(config, "encoder")["seed"]))
        else:
            raise ConfigError(f"unknown embedding source {args.source!r}")
        ids, matrix = contrastive.extract_representations(model, tiles, tap=args.tap)
        tag = f"{args.source}+{args.tap}"

    with atomic_output(out / f"reps_{tag}.csv") as tmp:
        contrastive.write_representations_csv(ids, matrix, tmp)
    logger.info("wrote representations %s: %s", tag, matrix.shape)
    _finish(args, config, inputs)


def _tag_of(path: Path, prefix: str) -> str:
    """source+tap tag from a filename like reps_simclr+L1.csv."""
    pre = prefix + "_"
    if not path.name.startswith(pre):
        raise ConfigError(f"cannot derive source tag from {path.name!r}")
    return path.name[len(pre):].split("_K")[0].removesuffix(".csv")


def cmd_post(args, config):
    reps_path = _require(args.reps, "representations CSV")
    tiles = raster.read_tile_store(_require(args.tiles, "tile store"))
    areas = raster.load_areas(_require(args.areas, "area file"))
    plan = split_plan(config, areas)
    assignment = raster.assign_by_centroid(tiles, areas)
    train_ids = train_tile_ids(plan, assignment)

    ids, matrix, _ = encoder.import_external_features(reps_path)
    train_rows = np.array([int(t) in train_ids for t in ids])
    if not train_rows.any():
        raise ConfigError("no representation rows belong to the training split")

    sec = _section(config, "post")
    tag = args.tag or _tag_of(Path(reps_path), "reps")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    silhouettes = {}
    for k in sec.get("k_grid", list(embedding.DEFAULT_K_GRID)):
        pipe = embedding.fit_pipeline(matrix[train_rows], int(k), int(sec["seed"]))
        embs = embedding.transform(ids, matrix, pipe)
        with atomic_output(out / f"pipeline_{tag}_K{k}.bin") as tmp:
            embedding.save_pipeline(pipe, tmp)
        with atomic_output(out / f"embeddings_{tag}_K{k}.csv") as tmp:
            embedding.write_embeddings_csv(embs, tmp)
        train_points = embedding.project_points(matrix[train_rows], pipe)
        train_embs = embedding.transform(ids[train_rows], matrix[train_rows], pipe)
        labels = np.array([e.cluster for e in train_embs])
        if len(np.unique(labels)) >= 2:
            silhouettes[int(k)] = embedding.silhouette(train_points, labels)
        logger.info("K=%d: %d components, inertia %.3f", k,
                    pipe.pca.n_components, pipe.kmeans.inertia)
    with atomic_output(out / f"silhouette_{tag}.csv") as tmp:
        with open(tmp, "w", encoding="ascii") as fh:
            fh.write("K,silhouette\n")
            for k, s in sorted(silhouettes.items()):
                fh.write(f"{k},{s!r}\n")
    _finish(args, config, {"reps": str(reps_path), "tiles": args.tiles,
                           "areas": args.areas})


def cmd_pool(args, config):
    emb_path = _require(args.embeddings, "embeddings CSV")
    tiles = raster.read_tile_store(_require(args.tiles, "tile store"))
    areas = raster.load_areas(_require(args.areas, "area file"))
    assignment = raster.assign_by_centroid(tiles, areas)
    embs = embedding.read_embeddings_csv(emb_path)
    stem = Path(emb_path).name.removeprefix("embeddings_").removesuffix(".csv")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    coverage = {}
    for method in ("mean", "max"):
        pooled, missing = pooling.pool(embs, assignment, method,
                                       area_ids=[a.id for a in areas])
        with atomic_output(out / f"pooled_{stem}_{method}.csv") as tmp:
            pooling.write_pooled_csv(pooled, tmp)
        coverage[method] = {"areas": len(pooled), "missing": missing}
    with atomic_output(out / f"coverage_{stem}.json") as tmp:
        tmp.write_text(json.dumps(coverage, indent=1, sort_keys=True) + "\n")
    _finish(args, config, {"embeddings": str(emb_path), "tiles": args.tiles,
                           "areas": args.areas})


def cmd_evaluate(args, config):
    indices = read_indices_csv(_require(args.indices, "indices CSV"))
    pooled_dir = _require(args.pooled_dir, "pooled directory")
    lookup = {}
    for path in sorted(Path(pooled_dir).glob("pooled_*_K*_*.csv")):
        name = path.name.removeprefix("pooled_").removesuffix(".csv")
        tag, rest = name.split("_K")
        k_str, method = rest.split("_")
        source, _, layer = tag.partition("+")
        layer = "" if layer in ("", "none") else layer
        lookup[(source, layer, int(k_str), method)] = pooling.read_pooled_csv(path)
    if not lookup:
        raise FileNotFoundError(f"no pooled CSVs found under {pooled_dir}")

    areas = raster.load_areas(_require(args.areas, "area file"))
    plan = split_plan(config, areas)

    sec = _section(config, "evaluate")
    specs = grid_specs(domains=sec["domains"], subsets=sec["subsets"],
                       sources=sec["sources"], layers=sec["layers"],
                       ks=[int(k) for k in sec["ks"]],
                       poolings=sec["poolings"], models=sec["models"],
                       seed=int(sec["seed"]))
    rows = run_grid(specs, plan, indices, lookup,
                    patience=int(sec.get("patience", 20)),
                    n_rounds_max=int(sec.get("gbm_rounds_max", 300)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with atomic_output(out / "results.csv") as tmp:
        write_results_csv(rows, tmp)
    write_charts(rows, out)
    n_failed = sum(r.failed for r in rows)
    logger.info("grid complete: %d rows, %d failed", len(rows), n_failed)
    _finish(args, config, {"indices": args.indices, "areas": args.areas})


def cmd_interpret(args, config):
    sec = _section(config, "interpret")
    embs = embedding.read_embeddings_csv(_require(args.embeddings, "embeddings CSV"))
    pooled = pooling.read_pooled_csv(_require(args.pooled, "pooled CSV"))
    indices = read_indices_csv(_require(args.indices, "indices CSV"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.silhouette:
        scores = {}
        with open(_require(args.silhouette, "silhouette CSV")) as fh:
            fh.readline()
            for line in fh:
                k_str, s = line.strip().split(",")
                scores[int(k_str)] = float(s)
        best_k = max(scores, key=lambda k: scores[k])
        with atomic_output(out / "silhouette_selection.json") as tmp:
            tmp.write_text(json.dumps({"best_k": best_k, "scores": scores},
                                      indent=1, sort_keys=True) + "\n")
        logger.info("silhouette-selected K = %d (score %.4f)",
                    best_k, scores[best_k])

    clusters = interpret.assign_areas_to_clusters(pooled)
    profiles = interpret.cluster_index_profile(
        clusters, indices, embeddings=embs,
        m_representatives=int(sec.get("m_representatives", 8)),
        seed=int(sec["seed"]))
    with atomic_output(out / "profiles.csv") as tmp:
        interpret.write_profiles_csv(profiles, tmp)
    with atomic_output(out / "area_representation.csv") as tmp:
        interpret.write_area_representation_csv(pooled, tmp)
    with atomic_output(out / "tile_panels.json") as tmp:
        interpret.write_tile_panel_manifest(profiles, tmp)

    inputs = {"embeddings": args.embeddings, "pooled": args.pooled,
              "indices": args.indices}
    if args.silhouette:
        inputs["silhouette"] = args.silhouette
    if args.tiles:
        tiles = raster.read_tile_store(_require(args.tiles, "tile store"))
        index_of = {int(t): i for i, t in enumerate(tiles.ids)}
        for p in profiles:
            for tid in p.representative_tiles:
                if tid in index_of:
                    name = f"thumb_cluster{p.cluster}_tile{tid}.pgm"
                    with atomic_output(out / name) as tmp:
                        _write_pgm(tiles.elevations[index_of[tid]], tmp)
        inputs["tiles"] = args.tiles
    _finish(args, config, inputs)


def _write_pgm(elev: np.ndarray, path) -> None:
    lo, hi = float(elev.min()), float(elev.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = ((elev - lo) * scale).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def cmd_report(args, config):
    run_dir = _require(args.run_dir, "run directory")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = {"manifests": {}, "artifacts": []}
    for manifest in sorted(Path(run_dir).rglob("manifest.json")):
        rel = str(manifest.parent.relative_to(run_dir))
        bundle["manifests"][rel] = json.loads(manifest.read_text())
    for pattern in ("**/results.csv", "**/profiles.csv", "**/silhouette_*.csv",
                    "**/loss_trace.csv", "**/coverage_*.json"):
        for artifact in sorted(Path(run_dir).glob(pattern)):
            rel = str(artifact.relative_to(run_dir))
            bundle["artifacts"].append({"path": rel,
                                        "sha256": sha256_file(artifact)})
            target = out / Path(rel).name
            with atomic_output(target) as tmp:
                tmp.write_bytes(artifact.read_bytes())
    with atomic_output(out / "report.json") as tmp:
        tmp.write_text(json.dumps(bundle, indent=1, sort_keys=True) + "\n")
    _finish(args, config, {})


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="elevembed",
        description="elevation tile embeddings: synthesis, pretraining, "
                    "post-processing, pooling, and evaluation")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap (the reference pipeline is serial)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE")
        for flag, kwargs in extra.items():
            p.add_argument(flag, **kwargs)
        p.set_defaults(fn=fn)
        return p

    add("synth", cmd_synth)
    add("ingest", cmd_ingest, **{"--surface": {"required": True},
                                 "--terrain": {"required": True}})
    add("train", cmd_train, **{"--tiles": {"required": True},
                               "--areas": {"required": True}})
    add("embed", cmd_embed, **{
        "--tiles": {"required": True},
        "--source": {"required": True,
                     "choices": ["simclr", "random-encoder", "external"]},
        "--tap": {"default": "L1"},
        "--weights": {"default": None},
        "--external-csv": {"default": None, "dest": "external_csv"}})
    add("post", cmd_post, **{"--reps": {"required": True},
                             "--tiles": {"required": True},
                             "--areas": {"required": True},
                             "--tag": {"default": None}})
    add("pool", cmd_pool, **{"--embeddings": {"required": True},
                             "--tiles": {"required": True},
                             "--areas": {"required": True}})
    add("evaluate", cmd_evaluate, **{"--indices": {"required": True},
                                     "--areas": {"required": True},
                                     "--pooled-dir": {"required": True,
                                                      "dest": "pooled_dir"}})
    add("interpret", cmd_interpret, **{"--embeddings": {"required": True},
                                       "--pooled": {"required": True},
                                       "--indices": {"required": True},
                                       "--tiles": {"default": None},
                                       "--silhouette": {"default": None}})
    add("report", cmd_report, **{"--run-dir": {"required": True,
                                               "dest": "run_dir"}})
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("elevembed: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        config = load_config(Path(args.config), args.overrides)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        args.fn(args, config)
    except (FileNotFoundError, tomllib.TOMLDecodeError) as exc:
        print(f"elevembed {args.command}: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"elevembed {args.command}: {exc}", file=sys.stderr)
        return 2
    except ElevEmbedError as exc:
        print(f"elevembed {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"elevembed {args.command}: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
