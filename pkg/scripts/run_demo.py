#!/usr/bin/env python3
"""Run the full pipeline on a config by chaining the CLI subcommands.

    python3 scripts/run_demo.py [--config configs/demo.toml] [--out runs/demo]

Each stage lands in its own subdirectory with a manifest; the final
report bundle collects the result tables.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from elevembed.cli import main as cli_main


def run(argv: list[str]) -> None:
    print("+ elevembed " + " ".join(argv))
    code = cli_main(argv)
    if code != 0:
        sys.exit(code)


def run_pipeline(config: str, out: str, sources: list[str] | None = None,
                 taps: list[str] | None = None) -> Path:
    out_dir = Path(out)
    sources = sources or ["simclr", "random-encoder"]
    taps = taps or ["L1"]
    t0 = time.time()

    scene = out_dir / "scene"
    tiles = out_dir / "tiles"
    run(["synth", "--config", config, "--out", str(scene)])
    run(["ingest", "--config", config, "--out", str(tiles),
         "--surface", str(scene / "surface.asc"),
         "--terrain", str(scene / "terrain.asc")])

    train_dir = out_dir / "train"
    run(["train", "--config", config, "--out", str(train_dir),
         "--tiles", str(tiles / "tiles.bin"),
         "--areas", str(scene / "areas.geojson")])

    emb_dir = out_dir / "embed"
    post_dir = out_dir / "post"
    pool_dir = out_dir / "pool"
    for source in sources:
        for tap in taps:
            cmd = ["embed", "--config", config, "--out", str(emb_dir),
                   "--tiles", str(tiles / "tiles.bin"),
                   "--source", source, "--tap", tap]
            if source == "simclr":
                cmd += ["--weights", str(train_dir / "weights.bin")]
            run(cmd)
            tag = f"{source}+{tap}"
            run(["post", "--config", config, "--out", str(post_dir),
                 "--reps", str(emb_dir / f"reps_{tag}.csv"),
                 "--tiles", str(tiles / "tiles.bin"),
                 "--areas", str(scene / "areas.geojson")])
            for emb_csv in sorted(post_dir.glob(f"embeddings_{tag}_K*.csv")):
                run(["pool", "--config", config, "--out", str(pool_dir),
                     "--embeddings", str(emb_csv),
                     "--tiles", str(tiles / "tiles.bin"),
                     "--areas", str(scene / "areas.geojson")])

    eval_dir = out_dir / "evaluate"
    run(["evaluate", "--config", config, "--out", str(eval_dir),
         "--indices", str(scene / "indices.csv"),
         "--areas", str(scene / "areas.geojson"),
         "--pooled-dir", str(pool_dir)])

    interp_dir = out_dir / "interpret"
    first_tag = f"{sources[0]}+{taps[0]}"
    k_small = sorted(int(p.name.split("_K")[1].split(".")[0])
                     for p in post_dir.glob(f"embeddings_{first_tag}_K*.csv"))[0]
    run(["interpret", "--config", config, "--out", str(interp_dir),
         "--embeddings", str(post_dir / f"embeddings_{first_tag}_K{k_small}.csv"),
         "--pooled", str(pool_dir / f"pooled_{first_tag}_K{k_small}_mean.csv"),
         "--indices", str(scene / "indices.csv"),
         "--tiles", str(tiles / "tiles.bin"),
         "--silhouette", str(post_dir / f"silhouette_{first_tag}.csv")])

    run(["report", "--config", config, "--out", str(out_dir / "report"),
         "--run-dir", str(out_dir)])
    print(f"pipeline finished in {time.time() - t0:.1f}s -> {out_dir}")
    return out_dir


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/demo.toml")
    parser.add_argument("--out", default="runs/demo")
    parser.add_argument("--sources", nargs="+",
                        default=["simclr", "random-encoder"])
    parser.add_argument("--taps", nargs="+", default=["L1"])
    args = parser.parse_args()
    run_pipeline(args.config, args.out, args.sources, args.taps)


if __name__ == "__main__":
    main()
