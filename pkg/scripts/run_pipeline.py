#!/usr/bin/env python3
"""End-to-end experiment: zoo -> orbits -> align/canonicalize -> barriers.

Builds a small glyph-INR zoo, moves some members around their symmetry
orbits with added noise, repairs the pairs two ways (weight matching and
autoencoder canonicalization), writes one barrier curve per method per
seed, and aggregates medians into a report.

Everything goes through the CLI so each artifact carries its config hash:

    python3 scripts/run_pipeline.py --out runs/demo --seeds 10
"""

import argparse
import json
import sys
from pathlib import Path

from symcanon.cli import main as cli


def run(*argv):
    argv = [str(a) for a in argv]
    rc = cli(argv)
    if rc != 0:
        sys.exit(f"command failed: {' '.join(argv)}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/pipeline")
    ap.add_argument("--seeds", type=int, default=10, help="orbit pairs to evaluate")
    ap.add_argument("--n-per-class", type=int, default=8)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--arch", default="2-32-32-1")
    ap.add_argument("--inr-steps", type=int, default=600)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--noise-sigma", type=float, default=0.02)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    out = Path(args.out)
    zoo = out / "zoo"
    curves = out / "curves"
    work = out / "work"
    for d in (curves, work):
        d.mkdir(parents=True, exist_ok=True)

    print("== building zoo ==", flush=True)
    run("build-zoo", "--n-per-class", args.n_per_class, "--size", args.size,
        "--arch", args.arch, "--steps", args.inr_steps, "--seed", 0,
        "--jobs", args.jobs, "--out-dir", zoo)

    print("== training autoencoder ==", flush=True)
    model = out / "ae.bin"
    run("train-ae", "--zoo-dir", zoo, "--variant", "scale_sign",
        "--epochs", args.epochs, "--grid", f"{args.size}x{args.size}",
        "--jobs", args.jobs, "--seed", 0,
        "--out", model, "--history-out", out / "ae_history.csv")

    manifest = json.loads((zoo / "manifest.json").read_text())
    entries = manifest["entries"][:args.seeds]
    grid = f"{args.size}x{args.size}"

    for k, entry in enumerate(entries):
        print(f"== pair {k}: {entry['class']} ==", flush=True)
        src = zoo / entry["path"]
        moved = work / f"moved_{k:03d}.json"
        run("orbit", "--ckpt", src, "--domain", "sign_flip", "--seed", k,
            "--noise-sigma", args.noise_sigma, "--out", moved)

        run("interpolate", "--ckpt-a", src, "--ckpt-b", moved, "--grid", grid,
            "--label", "naive", "--out", curves / f"naive_{k:03d}.csv")

        aligned = work / f"aligned_{k:03d}.json"
        run("align", "--ckpt-a", src, "--ckpt-b", moved, "--mode", "perm_sign",
            "--seed", k, "--out", aligned)
        run("interpolate", "--ckpt-a", src, "--ckpt-b", aligned, "--grid", grid,
            "--label", "aligned", "--out", curves / f"aligned_{k:03d}.csv")

        canon_a = work / f"canon_a_{k:03d}.json"
        canon_b = work / f"canon_b_{k:03d}.json"
        run("canonicalize", "--ckpt", src, "--model", model, "--out", canon_a)
        run("canonicalize", "--ckpt", moved, "--model", model, "--out", canon_b)
        run("interpolate", "--ckpt-a", canon_a, "--ckpt-b", canon_b,
            "--grid", grid, "--ref-ckpt", src, "--label", "canonicalized",
            "--out", curves / f"canon_{k:03d}.csv")

    print("== report ==", flush=True)
    run("report", "--run-dir", curves, "--out", out / "report.json")
    print((out / "report.json").read_text())


if __name__ == "__main__":
    main()
