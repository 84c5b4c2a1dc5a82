#!/usr/bin/env python3
"""Pilot runs behind the shipped presets and the acceptance thresholds.

Trains each preset on the first 45k tokens of the default synthetic set and
evaluates on the last 5k. Usage:

    cargo build --release
    python3 pilots/pilot.py [--bin target/release/saelab] [--work /tmp/saelab-pilot] > pilots/results.tsv
"""
import argparse
import json
import os
import subprocess
import sys
import time

HOLDOUT = 5000
RUNS = [("dense_wide", 0)] + [("scale_e1", s) for s in range(3)] + [("scale_e2", s) for s in range(5)]
COLUMNS = ["preset", "seed", "final_recon_loss", "mse", "omega", "intra_expert_sim", "inter_expert_sim", "dictionary_recovery", "secs"]


def sh(*args):
    p = subprocess.run(args, capture_output=True, text=True)
    if p.returncode:
        sys.exit(f"{' '.join(args)} failed ({p.returncode}): {p.stderr}")
    return p.stdout


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--bin", default="target/release/saelab")
    ap.add_argument("--work", default="/tmp/saelab-pilot")
    a = ap.parse_args()
    data = os.path.join(a.work, "data")
    sh(a.bin, "gen-data", "--d-model", "32", "--true-features", "128", "--tokens", "50000", "--seed", "0", "--out", data)
    print("\t".join(COLUMNS), flush=True)
    for preset, seed in RUNS:
        out = os.path.join(a.work, f"{preset}-{seed}")
        t = time.time()
        sh(a.bin, "train", "--preset", preset, "--data", f"{data}/activations.saea", "--set", f"seed={seed}",
           "--holdout", str(HOLDOUT), "--out", out)
        ev = sh(a.bin, "eval", "--checkpoint", f"{out}/checkpoint.saec", "--data", f"{data}/activations.saea",
                "--truth", f"{data}/ground_truth.saeg", "--holdout", str(HOLDOUT), "--out", out)
        m = dict(line.split("\t") for line in ev.strip().splitlines()[1:])
        with open(f"{out}/steps.jsonl") as f:
            last = f.read().strip().splitlines()[-1]
        report = json.loads(last)
        m["omega"] = repr(report["omega"])
        m["final_recon_loss"] = repr(report["recon_loss"])
        m.update(preset=preset, seed=str(seed), secs=f"{time.time() - t:.1f}")
        print("\t".join(m.get(c, "-") for c in COLUMNS), flush=True)


if __name__ == "__main__":
    main()
