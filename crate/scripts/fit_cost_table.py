"""Fit per-event energy costs (pJ) to the reference per-image energies.

Usage: spinbnn energy --reference | python3 scripts/fit_cost_table.py
The input is the JSON-lines output of the `energy --reference` verb; each
line carries `method`, `target_uj` and the dynamic event counts.
"""
import json
import sys

import numpy as np
from scipy.optimize import nnls

KINDS = ["rng_bits", "crossbar_reads", "wordline_activations", "scale_memory_reads", "adc_conversions"]


def main():
    rows = [r for r in (json.loads(l) for l in sys.stdin if l.strip()) if "target_uj" in r]
    rows = [r for r in rows if "target_uj" in r]
    a = np.array([[r["counts"][k] for k in KINDS] for r in rows], dtype=float) * 1e-6
    b = np.array([r["target_uj"] for r in rows])
    w = 1.0 / b
    x, _ = nnls(a * w[:, None], b * w)
    for k, c in zip(KINDS, x):
        print(f"{k:22s} {c:.5g}")
    for r, e in zip(rows, a @ x):
        print(f"{r['method']:10s} {e:.4f} uJ  target {r['target_uj']:.2f}  err {100 * (e / r['target_uj'] - 1):+.2f}%")


if __name__ == "__main__":
    main()
