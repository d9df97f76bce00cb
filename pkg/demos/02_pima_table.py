#!/usr/bin/env python3
"""
Repeated-split benchmark on the Pima diabetes data.

Each repetition holds out 10% of the rows, trains with m set to a fraction of
the remaining rows and reports the held-out negative log-likelihood. The
defaults here are small so the script finishes in about a minute; pass
``--full`` for 5 repetitions of 250 iterations.
"""

import sys

import numpy as np

from sepgp import load_pima
from sepgp.cli import run_benchmark

full = "--full" in sys.argv
reps, iters = (5, 250) if full else (2, 60)
fractions = [0.15, 0.25, 0.5]

data = load_pima()
print(f"Pima: {data.n} rows, {data.d} features; {reps} reps x {iters} iterations")

rows = run_benchmark(data, fractions, reps, iters, test_fraction=0.1, seed0=0)

# %% summary per inducing fraction
print(f"{'m':>5} {'NLL':>12} {'error':>12} {'seconds':>8}")
for f in fractions:
    sel = [r for r in rows if r[2] == f]
    nll = np.array([r[3] for r in sel])
    err = np.array([r[4] for r in sel])
    secs = np.mean([r[5] for r in sel])
    print(f"{f:5.0%} {nll.mean():6.3f}+-{nll.std():.3f} {err.mean():6.3f}+-{err.std():.3f} "
          f"{secs:8.1f}")
