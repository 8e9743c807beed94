#!/usr/bin/env python3
"""Compress a small layered model end to end and read the report.

Runs the full pipeline (capture, channel-weighted whitening, heuristic
allocation, per-weight truncation) at a few global compression ratios and
prints the per-weight report table each time. Watch the cosine similarity
degrade gracefully as the budget tightens, and the parameter/FLOPs
accounting track the requested ratio.
"""
import numpy as np

import dipsvd as d
from dipsvd.pipeline import RunConfig, render_report, run_compress

model = d.spectral_model(4, 24, 24, seed=7)
calib = d.generate_synthetic(96, 24, np.geomspace(1.0, 0.05, 24), seed=8)

for k in (0.1, 0.3, 0.5):
    cfg = RunConfig(
        model_spec=model,
        calibration=calib,
        k=k,
        seed=7,
        amplify=1.5,
        top_fraction=0.05,
        beta=0.0,
        p_min=0.4,
    )
    report = run_compress(cfg, write=False)
    print(f"\n=== global compression ratio k = {k} "
          f"(target: remove {100 * k:.0f}% of parameters) ===")
    print(render_report(report))
