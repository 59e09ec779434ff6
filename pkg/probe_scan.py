"""Probe: 4x4 model-order scan on the T=500 dataset, tuned chain config."""
import time

import numpy as np

from matrixdfm.marglik import ml_model_scan
from matrixdfm.simulate import design_dimension_scan, generate_mdfm

cfg = design_dimension_scan(T=500, seed=11)
data, _, _ = generate_mdfm(cfg)

cands = [(a, b) for a in range(1, 5) for b in range(1, 5)]
t0 = time.perf_counter()
res = ml_model_scan(data, cands, q=1, n_is=4000, seed=5)
t1 = time.perf_counter()
print(f"scan took {t1 - t0:.0f}s")
tab = {}
for r in res.candidates:
    if r.status == "ok":
        tab[(r.p1, r.p2)] = r.log_ml
        print(f"({r.p1},{r.p2}): log-ML {r.log_ml:10.1f}  ESS {r.ess:7.1f}  "
              f"NSE {r.nse:.2f}")
    else:
        print(f"({r.p1},{r.p2}): FAILED {r.error}")
best = max(tab, key=tab.get)
print("argmax:", best)
row = [tab.get((3, b)) for b in range(1, 5)]
col = [tab.get((a, 2)) for a in range(1, 5)]
print("row p1=3 over p2:", [f"{v:.0f}" for v in row])
print("col p2=2 over p1:", [f"{v:.0f}" for v in col])
