import time

import numpy as np

from paraman.examples import example
from paraman.graded import _Interp
from paraman.parametrize import run
from paraman.verify import residual_order, residual_rays, radius_ladder

t0 = time.time()
doc = example("ex3")
par = run(doc)
print("ex3 run:", f"{time.time() - t0:.1f}s")
rep = par.residual
print("fresh verdict:", rep.passed, "log_suspect:", rep.log_suspect,
      "min_slope:", rep.min_slope)
print("note:", rep.note)
for f in rep.fits[:4]:
    print(f"  ray {f.index} block {f.block}: slope {f.slope} r2 {f.r2} n {f.n_points} floor {f.at_floor}")
print("radii:", rep.radii)
print("x block all-floor?", all(f.at_floor for f in rep.fits if f.block == "x"))

# per-ray sample values along ray 0, y block
vals = rep.samples["y"][0]
print("y ray0 samples:", vals)
pair = np.log(vals[:-1] / vals[1:]) / np.log(1 / 0.55)
print("consecutive slopes:", np.round(pair, 3))

# ---- corrupt the degree-2 fibre interpolant by 1.01 ----
row = next(r for r in par.ledger if r["block"] == "K_y" and r["degree"] == 2)
res = row["result"]
print("K_y^2 term kind:", res.term.kind)
old = res.term.payload
res.term.payload = _Interp(old.grid, old.values * 1.01)

F, D, cfg = doc.spec, doc.domain, doc.run
t0 = time.time()
rep2 = residual_order(F, D, par.K, par.R, cfg)
print("corrupted verdict:", rep2.passed, "log_suspect:", rep2.log_suspect,
      "min_slope:", rep2.min_slope, f"({time.time() - t0:.1f}s)")
vals2 = rep2.samples["y"][0]
print("y ray0 corrupted:", vals2)
pair2 = np.log(vals2[:-1] / vals2[1:]) / np.log(1 / 0.55)
print("consecutive slopes:", np.round(pair2, 3))
allslopes = [f.slope for f in rep2.fits if not f.at_floor]
print("corrupted slope range:", min(allslopes), max(allslopes))

# ---- ablation: drop K's top term ----
res.term.payload = old   # restore
K_ab = par.K.drop_degree(2)
rep3 = residual_order(F, D, K_ab, par.R, cfg)
print("ablated min_slope:", rep3.min_slope, "drop:", rep.min_slope - rep3.min_slope)
