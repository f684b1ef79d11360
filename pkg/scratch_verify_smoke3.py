import time

import numpy as np

from paraman import flows as fl
from paraman.examples import example
from paraman.graded import _Interp
from paraman.model import (DomainSpec, FieldSpec, ForcingPiece, MapSpec,
                           ProblemDocument, Norm, RunOptions, SparsePolynomial)
from paraman.parametrize import run
from paraman.verify import invariant_suite, residual_order_flow

TWO_PI = 2.0 * np.pi


def show(tag, rep):
    print(f"-- {tag}: passed={rep.passed} log_suspect={rep.log_suspect} "
          f"degenerate={rep.degenerate} min={rep.min_slope} n_fits="
          f"{len(rep.fitted())}")
    print("   note:", rep.note)


# ex2-convergent map residual (sector chart, near-boundary rays)
t0 = time.time()
doc2 = example("ex2-convergent")
par2 = run(doc2)
show(f"ex2-convergent ({time.time()-t0:.1f}s)", par2.residual)
bad = [(f.block, f.index, f.slope) for f in par2.residual.fitted()
       if f.slope < 3.9]
print("   rays below 3.9:", bad)
nan_counts = {b: int(np.isnan(v).sum()) for b, v in par2.residual.samples.items()}
print("   NaN samples per block:", nan_counts)

# ex4 map residual (obstruction kept in R)
t0 = time.time()
doc4 = example("ex4")
par4 = run(doc4)
show(f"ex4 ({time.time()-t0:.1f}s)", par4.residual)

# flow residual on the forced 1-D field
p = SparsePolynomial(2, [{(2, 0): -1.0, (0, 2): 1.0}])
q = SparsePolynomial(2, [{(1, 1): 0.5}])
g3 = SparsePolynomial(2, [{(3, 0): 1.0}])
base = MapSpec(n=1, m=1, N=2, M=2, r=3, p=p, q=q, higher_y=[(3, g3)])
X = FieldSpec(base=base, period=TWO_PI,
              forcing=[ForcingPiece("y", 3, 1, "cos", g3)])
dom = DomainSpec("ray", 1, 0.5, Norm("max"))
fdoc = ProblemDocument("field", X, dom, RunOptions(ell=4), name="fdeep")
t0 = time.time()
fpar = fl.run_flow(fdoc)
show(f"fdeep flow ({time.time()-t0:.1f}s)", fpar.residual)
print("   blocks:", sorted(fpar.residual.samples), "rays:",
      len(fpar.residual.rays))
print("   ray0:", fpar.residual.samples["flow"][0])

# flow ablation: drop the degree-3 periodic term (top oscillatory)
K_ab = fpar.K.copy()
K_ab.terms = [t for t in K_ab.terms if t.degree != 3]
rep_ab = residual_order_flow(X, dom, K_ab, fpar.Y, fdoc.run)
show("fdeep ablated (no degree-3 K)", rep_ab)

# invariant suite: fresh ex3
t0 = time.time()
doc3 = example("ex3")
suite = invariant_suite(doc3)
print(f"-- suite ex3 fresh ({time.time()-t0:.1f}s): passed={suite.passed}")
for r in suite.rows:
    print(f"   {r['check']:<18} {r['status']:<5} {r['detail'][:80]}")

# invariant suite: corrupted interpolant
par3 = run(doc3, measure_residual=False)
row = next(r for r in par3.ledger if r["block"] == "K_y" and r["degree"] == 2)
old = row["result"].term.payload
row["result"].term.payload = _Interp(old.grid, old.values * 1.01)
t0 = time.time()
suite_c = invariant_suite(doc3, par=par3)
print(f"-- suite ex3 corrupted ({time.time()-t0:.1f}s): passed={suite_c.passed}")
for r in suite_c.rows:
    print(f"   {r['check']:<18} {r['status']:<5} {r['detail'][:80]}")

# invariant suite: divergent example
t0 = time.time()
suite_d = invariant_suite(example("ex2-divergent"))
print(f"-- suite ex2-divergent ({time.time()-t0:.1f}s): passed={suite_d.passed}")
for r in suite_d.rows:
    print(f"   {r['check']:<18} {r['status']:<5} {r['detail'][:100]}")

# suite on the flow artifacts
t0 = time.time()
suite_f = invariant_suite(fdoc, par=fpar)
print(f"-- suite fdeep ({time.time()-t0:.1f}s): passed={suite_f.passed}")
for r in suite_f.rows:
    print(f"   {r['check']:<18} {r['status']:<5} {r['detail'][:80]}")
