import numpy as np

from paraman.examples import example
from paraman.graded import eval_term
from paraman.parametrize import run
from paraman.verify import residual_rays, radius_ladder

doc = example("ex3")
par = run(doc, measure_residual=False)
F, D = doc.spec, doc.domain
rep_rows = [(f["block"], f["degree"], f["route"]) for f in par.ledger]
print("ledger:", rep_rows)
print("K degrees:", par.K.degrees(), "R degrees:", par.R.degrees())

rays = residual_rays(D)
radii = radius_ladder(D)
u = rays[3]          # generic angle
print("ray:", u)
for lam in radii[:6]:
    x = (lam * u)[None, :]
    Kx = par.K.evaluate(x)
    Rx = par.R.evaluate(x)
    KRx = par.K.evaluate(Rx)
    FKx = F.evaluate(Kx)
    e = FKx - KRx
    print(f"lam {lam:.4g}  E_y {e[0,2]: .4e}   K_y {Kx[0,2]: .4e}")

# compare the grade-4 cancellation pieces directly at one point
lam = 0.05
x = (lam * u)[None, :]
ky_t = [t for t in par.K.term_list() if t.degree == 2][0]
h = eval_term(ky_t, x)            # embedded: (1, 3) rows offset 2
print("K2_y at x:", h)
row = next(r for r in par.ledger if r["block"] == "K_y" and r["degree"] == 2)
res = row["result"]
print("diag pde_residual:", res.diagnostics.get("pde_residual"))
print("interp_error:", res.diagnostics.get("interp_error"))
print("tail:", res.diagnostics.get("tail"), "ode_error:", res.diagnostics.get("ode_error"))

# residual of the transport equation through the stored artifact at this direction
from paraman.cohomology import _Forcing, _residual
from paraman.graded import differentiate_term
prob = res.problem
dirs = x / np.linalg.norm(x)
hh = eval_term(res.term, dirs)
dh = differentiate_term(res.term, dirs)
wv = _Forcing(prob.w)(dirs)
print("w at dir:", wv, " transport gap:",
      _residual(prob, hh, dh, dirs, float(np.abs(wv).max())))

# Taylor check: K2(x+pa) - K2(x) - DK2.pa  at lam=0.05
pa = F.pa()
pav = pa.evaluate(x)
print("pa(x):", pav)
k_x = eval_term(ky_t, x)
k_xpa = eval_term(ky_t, x + pav)
dk = differentiate_term(ky_t, x)
lin = np.einsum("pab,pb->pa", dk, pav)
print("K2(x+pa)-K2(x):", (k_xpa - k_x)[0, 2], "  DK2.pa:", lin[0, 2])
