"""Expansion coefficients from point jets, step by step.

Run with ``python demos/01_ladder_calculus.py``.  Every number printed here
is exact: rational multiples of powers of pi.
"""

# %% The model: one complex dimension, a = 2 pi
from bergman_lab.expansion import Engine, closed_b01, closed_bq0, ops_from_jets
from bergman_lab.jets import derived_quantities, flat_jets, random_jets, recover_d2RL
from bergman_lab.scalar import PiRational
from bergman_lab.wick import normal_order, pn_kernel

flat = flat_jets(1)
model = flat.model
print("a =", model.a, " P(0,0) =", model.pn_origin)

# %% Commutation: normal order puts b left of b+, so b+ b = b b+ + 2a
print("b+ b ->")
print(normal_order(model, [("b+", 0), ("b", 0)]).dump())

# %% Random Kahler jets: the engine against the closed forms
jets = random_jets(1, seed=1, kahler=True)
eng = Engine(jets.model, ops_from_jets(jets))
print("b01 engine:", eng.b(0, 1))
print("b01 closed:", closed_b01(jets))
for q in (1, 2, 3):
    print(f"b{q}0 engine == closed:", eng.b(q, 0) == closed_bq0(jets, q))

# %% F_{1,2} is a polynomial times the model kernel; in one Kahler dimension
# the polynomial is the constant J_{1,2}(0,0)
F12 = eng.F(1, 2)
print(F12.dump())
print("degree", F12.degree(), "(bound 6), parities", F12.degree_parities())

# %% The area-one round sphere: Gauss curvature 4 pi, so r_X = 8 pi and b01 = 1
R = flat.RTX.copy()
K = 4 * PiRational.pi()
for idx, sign in (((0, 1, 0, 1), -1), ((1, 0, 1, 0), -1), ((0, 1, 1, 0), 1), ((1, 0, 0, 1), 1)):
    R[idx] = K * sign
sphere = flat.with_fields(RTX=R)
sphere = sphere.with_fields(d2RL=recover_d2RL(sphere.nnJ, sphere.RTX, sphere.RL0))
print("r_X =", derived_quantities(sphere)["r_X"])
print("b01 on the sphere:", Engine(sphere.model, ops_from_jets(sphere)).b(0, 1))
print("P itself:", pn_kernel(model).dump())
