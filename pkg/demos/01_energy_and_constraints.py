"""
Stored energy, pullbacks and the constraint checks
==================================================

A tour of the pieces that make up E(t, q) for a single state, run on a
small mesh so every number prints instantly.
"""

import numpy as np

from magelastic.material import MaterialParams, elastic_density, exchange_energy
from magelastic.mesh import build_mesh, ciarlet_necas_residual, identity_deformation
from magelastic.optim import penalty_terms
from magelastic.selftest import wrapped_strip

# The elastic density is normalised so the reference state costs nothing.
# Doubling every length in 2D with mu = 1, p = 4 gives |2I|^4 - |I|^4 = 60.
params = MaterialParams()
m = np.array([1.0, 0.0])
print("W(I, m)  =", elastic_density(np.eye(2), m, params)[0])
print("W(2I, m) =", elastic_density(2 * np.eye(2), m, params)[0])

# Flipping the magnetization never changes the elastic energy: every
# coupling term is quadratic in m.
F = np.array([[1.2, 0.3], [-0.1, 0.9]])
coupled = params.replace(beta1=0.4, beta2=0.2)
print("W(F, m) - W(F, -m) =", elastic_density(F, m, coupled)[0] - elastic_density(F, -m, coupled)[0])

# Exchange energy lives on the deformed body but is computed on the
# reference mesh through grad(M) F^-1.  Stretching x1 by 2 (and shrinking
# x2 by 2) quarters the energy of a texture that only varies along x1.
mesh = build_mesh((1.0, 1.0), (16, 16))
theta = 2.0 * mesh.nodes[:, 0]
M = np.stack([np.cos(theta), np.sin(theta)], axis=1)
y = identity_deformation(mesh)
e_ref = exchange_energy(mesh, y, M, 1.0)
e_def = exchange_energy(mesh, mesh.nodes * [2.0, 0.5], M, 1.0)
print(f"exchange: reference {e_ref:.6f}, stretched {e_def:.6f}, ratio {e_def / e_ref:.6f}")

# Incompressibility is a penalty kappa int (det grad y - 1)^2.  A shear keeps
# volume, a dilation does not.
shear = y + 0.3 * mesh.nodes[:, [1]] * [1.0, 0.0]
print("penalty(shear)      =", penalty_terms(mesh, shear, 1e4)[0])
print("penalty(1.01 * x)   =", penalty_terms(mesh, 1.01 * y, 1e4)[0], "(kappa (s^2-1)^2 =", 1e4 * (1.01**2 - 1) ** 2, ")")

# Global injectivity is checked by counting how often the deformed body
# covers each point.  A strip wound one and a half times around a circle is
# locally fine (det > 0 everywhere) but overlaps itself.
print("Ciarlet-Necas residual, shear:        ", ciarlet_necas_residual(mesh, shear))
print("Ciarlet-Necas residual, wound strip:  ", round(ciarlet_necas_residual(*wrapped_strip()), 3))
