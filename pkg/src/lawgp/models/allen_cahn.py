"""Reaction-diffusion benchmark with a diffuse-interface double-well term.

Forward solver: semi-implicit fine steps, diffusion implicit and reaction
explicit, ``u_new - tau*eps^2*Lap(u_new) = u - tau*(u^3 - u)``, homogeneous
Dirichlet boundary.  With eps = 0 the equation degenerates to a pointwise
ODE and no boundary condition applies.

Physics loss: trapezoidal save-step residual of
``du/dt = eps^2*Lap(u) - (u^3 - u)``.  The indicator initial datum makes
the first save interval unresolvable from its endpoint states, so that
step is excluded from the loss.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import PdeModel, TrajectoryResidual
from ..geometry import NodeSet


def star_blob(points: np.ndarray) -> np.ndarray:
    """Indicator of the five-petal initial region."""
    x, y = points[:, 0], points[:, 1]
    r = np.hypot(x, y)
    gamma = np.mod(np.arctan2(y, x), 2.0 * np.pi)
    radius = (3.0 + 3.0 * np.sin(5.0 * gamma)) / 8.0
    return (r <= radius).astype(float)


class AllenCahnModel(PdeModel):
    name = "allen_cahn"
    variables = ("u",)
    required_operators = ("eval", "laplacian")
    param_names = ("epsilon",)
    residual_rtol = 0.05
    skip_first_residual_step = True

    def __init__(self, t_final=1.0, tau=1e-3, n_save=10,
                 prior_bounds=None):
        super().__init__(t_final, tau, n_save,
                         prior_bounds or {"epsilon": (0.0, 1.0)})

    @classmethod
    def from_config(cls, section: dict) -> "AllenCahnModel":
        return cls(t_final=section.get("t_final", 1.0),
                   tau=section.get("tau", 1e-3),
                   n_save=section.get("n_save", 10),
                   prior_bounds={"epsilon": tuple(
                       section.get("epsilon_bounds", (0.0, 1.0)))})

    def initial_fields(self, nodeset: NodeSet) -> dict:
        return {"u": star_blob(nodeset.points_x)}

    def row_masks(self, theta: dict, nodeset: NodeSet):
        if theta["epsilon"] == 0.0:
            none = np.zeros(nodeset.n_x, dtype=bool)
            return ~none, none
        b = nodeset.x_is_boundary
        return ~b, b

    # -- forward solver ------------------------------------------------------

    def build_matrix(self, var, theta, ops, nodeset, dt, current):
        E = ops["eval"].matrix
        eps = theta["epsilon"]
        if eps == 0.0:
            return E
        D = ops["laplacian"].matrix
        bnd = nodeset.x_is_boundary.astype(float)
        keep = sp.diags(1.0 - bnd)
        dirichlet = sp.diags(bnd)
        return (keep @ (E - dt * eps ** 2 * D) + dirichlet @ E).tocsr()

    def build_rhs(self, var, theta, ops, nodeset, dt, prev, prev_hat):
        u = prev["u"]
        r = u - dt * (u ** 3 - u)
        if theta["epsilon"] != 0.0:
            r = np.where(nodeset.x_is_boundary, 0.0, r)
        return r

    # -- physics loss ----------------------------------------------------

    def spatial_rhs(self, theta, ops, nodeset, fields, fields_hat):
        u = fields["u"]
        g = -(u ** 3 - u)
        eps = theta["epsilon"]
        if eps != 0.0:
            g = g + eps ** 2 * (ops["laplacian"] @ fields_hat["u"])
        return {"u": g}

    def boundary_residuals(self, theta, ops, nodeset, fields, fields_hat):
        return {"u": fields["u"]}

    def make_trajectory_residual(self, ops, nodeset, st_modes, pinv=None):
        return _AcTrajectoryResidual(self, ops, nodeset, st_modes, pinv)


class _AcTrajectoryResidual(TrajectoryResidual):
    block_ops = ("eval", "laplacian")

    def residual_terms(self, theta, coeffs):
        eps = self.model.theta_dict(theta)["epsilon"]
        a = coeffs["u"]
        Ub = self.blocks[("eval", "u")]
        Lb = self.blocks[("laplacian", "u")]
        int_mask, bnd_mask = self.model.row_masks({"epsilon": eps}, self.nodeset)
        u = Ub[0] @ a
        r_ic = [u - self.ic["u"]]
        r_int, r_bnd = [], []
        g = eps ** 2 * (Lb[0] @ a) - (u ** 3 - u)
        for s in range(1, self.S + 1):
            u_prev, g_prev = u, g
            u = Ub[s] @ a
            g = eps ** 2 * (Lb[s] @ a) - (u ** 3 - u)
            if s >= 2:  # the sharp-interface first interval is skipped
                r = (u - u_prev) - 0.5 * self.dt * (g + g_prev)
                r_int.append(r[int_mask])
            r_bnd.append(u[bnd_mask])
        return r_int, r_bnd, r_ic
