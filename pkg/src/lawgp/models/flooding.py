"""Incompressible miscible displacement in porous media (pressure/concentration).

Two coupled fields: an elliptic pressure equation driven by an
injection/production dipole, and an implicit advection-diffusion step for
the concentration, advected by the pressure gradient:

    -(ke/mu) * Lap(p) = q_src
    (phi_e/dt)*(c_new - c) = (ke/mu) * grad(p).grad(c_new) + dm * Lap(c_new)

Boundary conditions are zero-flux for both fields; the pressure gauge is
fixed by pinning the first boundary node to zero.  Raw parameters are
exponentiated so the physical coefficients stay positive over the symmetric
prior boxes.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import PdeModel, TrajectoryResidual
from ..geometry import NodeSet


class FloodingModel(PdeModel):
    name = "flooding"
    variables = ("p", "c")
    algebraic_vars = ("p",)
    required_operators = ("eval", "dx", "dy", "laplacian")
    param_names = ("kappa", "phi")
    residual_rtol = 0.01

    def __init__(self, t_final=0.1, tau=1e-3, n_save=10, prior_bounds=None,
                 n_params=2, diffusion=0.01, source_strength=50.0,
                 source_amplitude=0.25, well_offset=0.8,
                 tracer_center=(0.5, 0.0), tracer_sharpness=25.0):
        bounds = prior_bounds or self.default_bounds(n_params)
        self.n_params = int(n_params)
        super().__init__(t_final, tau, n_save, bounds)
        # instance attribute shadows the 2-parameter class default
        self.param_names = (("kappa", "mu", "phi") if self.n_params == 3
                            else ("kappa", "phi"))
        self.diffusion = float(diffusion)
        self.source_strength = float(source_strength)
        self.source_amplitude = float(source_amplitude)
        self.well_offset = float(well_offset)
        self.tracer_center = tuple(tracer_center)
        self.tracer_sharpness = float(tracer_sharpness)

    @staticmethod
    def default_bounds(n_params: int) -> dict:
        if n_params == 3:
            return {"kappa": (-3.0, 3.0), "mu": (-10.0, 10.0),
                    "phi": (-6.0, 6.0)}
        return {"kappa": (-3.0, 3.0), "phi": (-6.0, 6.0)}

    @classmethod
    def from_config(cls, section: dict) -> "FloodingModel":
        n_params = int(section.get("n_params", 2))
        bounds = {"kappa": tuple(section.get("kappa_bounds", (-3.0, 3.0))),
                  "phi": tuple(section.get("phi_bounds", (-6.0, 6.0)))}
        if n_params == 3:
            bounds["mu"] = tuple(section.get("mu_bounds", (-10.0, 10.0)))
        return cls(t_final=section.get("t_final", 0.1),
                   tau=section.get("tau", 1e-3),
                   n_save=section.get("n_save", 10),
                   prior_bounds=bounds, n_params=n_params,
                   diffusion=section.get("diffusion", 0.01),
                   source_strength=section.get("source_strength", 50.0),
                   source_amplitude=section.get("source_amplitude", 0.25),
                   well_offset=section.get("well_offset", 0.8),
                   tracer_center=tuple(section.get("tracer_center", (0.5, 0.0))),
                   tracer_sharpness=section.get("tracer_sharpness", 25.0))

    # ------------------------------------------------------------------

    def effective(self, theta: dict) -> tuple:
        ke = float(np.exp(theta["kappa"]))
        phie = float(np.exp(theta["phi"]))
        mue = float(np.exp(theta["mu"])) if "mu" in theta else 1.0
        return ke, mue, phie

    def source(self, nodeset: NodeSet) -> np.ndarray:
        x = nodeset.points_x
        a = self.source_strength
        d_in = (x[:, 0] - self.well_offset) ** 2 + x[:, 1] ** 2
        d_out = (x[:, 0] + self.well_offset) ** 2 + x[:, 1] ** 2
        return self.source_amplitude * (np.exp(-a * d_in) - np.exp(-a * d_out))

    def initial_fields(self, nodeset: NodeSet) -> dict:
        x = nodeset.points_x
        d2 = ((x[:, 0] - self.tracer_center[0]) ** 2
              + (x[:, 1] - self.tracer_center[1]) ** 2)
        return {"p": np.zeros(nodeset.n_x),
                "c": np.exp(-self.tracer_sharpness * d2)}

    def _pin_index(self, nodeset: NodeSet) -> int:
        return int(np.argmax(nodeset.x_is_boundary))

    def _neumann_rows(self, ops, nodeset) -> sp.spmatrix:
        nx = nodeset.x_normals
        return (sp.diags(nx[:, 0]) @ ops["dx"].matrix
                + sp.diags(nx[:, 1]) @ ops["dy"].matrix)

    def build_matrix(self, var, theta, ops, nodeset, dt, current):
        ke, mue, phie = self.effective(theta)
        E = ops["eval"].matrix
        D = ops["laplacian"].matrix
        bnd = nodeset.x_is_boundary.astype(float)
        pin = np.zeros(nodeset.n_x)
        pin[self._pin_index(nodeset)] = 1.0
        keep = sp.diags(1.0 - bnd)
        flux_rows = sp.diags(bnd - pin) @ self._neumann_rows(ops, nodeset)
        if var == "p":
            interior = keep @ (-(ke / mue) * D)
            return (interior + flux_rows + sp.diags(pin) @ E).tocsr()
        p_hat = current["p_hat"]
        gx = ops["dx"] @ p_hat
        gy = ops["dy"] @ p_hat
        adv = sp.diags(gx) @ ops["dx"].matrix + sp.diags(gy) @ ops["dy"].matrix
        interior = keep @ ((phie / dt) * E - (ke / mue) * adv
                           - self.diffusion * D)
        # Dirichlet rows for the tracer: flux collocation rows destabilize
        # the implicit advection iteration on scattered nodes
        return (interior + sp.diags(bnd) @ E).tocsr()

    def build_rhs(self, var, theta, ops, nodeset, dt, prev, prev_hat):
        ke, mue, phie = self.effective(theta)
        if var == "p":
            return np.where(nodeset.x_is_boundary, 0.0, self.source(nodeset))
        return np.where(nodeset.x_is_boundary, 0.0, (phie / dt) * prev["c"])

    # -- physics loss ----------------------------------------------------

    def mass_coefficient(self, theta, var):
        ke, mue, phie = self.effective(theta)
        return phie if var == "c" else 1.0

    def spatial_rhs(self, theta, ops, nodeset, fields, fields_hat):
        ke, mue, phie = self.effective(theta)
        gx = ops["dx"] @ fields_hat["p"]
        gy = ops["dy"] @ fields_hat["p"]
        adv = gx * (ops["dx"] @ fields_hat["c"]) + gy * (ops["dy"] @ fields_hat["c"])
        return {"c": (ke / mue) * adv
                + self.diffusion * (ops["laplacian"] @ fields_hat["c"])}

    def algebraic_residuals(self, theta, ops, nodeset, fields, fields_hat):
        ke, mue, phie = self.effective(theta)
        return {"p": -(ke / mue) * (ops["laplacian"] @ fields_hat["p"])
                - self.source(nodeset)}

    def boundary_residuals(self, theta, ops, nodeset, fields, fields_hat):
        nx = nodeset.x_normals
        flux = (nx[:, 0] * (ops["dx"] @ fields_hat["p"])
                + nx[:, 1] * (ops["dy"] @ fields_hat["p"]))
        flux[self._pin_index(nodeset)] = fields["p"][self._pin_index(nodeset)]
        return {"p": flux, "c": fields["c"]}

    def make_trajectory_residual(self, ops, nodeset, st_modes, pinv=None):
        return _FloodingTrajectoryResidual(self, ops, nodeset, st_modes, pinv)


class _FloodingTrajectoryResidual(TrajectoryResidual):
    """Pressure rows are affine in the pressure coefficients; concentration
    rows are bilinear in (pressure, concentration) coefficients through the
    advecting gradient.  The leading pressure slice repeats the first saved
    solution, so the slice-0 advection in the first trapezoid step is
    physical."""

    block_ops = ("eval", "dx", "dy", "laplacian")

    def __init__(self, model, ops, nodeset, st_modes, pinv=None):
        super().__init__(model, ops, nodeset, st_modes, pinv)
        nx = nodeset.x_normals
        self.flux_p = [nx[:, 0:1] * bx + nx[:, 1:2] * by
                       for bx, by in zip(self.blocks[("dx", "p")],
                                         self.blocks[("dy", "p")])]
        self.pin = model._pin_index(nodeset)
        self.q_src = model.source(nodeset)

    def residual_terms(self, theta, coeffs):
        model = self.model
        td = model.theta_dict(theta)
        ke, mue, phie = model.effective(td)
        dm = model.diffusion
        ap, ac = coeffs["p"], coeffs["c"]
        Ep, Xp, Yp = (self.blocks[(o, "p")] for o in ("eval", "dx", "dy"))
        Lp = self.blocks[("laplacian", "p")]
        Ec, Xc, Yc = (self.blocks[(o, "c")] for o in ("eval", "dx", "dy"))
        Lc = self.blocks[("laplacian", "c")]
        int_mask, bnd_mask = self._default_masks
        r_int, r_bnd = [], []
        c = Ec[0] @ ac
        r_ic = [c - self.ic["c"]]
        g = (ke / mue) * ((Xp[0] @ ap) * (Xc[0] @ ac)
                          + (Yp[0] @ ap) * (Yc[0] @ ac)) + dm * (Lc[0] @ ac)
        for s in range(1, self.S + 1):
            c_prev, g_prev = c, g
            c = Ec[s] @ ac
            g = (ke / mue) * ((Xp[s] @ ap) * (Xc[s] @ ac)
                              + (Yp[s] @ ap) * (Yc[s] @ ac)) + dm * (Lc[s] @ ac)
            rp = -(ke / mue) * (Lp[s] @ ap) - self.q_src
            rc = phie * (c - c_prev) - 0.5 * self.dt * (g + g_prev)
            r_int.append(np.concatenate([rp[int_mask], rc[int_mask]]))
            flux = self.flux_p[s] @ ap
            flux[self.pin] = (Ep[s] @ ap)[self.pin]
            r_bnd.append(np.concatenate([flux[bnd_mask], c[bnd_mask]]))
        return r_int, r_bnd, r_ic
