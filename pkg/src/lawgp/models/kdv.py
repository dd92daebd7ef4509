"""Third-order dispersive wave benchmark on a periodic 1D interval.

Forward solver: semi-implicit fine steps, dispersion implicit and advection
explicit, ``u_new + tau*theta2*uxxx(u_new) = u - tau*theta1*u*ux(u)``.  The
initial condition superposes two solitary humps; all constants live in the
config.

Physics loss: trapezoidal save-step residual of
``du/dt = -theta1*u*ux - theta2*uxxx``.
"""

from __future__ import annotations

import numpy as np

from . import PdeModel, TrajectoryResidual
from ..geometry import NodeSet


def soliton(x: np.ndarray, speed: float, offset: float) -> np.ndarray:
    arg = 0.5 * np.sqrt(speed) * (x - offset)
    return 0.5 * speed / np.cosh(arg) ** 2


class KdVModel(PdeModel):
    name = "kdv"
    variables = ("u",)
    required_operators = ("eval", "dx", "dxxx")
    param_names = ("theta1", "theta2")
    residual_rtol = 0.05

    def __init__(self, t_final=1.0, tau=1e-4, n_save=10, prior_bounds=None,
                 speeds=(6.0, 2.0), offsets=(-5.0, -1.0)):
        super().__init__(t_final, tau, n_save,
                         prior_bounds or {"theta1": (2.0, 8.0),
                                          "theta2": (0.2, 2.0)})
        self.speeds = tuple(speeds)
        self.offsets = tuple(offsets)

    @classmethod
    def from_config(cls, section: dict) -> "KdVModel":
        return cls(t_final=section.get("t_final", 1.0),
                   tau=section.get("tau", 1e-4),
                   n_save=section.get("n_save", 10),
                   prior_bounds={
                       "theta1": tuple(section.get("theta1_bounds", (2.0, 8.0))),
                       "theta2": tuple(section.get("theta2_bounds", (0.2, 2.0)))},
                   speeds=tuple(section.get("soliton_speeds", (6.0, 2.0))),
                   offsets=tuple(section.get("soliton_offsets", (-5.0, -1.0))))

    def initial_fields(self, nodeset: NodeSet) -> dict:
        x = nodeset.points_x[:, 0]
        u0 = sum(soliton(x, c, L) for c, L in zip(self.speeds, self.offsets))
        return {"u": u0}

    # -- forward solver ------------------------------------------------------

    def build_matrix(self, var, theta, ops, nodeset, dt, current):
        return (ops["eval"].matrix + dt * theta["theta2"] * ops["dxxx"].matrix).tocsr()

    def build_rhs(self, var, theta, ops, nodeset, dt, prev, prev_hat):
        u = prev["u"]
        ux = ops["dx"] @ prev_hat["u"]
        return u - dt * theta["theta1"] * u * ux

    # -- physics loss ----------------------------------------------------

    def spatial_rhs(self, theta, ops, nodeset, fields, fields_hat):
        u = fields["u"]
        ux = ops["dx"] @ fields_hat["u"]
        uxxx = ops["dxxx"] @ fields_hat["u"]
        return {"u": -theta["theta1"] * u * ux - theta["theta2"] * uxxx}

    def boundary_residuals(self, theta, ops, nodeset, fields, fields_hat):
        return {"u": np.zeros(nodeset.n_x)}

    def make_trajectory_residual(self, ops, nodeset, st_modes, pinv=None):
        return _KdvTrajectoryResidual(self, ops, nodeset, st_modes, pinv)


class _KdvTrajectoryResidual(TrajectoryResidual):
    block_ops = ("eval", "dx", "dxxx")

    def residual_terms(self, theta, coeffs):
        td = self.model.theta_dict(theta)
        t1, t2 = td["theta1"], td["theta2"]
        a = coeffs["u"]
        Ub = self.blocks[("eval", "u")]
        Xb = self.blocks[("dx", "u")]
        Tb = self.blocks[("dxxx", "u")]
        u = Ub[0] @ a
        r_ic = [u - self.ic["u"]]
        r_int = []
        g = -t1 * u * (Xb[0] @ a) - t2 * (Tb[0] @ a)
        for s in range(1, self.S + 1):
            u_prev, g_prev = u, g
            u = Ub[s] @ a
            g = -t1 * u * (Xb[s] @ a) - t2 * (Tb[s] @ a)
            r_int.append((u - u_prev) - 0.5 * self.dt * (g + g_prev))
        return r_int, [], r_ic
