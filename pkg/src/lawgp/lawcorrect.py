"""Physics-residual correction of the GP surrogate prior.

At sampled correction parameters, per-coefficient offsets are searched
inside the GP's own +-c*sigma credibility box to minimize the discrete PDE
residual of the whole reconstructed space-time trajectory, assembled from
the pre-stored sparse operators (no PDE solves).  The offsets are then
carried across parameter space by exact RBF interpolation and attached to
the GPs as prior-mean shifts, leaving predictive variances untouched.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
from scipy.optimize import minimize

from .rbffd import EvalPseudoInverse


class CorrectionError(RuntimeError):
    pass


@dataclass
class CorrectionConfig:
    """Knobs of the correction loop."""

    bound_factor: float = 1.0          # c, half-width of the search box in sigmas
    boundary_weight: float = 1.0       # lambda weighting boundary/initial rows
    budget: int = 2000                 # objective evaluations per parameter
    n_random_starts: int = 4
    sigma_floor: float = 1e-12         # below this the offset is pinned to 0


# ---------------------------------------------------------------------------
# Exact scattered interpolation of the offsets over parameter space
# ---------------------------------------------------------------------------

class PhsInterpolator:
    """Cubic PHS interpolant with a linear tail over standardized inputs."""

    def __init__(self, points: np.ndarray, values: np.ndarray):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        vals = np.asarray(values, dtype=float).ravel()
        if pts.shape[0] != vals.shape[0]:
            raise CorrectionError("points/values length mismatch")
        self.mean_ = pts.mean(axis=0)
        sd = pts.std(axis=0)
        self.scale_ = np.where(sd > 0, sd, 1.0)
        Z = (pts - self.mean_) / self.scale_
        n, d = Z.shape
        if n > 1:
            dd = np.linalg.norm(Z[:, None, :] - Z[None, :, :], axis=2) + np.eye(n)
            if dd.min() < 1e-10:
                raise CorrectionError(
                    "duplicate interpolation points; correction and training "
                    "parameter sets must be deduplicated")
        P = np.column_stack([np.ones(n), Z])
        m = d + 1
        A = np.zeros((n + m, n + m))
        r = np.linalg.norm(Z[:, None, :] - Z[None, :, :], axis=2)
        A[:n, :n] = r ** 3
        A[:n, n:] = P
        A[n:, :n] = P.T
        rhs = np.concatenate([vals, np.zeros(m)])
        try:
            lu = la.lu_factor(A)
            sol = la.lu_solve(lu, rhs)
        except la.LinAlgError as exc:
            raise CorrectionError(f"singular interpolation system: {exc}")
        self.points_ = Z
        self.weights_ = sol[:n]
        self.poly_ = sol[n:]

    def __call__(self, X) -> np.ndarray:
        Z = (np.atleast_2d(np.asarray(X, dtype=float)) - self.mean_) / self.scale_
        r = np.linalg.norm(Z[:, None, :] - self.points_[None, :, :], axis=2)
        P = np.column_stack([np.ones(Z.shape[0]), Z])
        return r ** 3 @ self.weights_ + P @ self.poly_


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _st_modes(surrogates: dict) -> dict:
    return {v: s.basis.modes_ for v, s in surrogates.items()}


def law_loss(model, theta, coeffs: dict, surrogates: dict, ops: dict,
             nodeset, boundary_weight: float = 1.0, pinv=None,
             evaluator=None) -> float:
    """Squared residual of the trajectory encoded by per-variable coefficients.

    Interior rows sum over save steps; boundary rows and the initial-slice
    misfit enter with weight ``boundary_weight``.
    """
    ev = evaluator
    if ev is None:
        if pinv is None:
            pinv = EvalPseudoInverse(ops["eval"])
        ev = model.make_trajectory_residual(ops, nodeset, _st_modes(surrogates),
                                            pinv)
    cc = {v: np.asarray(coeffs[v], dtype=float).ravel() for v in model.variables}
    return ev.loss(theta, cc, boundary_weight)


# ---------------------------------------------------------------------------
# Correction map
# ---------------------------------------------------------------------------

@dataclass
class CorrectionMap:
    """Optimized offset table plus the interpolants built through it."""

    variables: list
    n_modes: dict                      # var -> K
    thetas: np.ndarray                 # (R, q) law parameters
    omegas: dict = field(default_factory=dict)   # var -> (R, K)
    sigmas: dict = field(default_factory=dict)   # var -> (R, K)
    loss_zero: np.ndarray = None
    loss_opt: np.ndarray = None
    warn: np.ndarray = None
    theta_obs: np.ndarray = None       # (n_obs, q) zero anchors
    interpolants: dict = field(default_factory=dict)  # var -> [PhsInterpolator]

    #: radius (in standardized coordinates) of the exact-zero wells around
    #: the training parameters
    obs_zero_radius: float = 1e-3

    def build_interpolants(self) -> None:
        self.interpolants = {}
        for var in self.variables:
            maps = []
            for k in range(self.n_modes[var]):
                maps.append(PhsInterpolator(self.thetas, self.omegas[var][:, k]))
            self.interpolants[var] = maps
        ref = self.interpolants[self.variables[0]][0]
        self._obs_std = (self.theta_obs - ref.mean_) / ref.scale_

    def _obs_mask(self, X) -> np.ndarray:
        """Smooth factor vanishing exactly at the training parameters.

        Keeps the prior uncorrected on the training data without pinning
        whole neighbourhoods of parameter space to zero.
        """
        ref = self.interpolants[self.variables[0]][0]
        Z = (np.atleast_2d(np.asarray(X, dtype=float)) - ref.mean_) / ref.scale_
        d2 = ((Z[:, None, :] - self._obs_std[None, :, :]) ** 2).sum(axis=2)
        return np.prod(1.0 - np.exp(-d2 / (2.0 * self.obs_zero_radius ** 2)),
                       axis=1)

    def predict(self, var: str, k: int, X) -> np.ndarray:
        return self.interpolants[var][k](X) * self._obs_mask(X)

    def max_abs_offset(self) -> float:
        return max(np.abs(self.omegas[v]).max() if self.omegas[v].size else 0.0
                   for v in self.variables)


def attach_corrections(surrogates: dict, cmap: CorrectionMap,
                       bound_factor: float = None) -> None:
    """Install the offset maps as prior-mean shifts on every GP.

    When ``bound_factor`` is given, map values are clipped to the same
    +-c*sigma credibility box at every query point, suppressing interpolant
    overshoot away from the correction parameters (exact at those
    parameters, where the stored offsets already respect the box).
    """
    for var in cmap.variables:
        gps = surrogates[var].gps
        if len(gps) != cmap.n_modes[var]:
            raise CorrectionError(
                f"{var}: {len(gps)} surrogates but {cmap.n_modes[var]} maps")
        for k, gp in enumerate(gps):
            gp.attach_correction(_MapHandle(cmap, var, k, gp, bound_factor))


def detach_corrections(surrogates: dict) -> None:
    for s in surrogates.values():
        for gp in s.gps:
            gp.detach_correction()


class _MapHandle:
    """Callable binding one (variable, mode) offset map."""

    def __init__(self, cmap, var, k, gp=None, bound_factor=None):
        self.cmap = cmap
        self.var = var
        self.k = k
        self.gp = gp
        self.bound_factor = bound_factor

    def __call__(self, X):
        s = self.cmap.predict(self.var, self.k, X)
        if self.bound_factor is not None and self.gp is not None:
            half = self.bound_factor * self.gp.predict_std(X)
            s = np.clip(s, -half, half)
        return s


# ---------------------------------------------------------------------------
# The correction loop
# ---------------------------------------------------------------------------

def _optimize_box(objective, sigma_flat, c, budget, n_random, rng,
                  marginal_blocks=None):
    """Minimize over the box |omega_k| <= c*sigma_k; returns details.

    The search runs in unit coordinates z = omega / (c*sigma) over the free
    (sigma > 0) components.  The zero offset is always a candidate, so the
    result can never be worse than no correction.
    """
    half = c * sigma_flat
    free = half > 0.0
    loss_zero = objective(np.zeros_like(sigma_flat))
    best_omega = np.zeros_like(sigma_flat)
    best_loss = loss_zero
    warn = False
    nfree = int(np.sum(free))
    if nfree == 0 or c <= 0 or budget <= 0:
        return best_omega, best_loss, loss_zero, False

    def unpack(z):
        omega = np.zeros_like(sigma_flat)
        omega[free] = np.clip(z, -1.0, 1.0) * half[free]
        return omega

    def f(z):
        return objective(unpack(z))

    starts = [np.zeros(nfree)]
    do_sweep = nfree > 3
    n_runs = 1 + n_random + (1 if marginal_blocks else 0) + (1 if do_sweep else 0)
    run_budget = max(budget // max(n_runs, 1), 10)
    if do_sweep:
        # cyclic one-dimensional refinement: effective in higher dimensions
        # where a fresh simplex converges slowly
        from scipy.optimize import minimize_scalar
        z = np.zeros(nfree)
        evals = 0
        while evals < run_budget:
            changed = False
            for j in range(nfree):
                def f1(v, j=j):
                    zz = z.copy()
                    zz[j] = v
                    return f(zz)
                r = minimize_scalar(f1, bounds=(-1.0, 1.0), method="bounded",
                                    options={"xatol": 1e-7, "maxiter": 25})
                evals += r.nfev
                if r.fun < f(z) - 1e-15:
                    z[j] = r.x
                    changed = True
                if evals >= run_budget:
                    break
            if not changed:
                break
        starts.append(z)
    if marginal_blocks:
        # coordinate-block warm start: optimize each variable alone
        composite = np.zeros(nfree)
        sub_budget = max(run_budget // len(marginal_blocks), 10)
        free_idx = np.where(free)[0]
        pos_of = {j: i for i, j in enumerate(free_idx)}
        for block in marginal_blocks:
            sel = [pos_of[j] for j in block if j in pos_of]
            if not sel:
                continue
            sel = np.asarray(sel)

            def fb(zb):
                z = composite.copy()
                z[sel] = zb
                return f(z)

            res = minimize(fb, np.zeros(sel.size), method="Nelder-Mead",
                           bounds=[(-1.0, 1.0)] * sel.size,
                           options={"maxfev": sub_budget, "xatol": 1e-6,
                                    "fatol": 1e-12})
            composite[sel] = np.clip(res.x, -1.0, 1.0)
        starts.append(composite)
    for _ in range(n_random):
        starts.append(rng.uniform(-1.0, 1.0, size=nfree))

    best_z = np.zeros(nfree)
    for s in starts:
        res = minimize(f, s, method="Nelder-Mead",
                       bounds=[(-1.0, 1.0)] * nfree,
                       options={"maxfev": run_budget, "xatol": 1e-6,
                                "fatol": 1e-12})
        if res.fun < best_loss:
            best_loss = float(res.fun)
            best_z = np.clip(res.x, -1.0, 1.0)
            best_omega = unpack(res.x)
            warn = res.nfev >= run_budget
    # polish: restart the simplex at the incumbent
    if best_loss < loss_zero:
        res = minimize(f, best_z, method="Nelder-Mead",
                       bounds=[(-1.0, 1.0)] * nfree,
                       options={"maxfev": run_budget, "xatol": 1e-7,
                                "fatol": 1e-13})
        if res.fun < best_loss:
            best_loss = float(res.fun)
            best_omega = unpack(res.x)
    return best_omega, best_loss, loss_zero, warn


def optimize_corrections(model, surrogates: dict, ops: dict, nodeset,
                         theta_law: np.ndarray, theta_obs: np.ndarray,
                         config: CorrectionConfig, seed: int = 0) -> CorrectionMap:
    """Optimize a whole-trajectory offset vector at each correction parameter.

    Law parameters that coincide with training parameters are dropped: the
    predictive deviation vanishes there, matching the zero anchors the
    interpolants already carry.
    """
    for var, s in surrogates.items():
        for gp in s.gps:
            if gp.correction_ is not None:
                raise CorrectionError(
                    "corrections must be optimized against uncorrected GPs")
    theta_law = np.atleast_2d(np.asarray(theta_law, dtype=float))
    theta_obs = np.atleast_2d(np.asarray(theta_obs, dtype=float))
    scale = np.maximum(np.abs(theta_obs).max(axis=0), 1.0)
    keep = np.ones(theta_law.shape[0], dtype=bool)
    for j, th in enumerate(theta_law):
        if j and np.abs((theta_law[:j] - th) / scale).max(axis=1).min() < 1e-10:
            keep[j] = False
        if np.abs((theta_obs - th) / scale).max(axis=1).min() < 1e-10:
            keep[j] = False
    theta_law = theta_law[keep]
    if theta_law.shape[0] == 0:
        raise CorrectionError("no correction points remain after overlap removal")

    variables = list(model.variables)
    n_modes = {v: surrogates[v].n_modes for v in variables}
    evaluator = model.make_trajectory_residual(ops, nodeset,
                                               _st_modes(surrogates))
    sizes = [n_modes[v] for v in variables]
    splits = np.cumsum(sizes)[:-1]
    blocks = np.split(np.arange(sum(sizes)), splits)
    marginal = blocks if len(variables) > 1 else None

    R = theta_law.shape[0]
    omegas = {v: np.empty((R, n_modes[v])) for v in variables}
    sigmas = {v: np.empty((R, n_modes[v])) for v in variables}
    loss_zero = np.empty(R)
    loss_opt = np.empty(R)
    warn = np.zeros(R, dtype=bool)

    for i, th in enumerate(theta_law):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        mean_std = {v: surrogates[v].predict_coeffs(th[None, :], return_std=True)
                    for v in variables}
        base = np.concatenate([mean_std[v][0][0] for v in variables])
        sig = np.concatenate([mean_std[v][1][0] for v in variables])
        sig = np.where(sig > config.sigma_floor, sig, 0.0)

        def objective(omega_flat):
            coeffs = {}
            o = 0
            for v in variables:
                k = n_modes[v]
                coeffs[v] = base[o:o + k] + omega_flat[o:o + k]
                o += k
            return evaluator.loss(th, coeffs, config.boundary_weight)

        omega, lopt, lzero, w = _optimize_box(
            objective, sig, config.bound_factor, config.budget,
            config.n_random_starts, rng, marginal_blocks=marginal)
        o = 0
        for v in variables:
            k = n_modes[v]
            omegas[v][i] = omega[o:o + k]
            sigmas[v][i] = sig[o:o + k]
            o += k
        loss_zero[i] = lzero
        loss_opt[i] = lopt
        warn[i] = w

    cmap = CorrectionMap(variables=variables, n_modes=n_modes,
                         thetas=theta_law, omegas=omegas, sigmas=sigmas,
                         loss_zero=loss_zero, loss_opt=loss_opt, warn=warn,
                         theta_obs=theta_obs)
    cmap.build_interpolants()
    return cmap


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_correction(cmap: CorrectionMap, var: str, path) -> None:
    K = cmap.n_modes[var]
    q = cmap.thetas.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row_type"] + [f"theta{j}" for j in range(q)]
                   + [f"omega{k}" for k in range(K)]
                   + [f"sigma{k}" for k in range(K)]
                   + ["loss_zero", "loss_opt", "warn"])
        for r in range(cmap.thetas.shape[0]):
            w.writerow(["law"]
                       + [f"{v:.17g}" for v in cmap.thetas[r]]
                       + [f"{v:.17g}" for v in cmap.omegas[var][r]]
                       + [f"{v:.17g}" for v in cmap.sigmas[var][r]]
                       + [f"{cmap.loss_zero[r]:.17g}",
                          f"{cmap.loss_opt[r]:.17g}", int(cmap.warn[r])])
        for th in cmap.theta_obs:
            w.writerow(["obs"] + [f"{v:.17g}" for v in th]
                       + ["0"] * (2 * K) + ["0", "0", "0"])


def load_corrections(paths: dict, variables: list, n_modes: dict) -> CorrectionMap:
    """Rebuild a CorrectionMap from per-variable CSVs (identical law rows)."""
    thetas, loss0, lopt, warn = None, None, None, None
    theta_obs = None
    omegas, sigmas = {}, {}
    for var in variables:
        rows_l, rows_o = [], []
        with open(paths[var], newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            q = sum(1 for h in header if h.startswith("theta"))
            K = sum(1 for h in header if h.startswith("omega"))
            for rec in r:
                (rows_l if rec[0] == "law" else rows_o).append(rec[1:])
        L = np.asarray([[float(v) for v in rec] for rec in rows_l])
        O = np.asarray([[float(v) for v in rec] for rec in rows_o])
        thetas = L[:, :q]
        omegas[var] = L[:, q:q + K]
        sigmas[var] = L[:, q + K:q + 2 * K]
        loss0 = L[:, q + 2 * K]
        lopt = L[:, q + 2 * K + 1]
        warn = L[:, q + 2 * K + 2].astype(bool)
        theta_obs = O[:, :q]
    cmap = CorrectionMap(variables=list(variables), n_modes=dict(n_modes),
                         thetas=thetas, omegas=omegas, sigmas=sigmas,
                         loss_zero=loss0, loss_opt=lopt, warn=warn,
                         theta_obs=theta_obs)
    cmap.build_interpolants()
    return cmap
