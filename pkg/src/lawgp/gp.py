"""Per-coefficient Gaussian-process surrogates.

One ``CoefficientGp`` regresses a single mode coefficient on the PDE
parameters (and the save time, when trajectories are stacked).  Inputs and
targets are standardized internally; hyperparameters maximize the log
marginal likelihood through multi-start bounded direct search.

A fitted GP may carry a correction map: a callable evaluated at the raw
query input whose value shifts the posterior mean while leaving the
posterior variance untouched.
"""

from __future__ import annotations

import csv

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted


class GpError(ValueError):
    pass


class RbfKernel:
    """Squared-exponential kernel with per-dimension length-scales."""

    def __init__(self, amplitude: float, length_scales: np.ndarray):
        self.amplitude = float(amplitude)
        self.length_scales = np.atleast_1d(np.asarray(length_scales, dtype=float))
        if self.amplitude <= 0 or np.any(self.length_scales <= 0):
            raise GpError("kernel parameters must be positive")

    def __call__(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        A = np.atleast_2d(A) / self.length_scales
        B = np.atleast_2d(B) / self.length_scales
        d2 = (np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :]
              - 2.0 * A @ B.T)
        return self.amplitude ** 2 * np.exp(-0.5 * np.maximum(d2, 0.0))


def log_marginal_likelihood(K: np.ndarray, y: np.ndarray, jitter: float) -> float:
    """Direct evaluation of the GP evidence for a fixed kernel matrix."""
    n = K.shape[0]
    L = cholesky(K + jitter * np.eye(n), lower=True)
    alpha = cho_solve((L, True), y)
    return float(-0.5 * y @ alpha - np.sum(np.log(np.diag(L)))
                 - 0.5 * n * np.log(2.0 * np.pi))


class CoefficientGp(BaseEstimator, RegressorMixin):
    """GP regression of one reduced coefficient on the model parameters.

    Parameters
    ----------
    n_restarts : int
        Multi-start count for the likelihood search (first start is the
        unit point in standardized log-space).
    length_scale_bounds, amplitude_bounds : tuple
        Box constraints, applied in standardized space.
    jitter : float
        Diagonal regularization; escalates by decades up to 1e-4 if the
        Cholesky factorization fails.
    isotropic : bool
        Share one length-scale across input dimensions.
    optimize : bool
        Skip hyperparameter search when False (uses unit parameters or the
        values supplied through ``fixed_params``).
    """

    def __init__(self, n_restarts=8, length_scale_bounds=(1e-2, 1e2),
                 amplitude_bounds=(1e-3, 1e3), jitter=1e-8, isotropic=False,
                 standardize_inputs=True, optimize=True, fixed_params=None,
                 random_state=0):
        self.n_restarts = n_restarts
        self.length_scale_bounds = length_scale_bounds
        self.amplitude_bounds = amplitude_bounds
        self.jitter = jitter
        self.isotropic = isotropic
        self.standardize_inputs = standardize_inputs
        self.optimize = optimize
        self.fixed_params = fixed_params
        self.random_state = random_state

    # ------------------------------------------------------------------

    def _standardize_fit(self, X, y):
        if self.standardize_inputs:
            self.x_mean_ = X.mean(axis=0)
            sd = X.std(axis=0)
            self.x_scale_ = np.where(sd > 0, sd, 1.0)
        else:
            self.x_mean_ = np.zeros(X.shape[1])
            self.x_scale_ = np.ones(X.shape[1])
        self.y_mean_ = float(np.mean(y))
        ysd = float(np.std(y))
        self.y_scale_ = ysd if ysd > 0 else 1.0

    def _chol_with_escalation(self, K):
        jitter = float(self.jitter)
        n = K.shape[0]
        while jitter <= 1e-4:
            try:
                L = cholesky(K + jitter * np.eye(n), lower=True)
                return L, jitter
            except np.linalg.LinAlgError:
                jitter *= 10.0
        raise GpError("kernel matrix not positive definite at any jitter level")

    def _neg_lml(self, log_params, Xs, ys):
        try:
            kern = self._kernel_from_log(log_params)
            K = kern(Xs, Xs)
            return -log_marginal_likelihood(K, ys, self.jitter)
        except (np.linalg.LinAlgError, GpError):
            return 1e12

    def _kernel_from_log(self, log_params):
        amp = float(np.exp(log_params[0]))
        if self.isotropic:
            ls = np.full(self.n_dims_, np.exp(log_params[1]))
        else:
            ls = np.exp(np.asarray(log_params[1:]))
        return RbfKernel(amp, ls)

    def fit(self, X, y):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise GpError("inputs and targets disagree in length")
        if X.shape[0] < 2:
            raise GpError("need at least two training points")
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
            raise GpError("non-finite training data")
        self.n_dims_ = X.shape[1]
        self._standardize_fit(X, y)
        Xs = (X - self.x_mean_) / self.x_scale_
        ys = (y - self.y_mean_) / self.y_scale_

        n_hyp = 2 if self.isotropic else 1 + self.n_dims_
        lb = np.concatenate([[np.log(self.amplitude_bounds[0])],
                             np.full(n_hyp - 1, np.log(self.length_scale_bounds[0]))])
        ub = np.concatenate([[np.log(self.amplitude_bounds[1])],
                             np.full(n_hyp - 1, np.log(self.length_scale_bounds[1]))])
        if self.fixed_params is not None:
            amp, ls = self.fixed_params
            best = np.concatenate([[np.log(amp)], np.log(np.atleast_1d(ls))])
            self.optimizer_log_ = []
        elif not self.optimize:
            best = np.zeros(n_hyp)
            self.optimizer_log_ = []
        else:
            rng = np.random.default_rng(self.random_state)
            starts = [np.zeros(n_hyp)]
            for _ in range(max(int(self.n_restarts) - 1, 0)):
                starts.append(lb + (ub - lb) * rng.random(n_hyp))
            log = []
            best, best_val = None, np.inf
            for s in starts:
                res = minimize(self._neg_lml, s, args=(Xs, ys),
                               method="Nelder-Mead",
                               bounds=list(zip(lb, ub)),
                               options={"maxfev": 200 * n_hyp, "xatol": 1e-4,
                                        "fatol": 1e-6})
                log.append({"start": s.tolist(), "value": float(res.fun),
                            "params": res.x.tolist()})
                if res.fun < best_val:
                    best, best_val = res.x, res.fun
            self.optimizer_log_ = log
        self.kernel_ = self._kernel_from_log(best)

        K = self.kernel_(Xs, Xs)
        L, used_jitter = self._chol_with_escalation(K)
        self.L_ = L
        self.jitter_ = used_jitter
        self.X_train_ = Xs
        self.y_train_ = ys
        self.weights_ = cho_solve((L, True), ys)
        self.lml_value_ = float(-0.5 * ys @ self.weights_
                                - np.sum(np.log(np.diag(L)))
                                - 0.5 * len(ys) * np.log(2 * np.pi))
        self.correction_ = None
        return self

    # ------------------------------------------------------------------

    def _validate_query(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_dims_:
            raise GpError(
                f"query dimension {X.shape[1]} does not match training "
                f"dimension {self.n_dims_}")
        return X

    def predict(self, X, return_std=False):
        check_is_fitted(self, "kernel_")
        X = self._validate_query(X)
        Xs = (X - self.x_mean_) / self.x_scale_
        ks = self.kernel_(Xs, self.X_train_)
        mean = self.y_mean_ + self.y_scale_ * (ks @ self.weights_)
        if self.correction_ is not None:
            mean = mean + np.asarray(self.correction_(X), dtype=float).ravel()
        if not return_std:
            return mean
        v = solve_triangular(self.L_, ks.T, lower=True)
        var_std_space = self.kernel_.amplitude ** 2 - np.einsum("ij,ij->j", v, v)
        var = np.maximum(var_std_space, 0.0) * self.y_scale_ ** 2
        return mean, np.sqrt(var)

    def predict_std(self, X) -> np.ndarray:
        """Predictive standard deviation alone (never touches the correction)."""
        check_is_fitted(self, "kernel_")
        X = self._validate_query(X)
        Xs = (X - self.x_mean_) / self.x_scale_
        ks = self.kernel_(Xs, self.X_train_)
        v = solve_triangular(self.L_, ks.T, lower=True)
        var_std_space = self.kernel_.amplitude ** 2 - np.einsum("ij,ij->j", v, v)
        return np.sqrt(np.maximum(var_std_space, 0.0) * self.y_scale_ ** 2)

    def attach_correction(self, correction) -> None:
        """Attach a prior-mean shift; callable of the raw query inputs."""
        check_is_fitted(self, "kernel_")
        self.correction_ = correction

    def detach_correction(self) -> None:
        self.correction_ = None


# ---------------------------------------------------------------------------
# Per-variable surrogate: one basis plus one GP per retained mode
# ---------------------------------------------------------------------------

class FieldSurrogate:
    """Reduced-order surrogate of one variable's space-time trajectory.

    The basis rows span whole trajectories (a leading slice followed by one
    slice per save time); the GPs map the PDE parameters alone to the mode
    coefficients.
    """

    def __init__(self, variable: str, basis, gps: list, n_save: int,
                 n_points: int):
        if len(gps) != basis.n_modes_:
            raise GpError(
                f"{len(gps)} surrogates for {basis.n_modes_} modes")
        if basis.modes_.shape[1] != (n_save + 1) * n_points:
            raise GpError("basis width does not match (n_save + 1) * n_points")
        self.variable = variable
        self.basis = basis
        self.gps = gps
        self.n_save = int(n_save)
        self.n_points = int(n_points)

    @property
    def n_modes(self) -> int:
        return self.basis.n_modes_

    def predict_coeffs(self, X, return_std=False):
        """Coefficient means (and stds) at query parameters: arrays (q, K)."""
        means = np.empty((np.atleast_2d(X).shape[0], self.n_modes))
        stds = np.empty_like(means)
        for k, gp in enumerate(self.gps):
            if return_std:
                means[:, k], stds[:, k] = gp.predict(X, return_std=True)
            else:
                means[:, k] = gp.predict(X)
        return (means, stds) if return_std else means

    def predict_trajectory(self, theta) -> np.ndarray:
        """All slices at one parameter: (n_save + 1, n_points)."""
        coeffs = self.predict_coeffs(np.atleast_2d(theta))
        return self.basis.inverse_transform(coeffs)[0].reshape(
            self.n_save + 1, self.n_points)

    def predict_field(self, theta, time_index: int) -> np.ndarray:
        """Field at save time ``time_index`` (0-based into the save grid)."""
        return self.predict_trajectory(theta)[int(time_index) + 1]


def predict_field(gps: list, basis, theta, time_index: int, n_save: int,
                  n_points: int) -> np.ndarray:
    """Functional form of :meth:`FieldSurrogate.predict_field`."""
    s = FieldSurrogate("field", basis, gps, n_save, n_points)
    return s.predict_field(theta, time_index)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_gp(gp: CoefficientGp, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["section", "i", "j", "value"])

        def put(section, arr):
            arr = np.atleast_2d(np.asarray(arr, dtype=float))
            for i in range(arr.shape[0]):
                for j in range(arr.shape[1]):
                    w.writerow([section, i, j, f"{arr[i, j]:.17g}"])

        put("amplitude", [[gp.kernel_.amplitude]])
        put("length_scales", gp.kernel_.length_scales[None, :])
        put("jitter", [[gp.jitter_]])
        put("flags", [[float(gp.standardize_inputs), float(gp.isotropic)]])
        put("x_mean", gp.x_mean_[None, :])
        put("x_scale", gp.x_scale_[None, :])
        put("y_stats", [[gp.y_mean_, gp.y_scale_]])
        put("inputs", gp.X_train_ * gp.x_scale_ + gp.x_mean_)
        put("targets", (gp.y_train_ * gp.y_scale_ + gp.y_mean_)[None, :])


def load_gp(path) -> CoefficientGp:
    sections: dict = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for sec, i, j, v in r:
            sections.setdefault(sec, {})[(int(i), int(j))] = float(v)

    def arr(section):
        d = sections[section]
        ni = max(i for i, _ in d) + 1
        nj = max(j for _, j in d) + 1
        out = np.empty((ni, nj))
        for (i, j), v in d.items():
            out[i, j] = v
        return out

    amp = float(arr("amplitude")[0, 0])
    ls = arr("length_scales")[0]
    std_in, iso = (True, False)
    if "flags" in sections:
        flags = arr("flags")[0]
        std_in, iso = bool(flags[0]), bool(flags[1])
    gp = CoefficientGp(optimize=False, fixed_params=(amp, ls),
                       standardize_inputs=std_in, isotropic=iso)
    gp.fit(arr("inputs"), arr("targets")[0])
    gp.jitter_ = float(arr("jitter")[0, 0])
    return gp
