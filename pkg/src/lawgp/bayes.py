"""Random-walk Metropolis sampling of the PDE parameter posterior.

The unnormalized log posterior combines a Gaussian data misfit with the
physics-residual loss of the surrogate trajectory, both evaluated through
the (optionally law-corrected) reduced-order surrogate; no PDE solves run
inside the chain.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .lawcorrect import law_loss
from .rbffd import EvalPseudoInverse


class BayesError(ValueError):
    pass


@dataclass
class InverseProblem:
    """Observation model and weights for parameter estimation."""

    model: object
    surrogates: dict
    ops: dict
    nodeset: object
    observation: np.ndarray
    obs_variable: str
    obs_time_index: int = -1
    obs_mask: np.ndarray = None          # optional sensor subset on X
    noise_variance: float = 0.1
    data_weight: float = None            # beta1, defaults to 1/(2*sigma^2)
    law_weight: float = 1.0              # beta2
    boundary_weight: float = 1.0

    def __post_init__(self):
        if self.noise_variance <= 0:
            raise BayesError("noise variance must be positive")
        if self.data_weight is None:
            self.data_weight = 1.0 / (2.0 * self.noise_variance)
        if self.obs_mask is not None:
            self.obs_mask = np.asarray(self.obs_mask)
        self.observation = np.asarray(self.observation, dtype=float)
        if self.observation.size == 0:
            raise BayesError("empty observation")
        self._pinv = EvalPseudoInverse(self.ops["eval"])
        self._traj_residual = self.model.make_trajectory_residual(
            self.ops, self.nodeset,
            {v: s.basis.modes_ for v, s in self.surrogates.items()},
            self._pinv)
        names = self.model.param_names
        self.bounds = np.asarray([self.model.prior_bounds[k] for k in names])

    def predict_observable(self, theta) -> np.ndarray:
        f = self.surrogates[self.obs_variable].predict_field(
            theta, self.obs_time_index if self.obs_time_index >= 0
            else self.model.n_save + self.obs_time_index)
        return f[self.obs_mask] if self.obs_mask is not None else f

    def coeff_means(self, theta) -> dict:
        th = np.atleast_2d(np.asarray(theta, dtype=float))
        return {v: self.surrogates[v].predict_coeffs(th)[0]
                for v in self.model.variables}

    def log_posterior(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(theta)):
            raise BayesError("non-finite parameter value")
        if np.any(theta < self.bounds[:, 0]) or np.any(theta > self.bounds[:, 1]):
            return -np.inf
        diff = self.observation - self.predict_observable(theta)
        lp = -self.data_weight * float(diff @ diff)
        if self.law_weight > 0.0:
            lp -= self.law_weight * self._traj_residual.loss(
                theta, self.coeff_means(theta), self.boundary_weight)
        return lp


@dataclass
class PosteriorChain:
    """MH sample record with acceptance statistics and summary moments."""

    param_names: list
    samples: np.ndarray            # (iterations, q)
    log_posterior: np.ndarray      # (iterations,)
    acceptance_rate: float
    proposal_scale: np.ndarray
    burn_in: int
    mean: np.ndarray = field(init=False)
    std: np.ndarray = field(init=False)

    def __post_init__(self):
        kept = self.samples[self.burn_in:]
        self.mean = kept.mean(axis=0)
        self.std = kept.std(axis=0)

    def summary(self) -> dict:
        return {name: (float(m), float(s))
                for name, m, s in zip(self.param_names, self.mean, self.std)}


def run_mh(log_posterior, bounds, iterations: int, proposal_scale=None,
           seed: int = 0, burn_in_frac: float = 0.2,
           acceptance_window=(0.25, 0.40), param_names=None) -> PosteriorChain:
    """Gaussian random-walk Metropolis with burn-in scale tuning.

    The proposal is symmetric, so the acceptance ratio reduces to the
    posterior ratio.  The scale adapts every 100 draws during burn-in
    toward the acceptance window, then freezes.
    """
    if iterations < 1:
        raise BayesError("need at least one iteration")
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    q = bounds.shape[0]
    names = list(param_names) if param_names else [f"theta{i}" for i in range(q)]
    rng = np.random.default_rng(seed)
    scale = np.asarray(proposal_scale, dtype=float) if proposal_scale is not None \
        else 0.1 * (bounds[:, 1] - bounds[:, 0])
    scale = np.broadcast_to(np.atleast_1d(scale), (q,)).copy()
    burn = int(burn_in_frac * iterations)

    x = 0.5 * (bounds[:, 0] + bounds[:, 1])
    lp = log_posterior(x)
    samples = np.empty((iterations, q))
    trace = np.empty(iterations)
    accepted = 0
    window_acc, window_n = 0, 0
    for i in range(iterations):
        prop = x + scale * rng.standard_normal(q)
        lp_prop = log_posterior(prop)
        if np.log(rng.random()) < lp_prop - lp:
            x, lp = prop, lp_prop
            accepted += 1
            window_acc += 1
        window_n += 1
        samples[i] = x
        trace[i] = lp
        if i < burn and window_n == 100:
            rate = window_acc / window_n
            if rate < acceptance_window[0]:
                scale *= 0.8
            elif rate > acceptance_window[1]:
                scale *= 1.25
            window_acc = window_n = 0
    return PosteriorChain(param_names=names, samples=samples,
                          log_posterior=trace,
                          acceptance_rate=accepted / iterations,
                          proposal_scale=scale, burn_in=burn)


def estimate_parameters(problem: InverseProblem, iterations: int,
                        proposal_scale=None, seed: int = 0) -> PosteriorChain:
    return run_mh(problem.log_posterior, problem.bounds, iterations,
                  proposal_scale=proposal_scale, seed=seed,
                  param_names=list(problem.model.param_names))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_chain(chain: PosteriorChain, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(chain.param_names) + ["log_posterior"])
        for row, lp in zip(chain.samples, chain.log_posterior):
            w.writerow([f"{v:.17g}" for v in row] + [f"{lp:.17g}"])


def save_summary(chain: PosteriorChain, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "mean", "std"])
        for name, (m, s) in chain.summary().items():
            w.writerow([name, f"{m:.17g}", f"{s:.17g}"])
        w.writerow(["acceptance_rate", f"{chain.acceptance_rate:.17g}", ""])
        w.writerow(["burn_in", chain.burn_in, ""])


def load_chain(path) -> tuple:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[float(v) for v in rec] for rec in r]
    arr = np.asarray(rows)
    return header[:-1], arr[:, :-1], arr[:, -1]
