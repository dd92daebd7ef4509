"""Snapshot compression with the proper orthogonal decomposition.

``PodReducer`` follows the scikit-learn transformer protocol: ``fit`` on a
snapshot matrix (rows are solved fields), ``transform`` projects fields to
mode coefficients, ``inverse_transform`` reconstructs fields.
"""

from __future__ import annotations

import csv

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted


class PodError(ValueError):
    pass


class PodReducer(BaseEstimator, TransformerMixin):
    """Orthonormal mode basis extracted from a snapshot matrix.

    Parameters
    ----------
    n_modes : int or None
        Number of retained modes.  If None, ``energy`` decides.
    energy : float or None
        Smallest K whose modes capture at least this fraction of the
        squared singular spectrum.  Ignored when ``n_modes`` is given.
    center : bool
        Subtract the column mean before decomposing (off by default).

    Attributes
    ----------
    modes_ : ndarray (K, D)
        Orthonormal rows; the largest-magnitude entry of each mode is
        positive (deterministic sign convention).
    spectrum_ : ndarray
        All eigenvalues of the snapshot covariance ``U^T U / (N - 1)``,
        descending.
    coefficients_ : ndarray (N, K)
        Training-row coefficients.
    energy_fraction_ : float
        Captured fraction ``sum(spectrum_[:K]) / sum(spectrum_)``.
    """

    def __init__(self, n_modes=None, energy=None, center=False,
                 cap_to_rank=False):
        self.n_modes = n_modes
        self.energy = energy
        self.center = center
        self.cap_to_rank = cap_to_rank

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        n_rows, n_cols = X.shape
        self.mean_ = X.mean(axis=0) if self.center else np.zeros(n_cols)
        work = X - self.mean_
        # SVD instead of an eigendecomposition of the covariance: identical
        # spectrum, better conditioning
        _, s, vt = np.linalg.svd(work, full_matrices=False)
        denom = max(n_rows - 1, 1)
        spectrum = (s ** 2) / denom
        tol = s[0] * max(n_rows, n_cols) * np.finfo(float).eps if s.size else 0.0
        rank = int(np.sum(s > tol))
        if self.n_modes is not None:
            k = int(self.n_modes)
            if not 1 <= k <= min(n_rows, n_cols):
                raise PodError(
                    f"n_modes must lie in [1, {min(n_rows, n_cols)}]")
            if k > rank:
                if not self.cap_to_rank:
                    raise PodError(
                        f"requested {k} modes but numerical rank is {rank}")
                k = rank
        else:
            target = 0.999 if self.energy is None else float(self.energy)
            csum = np.cumsum(spectrum) / np.sum(spectrum)
            k = int(np.searchsorted(csum, target) + 1)
            k = min(max(k, 1), rank)
        modes = vt[:k]
        # sign convention: largest-magnitude entry of each mode positive
        flip = modes[np.arange(k), np.argmax(np.abs(modes), axis=1)] < 0
        modes[flip] *= -1.0
        self.modes_ = modes
        self.spectrum_ = spectrum
        self.n_modes_ = k
        self.rank_ = rank
        self.energy_fraction_ = float(np.sum(spectrum[:k]) / np.sum(spectrum))
        self.coefficients_ = work @ modes.T
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "modes_")
        X = check_array(np.atleast_2d(X), dtype=float)
        if X.shape[1] != self.modes_.shape[1]:
            raise PodError(
                f"field length {X.shape[1]} does not match modes "
                f"({self.modes_.shape[1]})")
        return (X - self.mean_) @ self.modes_.T

    def inverse_transform(self, A) -> np.ndarray:
        check_is_fitted(self, "modes_")
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.shape[1] != self.n_modes_:
            raise PodError(
                f"coefficient length {A.shape[1]} does not match K={self.n_modes_}")
        return A @ self.modes_ + self.mean_

    # convenience single-vector forms -------------------------------------

    def project(self, field: np.ndarray) -> np.ndarray:
        return self.transform(field[None, :])[0]

    def reconstruct(self, coeffs: np.ndarray) -> np.ndarray:
        return self.inverse_transform(np.asarray(coeffs)[None, :])[0]


def save_basis(basis: PodReducer, modes_path, spectrum_path) -> None:
    with open(modes_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode"] + [f"f{i}" for i in range(basis.modes_.shape[1])])
        w.writerow(["mean"] + [f"{v:.17g}" for v in basis.mean_])
        for k, row in enumerate(basis.modes_):
            w.writerow([k] + [f"{v:.17g}" for v in row])
    with open(spectrum_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "eigenvalue"])
        for i, lam in enumerate(basis.spectrum_):
            w.writerow([i, f"{lam:.17g}"])


def load_basis(modes_path, spectrum_path) -> PodReducer:
    rows = []
    mean = None
    with open(modes_path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            if row[0] == "mean":
                mean = np.asarray([float(v) for v in row[1:]])
            else:
                rows.append([float(v) for v in row[1:]])
    modes = np.asarray(rows)
    spec = []
    with open(spectrum_path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            spec.append(float(row[1]))
    basis = PodReducer(n_modes=modes.shape[0])
    basis.modes_ = modes
    basis.spectrum_ = np.asarray(spec)
    basis.n_modes_ = modes.shape[0]
    basis.rank_ = modes.shape[0]
    basis.mean_ = mean if mean is not None else np.zeros(modes.shape[1])
    total = float(np.sum(basis.spectrum_)) or 1.0
    basis.energy_fraction_ = float(np.sum(basis.spectrum_[:basis.n_modes_]) / total)
    basis.coefficients_ = np.zeros((0, modes.shape[0]))
    return basis
