"""Class-conditional PCA and the feature reconstruction error score.

Each class gets a mean vector and an orthonormal basis of top principal
directions of its centered features (sample covariance, 1/(n-1)). The score
of a query feature is the Euclidean norm of its residual after centering,
projecting onto the class basis, and lifting back: points on the class
manifold score ~0, points far from it score high.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, UsageError
from .io import read_container, write_container


@dataclass(frozen=True)
class ClassSubspace:
    """Mean, orthonormal basis, and full eigenvalue spectrum for one class."""

    mean: np.ndarray          # (D,)
    basis: np.ndarray         # (D, L), orthonormal columns
    spectrum: np.ndarray      # all sample-covariance eigenvalues, descending
    n_fit: int

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]

    @property
    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues of the kept components."""
        return self.spectrum[: self.n_components]

    @property
    def discarded_variance(self) -> float:
        return float(self.spectrum[self.n_components :].sum())


@dataclass(frozen=True)
class ClassPcaModel:
    d: int
    classes: dict[int, ClassSubspace]

    def fitted(self, k: int) -> bool:
        return k in self.classes


def class_covariance_eig(centered: np.ndarray, method: str = "auto"):
    """Descending eigenpairs of the sample covariance of centered rows.

    ``auto`` uses the D x D covariance when n > D and the n x n Gram matrix
    (snapshot method) otherwise; the explicit methods exist so the two routes
    can be compared where both apply. Eigenvalues below zero are clamped; the
    eigenvector matrix always has D orthonormal columns (zero-variance
    directions are completed arbitrarily but orthonormally).
    """
    n, d = centered.shape
    rank = min(n - 1, d)
    if method == "auto":
        method = "scatter" if n > d else "gram"
    if method == "scatter":
        cov = (centered.T @ centered) / (n - 1)
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1]
        eigvals = eigvals[order]
        eigvecs = eigvecs[:, order].copy()
    elif method == "gram":
        gram = (centered @ centered.T) / (n - 1)
        gvals, gvecs = np.linalg.eigh(gram)
        order = np.argsort(gvals)[::-1][:rank]
        lifted = centered.T @ gvecs[:, order]  # columns along u_j, norm sqrt((n-1) lambda_j)
        q, r = np.linalg.qr(lifted, mode="reduced")
        signs = np.sign(np.diag(r))
        signs[signs == 0] = 1.0
        q = q * signs
        eigvals = np.concatenate([gvals[order], np.zeros(d - rank)])
        eigvecs = np.concatenate([q, np.zeros((d, d - rank))], axis=1)
        if d > rank:
            # complete zero-variance directions orthonormally
            full_q, _ = np.linalg.qr(np.concatenate([q, np.eye(d)], axis=1))
            eigvecs[:, rank:] = full_q[:, rank:d]
    else:
        raise ConfigError(f"unknown eigendecomposition method {method!r}")
    eigvals = np.where(eigvals > 0.0, eigvals, 0.0)
    eigvals[rank:] = 0.0
    # sign convention: largest-magnitude coordinate positive
    for j in range(d):
        col = eigvecs[:, j]
        lead = np.argmax(np.abs(col))
        if col[lead] < 0:
            eigvecs[:, j] = -col
    return eigvals, eigvecs


def _pick_dimension(spectrum: np.ndarray, rank: int, n_components: int | None,
                    variance_fraction: float | None) -> int:
    if n_components is not None:
        return min(n_components, rank)
    total = spectrum.sum()
    if total <= 0.0:
        return 0
    cumulative = np.cumsum(spectrum[:rank])
    keep = int(np.searchsorted(cumulative, variance_fraction * total) + 1)
    return min(keep, rank)


def fit_class_pca(features_by_class: dict[int, np.ndarray], n_components: int | None = None,
                  variance_fraction: float | None = None, center: bool = True) -> ClassPcaModel:
    """Fit one subspace per class from its labeled features.

    Exactly one of ``n_components`` (fixed dimension, capped at min(D, n-1))
    or ``variance_fraction`` (smallest dimension whose eigenvalue prefix sum
    reaches that fraction of total variance) selects the kept dimension;
    the default is a 0.95 variance fraction. Classes with fewer than 2
    samples fall back to a mean-only subspace with a warning. ``center=False``
    skips mean subtraction (kept for ablation; the mean is stored as zero).
    """
    if n_components is not None and variance_fraction is not None:
        raise ConfigError("pass n_components or variance_fraction, not both")
    if n_components is None and variance_fraction is None:
        variance_fraction = 0.95
    if variance_fraction is not None and not 0 < variance_fraction <= 1:
        raise ConfigError("variance_fraction must lie in (0, 1]")
    if n_components is not None and n_components < 1:
        raise ConfigError("n_components must be >= 1")
    if not features_by_class:
        raise DataError("no classes to fit")

    d = None
    classes: dict[int, ClassSubspace] = {}
    for k in sorted(features_by_class):
        feats = np.asarray(features_by_class[k], dtype=np.float64)
        if feats.ndim != 2:
            raise DataError(f"class {k}: features must be 2-D")
        if d is None:
            d = feats.shape[1]
        elif feats.shape[1] != d:
            raise DataError(f"class {k}: dimension {feats.shape[1]} != {d}")
        n_k = feats.shape[0]
        mean = feats.mean(axis=0) if center else np.zeros(d)
        if n_k < 2:
            warnings.warn(f"class {k} has {n_k} sample(s); using a mean-only subspace",
                          stacklevel=2)
            classes[k] = ClassSubspace(mean, np.zeros((d, 0)), np.zeros(d), n_k)
            continue
        centered = feats - mean
        spectrum, eigvecs = class_covariance_eig(centered)
        rank = min(n_k - 1, d)
        keep = _pick_dimension(spectrum, rank, n_components, variance_fraction)
        classes[k] = ClassSubspace(mean, eigvecs[:, :keep].copy(), spectrum, n_k)
    return ClassPcaModel(d, classes)


def fre_score(model: ClassPcaModel, z: np.ndarray, k: int) -> float:
    """Residual norm of ``z`` against class ``k``'s subspace."""
    return float(fre_scores(model, np.asarray(z, dtype=np.float64)[None, :], k)[0])


def fre_scores(model: ClassPcaModel, z: np.ndarray, k: int) -> np.ndarray:
    """Vectorized residual norms for many queries against one class."""
    if not model.fitted(k):
        raise UsageError(f"class {k} has no fitted subspace")
    sub = model.classes[k]
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.d:
        raise DataError(f"queries have shape {z.shape}, expected (*, {model.d})")
    centered = z - sub.mean
    if sub.n_components:
        coords = centered @ sub.basis
        residual = centered - coords @ sub.basis.T
    else:
        residual = centered
    return np.linalg.norm(residual, axis=1)


def save_class_pca(model: ClassPcaModel, path) -> None:
    meta = {"kind": "pca", "d": model.d, "classes": sorted(model.classes),
            "n_fit": {str(k): sub.n_fit for k, sub in model.classes.items()}}
    arrays = {}
    for k, sub in model.classes.items():
        arrays[f"mean_{k}"] = sub.mean
        arrays[f"basis_{k}"] = sub.basis
        arrays[f"spectrum_{k}"] = sub.spectrum
    write_container(path, meta, arrays)


def load_class_pca(path) -> ClassPcaModel:
    meta, arrays = read_container(path)
    if meta.get("kind") != "pca":
        raise DataError(f"{path}: container holds {meta.get('kind')!r}, not a pca model")
    classes = {}
    for k in meta["classes"]:
        classes[int(k)] = ClassSubspace(
            arrays[f"mean_{k}"],
            arrays[f"basis_{k}"],
            arrays[f"spectrum_{k}"],
            int(meta["n_fit"][str(k)]),
        )
    return ClassPcaModel(int(meta["d"]), classes)
