"""Gaussian mixture over lattice space: EM fitting, volume-rejected sampling,
and closed-form conditioning for property-targeted generation.

Lattices are canonicalized to a rotation-free lower-triangular chart before
fitting (a along x, b in the xy-plane, c with positive z), removing the
arbitrary global rotation of the raw 3x3 representation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import DegenerateCellError, Lattice, cell_volume, lattice_invariants
from .io import lattice_from_parameters

log = logging.getLogger(__name__)

COV_FLOOR = 1e-6
EM_TOL = 1e-7
MIN_CELL_VOLUME = 10.0  # cubic Angstrom
DEFAULT_K = 16
GMM_FORMAT_VERSION = 1


class ConditioningError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass
class GaussianMixture:
    """Weights, means, and full covariances of a K-component mixture in R^D."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihood_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.covariances = np.asarray(self.covariances, dtype=float)
        if not np.isclose(self.weights.sum(), 1.0, atol=1e-9):
            raise ValueError(f"weights sum to {self.weights.sum()}, expected 1")
        if np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        """Per-sample mixture log density; x is (M, D)."""
        x = np.atleast_2d(x)
        return logsumexp(self._component_log_pdf(x) + np.log(self.weights), axis=1)

    def _component_log_pdf(self, x: np.ndarray) -> np.ndarray:
        """(M, K) matrix of per-component Gaussian log densities."""
        M, D = x.shape
        out = np.empty((M, self.n_components))
        for k in range(self.n_components):
            diff = x - self.means[k]
            chol = np.linalg.cholesky(self.covariances[k])
            sol = np.linalg.solve(chol, diff.T)
            maha = np.sum(sol**2, axis=0)
            logdet = 2.0 * np.sum(np.log(np.diag(chol)))
            out[:, k] = -0.5 * (D * np.log(2 * np.pi) + logdet + maha)
        return out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comps = rng.choice(self.n_components, size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for i, k in enumerate(comps):
            chol = np.linalg.cholesky(self.covariances[k])
            out[i] = self.means[k] + chol @ rng.standard_normal(self.dim)
        return out

    def to_dict(self) -> dict:
        return {
            "version": GMM_FORMAT_VERSION,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GaussianMixture":
        return cls(
            np.array(obj["weights"]),
            np.array(obj["means"]),
            np.array(obj["covariances"]),
        )


def _floor_covariance(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    return cov + COV_FLOOR * np.eye(cov.shape[0])


def fit_em(
    samples: np.ndarray,
    k: int,
    max_iters: int = 200,
    seed: int = 0,
) -> GaussianMixture:
    """Fit a K-component full-covariance mixture by expectation-maximization.

    The log-likelihood trace is monotone non-decreasing up to numerical slack;
    iteration stops at ``max_iters`` or when the improvement drops below 1e-7.
    An emptied component is reinitialized from a random sample.
    """
    samples = np.asarray(samples, dtype=float)
    M, D = samples.shape
    if M < k:
        raise ValueError(f"need at least {k} samples for {k} components, got {M}")
    rng = np.random.default_rng(seed)

    idx = rng.choice(M, size=k, replace=False)
    means = samples[idx].copy()
    base_cov = _floor_covariance(np.cov(samples, rowvar=False, bias=True) if M > 1 else np.zeros((D, D)))
    covs = np.repeat(base_cov[None], k, axis=0)
    weights = np.full(k, 1.0 / k)
    mix = GaussianMixture(weights, means, covs)

    trace: list[float] = []
    for _ in range(max_iters):
        # E-step
        log_resp = mix._component_log_pdf(samples) + np.log(mix.weights)
        log_norm = logsumexp(log_resp, axis=1)
        trace.append(float(log_norm.mean()))
        resp = np.exp(log_resp - log_norm[:, None])

        # M-step
        nk = resp.sum(axis=0)
        for comp in range(k):
            if nk[comp] < 1e-10:
                log.warning("EM component %d emptied; reinitializing from a random sample", comp)
                means[comp] = samples[rng.integers(M)]
                covs[comp] = base_cov.copy()
                nk[comp] = 1.0
                resp[:, comp] = 0.0
                continue
            means[comp] = resp[:, comp] @ samples / nk[comp]
            diff = samples - means[comp]
            covs[comp] = _floor_covariance((resp[:, comp, None] * diff).T @ diff / nk[comp])
        weights = nk / nk.sum()
        mix = GaussianMixture(weights, means, covs)

        if len(trace) >= 2 and trace[-1] - trace[-2] < EM_TOL:
            break
    mix.log_likelihood_trace = trace
    return mix


def condition(
    mix: GaussianMixture, observed_dims, observed_values
) -> GaussianMixture:
    """Condition each component on observed dimensions and reweight the mixture.

    Returns a mixture over the remaining dimensions with conditional means
    mu_r + S_ro S_oo^-1 (y - mu_o), covariances S_rr - S_ro S_oo^-1 S_or, and
    weights proportional to w_k * N(y; mu_o, S_oo).
    """
    obs = np.asarray(observed_dims, dtype=int)
    y = np.asarray(observed_values, dtype=float)
    if obs.size != y.size:
        raise ConditioningError("observed_dims and observed_values length mismatch")
    if np.any(obs < 0) or np.any(obs >= mix.dim) or len(set(obs.tolist())) != obs.size:
        raise ConditioningError(f"invalid observed dims {obs.tolist()} for D={mix.dim}")
    if not np.all(np.isfinite(y)):
        raise ConditioningError("observed values must be finite")
    rem = np.array([d for d in range(mix.dim) if d not in set(obs.tolist())], dtype=int)

    new_means = np.empty((mix.n_components, rem.size))
    new_covs = np.empty((mix.n_components, rem.size, rem.size))
    log_w = np.empty(mix.n_components)
    for k in range(mix.n_components):
        cov = mix.covariances[k]
        s_oo = cov[np.ix_(obs, obs)]
        s_ro = cov[np.ix_(rem, obs)]
        s_rr = cov[np.ix_(rem, rem)]
        try:
            chol = np.linalg.cholesky(s_oo)
        except np.linalg.LinAlgError as exc:
            raise ConditioningError(f"component {k}: observed block not invertible") from exc
        diff = y - mix.means[k][obs]
        sol = np.linalg.solve(chol, diff)
        gain = np.linalg.solve(chol.T, np.linalg.solve(chol, s_ro.T)).T  # S_ro S_oo^-1
        new_means[k] = mix.means[k][rem] + gain @ diff
        new_covs[k] = _floor_covariance(s_rr - gain @ s_ro.T)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        log_w[k] = np.log(mix.weights[k] + 1e-300) - 0.5 * (
            obs.size * np.log(2 * np.pi) + logdet + sol @ sol
        )
    log_w -= logsumexp(log_w)
    return GaussianMixture(np.exp(log_w) / np.exp(log_w).sum(), new_means, new_covs)


# ---------------------------------------------------------------------------
# lattice-specific front end


def canonicalize_lattice(lattice: Lattice) -> Lattice:
    """Rotate a lattice into the lower-triangular chart (invariants preserved)."""
    return lattice_from_parameters(*lattice_invariants(lattice))


def lattice_to_vector(lattice: Lattice, canonicalize: bool = True) -> np.ndarray:
    lat = canonicalize_lattice(lattice) if canonicalize else lattice
    return lat.rows.reshape(9).copy()


def sample_lattice(
    mix: GaussianMixture,
    rng: np.random.Generator,
    max_attempts: int = 1000,
    min_volume: float = MIN_CELL_VOLUME,
) -> Lattice:
    """Draw lattices from the mixture, rejecting cells below the volume bound."""
    if mix.dim != 9:
        raise ValueError(f"lattice mixture must have D=9, got {mix.dim}")
    for _ in range(max_attempts):
        rows = mix.sample(1, rng)[0].reshape(3, 3)
        lat = Lattice(rows)
        try:
            vol = cell_volume(lat)
        except DegenerateCellError:
            continue
        if vol >= min_volume:
            return lat
    raise SamplingError(
        f"no lattice with volume >= {min_volume} within {max_attempts} attempts"
    )


@dataclass
class LatticeModel:
    """Fitted lattice mixture plus its conditioning schema."""

    mixture: GaussianMixture
    condition_props: list[str] = field(default_factory=list)
    canonicalized: bool = True

    def conditioned(self, conditions: dict[str, float] | None) -> GaussianMixture:
        """Mixture over the 9 lattice dims, conditioning out any property dims."""
        if not self.condition_props:
            if conditions:
                raise ConditioningError("model was fit without condition properties")
            return self.mixture
        conditions = conditions or {}
        missing = [p for p in self.condition_props if p not in conditions]
        if missing:
            raise ConditioningError(f"missing condition values for {missing}")
        obs = list(range(9, 9 + len(self.condition_props)))
        values = [conditions[p] for p in self.condition_props]
        return condition(self.mixture, obs, values)

    def sample(self, rng, conditions=None, max_attempts: int = 1000) -> Lattice:
        return sample_lattice(self.conditioned(conditions), rng, max_attempts)

    def save(self, path):
        obj = self.mixture.to_dict()
        obj["condition_props"] = self.condition_props
        obj["canonicalized"] = self.canonicalized
        with open(path, "w") as fh:
            json.dump(obj, fh)

    @classmethod
    def load(cls, path) -> "LatticeModel":
        with open(path) as fh:
            obj = json.load(fh)
        return cls(
            GaussianMixture.from_dict(obj),
            list(obj.get("condition_props", [])),
            bool(obj.get("canonicalized", True)),
        )


def fit_lattice_model(
    records,
    k: int = DEFAULT_K,
    max_iters: int = 200,
    seed: int = 0,
    condition_props: list[str] | None = None,
) -> LatticeModel:
    """Fit the lattice mixture from dataset records.

    When condition properties are named, their values are appended as extra
    dimensions during fitting and conditioned out at sampling time.
    """
    condition_props = list(condition_props or [])
    vectors = []
    for rec in records:
        vec = lattice_to_vector(rec.crystal.lattice)
        if condition_props:
            missing = [p for p in condition_props if p not in rec.properties]
            if missing:
                raise ConditioningError(f"record {rec.identifier}: missing properties {missing}")
            vec = np.concatenate([vec, [rec.properties[p] for p in condition_props]])
        vectors.append(vec)
    mix = fit_em(np.array(vectors), k=k, max_iters=max_iters, seed=seed)
    return LatticeModel(mix, condition_props)
