"""Per-class Gaussian and Gaussian-mixture density models on detection embeddings.

Single-Gaussian fits use the sample mean, the unbiased sample covariance plus
a relative diagonal jitter, and the class frequency as prior.  Mixture fits
run expectation-maximization from a seeded k-means++ initialization, with the
same jitter policy per component, deterministic given the seed, and a
collapse policy that re-seeds a degenerate component once and then reduces K.

Covariances are stored and evaluated exclusively through lower-triangular
Cholesky factors; densities never form an explicit inverse.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import FitError
from .interchange import ClassDensityModel

LOG_2PI = math.log(2.0 * math.pi)

_WEIGHT_COLLAPSE = 1e-8
_CONDITION_COLLAPSE = 1e12


@dataclass(frozen=True)
class FitConfig:
    """Mixture fitting knobs; ``k`` is the component count per class."""

    k: int = 3
    jitter: float = 1e-6
    em_max_iters: int = 200
    em_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.k <= 4:
            raise ValueError(f"k must be in {{1, 2, 3, 4}}, got {self.k}")
        if self.jitter <= 0:
            raise ValueError(f"jitter must be > 0, got {self.jitter}")
        if self.em_max_iters < 1:
            raise ValueError("em_max_iters must be >= 1")


def log_gaussian_pdf(x, mean, chol_cov) -> float | np.ndarray:
    """Multivariate normal log density evaluated through the Cholesky factor.

    ``x`` may be a single point (d,) or a batch (n, d); returns a scalar or an
    (n,) array accordingly.
    """
    mean = np.asarray(mean, dtype=np.float64)
    L = np.asarray(chol_cov, dtype=np.float64)
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    d = mean.shape[0]
    if pts.shape[1] != d or L.shape != (d, d):
        raise ValueError(
            f"dimension mismatch: x has {pts.shape[1]}, mean {d}, factor {L.shape}"
        )
    z = solve_triangular(L, (pts - mean).T, lower=True)
    out = -0.5 * d * LOG_2PI - np.log(np.diag(L)).sum() - 0.5 * np.einsum("dn,dn->n", z, z)
    return float(out[0]) if single else out


def _jittered_covariance(scatter: np.ndarray, jitter: float) -> tuple[np.ndarray, float, bool]:
    """Add ``jitter * (trace/dim) * I``; fall back to absolute jitter at zero scatter."""
    d = scatter.shape[0]
    scale = float(np.trace(scatter)) / d
    fallback = scale <= 0.0
    lam = jitter * (1.0 if fallback else scale)
    return scatter + lam * np.eye(d), lam, fallback


def _cholesky(cov: np.ndarray) -> np.ndarray | None:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return None


def fit_single_gaussian(
    samples,
    total_count: int,
    jitter: float = 1e-6,
    class_id: int = 0,
) -> ClassDensityModel:
    """Closed-form single-Gaussian fit with unbiased covariance and relative jitter."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"samples must be (n, d), got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise FitError(f"class {class_id}: {n} samples, need at least 2")
    mean = x.mean(axis=0)
    dev = x - mean
    scatter = dev.T @ dev / (n - 1)
    cov, lam, fallback = _jittered_covariance(scatter, jitter)
    chol = _cholesky(cov)
    if chol is None:
        # Roundoff can leave tiny negative eigenvalues; escalate the ridge.
        for boost in (10.0, 100.0, 1000.0):
            chol = _cholesky(cov + boost * lam * np.eye(d))
            if chol is not None:
                break
        else:
            raise FitError(f"class {class_id}: covariance not factorizable")
    metadata = {"n_samples": int(n)}
    if n <= d:
        metadata["degenerate"] = True
    if fallback:
        metadata["zero_scatter"] = True
    return ClassDensityModel(
        class_id=class_id,
        weights=np.array([1.0]),
        means=mean[None, :],
        chol_covariances=chol[None, :, :],
        class_prior=n / total_count,
        metadata=metadata,
    )


def _kmeanspp_centers(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[int(rng.integers(n))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            probs = d2 / total
            idx = int(rng.choice(n, p=probs))
        else:
            idx = int(rng.integers(n))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - centers[-1]) ** 2).sum(axis=1))
    return np.stack(centers)


@dataclass
class _Components:
    weights: np.ndarray
    means: np.ndarray
    chols: np.ndarray  # (k, d, d)

    def log_densities(self, x: np.ndarray) -> np.ndarray:
        """(n, k) array of log(weight_k) + log N(x; mu_k, Sigma_k)."""
        cols = [
            np.log(self.weights[j]) + log_gaussian_pdf(x, self.means[j], self.chols[j])
            for j in range(self.weights.shape[0])
        ]
        return np.stack(cols, axis=1)


def _m_step(x: np.ndarray, resp: np.ndarray, jitter: float):
    """Weighted means/covariances; returns components plus per-component health flags."""
    n, d = x.shape
    nk = resp.sum(axis=0)
    weights = nk / n
    collapsed = weights < _WEIGHT_COLLAPSE
    safe_nk = np.where(nk > 0, nk, 1.0)
    means = (resp.T @ x) / safe_nk[:, None]
    chols = np.zeros((resp.shape[1], d, d))
    for j in range(resp.shape[1]):
        if collapsed[j]:
            continue
        dev = x - means[j]
        scatter = (resp[:, j, None] * dev).T @ dev / safe_nk[j]
        cov, _, fallback = _jittered_covariance(scatter, jitter)
        chol = _cholesky(cov)
        if chol is None or fallback:
            collapsed[j] = True
            continue
        diag = np.diag(chol)
        if (diag.max() / diag.min()) ** 2 > _CONDITION_COLLAPSE:
            collapsed[j] = True
            continue
        chols[j] = chol
    return _Components(weights, means, chols), collapsed


def _global_chol(x: np.ndarray, jitter: float) -> np.ndarray:
    n, d = x.shape
    if n >= 2:
        dev = x - x.mean(axis=0)
        scatter = dev.T @ dev / (n - 1)
    else:
        scatter = np.zeros((d, d))
    cov, _, _ = _jittered_covariance(scatter, jitter)
    chol = _cholesky(cov)
    if chol is None:
        chol = math.sqrt(jitter) * np.eye(d)
    return chol


def fit_gmm_em(
    samples,
    config: FitConfig,
    total_count: int | None = None,
    class_id: int = 0,
) -> ClassDensityModel:
    """Expectation-maximization mixture fit, deterministic given the seed.

    K=1 reduces to the closed-form single-Gaussian fit.  A component whose
    weight vanishes, whose covariance loses conditioning, or whose scatter
    degenerates is re-seeded once from the highest-residual sample; a second
    collapse refits with K-1 components, recorded in the model metadata.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"samples must be (n, d), got shape {x.shape}")
    n, d = x.shape
    total = n if total_count is None else total_count

    if config.k == 1:
        model = fit_single_gaussian(x, total, jitter=config.jitter, class_id=class_id)
        metadata = dict(model.metadata)
        metadata.update({"em_iterations": 1, "converged": True, "k_requested": 1})
        return replace(model, metadata=metadata)

    if n < 2:
        raise FitError(f"class {class_id}: {n} samples, need at least 2")

    rng = np.random.default_rng(config.seed)
    centers = _kmeanspp_centers(x, config.k, rng)
    assign = np.argmin(((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2), axis=1)
    resp = np.zeros((n, config.k))
    resp[np.arange(n), assign] = 1.0

    reseed_cov = _global_chol(x, config.jitter)
    reseeded = [False] * config.k
    collapse_events: list[dict] = []
    nll_trace: list[float] = []
    prev_nll = None
    converged = False
    iteration = 0

    components, collapsed = _m_step(x, resp, config.jitter)
    while iteration < config.em_max_iters:
        if collapsed.any():
            healthy = [j for j in range(config.k) if not collapsed[j]]
            for j in np.flatnonzero(collapsed):
                if reseeded[j]:
                    collapse_events.append({"iteration": iteration, "component": int(j),
                                            "action": "reduce_k"})
                    reduced = fit_gmm_em(
                        x, replace(config, k=config.k - 1), total_count=total,
                        class_id=class_id,
                    )
                    metadata = dict(reduced.metadata)
                    metadata["k_requested"] = config.k
                    metadata["collapse_events"] = (
                        collapse_events + metadata.get("collapse_events", [])
                    )
                    return replace(reduced, metadata=metadata)
                # Re-seed from the sample the healthy components explain worst.
                if healthy:
                    partial = _Components(
                        weights=np.ones(len(healthy)) / len(healthy),
                        means=components.means[healthy],
                        chols=components.chols[healthy],
                    )
                    residual = -partial.log_densities(x).max(axis=1)
                else:
                    residual = ((x - x.mean(axis=0)) ** 2).sum(axis=1)
                pick = int(np.argmax(residual))
                components.means[j] = x[pick]
                components.chols[j] = reseed_cov
                keep = components.weights.sum() - components.weights[j]
                if keep > 0:
                    scale = (1.0 - 1.0 / config.k) / keep
                    components.weights *= scale
                components.weights[j] = 1.0 / config.k
                components.weights /= components.weights.sum()
                reseeded[j] = True
                collapsed[j] = False
                collapse_events.append({"iteration": iteration, "component": int(j),
                                        "action": "reseed", "sample": pick})
                prev_nll = None  # monotonicity baseline resets after surgery

        log_joint = components.log_densities(x)
        row_max = log_joint.max(axis=1, keepdims=True)
        log_norm = row_max[:, 0] + np.log(np.exp(log_joint - row_max).sum(axis=1))
        nll = -float(log_norm.sum())
        nll_trace.append(nll)
        iteration += 1

        if prev_nll is not None:
            if abs(prev_nll - nll) <= config.em_tol * max(1.0, abs(prev_nll)):
                converged = True
                break
        prev_nll = nll

        resp = np.exp(log_joint - log_norm[:, None])
        components, collapsed = _m_step(x, resp, config.jitter)

    metadata = {
        "n_samples": int(n),
        "em_iterations": iteration,
        "converged": converged,
        "nll_trace": nll_trace,
        "k_requested": config.k,
    }
    if collapse_events:
        metadata["collapse_events"] = collapse_events
    if n <= d:
        metadata["degenerate"] = True
    return ClassDensityModel(
        class_id=class_id,
        weights=components.weights,
        means=components.means,
        chol_covariances=components.chols,
        class_prior=n / total,
        metadata=metadata,
    )


class DensityEvaluator:
    """Vectorized per-class mixture log-likelihoods for a full model set.

    Precomputes inverse Cholesky factors so batch evaluation is a single
    matrix product per call; chunks rows to bound temporary memory.
    """

    _CHUNK = 4096

    def __init__(self, models: Sequence[ClassDensityModel]):
        ordered = sorted(models, key=lambda m: m.class_id)
        if [m.class_id for m in ordered] != list(range(len(ordered))):
            raise ValueError("models must cover class ids 0..C-1 exactly once")
        self.models = tuple(ordered)
        self.num_classes = len(ordered)
        self.dim = ordered[0].dim

        slices = []
        inv_rows = []
        offsets = []
        consts = []
        start = 0
        for model in ordered:
            if model.dim != self.dim:
                raise ValueError("models disagree on embedding dimension")
            for j in range(model.k):
                L = model.chol_covariances[j]
                inv = solve_triangular(L, np.eye(self.dim), lower=True)
                inv_rows.append(inv)
                offsets.append(inv @ model.means[j])
                consts.append(
                    math.log(model.weights[j])
                    - 0.5 * self.dim * LOG_2PI
                    - float(np.log(np.diag(L)).sum())
                )
            slices.append(slice(start, start + model.k))
            start += model.k
        self._slices = slices
        self._proj = np.concatenate(inv_rows, axis=0)  # (total_k * d, d)
        self._offsets = np.stack(offsets)  # (total_k, d)
        self._consts = np.asarray(consts)
        self._total_k = len(consts)
        self.log_priors = np.log(np.array([m.class_prior for m in ordered]))

    def component_log_joint(self, embeddings: np.ndarray) -> np.ndarray:
        """(n, total_k): log weight + log density for every component."""
        x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ValueError(f"embeddings have dim {x.shape[1]}, models expect {self.dim}")
        n = x.shape[0]
        out = np.empty((n, self._total_k))
        off_sq = np.einsum("kd,kd->k", self._offsets, self._offsets)
        for lo in range(0, n, self._CHUNK):
            hi = min(lo + self._CHUNK, n)
            y = x[lo:hi] @ self._proj.T  # (m, total_k * d)
            y = y.reshape(hi - lo, self._total_k, self.dim)
            quad = (
                np.einsum("nkd,nkd->nk", y, y)
                - 2.0 * np.einsum("nkd,kd->nk", y, self._offsets)
                + off_sq[None, :]
            )
            out[lo:hi] = self._consts[None, :] - 0.5 * quad
        return out

    def per_class_loglik(self, embeddings) -> np.ndarray:
        """Per-class mixture log-likelihood vector(s); (C,) for a single embedding."""
        single = np.asarray(embeddings).ndim == 1
        joint = self.component_log_joint(embeddings)
        out = np.empty((joint.shape[0], self.num_classes))
        for c, sl in enumerate(self._slices):
            block = joint[:, sl]
            m = block.max(axis=1)
            out[:, c] = m + np.log(np.exp(block - m[:, None]).sum(axis=1))
        return out[0] if single else out


def per_class_loglik(embedding, models: Sequence[ClassDensityModel]) -> np.ndarray:
    """Log-sum-exp-stabilized per-class mixture log-likelihoods."""
    return DensityEvaluator(models).per_class_loglik(embedding)


def posterior_from_loglik(
    loglik: np.ndarray,
    log_priors: np.ndarray | None,
    t_gmm: float = 1.0,
) -> np.ndarray:
    """Tempered class posterior from a log-likelihood vector or batch."""
    if t_gmm <= 0:
        raise ValueError(f"t_gmm must be > 0, got {t_gmm}")
    z = np.asarray(loglik, dtype=np.float64)
    if log_priors is not None:
        z = z + log_priors
    z = z / t_gmm
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gmm_posterior(
    embedding,
    models: Sequence[ClassDensityModel],
    t_gmm: float = 1.0,
    use_priors: bool = True,
) -> np.ndarray:
    """Class posterior q(y | e) over the fitted mixtures, tempered by ``t_gmm``."""
    evaluator = DensityEvaluator(models)
    loglik = evaluator.per_class_loglik(embedding)
    priors = evaluator.log_priors if use_priors else None
    return posterior_from_loglik(loglik, priors, t_gmm)
