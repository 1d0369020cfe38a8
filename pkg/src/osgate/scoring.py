"""Per-detection confidence and uncertainty scores, plus the joint ID/OOD gate.

Seven standalone scores are computed per detection: softmax confidence,
softmax density (log-sum-exp of logits), softmax entropy, the prior-weighted
single-Gaussian marginal density, the posterior entropy over single-Gaussian
class models, the best per-class single-Gaussian log-likelihood, and the
prior-weighted mixture marginal density.  The joint gate accepts a detection
as in-distribution only when softmax confidence clears its threshold AND the
posterior entropy stays under its threshold (both boundaries inclusive).

For ranking-based metrics the two gate signals are fused into one scalar by
rank transforms against validation in-distribution detections:
``min(F_soft(s), F_entropy(-H))`` with empirical CDFs F, which is monotone in
both signals and whose level sets are exactly the gate's accept regions as the
two quantiles sweep together.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .density import DensityEvaluator, posterior_from_loglik
from .errors import ConfigurationError
from .interchange import JointThresholds, ValidationReference

ID_DECISION = "ID"
OOD_DECISION = "OOD"

#: Score name -> +1 when larger values mean "more in-distribution", else -1.
SCORE_ORIENTATION = {
    "softmax_conf": 1.0,
    "softmax_density": 1.0,
    "softmax_entropy": -1.0,
    "gmm_density": 1.0,
    "gmm_posterior_entropy": -1.0,
    "gmm_per_class_max": 1.0,
    "multi_gmm_density": 1.0,
    "joint_fused": 1.0,
}

STANDALONE_SCORES = tuple(name for name in SCORE_ORIENTATION if name != "joint_fused")
ALL_SCORES = tuple(SCORE_ORIENTATION)


def softmax(logits, t_model: float = 1.0) -> np.ndarray:
    """Tempered softmax, log-sum-exp stabilized; rows sum to 1."""
    if t_model <= 0:
        raise ValueError(f"t_model must be > 0, got {t_model}")
    z = np.asarray(logits, dtype=np.float64) / t_model
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(probs) -> float | np.ndarray:
    """Shannon entropy in nats with the 0 * log 0 = 0 convention."""
    p = np.asarray(probs, dtype=np.float64)
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    out = -terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]


def score_softmax_family(logits, t_model: float = 1.0):
    """(confidence, density, entropy) of the tempered softmax head.

    Density is the log-sum-exp of the logits after division by ``t_model``,
    so passing t_model=1 reproduces the raw-logit density.
    """
    z = np.asarray(logits, dtype=np.float64)
    p = softmax(z, t_model)
    conf = p.max(axis=-1)
    density = _logsumexp(z / t_model)
    ent = entropy(p)
    if z.ndim == 1:
        return float(conf), float(density), float(ent)
    return conf, density, np.asarray(ent)


def score_gmm_family(
    embeddings,
    single_models,
    multi_models,
    t_gmm: float = 1.0,
    use_priors: bool = True,
):
    """(density, posterior entropy, per-class max, mixture density) on embeddings.

    The two density scores are prior-weighted marginals ``log sum_c pi_c
    p(e | c)`` under the single-Gaussian and mixture model sets; the posterior
    entropy is taken over the single-Gaussian class posterior tempered by
    ``t_gmm``.
    """
    single_eval = single_models if isinstance(single_models, DensityEvaluator) \
        else DensityEvaluator(single_models)
    multi_eval = multi_models if isinstance(multi_models, DensityEvaluator) \
        else DensityEvaluator(multi_models)
    x = np.asarray(embeddings, dtype=np.float64)
    single = x.ndim == 1

    loglik_s = np.atleast_2d(single_eval.per_class_loglik(x))
    loglik_m = np.atleast_2d(multi_eval.per_class_loglik(x))
    gmm_density = _logsumexp(loglik_s + single_eval.log_priors)
    multi_density = _logsumexp(loglik_m + multi_eval.log_priors)
    priors = single_eval.log_priors if use_priors else None
    posterior = posterior_from_loglik(loglik_s, priors, t_gmm)
    post_entropy = entropy(posterior)
    per_class_max = loglik_s.max(axis=-1)
    if single:
        return (float(gmm_density[0]), float(np.atleast_1d(post_entropy)[0]),
                float(per_class_max[0]), float(multi_density[0]))
    return gmm_density, np.asarray(post_entropy), per_class_max, multi_density


@dataclass(frozen=True)
class ScoreBundle:
    """All standalone scores for one detection, plus the optional gate decision."""

    softmax_conf: float
    softmax_density: float
    softmax_entropy: float
    gmm_density: float
    gmm_posterior_entropy: float
    gmm_per_class_max: float
    multi_gmm_density: float
    joint_decision: str | None = None


@dataclass(frozen=True, eq=False)
class ScoreTable:
    """Columnar scores for a batch of detections (one array per score)."""

    softmax_conf: np.ndarray
    softmax_density: np.ndarray
    softmax_entropy: np.ndarray
    gmm_density: np.ndarray
    gmm_posterior_entropy: np.ndarray
    gmm_per_class_max: np.ndarray
    multi_gmm_density: np.ndarray

    def __len__(self) -> int:
        return int(self.softmax_conf.shape[0])

    def column(self, name: str) -> np.ndarray:
        if name not in STANDALONE_SCORES:
            raise KeyError(f"unknown score {name!r}")
        return getattr(self, name)

    def bundle(self, index: int, thresholds: JointThresholds | None = None) -> ScoreBundle:
        values = {f.name: float(getattr(self, f.name)[index]) for f in fields(self)}
        decision = None
        if thresholds is not None:
            decision = ID_DECISION if (
                values["softmax_conf"] >= thresholds.tau_soft
                and values["gmm_posterior_entropy"] <= thresholds.tau_gmm
            ) else OOD_DECISION
        return ScoreBundle(joint_decision=decision, **values)

    def subset(self, mask: np.ndarray) -> "ScoreTable":
        return ScoreTable(**{f.name: getattr(self, f.name)[mask] for f in fields(self)})


def compute_scores(
    logits,
    embeddings,
    single_models,
    multi_models,
    t_model: float = 1.0,
    t_gmm: float = 1.0,
    use_priors: bool = True,
) -> ScoreTable:
    """Score a batch of detections; logits (n, C) and embeddings (n, d)."""
    conf, density, soft_ent = score_softmax_family(np.atleast_2d(logits), t_model)
    gmm_density, post_ent, per_class_max, multi_density = score_gmm_family(
        np.atleast_2d(embeddings), single_models, multi_models, t_gmm, use_priors
    )
    return ScoreTable(
        softmax_conf=conf,
        softmax_density=density,
        softmax_entropy=soft_ent,
        gmm_density=gmm_density,
        gmm_posterior_entropy=post_ent,
        gmm_per_class_max=per_class_max,
        multi_gmm_density=multi_density,
    )


def joint_decide(bundle: ScoreBundle, thresholds: JointThresholds) -> str:
    """Gate rule: ID iff confidence >= tau_soft and entropy <= tau_gmm."""
    accept = (
        bundle.softmax_conf >= thresholds.tau_soft
        and bundle.gmm_posterior_entropy <= thresholds.tau_gmm
    )
    return ID_DECISION if accept else OOD_DECISION


def joint_decide_mask(
    soft_scores: np.ndarray, entropies: np.ndarray, thresholds: JointThresholds
) -> np.ndarray:
    """Vectorized gate; True marks detections accepted as in-distribution."""
    return (np.asarray(soft_scores) >= thresholds.tau_soft) & (
        np.asarray(entropies) <= thresholds.tau_gmm
    )


def joint_fused_score(
    soft_scores,
    entropies,
    reference: ValidationReference,
) -> np.ndarray | float:
    """Rank-CDF min-fusion of the two gate signals against validation ID detections."""
    if reference.soft_scores.size == 0 or reference.entropies.size == 0:
        raise ConfigurationError("joint_fused_score needs a non-empty validation reference")
    soft = np.asarray(soft_scores, dtype=np.float64)
    ent = np.asarray(entropies, dtype=np.float64)
    single = soft.ndim == 0
    soft = np.atleast_1d(soft)
    ent = np.atleast_1d(ent)

    ref_soft = np.sort(reference.soft_scores)
    ref_ent = np.sort(reference.entropies)
    f_soft = np.searchsorted(ref_soft, soft, side="right") / ref_soft.size
    # F over -H: fraction of reference entropies at or above each query entropy.
    f_ent = (ref_ent.size - np.searchsorted(ref_ent, ent, side="left")) / ref_ent.size
    fused = np.minimum(f_soft, f_ent)
    return float(fused[0]) if single else fused
