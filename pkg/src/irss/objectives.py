"""Loss terms and their composition into the relaxed training objective.

All terms operate on tape tensors so one backward pass yields gradients for
every parameter set. The IRMv1 penalty uses the closed-form derivative of the
cross-entropy in the logit scale, so no second-order tape is needed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import Tensor, grad_reverse, head_logits, log_softmax, softmax
from .errors import ConfigError, ContractError, PreconditionError

PROB_FLOOR = 1e-12
PENALTIES = ("irmv1", "birm")
ENTROPY_SIGNS = ("minimize_entropy", "maximize_entropy")


@dataclass
class LossWeights:
    lambda_adv: float = 0.0
    lambda_ent: float = 0.0
    lambda_irm: float = 0.0
    penalty: str = "irmv1"
    entropy_sign: str = "minimize_entropy"

    def __post_init__(self):
        for name in ("lambda_adv", "lambda_ent", "lambda_irm"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError("must be finite", name)
        if self.lambda_adv < 0:
            raise ConfigError("must be >= 0", "lambda_adv")
        if self.lambda_irm < 0:
            raise ConfigError("must be >= 0", "lambda_irm")
        if self.penalty not in PENALTIES:
            raise ConfigError(f"must be one of {PENALTIES}", "penalty")
        if self.entropy_sign not in ENTROPY_SIGNS:
            raise ConfigError(f"must be one of {ENTROPY_SIGNS}", "entropy_sign")


@dataclass
class EnvSlice:
    env: int
    index: np.ndarray


def env_slices(env_labels):
    """Partition minibatch positions by environment id, in id order, dropping empty ids."""
    env_labels = np.asarray(env_labels)
    if np.any(env_labels < 0):
        raise PreconditionError("environment labels are not assigned")
    return [EnvSlice(int(e), np.flatnonzero(env_labels == e)) for e in np.unique(env_labels)]


def _check_labels(labels, n_cols, what):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_cols):
        raise ContractError(f"{what} out of range [0, {n_cols})")
    return labels


def nll(probs, labels):
    """-(1/N) sum log p_{y_i}, with probabilities floored at 1e-12."""
    labels = _check_labels(labels, probs.shape[1], "label")
    picked = probs[np.arange(len(labels)), labels]
    return -picked.clip_min(PROB_FLOOR).log().mean()


def erm_loss(class_probs, labels):
    return nll(class_probs, labels)


def adv_loss(style_probs, pseudo_styles):
    """Discriminator cross-entropy against the pseudo-style labels.

    The caller routes the features through :func:`grad_reverse` before the
    discriminator; see :func:`style_probs`.
    """
    pseudo_styles = np.asarray(pseudo_styles)
    if np.any(pseudo_styles < 0):
        raise PreconditionError("pseudo-style labels are not assigned")
    return nll(style_probs, pseudo_styles)


def style_probs(params, features, lambda_adv):
    return softmax(head_logits(params.theta_s, grad_reverse(features, lambda_adv)))


def ent_loss(class_probs):
    """Mean Shannon entropy of the rows."""
    p = class_probs.clip_min(PROB_FLOOR)
    return -(class_probs * p.log()).sum(axis=1).mean()


def irmv1_grad(logits, labels):
    """d/dw of the mean cross-entropy of ``w * logits`` at w = 1.

    Equals mean_i <softmax(z_i) - onehot(y_i), z_i>; returned as a tape scalar.
    """
    labels = _check_labels(labels, logits.shape[1], "label")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return ((softmax(logits) - onehot) * logits).sum(axis=1).mean()


def irmv1_penalty(slices, logits, labels):
    """Sum over environments of the squared IRMv1 gradient."""
    if not slices:
        raise ContractError("IRMv1 penalty needs at least one environment slice")
    labels = np.asarray(labels)
    total = None
    for s in slices:
        g = irmv1_grad(logits[s.index], labels[s.index])
        term = g * g
        total = term if total is None else total + term
    return total


def _fit_env_head(features, labels, W, b, steps, lr):
    # plain gradient descent on the mean cross-entropy with features held fixed
    n = len(labels)
    onehot = np.zeros((n, W.shape[1]))
    onehot[np.arange(n), labels] = 1.0
    W, b = W.copy(), b.copy()
    for _ in range(steps):
        z = features @ W + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        r = (p - onehot) / n
        W -= lr * features.T @ r
        b -= lr * r.sum(axis=0)
    return W, b


@dataclass
class BIRMInner:
    steps: int = 5
    lr: float = 0.1

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("BIRM inner steps must be >= 1", "birm.steps")
        if not self.lr > 0:
            raise ConfigError("BIRM inner lr must be > 0", "birm.lr")


def fit_env_heads(slices, features, labels, theta_y, inner=None):
    """Per-environment refits of the shared head, as plain arrays."""
    inner = inner or BIRMInner()
    if not isinstance(inner, BIRMInner):
        inner = BIRMInner(**inner)
    labels = np.asarray(labels, dtype=np.int64)
    W0, b0 = theta_y["W"].data, theta_y["b"].data
    return [_fit_env_head(features.data[s.index], labels[s.index], W0, b0, inner.steps, inner.lr)
            for s in slices]


def birm_penalty(slices, features, labels, theta_y, inner=None, env_heads=None):
    """Summed log-likelihood gap between per-environment refits and the shared head.

    Each environment's head is a copy of ``theta_y`` refined by ``inner.steps``
    gradient steps on that environment with the features frozen. The refitted
    weights are constants (no differentiation through the inner loop), but
    both log-likelihoods are evaluated on the tape features, so the extractor
    is pushed toward features on which an environment-specific head gains
    nothing over the shared one. Pass ``env_heads`` to reuse fixed refits.
    """
    if not slices:
        raise ContractError("BIRM penalty needs at least one environment slice")
    labels = _check_labels(labels, theta_y["W"].shape[1], "label")
    if env_heads is None:
        env_heads = fit_env_heads(slices, features, labels, theta_y, inner)
    floor = np.log(PROB_FLOOR)
    total = None
    for s, (W_e, b_e) in zip(slices, env_heads):
        f_e = features[s.index]
        rows = np.arange(len(s.index)), labels[s.index]
        best = log_softmax(f_e @ W_e + b_e)[rows].clip_min(floor).sum()
        shared = log_softmax(f_e @ theta_y["W"] + theta_y["b"])[rows].clip_min(floor).sum()
        term = best - shared
        total = term if total is None else total + term
    return total


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict = field(default_factory=dict)
    calls: dict = field(default_factory=dict)


def total_loss(features, logits, labels, env_labels, weights, params,
               pseudo_styles=None, birm_inner=None):
    """Relaxed objective for one minibatch.

    Returns a :class:`LossBreakdown` whose ``total`` is
    ``sum_e erm_e + lambda_irm * penalty + entropy_term + adv``. The entries of
    ``terms`` are the weighted contributions and add up to ``total``. The
    adversarial contribution enters unweighted and un-negated: the reversal
    layer in front of the discriminator applies ``-lambda_adv`` to the
    extractor's gradient, while the discriminator receives the plain gradient.
    Terms with a zero weight are skipped entirely.
    """
    labels = np.asarray(labels)
    probs = softmax(logits)
    slices = env_slices(env_labels)
    calls = {"discriminator": 0, "penalty": 0}

    erm = None
    for s in slices:
        term = erm_loss(probs[s.index], labels[s.index])
        erm = term if erm is None else erm + term
    total = erm
    terms = {"erm": erm.item(), "irm": 0.0, "ent": 0.0, "adv": 0.0}

    if weights.lambda_irm > 0:
        calls["penalty"] += 1
        if weights.penalty == "irmv1":
            pen = irmv1_penalty(slices, logits, labels)
        else:
            pen = birm_penalty(slices, features, labels, params.theta_y, birm_inner)
        contrib = pen * weights.lambda_irm
        terms["irm"] = contrib.item()
        total = total + contrib

    if weights.lambda_ent != 0:
        sign = 1.0 if weights.entropy_sign == "minimize_entropy" else -1.0
        contrib = ent_loss(probs) * (sign * weights.lambda_ent)
        terms["ent"] = contrib.item()
        total = total + contrib

    if weights.lambda_adv > 0:
        if pseudo_styles is None:
            raise PreconditionError("adversarial term needs pseudo-style labels")
        calls["discriminator"] += 1
        adv = adv_loss(style_probs(params, features, weights.lambda_adv), pseudo_styles)
        terms["adv"] = adv.item()
        total = total + adv

    terms["total"] = total.item()
    return LossBreakdown(total, terms, calls)
