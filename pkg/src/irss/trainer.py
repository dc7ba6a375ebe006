"""Bigstep/step training loop, evaluation, and baseline presets."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.linear_model import LogisticRegression

from .clusterer import assign_env_labels, assign_style_labels, kmeans
from .diffcore import extract, head_logits, init_params, make_optimizer, no_grad, softmax
from .errors import ConfigError, IRSSError, TrainingError
from .objectives import BIRMInner, LossWeights, total_loss

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd_momentum")
ENV_SOURCES = ("cluster", "true")
ENV_SCOPES = ("minibatch", "full")


@dataclass
class TrainConfig:
    """Everything that drives one training run.

    ``env_source="true"`` feeds the generator's environment ids instead of
    clustered ones (used for the oracle-environment IRM baseline).
    ``env_scope="full"`` clusters the whole training set once per bigstep
    instead of every minibatch. ``irm_warmup`` steps run with the penalty off.
    ``disc_lr`` sets the discriminator's learning rate (defaults to ``lr``).
    """

    lambda_adv: float = 0.0
    lambda_ent: float = 0.0
    lambda_irm: float = 0.0
    penalty: str = "irmv1"
    entropy_sign: str = "minimize_entropy"
    S: int = 2
    k_env: int = 5
    bigsteps: int = 2
    steps: int = 50
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 1e-3
    disc_lr: float = None
    momentum: float = 0.9
    seed: int = 0
    birm_steps: int = 5
    birm_lr: float = 0.1
    env_source: str = "cluster"
    env_scope: str = "minibatch"
    irm_warmup: int = 0
    log_every: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self):
        self.weights  # LossWeights checks the lambdas
        for name in ("S", "k_env", "bigsteps", "steps", "batch_size", "log_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError("must be >= 1", name)
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"must be one of {OPTIMIZERS}", "optimizer")
        if self.env_source not in ENV_SOURCES:
            raise ConfigError(f"must be one of {ENV_SOURCES}", "env_source")
        if self.env_scope not in ENV_SCOPES:
            raise ConfigError(f"must be one of {ENV_SCOPES}", "env_scope")
        if self.disc_lr is not None and not self.disc_lr >= 0:
            raise ConfigError("must be >= 0", "disc_lr")
        if self.irm_warmup < 0:
            raise ConfigError("must be >= 0", "irm_warmup")
        BIRMInner(self.birm_steps, self.birm_lr)
        if self.batch_size < self.k_env:
            logger.warning("batch_size %d < k_env %d: environment clustering will fall back",
                           self.batch_size, self.k_env)

    @property
    def weights(self):
        return LossWeights(self.lambda_adv, self.lambda_ent, self.lambda_irm,
                           self.penalty, self.entropy_sign)

    def optimizer_hyper(self, lr=None):
        lr = self.lr if lr is None else lr
        if self.optimizer == "adam":
            return {"lr": lr}
        return {"lr": lr, "momentum": self.momentum}

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class MetricsRow:
    run_id: str
    seed: int
    iter: int
    loss_total: float
    loss_erm: float
    loss_irm: float
    loss_ent: float
    loss_adv: float
    train_acc: float
    ood_acc: float = None
    style_probe_acc: float = None
    env_inertia: float = 0.0


METRIC_FIELDS = [f.name for f in dataclasses.fields(MetricsRow)]


@dataclass
class RunState:
    params: object
    arch: object
    config: TrainConfig
    iter: int = 0
    history: list = field(default_factory=list)
    step_terms: list = field(default_factory=list)
    calls: dict = field(default_factory=lambda: {"discriminator": 0, "penalty": 0,
                                                 "style_clustering": 0, "env_clustering": 0})
    optimizer_steps: int = 0


@dataclass
class EvalReport:
    accuracy: float
    per_env: dict
    per_style: dict
    style_probe_acc: float = None
    n: int = 0


def _stream_seeds(seed):
    init, shuffle, style, env, probe = np.random.SeedSequence(seed).spawn(5)
    return (int(init.generate_state(1)[0]), np.random.default_rng(shuffle),
            int(style.generate_state(1)[0]), np.random.default_rng(env),
            int(probe.generate_state(1)[0]))


def _batches(n, batch_size, rng):
    # without replacement within a pass; a fresh permutation when a pass runs out
    while True:
        perm = rng.permutation(n)
        for lo in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield perm[lo:lo + batch_size]


def predict_proba(params, arch, X, batch_size=1024):
    X = np.asarray(X, dtype=np.float64)
    out = []
    with no_grad():
        for lo in range(0, X.shape[0], batch_size):
            f = extract(params, arch, X[lo:lo + batch_size])
            out.append(softmax(head_logits(params.theta_y, f)).data)
    return np.concatenate(out)


def features_of(params, arch, X, batch_size=1024):
    X = np.asarray(X, dtype=np.float64)
    with no_grad():
        return np.concatenate([extract(params, arch, X[lo:lo + batch_size]).data
                               for lo in range(0, X.shape[0], batch_size)])


def style_probe_accuracy(features, styles, seed=0):
    """Held-out accuracy of a logistic-regression probe predicting ``styles``.

    Half the points (seeded split) train the probe, the other half score it.
    The probe is sklearn's default L2-regularised logistic regression on the
    raw features, so it reads style at the scale the model's own linear heads
    see. Returns ``None`` when fewer than two styles are present.
    """
    styles = np.asarray(styles)
    if len(np.unique(styles)) < 2 or len(styles) < 4:
        return None
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(styles))
    tr, te = perm[: len(perm) // 2], perm[len(perm) // 2:]
    if len(np.unique(styles[tr])) < 2:
        return None
    probe = LogisticRegression(max_iter=1000).fit(features[tr], styles[tr])
    return float(probe.score(features[te], styles[te]))


def evaluate(params, arch, dataset, probe_seed=0):
    """Top-1 accuracy overall and per ground-truth environment / style."""
    probs = predict_proba(params, arch, dataset.X)
    correct = probs.argmax(axis=1) == dataset.y
    per_env = {int(e): float(correct[dataset.true_env == e].mean()) for e in np.unique(dataset.true_env)}
    per_style = {int(s): float(correct[dataset.true_style == s].mean()) for s in np.unique(dataset.true_style)}
    probe = style_probe_accuracy(features_of(params, arch, dataset.X), dataset.true_style, probe_seed)
    return EvalReport(float(correct.mean()), per_env, per_style, probe, len(dataset))


def _accuracy(params, arch, dataset):
    return float((predict_proba(params, arch, dataset.X).argmax(axis=1) == dataset.y).mean())


def train(dataset, arch, cfg, test_set=None, run_id="run", probe=True, callback=None):
    """Run the full bigstep/step schedule and return the final :class:`RunState`.

    Per bigstep the pseudo-style labels of the whole training set are refreshed
    from style statistics (skipped when the adversarial weight is zero). Per
    step a minibatch is drawn, its environment labels are refreshed by
    clustering current features, the relaxed objective is back-propagated once
    and both the main and discriminator optimizers step.
    """
    if len(dataset) == 0:
        raise ConfigError("training set is empty")
    if tuple(dataset.input_shape) != arch.input_shape:
        raise ConfigError(f"data shape {dataset.input_shape} != architecture input {arch.input_shape}")
    cfg.validate()
    weights = cfg.weights
    init_seed, shuffle_rng, style_seed, env_rng, probe_seed = _stream_seeds(cfg.seed)
    params = init_params(arch, init_seed)
    state = RunState(params, arch, cfg)
    main_opt = make_optimizer(cfg.optimizer, {**{f"f.{k}": v for k, v in params.theta_f.items()},
                                             **{f"y.{k}": v for k, v in params.theta_y.items()}},
                              **cfg.optimizer_hyper())
    disc_opt = make_optimizer(cfg.optimizer, {f"s.{k}": v for k, v in params.theta_s.items()},
                              **cfg.optimizer_hyper(cfg.disc_lr))
    inner = BIRMInner(cfg.birm_steps, cfg.birm_lr)
    use_adv = weights.lambda_adv > 0
    batch_size = min(cfg.batch_size, len(dataset))
    batches = _batches(len(dataset), batch_size, shuffle_rng)
    dataset.pseudo_style[:] = 0
    dataset.env_label[:] = 0

    for big in range(cfg.bigsteps):
        if use_adv:
            assign_style_labels(dataset, params, arch, cfg.S, seed=style_seed + big)
            state.calls["style_clustering"] += 1
        full_env = None
        if cfg.k_env > 1 and cfg.env_source == "cluster" and cfg.env_scope == "full":
            full_env = assign_env_labels(features_of(params, arch, dataset.X), cfg.k_env,
                                         int(env_rng.integers(2**32)))
            dataset.env_label[:] = full_env[0]
            state.calls["env_clustering"] += 1

        for _ in range(cfg.steps):
            idx = next(batches)
            it = state.iter
            try:
                features = extract(params, arch, dataset.X[idx])
                logits = head_logits(params.theta_y, features)
                inertia = 0.0
                if cfg.k_env == 1:
                    env = np.zeros(len(idx), np.int64)
                elif cfg.env_source == "true":
                    env = dataset.true_env[idx]
                elif full_env is not None:
                    env = full_env[0][idx]
                    inertia = full_env[1].inertia
                else:
                    env, res = assign_env_labels(features.data, cfg.k_env, int(env_rng.integers(2**32)))
                    inertia = res.inertia
                    state.calls["env_clustering"] += 1
                dataset.env_label[idx] = env
                step_weights = weights
                if it < cfg.irm_warmup and weights.lambda_irm > 0:
                    step_weights = dataclasses.replace(weights, lambda_irm=0.0)
                out = total_loss(features, logits, dataset.y[idx], env, step_weights, params,
                                 dataset.pseudo_style[idx] if use_adv else None, inner)
                if not np.isfinite(out.terms["total"]):
                    raise FloatingPointError("non-finite loss")
                params.zero_grad()
                out.total.backward()
                main_opt.step()
                if use_adv:
                    disc_opt.step()
            except (IRSSError, FloatingPointError, ValueError) as exc:
                raise TrainingError(str(exc), it) from exc
            for k, v in out.calls.items():
                state.calls[k] += v
            state.optimizer_steps += 1
            state.step_terms.append(dict(out.terms, iter=it))
            state.iter += 1

            last = big == cfg.bigsteps - 1 and _ == cfg.steps - 1
            if it % cfg.log_every == 0 or last:
                row = MetricsRow(
                    run_id, cfg.seed, it,
                    out.terms["total"], out.terms["erm"], out.terms["irm"], out.terms["ent"], out.terms["adv"],
                    _accuracy(params, arch, dataset),
                    None if test_set is None else _accuracy(params, arch, test_set),
                    style_probe_accuracy(features_of(params, arch, dataset.X), dataset.true_style, probe_seed)
                    if probe else None,
                    inertia,
                )
                state.history.append(row)
                if callback is not None:
                    callback(row)
    return state


METHODS = ("erm", "irm", "adv-only", "irss-irmv1", "irss-birm")

# weight presets per method, calibrated once on the default Gaussian SCM
# (see configs/scm_ood.json); image runs override them in their train section
PRESETS = {
    "erm": dict(lambda_adv=0.0, lambda_ent=0.0, lambda_irm=0.0, k_env=1),
    "irm": dict(lambda_adv=0.0, lambda_ent=0.0, lambda_irm=30.0, penalty="irmv1", k_env=5),
    "adv-only": dict(lambda_adv=0.1, lambda_ent=0.1, lambda_irm=0.0, k_env=1),
    "irss-irmv1": dict(lambda_adv=0.1, lambda_ent=0.0, lambda_irm=30.0, penalty="irmv1", k_env=5),
    "irss-birm": dict(lambda_adv=0.1, lambda_ent=0.0, lambda_irm=1.0, penalty="birm", k_env=5),
}


def method_config(method, cfg=None, **overrides):
    if method not in PRESETS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}", "method")
    cfg = cfg or TrainConfig()
    return cfg.replace(**{**PRESETS[method], **overrides})


def run_baseline(kind, dataset, arch, cfg=None, **kwargs):
    """Baselines as weight configurations of :func:`train`.

    ``erm`` zeroes every weight with one environment; ``irm_v1`` keeps only the
    IRMv1 penalty; ``adv_only`` keeps the adversarial and entropy terms.
    """
    cfg = cfg or TrainConfig()
    if kind == "erm":
        cfg = cfg.replace(lambda_adv=0.0, lambda_ent=0.0, lambda_irm=0.0, k_env=1)
    elif kind == "irm_v1":
        cfg = cfg.replace(lambda_adv=0.0, lambda_ent=0.0, penalty="irmv1",
                          lambda_irm=cfg.lambda_irm or PRESETS["irm"]["lambda_irm"])
    elif kind == "adv_only":
        cfg = cfg.replace(lambda_irm=0.0, lambda_adv=cfg.lambda_adv or PRESETS["adv-only"]["lambda_adv"])
    else:
        raise ConfigError(f"unknown baseline {kind!r}")
    return train(dataset, arch, cfg, **kwargs)
