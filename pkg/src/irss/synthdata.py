"""Synthetic data: a two-class Gaussian SCM and a styled-image family.

Both generators are pure functions of ``(config, env index, n, seed)``.

Dataset dump format (``save_dataset`` / ``load_dataset``)::

    bytes 0..7    magic  b"IRSSDS1\\n"
    bytes 8..15   header length L, little-endian uint64
    bytes 16..    L bytes of UTF-8 JSON header
    rest          features, little-endian float64, C order, shape header["shape"]

The header holds ``shape``, ``dtype`` (always ``"<f8"``), ``n_classes`` and
the per-sample integer lists ``y``, ``true_style``, ``true_env``.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

MAGIC = b"IRSSDS1\n"
UNSET = -1


@dataclass
class Sample:
    x: np.ndarray
    y: int
    true_style: int
    true_env: int
    pseudo_style: int = UNSET
    env_label: int = UNSET


class Dataset:
    """Column-oriented sample collection.

    Indexing with an int yields a :class:`Sample`; with a slice or index array
    it yields a sub-dataset. ``pseudo_style`` and ``env_label`` are mutable
    learner-side labels, ``-1`` when unset.
    """

    def __init__(self, X, y, true_style=None, true_env=None, n_classes=None,
                 pseudo_style=None, env_label=None):
        self.X = np.ascontiguousarray(X, dtype=np.float64)
        n = self.X.shape[0]
        self.y = np.asarray(y, dtype=np.int64)
        self.true_style = np.zeros(n, np.int64) if true_style is None else np.asarray(true_style, np.int64)
        self.true_env = np.zeros(n, np.int64) if true_env is None else np.asarray(true_env, np.int64)
        self.pseudo_style = np.full(n, UNSET, np.int64) if pseudo_style is None else np.asarray(pseudo_style, np.int64)
        self.env_label = np.full(n, UNSET, np.int64) if env_label is None else np.asarray(env_label, np.int64)
        self.n_classes = int(n_classes if n_classes is not None else (self.y.max() + 1 if n else 2))
        for name in ("y", "true_style", "true_env", "pseudo_style", "env_label"):
            if getattr(self, name).shape != (n,):
                raise ContractError(f"{name} must have length {n}")

    def __len__(self):
        return self.X.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return Sample(self.X[idx], int(self.y[idx]), int(self.true_style[idx]),
                          int(self.true_env[idx]), int(self.pseudo_style[idx]), int(self.env_label[idx]))
        return Dataset(self.X[idx], self.y[idx], self.true_style[idx], self.true_env[idx],
                       self.n_classes, self.pseudo_style[idx], self.env_label[idx])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def input_shape(self):
        return self.X.shape[1:]

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        return cls(
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.true_style for p in parts]),
            np.concatenate([p.true_env for p in parts]),
            max(p.n_classes for p in parts),
            np.concatenate([p.pseudo_style for p in parts]),
            np.concatenate([p.env_label for p in parts]),
        )


# ---------------------------------------------------------------------------
# Gaussian SCM


@dataclass
class SCMEnv:
    mu_e: np.ndarray
    sigma_e: float


@dataclass
class SCMConfig:
    """Gaussian SCM: z_c ~ N(U mu_c, sigma_c^2 I), z_e ~ N(U mu_e, sigma_e^2 I), x = mixing @ [z_c; z_e].

    ``U`` is +1 with probability ``eta`` and the label is ``y = 1{U = +1}``.
    """

    mu_c: np.ndarray
    sigma_c: float
    envs: list
    eta: float = 0.5
    mixing: np.ndarray = None

    def __post_init__(self):
        self.mu_c = np.asarray(self.mu_c, dtype=np.float64)
        self.envs = [e if isinstance(e, SCMEnv) else SCMEnv(np.asarray(e[0], float), float(e[1]))
                     for e in self.envs]
        for e in self.envs:
            e.mu_e = np.asarray(e.mu_e, dtype=np.float64)
        if not self.envs:
            raise ConfigError("at least one environment is required", "envs")
        d_e = self.envs[0].mu_e.shape[0]
        if any(e.mu_e.shape != (d_e,) for e in self.envs):
            raise ConfigError("all mu_e must share one dimension", "envs")
        if not self.sigma_c > 0 or any(not e.sigma_e > 0 for e in self.envs):
            raise ConfigError("all sigmas must be strictly positive")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}", "eta")
        dim = self.d_c + d_e
        if self.mixing is None:
            self.mixing = np.eye(dim)
        self.mixing = np.asarray(self.mixing, dtype=np.float64)
        if self.mixing.shape != (dim, dim):
            raise ConfigError(f"mixing must be {dim}x{dim}, got {self.mixing.shape}", "mixing")
        if abs(np.linalg.det(self.mixing)) <= 1e-8:
            raise ConfigError("mixing map is not invertible", "mixing")

    @property
    def d_c(self):
        return self.mu_c.shape[0]

    @property
    def d_e(self):
        return self.envs[0].mu_e.shape[0]

    @property
    def k(self):
        return len(self.envs)

    def mix(self, z):
        return z @ self.mixing.T

    def unmix(self, x):
        return np.linalg.solve(self.mixing, np.asarray(x, float).T).T

    def with_envs(self, envs):
        return SCMConfig(self.mu_c.copy(), self.sigma_c, list(envs), self.eta, self.mixing.copy())

    def to_dict(self):
        return {
            "mu_c": self.mu_c.tolist(),
            "sigma_c": self.sigma_c,
            "envs": [{"mu_e": e.mu_e.tolist(), "sigma_e": e.sigma_e} for e in self.envs],
            "eta": self.eta,
            "mixing": self.mixing.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        envs = [SCMEnv(np.asarray(e["mu_e"], float), float(e["sigma_e"])) for e in d["envs"]]
        return cls(np.asarray(d["mu_c"], float), float(d["sigma_c"]), envs,
                   float(d.get("eta", 0.5)), None if d.get("mixing") is None else np.asarray(d["mixing"]))


def random_orthogonal(dim, seed):
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def default_scm(mixing_seed=0, causal_scale=0.4, spurious_scale=1.0):
    """The desk-scale instance: d_c = d_e = 5, three training environments.

    The spurious means share one direction. The two low-noise environments
    correlate it with the label, the noisiest one anti-correlates it, so the
    pooled data rewards the spurious direction while its per-environment
    relation to the label is unstable. The causal signal is identical
    everywhere.
    """
    d = 5
    mu_c = np.full(d, causal_scale)
    direction = np.ones(d) / np.sqrt(d)
    sigmas = (0.3, 0.6, 1.0)
    strengths = (1.0, 0.6, -1.0)
    envs = [SCMEnv(spurious_scale * s * np.sqrt(d) * direction, sig) for s, sig in zip(strengths, sigmas)]
    return SCMConfig(mu_c, 1.0, envs, 0.5, random_orthogonal(2 * d, mixing_seed))


def sample_scm(cfg, env, n, seed):
    """Draw ``n`` samples from training (or test) environment ``env``."""
    if not 0 <= env < cfg.k:
        raise IndexError(f"environment index {env} out of range for {cfg.k} environments")
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    e = cfg.envs[env]
    u = np.where(rng.random(n) < cfg.eta, 1.0, -1.0)
    z_c = u[:, None] * cfg.mu_c + cfg.sigma_c * rng.standard_normal((n, cfg.d_c))
    z_e = u[:, None] * e.mu_e + e.sigma_e * rng.standard_normal((n, cfg.d_e))
    x = cfg.mix(np.concatenate([z_c, z_e], axis=1))
    y = (u > 0).astype(np.int64)
    return Dataset(x, y, np.zeros(n, np.int64), np.full(n, env, np.int64), n_classes=2)


def sample_scm_envs(cfg, n_per_env, seed):
    """One block per environment, seeded independently and concatenated."""
    seeds = np.random.SeedSequence(seed).spawn(cfg.k)
    return Dataset.concat(sample_scm(cfg, e, n_per_env, s) for e, s in enumerate(seeds))


@dataclass
class OODTestEnv:
    env: SCMEnv
    margins: np.ndarray
    degenerate: bool
    alphas: np.ndarray


def separation_margins(mu_test, mus):
    """min over U in {-1, +1} of ||mu_test - U mu_e||_2, per training environment."""
    return np.array([min(np.linalg.norm(mu_test - mu), np.linalg.norm(mu_test + mu)) for mu in mus])


def make_ood_test_env(cfg, alphas, sigma_test):
    """Test environment with spurious mean ``-sum_e alpha_e mu_e``."""
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.shape != (cfg.k,):
        raise ConfigError(f"need {cfg.k} alphas, got {alphas.shape[0] if alphas.ndim else 0}", "alphas")
    if np.any(alphas < 0):
        raise ConfigError("alphas must be >= 0", "alphas")
    if not sigma_test > 0:
        raise ConfigError("sigma_test must be > 0", "sigma_test")
    mus = [e.mu_e for e in cfg.envs]
    mu_test = -sum(a * mu for a, mu in zip(alphas, mus))
    degenerate = bool(np.all(alphas == 0) and any(np.any(mu != 0) for mu in mus))
    if degenerate:
        warnings.warn("all-zero alphas: test environment has no spurious shift", stacklevel=2)
    return OODTestEnv(SCMEnv(mu_test, float(sigma_test)), separation_margins(mu_test, mus), degenerate, alphas)


# ---------------------------------------------------------------------------
# Styled images

_SHAPES = ("hbar", "vbar", "ring", "diag", "cross", "block")


def _shape_mask(kind, side):
    m = np.zeros((side, side))
    lo, hi = side // 4, side - side // 4
    mid = side // 2
    if kind == "hbar":
        m[mid - 2:mid + 1, lo:hi] = 1
    elif kind == "vbar":
        m[lo:hi, mid - 2:mid + 1] = 1
    elif kind == "ring":
        m[lo:hi, lo:hi] = 1
        m[lo + 2:hi - 2, lo + 2:hi - 2] = 0
    elif kind == "diag":
        for i in range(lo, hi):
            m[i, i] = m[i, min(i + 1, side - 1)] = 1
    elif kind == "cross":
        m[mid - 1:mid + 1, lo:hi] = 1
        m[lo:hi, mid - 1:mid + 1] = 1
    elif kind == "block":
        m[lo + 1:hi - 1, lo + 1:hi - 1] = 1
    return m


def _motif(k, size=3):
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    c = size // 2
    motifs = (
        np.ones((size, size)),
        (ii + jj) % 2 == 0,
        (ii == c) | (jj == c),
        (ii + jj) % 2 == 1,
        (ii == 0) | (jj == 0) | (ii == size - 1) | (jj == size - 1),
        (ii == c) & (jj == c),
    )
    return np.asarray(motifs[k % len(motifs)], dtype=np.float64)


@dataclass
class StyleSpec:
    gain: tuple
    bias: tuple
    texture_freq: float
    texture_amp: float = 0.3


def default_styles():
    return [
        StyleSpec(gain=(1.0, 0.9, 0.8), bias=(0.0, 0.0, 0.0), texture_freq=0.0),
        StyleSpec(gain=(0.4, 1.4, 0.3), bias=(0.6, -0.2, 0.5), texture_freq=0.25),
    ]


@dataclass
class StyleImageConfig:
    """Renderer settings for images ``(3, side, side)``.

    A class template and a spurious corner patch form the content; a style
    multiplies each channel by a gain, adds a bias and overlays a sinusoidal
    texture. In environment ``e`` the patch id equals the label with
    probability ``rho[e]`` and is uniform over the other ids otherwise.
    """

    side: int = 16
    n_classes: int = 2
    styles: list = field(default_factory=default_styles)
    rho: list = field(default_factory=lambda: [0.9, 0.75])
    sigma_pix: float = 0.1
    patch_size: int = 3

    def __post_init__(self):
        self.styles = [s if isinstance(s, StyleSpec) else StyleSpec(**s) for s in self.styles]
        if self.n_classes < 2 or self.n_classes > len(_SHAPES):
            raise ConfigError(f"n_classes must be in [2, {len(_SHAPES)}]", "n_classes")
        if not self.styles:
            raise ConfigError("need at least one style", "styles")
        if any(not 0.0 <= r <= 1.0 for r in self.rho):
            raise ConfigError("rho values must lie in [0, 1]", "rho")
        if len(self.rho) > 1 and len(set(self.rho)) == 1:
            raise ConfigError("training environments must not all share one rho", "rho")
        if self.sigma_pix < 0:
            raise ConfigError("sigma_pix must be >= 0", "sigma_pix")
        if self.side < 8:
            raise ConfigError("side must be >= 8", "side")

    @property
    def n_styles(self):
        return len(self.styles)

    def to_dict(self):
        return {
            "side": self.side, "n_classes": self.n_classes,
            "styles": [s.__dict__ | {"gain": list(s.gain), "bias": list(s.bias)} for s in self.styles],
            "rho": list(self.rho), "sigma_pix": self.sigma_pix, "patch_size": self.patch_size,
        }


def render(cfg, y, patch_id, style):
    """Noise-free image for a (class, patch, style) triple."""
    side = cfg.side
    content = _shape_mask(_SHAPES[y], side)
    p = cfg.patch_size
    content[:p, :p] = np.maximum(content[:p, :p], _motif(patch_id, p))
    s = cfg.styles[style]
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    texture = s.texture_amp * np.sin(2 * np.pi * s.texture_freq * (ii + jj)) if s.texture_freq else 0.0
    return np.stack([g * content + b + texture for g, b in zip(s.gain, s.bias)])


def sample_styled_images(cfg, env, n, seed, rho=None):
    """Draw ``n`` styled images from environment ``env``.

    ``rho`` overrides the environment's patch-label agreement (used for
    held-out test environments).
    """
    if rho is None:
        if not 0 <= env < len(cfg.rho):
            raise IndexError(f"environment index {env} out of range for {len(cfg.rho)} environments")
        rho = cfg.rho[env]
    rng = np.random.default_rng(seed)
    C = cfg.n_classes
    y = rng.integers(0, C, size=n)
    style = rng.integers(0, cfg.n_styles, size=n)
    agree = rng.random(n) < rho
    other = (y + rng.integers(1, C, size=n)) % C if C > 1 else y
    patch = np.where(agree, y, other)
    X = np.empty((n, 3, cfg.side, cfg.side))
    for i in range(n):
        X[i] = render(cfg, int(y[i]), int(patch[i]), int(style[i]))
    if cfg.sigma_pix > 0:
        X += cfg.sigma_pix * rng.standard_normal(X.shape)
    ds = Dataset(X, y, style, np.full(n, env, np.int64), n_classes=C)
    ds.patch_id = patch
    return ds


# ---------------------------------------------------------------------------
# Dump / load


def save_dataset(ds, path):
    header = {
        "shape": list(ds.X.shape),
        "dtype": "<f8",
        "n_classes": ds.n_classes,
        "y": ds.y.tolist(),
        "true_style": ds.true_style.tolist(),
        "true_env": ds.true_env.tolist(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(ds.X.astype("<f8").tobytes(order="C"))


def load_dataset(path):
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ContractError(f"{path}: not a dataset dump")
        (length,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(length).decode("utf-8"))
        shape = tuple(header["shape"])
        raw = fh.read()
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise ContractError(f"{path}: expected {expected} feature bytes, found {len(raw)}")
    X = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return Dataset(X, header["y"], header["true_style"], header["true_env"], header["n_classes"])
