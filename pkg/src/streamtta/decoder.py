"""Compact K-class decoder with one batch-normalisation layer.

Pipeline per trial ``x`` of shape ``(C, T)``::

    e = W1 x + b1            per time point, C -> H
    e~ = (e - mu) / sqrt(var + eps)
    z = gamma * e~ + beta
    a = relu(z)
    p = mean_t a             temporal mean pool
    logits = W2 p + b2

Forward and backward also accept a stack ``(N, C, T)``.  In ``BnMode.BATCH``
the normalisation statistics are taken over all ``N * T`` positions of the
input (biased variance), which for a single trial is the per-trial statistic.
In ``BnMode.RUNNING`` the stored running statistics are used as constants.
"""

import enum
from dataclasses import dataclass

import numpy as np

from .errors import CacheMismatch, ShapeMismatch

DEFAULT_HIDDEN = 16
PARAM_FIELDS = ("w1", "b1", "gamma", "beta", "w2", "b2")
BN_AFFINE_FIELDS = ("gamma", "beta")


class BnMode(enum.Enum):
    BATCH = "batch"  # statistics of the current input
    RUNNING = "running"  # stored running statistics


class UpdateMask(enum.Enum):
    ALL = "all"
    BN_AFFINE = "bn_affine"

    @property
    def fields(self):
        return PARAM_FIELDS if self is UpdateMask.ALL else BN_AFFINE_FIELDS


@dataclass
class DecoderParams:
    w1: np.ndarray  # (H, C)
    b1: np.ndarray  # (H,)
    gamma: np.ndarray  # (H,)
    beta: np.ndarray  # (H,)
    w2: np.ndarray  # (K, H)
    b2: np.ndarray  # (K,)

    @property
    def dims(self):
        """``(C, H, K)``."""
        return self.w1.shape[1], self.w1.shape[0], self.w2.shape[0]

    def arrays(self):
        return [getattr(self, name) for name in PARAM_FIELDS]

    def copy(self):
        return DecoderParams(*(a.copy() for a in self.arrays()))

    def validate(self):
        n_channels, hidden, n_classes = self.dims
        expected = {
            "w1": (hidden, n_channels),
            "b1": (hidden,),
            "gamma": (hidden,),
            "beta": (hidden,),
            "w2": (n_classes, hidden),
            "b2": (n_classes,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        return self


# Gradients share the parameter layout.
DecoderGrads = DecoderParams


@dataclass
class BnState:
    mu: np.ndarray
    var: np.ndarray
    eps: float = 3e-5

    def copy(self):
        return BnState(self.mu.copy(), self.var.copy(), self.eps)


@dataclass
class ForwardCache:
    # per-position arrays are laid out as (features, N * T)
    x: np.ndarray
    e: np.ndarray
    e_norm: np.ndarray
    z: np.ndarray
    mask: np.ndarray
    pooled: np.ndarray  # (N, H)
    logits: np.ndarray  # (N, K)
    probs: np.ndarray  # (N, K)
    mu: np.ndarray  # statistics used for normalisation
    var: np.ndarray
    batch_mu: np.ndarray  # statistics of this input, whatever the mode
    batch_var: np.ndarray
    eps: float
    mode: BnMode
    single: bool
    dims: tuple
    n_times: int


def init_decoder(n_channels, n_times, hidden=DEFAULT_HIDDEN, n_classes=2, seed=0, eps=3e-5):
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, identity BN."""
    if min(n_channels, n_times, hidden, n_classes) < 1:
        raise ValueError("all decoder dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    bound1 = 1.0 / np.sqrt(n_channels)
    bound2 = 1.0 / np.sqrt(hidden)
    params = DecoderParams(
        w1=rng.uniform(-bound1, bound1, size=(hidden, n_channels)),
        b1=rng.uniform(-bound1, bound1, size=hidden),
        gamma=np.ones(hidden),
        beta=np.zeros(hidden),
        w2=rng.uniform(-bound2, bound2, size=(n_classes, hidden)),
        b2=rng.uniform(-bound2, bound2, size=n_classes),
    )
    bn = BnState(mu=np.zeros(hidden), var=np.ones(hidden), eps=float(eps))
    return params, bn


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def forward(params, bn, trial, mode=BnMode.RUNNING):
    """Return ``(logits, cache)``; logits are ``(K,)`` for a single trial."""
    x = np.asarray(trial, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    n_channels, hidden, n_classes = params.dims
    if x.ndim != 3 or x.shape[1] != n_channels:
        raise ShapeMismatch(f"input shape {np.shape(trial)} incompatible with C={n_channels}")
    n_trials, _, n_times = x.shape

    # work on (features, N*T) so every layer is a single matrix product
    flat = x.transpose(1, 0, 2).reshape(n_channels, -1)
    e = params.w1 @ flat + params.b1[:, None]
    batch_mu = e.mean(axis=1)
    batch_var = e.var(axis=1)
    if mode is BnMode.BATCH:
        mu, var = batch_mu, batch_var
    else:
        mu, var = bn.mu, bn.var
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    e_norm = (e - mu[:, None]) * inv_std[:, None]
    z = params.gamma[:, None] * e_norm + params.beta[:, None]
    mask = z > 0.0
    pooled = np.maximum(z, 0.0).reshape(hidden, n_trials, n_times).mean(axis=2).T
    logits = pooled @ params.w2.T + params.b2
    probs = softmax(logits)
    cache = ForwardCache(
        flat, e, e_norm, z, mask, pooled, logits, probs, mu, var,
        batch_mu, batch_var, bn.eps, mode, single, params.dims, n_times,
    )
    return (logits[0] if single else logits), cache


def backward(params, cache, grad_logits):
    """Exact gradients of a scalar loss given ``dloss/dlogits``.

    In BATCH mode the normalisation statistics depend on the input and are
    differentiated through; in RUNNING mode they are constants.
    """
    if cache.dims != params.dims:
        raise CacheMismatch(f"cache built for dims {cache.dims}, params have {params.dims}")
    g = np.asarray(grad_logits, dtype=np.float64)
    if cache.single:
        g = g[None]
    if g.shape != cache.logits.shape:
        raise CacheMismatch(f"grad_logits shape {g.shape} != logits shape {cache.logits.shape}")

    n_times = cache.n_times
    dw2 = g.T @ cache.pooled
    db2 = g.sum(axis=0)
    dpooled = (g @ params.w2).T / n_times  # (H, N)
    dz = np.repeat(dpooled, n_times, axis=1) * cache.mask
    dgamma = (dz * cache.e_norm).sum(axis=1)
    dbeta = dz.sum(axis=1)
    de_norm = dz * params.gamma[:, None]
    inv_std = 1.0 / np.sqrt(cache.var + cache.eps)
    if cache.mode is BnMode.BATCH:
        mean_d = de_norm.mean(axis=1, keepdims=True)
        mean_dx = (de_norm * cache.e_norm).mean(axis=1, keepdims=True)
        de = (de_norm - mean_d - cache.e_norm * mean_dx) * inv_std[:, None]
    else:
        de = de_norm * inv_std[:, None]
    dw1 = de @ cache.x.T
    db1 = de.sum(axis=1)
    return DecoderGrads(dw1, db1, dgamma, dbeta, dw2, db2)


def sgd_step(params, grads, eta, mask=UpdateMask.ALL):
    """``theta - eta * grad`` on the fields selected by ``mask``; others are copied."""
    if eta < 0:
        raise ValueError(f"learning rate must be non-negative, got {eta}")
    updated = params.copy()
    for name in mask.fields:
        setattr(updated, name, getattr(params, name) - eta * getattr(grads, name))
    return updated


def cross_entropy(probs, label):
    """``-log probs[label]`` and its gradient w.r.t. the logits."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise ValueError(f"label {label} out of range for {probs.shape[-1]} classes")
    with np.errstate(divide="ignore"):
        loss = -np.log(probs[label])
    grad = probs.copy()
    grad[label] -= 1.0
    return float(loss), grad


def predict(params, bn, trials, mode=BnMode.RUNNING):
    """Class probabilities for a stack of trials (no state is touched)."""
    _, cache = forward(params, bn, trials, mode)
    return cache.probs
