"""Test-time adaptation: EMA update of BN statistics, the entropy /
calibrated soft-pseudo-label objective, and the per-trial adaptation step
that strings them together with streaming Euclidean alignment.
"""

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import alignment
from .decoder import BnMode, BnState, DecoderParams, UpdateMask, backward, forward, sgd_step
from .errors import NonFiniteLoss

DEFAULT_ALPHA = 0.7
DEFAULT_LAMBDA = 1.2
DEFAULT_EPS = 3e-5


@dataclass(frozen=True)
class AdaptConfig:
    eta: float = 1e-2
    alpha: float = DEFAULT_ALPHA
    omega: float = alignment.DEFAULT_OMEGA
    lambda_: float = DEFAULT_LAMBDA
    eps: float = DEFAULT_EPS
    # None means "use the validation accuracy measured at training time".
    a_val: float | None = None
    update_mask: UpdateMask = UpdateMask.ALL
    enable_ea: bool = True
    enable_bn_update: bool = True
    enable_loss_update: bool = True
    bn_forward_mode: BnMode = BnMode.RUNNING
    # Number of trials buffered before a gradient / BN update is applied.
    loss_batch: int = 1
    bn_batch: int = 1

    def __post_init__(self):
        checks = {
            "eta": self.eta >= 0,
            "alpha": 0.0 <= self.alpha <= 1.0,
            "omega": self.omega > 0,
            "lambda_": self.lambda_ >= 0,
            "eps": self.eps > 0,
            "a_val": self.a_val is None or 0.0 < self.a_val <= 1.0,
            "loss_batch": self.loss_batch >= 1,
            "bn_batch": self.bn_batch >= 1,
        }
        for name, ok in checks.items():
            if not ok:
                raise ValueError(f"AdaptConfig.{name} out of range: {getattr(self, name)!r}")
        if not isinstance(self.update_mask, UpdateMask):
            object.__setattr__(self, "update_mask", UpdateMask(self.update_mask))
        if not isinstance(self.bn_forward_mode, BnMode):
            object.__setattr__(self, "bn_forward_mode", BnMode(self.bn_forward_mode))

    @property
    def flags(self):
        return (self.enable_ea, self.enable_bn_update, self.enable_loss_update)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def as_dict(self):
        out = dataclasses.asdict(self)
        out["update_mask"] = self.update_mask.value
        out["bn_forward_mode"] = self.bn_forward_mode.value
        return out


@dataclass(frozen=True)
class SoftLabel:
    probs: np.ndarray
    target: int  # class holding the a_val mass


@dataclass(frozen=True)
class LossBreakdown:
    entropy: float
    calibrated_ce: float
    total: float
    ell_plus: float
    ell_minus: float
    gap: float  # calibrated_ce - entropy


# -- EMA of BN statistics -----------------------------------------------------

def bn_ema_update(bn, trial_mean, trial_var, alpha):
    """Blend running statistics towards the current trial's.

    The variance carries the between-means term, which makes it the exact
    variance of the ``(1 - alpha, alpha)`` mixture of the two distributions.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    trial_mean = np.asarray(trial_mean, dtype=np.float64)
    trial_var = np.asarray(trial_var, dtype=np.float64)
    if np.any(trial_var < 0):
        raise ValueError("trial variance must be non-negative")
    diff = trial_mean - bn.mu
    mu = (1.0 - alpha) * bn.mu + alpha * trial_mean
    var = (1.0 - alpha) * bn.var + alpha * trial_var + alpha * (1.0 - alpha) * diff * diff
    return BnState(mu, var, bn.eps)


def pool_statistics(means, variances):
    """Mean and biased variance of equally sized groups, from per-group moments."""
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    mu = means.mean(axis=0)
    var = variances.mean(axis=0) + ((means - mu) ** 2).mean(axis=0)
    return mu, var


# -- losses -------------------------------------------------------------------

def _check_distribution(probs):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size < 1:
        raise ValueError(f"expected a probability vector, got shape {probs.shape}")
    if probs.min() < 0 or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must be non-negative and sum to 1")
    return probs


def _xlogx_terms(probs):
    logs = np.zeros_like(probs)
    np.log(probs, out=logs, where=probs > 0)
    return logs


def entropy_loss(probs):
    """Shannon entropy of ``probs`` and its gradient w.r.t. the logits.

    Zero entries contribute nothing (``0 log 0 = 0``).
    """
    probs = _check_distribution(probs)
    logs = _xlogx_terms(probs)
    ent = float(-(probs * logs).sum())
    grad = -probs * (logs + ent)
    return ent, grad


def argmax_lowest(probs):
    # np.argmax returns the first maximal index
    return int(np.argmax(probs))


def soft_pseudo_label(probs, a_val):
    """Put ``a_val`` on the predicted class and spread the rest uniformly."""
    probs = _check_distribution(probs)
    n_classes = probs.size
    if n_classes < 2:
        raise ValueError("soft pseudo-labels need at least two classes")
    target = argmax_lowest(probs)
    label = np.full(n_classes, (1.0 - a_val) / (n_classes - 1))
    label[target] = a_val
    return SoftLabel(label, target)


def _nll(probs):
    with np.errstate(divide="ignore"):
        return -np.log(probs)


def _split(nll, target):
    others = nll[np.arange(nll.size) != target]
    return float(nll[target]), float(others.sum() / others.size)


def split_losses(probs, target):
    """``(ell_plus, ell_minus)``: NLL of ``target`` and mean NLL of the others."""
    return _split(_nll(np.asarray(probs, dtype=np.float64)), target)


def calibrated_ce(probs, label):
    """Soft cross-entropy against ``label``.

    Returns ``(loss, grad_logits, ell_plus, ell_minus)``.  Raises
    :class:`NonFiniteLoss` if a zero probability meets non-zero label mass.
    """
    probs = _check_distribution(probs)
    target = label.probs
    if target.shape != probs.shape:
        raise ValueError("label and probabilities differ in length")
    nll = _nll(probs)
    if probs.min() > 0.0:
        loss = float(target @ nll)
    else:
        if np.any((probs == 0.0) & (target > 0.0)):
            raise NonFiniteLoss("zero probability on a class with label mass")
        loss = float(target[probs > 0] @ nll[probs > 0])
    ell_plus, ell_minus = _split(nll, label.target)
    return loss, probs - target, ell_plus, ell_minus


def total_test_loss(probs, a_val, lambda_):
    """Entropy extrapolated towards the calibrated cross-entropy by ``lambda_``."""
    ent, grad_ent = entropy_loss(probs)
    label = soft_pseudo_label(probs, a_val)
    ce, grad_ce, ell_plus, ell_minus = calibrated_ce(probs, label)
    total = ent + lambda_ * (ce - ent)
    grad = grad_ent + lambda_ * (grad_ce - grad_ent)
    if not np.isfinite(total) or not np.all(np.isfinite(grad)):
        raise NonFiniteLoss(f"non-finite test loss {total}")
    return LossBreakdown(ent, ce, total, ell_plus, ell_minus, ce - ent), grad


def bias_gap(ell_plus, ell_minus, a_val, a_test):
    """Closed-form difference between the validation- and test-calibrated CE."""
    return (a_val - a_test) * (ell_plus - ell_minus)


# -- the streaming step -------------------------------------------------------

@dataclass
class SessionState:
    aligner: alignment.AlignerState
    params: DecoderParams
    bn: BnState
    a_val: float
    pending_grads: list = field(default_factory=list)
    skipped_steps: int = 0
    n_seen: int = 0


class StepResult(NamedTuple):
    prediction: int
    probs: np.ndarray
    losses: LossBreakdown | None
    state: SessionState


def start_session(aligner, params, bn, a_val, cfg):
    """Session state seeded from offline training, with cfg's omega and eps."""
    if cfg.a_val is not None:
        a_val = cfg.a_val
    aligner = dataclasses.replace(aligner, omega=float(cfg.omega))
    bn = BnState(bn.mu.copy(), bn.var.copy(), cfg.eps)
    return SessionState(aligner, params.copy(), bn, float(a_val))


def _mean_grads(grads):
    first = grads[0]
    if len(grads) == 1:
        return first
    summed = [sum(arrs) / len(grads) for arrs in zip(*(g.arrays() for g in grads))]
    return type(first)(*summed)


def adapt_block(state, trials, cfg):
    """Process a block of trials that arrived together; one ``StepResult`` each.

    Order: (1) streaming alignment of every trial in arrival order, (2) one
    BN statistics EMA from the block's pooled statistics, (3) per trial,
    prediction with the updated statistics followed by its test-loss
    gradient, applied every ``cfg.loss_batch`` gradients.  Each prediction
    reflects the decoder before that trial's own gradient.  A non-finite
    loss skips only that trial's gradient.

    A block of one trial is the single-trial update; with BN updates on, a
    block longer than ``cfg.bn_batch`` is rejected.
    """
    trials = [np.asarray(t, dtype=np.float64) for t in trials]
    if not trials:
        raise ValueError("a block needs at least one trial")
    if cfg.enable_bn_update and len(trials) > cfg.bn_batch:
        raise ValueError(f"block of {len(trials)} trials exceeds bn_batch={cfg.bn_batch}")
    state = dataclasses.replace(state, pending_grads=list(state.pending_grads))

    aligned = []
    for x in trials:
        if cfg.enable_ea:
            x, state.aligner = alignment.align_online(state.aligner, x)
        aligned.append(x)

    params0 = state.params
    trial_caches = [forward(params0, state.bn, x, BnMode.BATCH)[1] for x in aligned]
    if cfg.enable_bn_update:
        mu_e, var_e = pool_statistics([c.batch_mu for c in trial_caches], [c.batch_var for c in trial_caches])
        state.bn = bn_ema_update(state.bn, mu_e, var_e, cfg.alpha)

    results = []
    for x, trial_cache in zip(aligned, trial_caches):
        state.n_seen += 1
        if cfg.bn_forward_mode is BnMode.BATCH:
            cache = trial_cache if state.params is params0 else forward(state.params, state.bn, x, BnMode.BATCH)[1]
        else:
            _, cache = forward(state.params, state.bn, x, BnMode.RUNNING)
        probs = cache.probs[0]
        prediction = argmax_lowest(probs)

        try:
            losses, grad_logits = total_test_loss(probs, state.a_val, cfg.lambda_)
        except NonFiniteLoss:
            losses, grad_logits = None, None

        if cfg.enable_loss_update:
            if grad_logits is None:
                state.skipped_steps += 1
            else:
                state.pending_grads.append(backward(state.params, cache, grad_logits))
                if len(state.pending_grads) >= cfg.loss_batch:
                    grads = _mean_grads(state.pending_grads)
                    state.params = sgd_step(state.params, grads, cfg.eta, cfg.update_mask)
                    state.pending_grads = []
        results.append(StepResult(prediction, probs, losses, state))
        state = dataclasses.replace(state, pending_grads=list(state.pending_grads))
    return results


def adapt_step(state, trial, cfg):
    """Single-trial update: :func:`adapt_block` on a block of one."""
    return adapt_block(state, [trial], cfg)[0]
