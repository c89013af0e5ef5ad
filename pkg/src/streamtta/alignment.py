"""Euclidean alignment: an offline reference from the training corpus and a
streaming weighted-mean reference update at test time.

States are treated as values: every operation returns a new
:class:`AlignerState` and leaves its argument untouched.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import EmptyCorpus, ShapeMismatch
from .spd_linalg import covariance, inv_sqrt

DEFAULT_OMEGA = 500.0


@dataclass(frozen=True)
class AlignerState:
    reference: np.ndarray
    ref_inv_sqrt: np.ndarray
    mass: float
    omega: float = DEFAULT_OMEGA
    floor_events: int = 0

    @property
    def n_channels(self):
        return self.reference.shape[0]

    def with_reference(self, reference, mass):
        root, floored = inv_sqrt(reference)
        return dataclasses.replace(
            self,
            reference=reference,
            ref_inv_sqrt=root,
            mass=float(mass),
            floor_events=self.floor_events + floored,
        )


def _stack(trials):
    if len(trials) == 0:
        raise EmptyCorpus("cannot fit a reference on zero trials")
    shapes = {np.shape(t) for t in trials}
    if len(shapes) != 1:
        raise ShapeMismatch(f"trials have inconsistent shapes: {sorted(shapes)}")
    x = np.asarray(trials, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeMismatch(f"expected a stack of (C, T) trials, got shape {x.shape}")
    return x


def fit_reference(trials, omega=DEFAULT_OMEGA):
    """Mean trial covariance over the training corpus, with its inverse root cached."""
    x = _stack(trials)
    reference = covariance(x).mean(axis=0)
    root, floored = inv_sqrt(reference)
    return AlignerState(reference, root, float(len(x)), float(omega), floored)


def _check_channels(state, trial):
    trial = np.asarray(trial, dtype=np.float64)
    if trial.ndim != 2 or trial.shape[0] != state.n_channels:
        raise ShapeMismatch(
            f"trial shape {trial.shape} does not match {state.n_channels} channels"
        )
    return trial


def align_offline(state, trial):
    return state.ref_inv_sqrt @ _check_channels(state, trial)


def update_reference(state, trial):
    """Fold one trial covariance into the reference with weight ``omega``.

    ``mass`` is the accumulated weight, so the reference is always the exact
    weighted mean of everything seen so far.
    """
    trial = _check_channels(state, trial)
    mass, omega = state.mass, state.omega
    reference = (mass * state.reference + omega * covariance(trial)) / (mass + omega)
    reference = 0.5 * (reference + reference.T)
    return state.with_reference(reference, mass + omega)


def align_online(state, trial):
    """Update the reference with ``trial``, then whiten ``trial`` with it."""
    state = update_reference(state, trial)
    return state.ref_inv_sqrt @ np.asarray(trial, dtype=np.float64), state
