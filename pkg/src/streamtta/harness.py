"""Leave-one-subject-out experiment driver.

Offline training (cross-entropy with batch-statistics BN, optional Euclidean
alignment), validation accuracy / ECE, online adaptation sessions, and the
ablation, batch-size and lambda grids built on top of them.
"""

import csv
import dataclasses
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import alignment
from .adaptation import AdaptConfig, adapt_block, start_session
from .decoder import BnMode, BnState, DecoderParams, UpdateMask, backward, forward, init_decoder, predict, sgd_step
from .errors import EmptyCorpus, UnknownSubject

VAL_FRACTION = 0.2
TRAIN_BN_MOMENTUM = 0.1
SESSION_COLUMNS = ("trial_idx", "correct", "entropy", "calibrated_ce", "total_loss", "running_acc")
AGGREGATE_COLUMNS = (
    "preset", "seed", "subject", "n_trials", "accuracy", "a_val", "ece",
    "floor_events", "skipped_steps",
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.3
    seed: int = 0
    momentum: float = 0.9
    hidden: int = 16
    eps: float = 3e-5

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.hidden < 1:
            raise ValueError(f"invalid TrainConfig: {self}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("TrainConfig.momentum must lie in [0, 1)")


@dataclass(frozen=True)
class SplitPlan:
    held_out: int
    train_subjects: tuple
    val_fraction: float = VAL_FRACTION

    def n_val(self, n_trials):
        if n_trials < 2:
            return 0
        return max(1, int(math.floor(self.val_fraction * n_trials + 0.5)))

    def partition(self, corpus):
        """``(x_train, y_train, x_val, y_val)`` from the training subjects only."""
        by_id = {s.subject_id: s for s in corpus}
        parts = ([], [], [], [])
        for sid in self.train_subjects:
            session = by_id[sid]
            cut = len(session) - self.n_val(len(session))
            parts[0].append(session.x[:cut])
            parts[1].append(session.y[:cut])
            parts[2].append(session.x[cut:])
            parts[3].append(session.y[cut:])
        return tuple(np.concatenate(p) for p in parts)


@dataclass
class TrainedState:
    params: DecoderParams
    bn: BnState
    aligner: alignment.AlignerState
    a_val: float
    aligned: bool
    val_ece: float
    n_classes: int


@dataclass
class TrialMetrics:
    trial_idx: int
    correct: bool
    entropy: float
    calibrated_ce: float
    total_loss: float
    running_acc: float


@dataclass
class MetricsRecord:
    rows: list
    accuracy: float
    a_val: float
    ece: float
    floor_events: int
    skipped_steps: int
    config: dict
    subject: int = -1
    seed: int = -1
    preset: str = ""
    probs: np.ndarray = field(default=None, repr=False)


def n_threads():
    try:
        return max(1, int(os.environ.get("TTA_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Order-preserving map over worker threads (``TTA_THREADS``)."""
    items = list(items)
    workers = min(n_threads(), len(items)) or 1
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# -- protocol -----------------------------------------------------------------

def loso_split(corpus, held_out):
    ids = [s.subject_id for s in corpus]
    if held_out not in ids:
        raise UnknownSubject(held_out)
    return SplitPlan(held_out, tuple(i for i in ids if i != held_out))


def n_classes_of(corpus):
    return int(max(int(s.y.max()) for s in corpus if len(s))) + 1


def compute_ece(probs_list, labels, n_bins=10):
    """Expected calibration error with equal-width confidence bins on (0, 1]."""
    probs = np.asarray(probs_list, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or len(probs) != len(labels):
        raise ValueError("probs must be (N, K) with one label per row")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if len(labels) == 0:
        return 0.0
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    bins = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    ece = 0.0
    for m in range(n_bins):
        in_bin = bins == m
        count = np.count_nonzero(in_bin)
        if count:
            ece += count / len(labels) * abs(correct[in_bin].mean() - conf[in_bin].mean())
    return float(ece)


def train_offline(split, corpus, tcfg, use_ea=True, omega=alignment.DEFAULT_OMEGA):
    """Fit the reference, (optionally) align, then train by mini-batch SGD.

    Returns a :class:`TrainedState`; ``a_val`` is the accuracy on the
    validation slices with running-statistics BN.
    """
    if not split.train_subjects:
        raise EmptyCorpus("no training subjects")
    x_tr, y_tr, x_val, y_val = split.partition(corpus)
    if len(x_tr) == 0:
        raise EmptyCorpus("training split is empty")
    aligner = alignment.fit_reference(x_tr, omega)
    if use_ea:
        x_tr = aligner.ref_inv_sqrt @ x_tr
        x_val = aligner.ref_inv_sqrt @ x_val

    n_classes = n_classes_of(corpus)
    params, bn = init_decoder(x_tr.shape[1], x_tr.shape[2], tcfg.hidden, n_classes, tcfg.seed, tcfg.eps)
    rng = np.random.default_rng(tcfg.seed)
    velocity = [np.zeros_like(a) for a in params.arrays()]
    for _ in range(tcfg.epochs):
        order = rng.permutation(len(x_tr))
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            _, cache = forward(params, bn, x_tr[idx], BnMode.BATCH)
            grad_logits = cache.probs.copy()
            grad_logits[np.arange(len(idx)), y_tr[idx]] -= 1.0
            grad_logits /= len(idx)
            grads = backward(params, cache, grad_logits)
            for v, g in zip(velocity, grads.arrays()):
                v *= tcfg.momentum
                v += g
            params = sgd_step(params, DecoderParams(*velocity), tcfg.lr)
            bn = BnState(
                (1 - TRAIN_BN_MOMENTUM) * bn.mu + TRAIN_BN_MOMENTUM * cache.batch_mu,
                (1 - TRAIN_BN_MOMENTUM) * bn.var + TRAIN_BN_MOMENTUM * cache.batch_var,
                bn.eps,
            )

    if len(x_val):
        val_probs = predict(params, bn, x_val)
        a_val = float(np.mean(val_probs.argmax(axis=1) == y_val))
        val_ece = compute_ece(val_probs, y_val)
    else:
        a_val, val_ece = 1.0 / n_classes, 0.0
    return TrainedState(params, bn, aligner, a_val, use_ea, val_ece, n_classes)


def frozen_predictions(trained, session):
    """Probabilities of the frozen decoder on the held-out stream (no adaptation)."""
    out = []
    for x in session.x:
        if trained.aligned:
            x = alignment.align_offline(trained.aligner, x)
        out.append(predict(trained.params, trained.bn, x)[0])
    return np.array(out)


def run_online_session(trained, session, cfg):
    """Stream ``session`` in recorded order through :func:`adapt_block`.

    Trials are grouped into blocks of ``cfg.bn_batch`` when BN updates are
    on (the last block may be shorter), otherwise processed one at a time.
    """
    if cfg.enable_ea != trained.aligned:
        raise ValueError("enable_ea must match whether the decoder was trained on aligned data")
    # the measured validation accuracy always drives the pseudo-labels; below
    # chance it says nothing about calibration, so it is floored at 1/K
    cfg = cfg.replace(a_val=None)
    a_val = max(trained.a_val, 1.0 / trained.n_classes)
    state = start_session(trained.aligner, trained.params, trained.bn, a_val, cfg)
    rows, all_probs = [], []
    n_correct = 0
    block = cfg.bn_batch if cfg.enable_bn_update else 1
    steps = []
    for start in range(0, len(session.x), block):
        results = adapt_block(state, session.x[start:start + block], cfg)
        state = results[-1].state
        steps.extend(results)
    for i, (step, label) in enumerate(zip(steps, session.y)):
        correct = step.prediction == int(label)
        n_correct += correct
        losses = step.losses
        rows.append(TrialMetrics(
            i, bool(correct),
            losses.entropy if losses else math.nan,
            losses.calibrated_ce if losses else math.nan,
            losses.total if losses else math.nan,
            n_correct / (i + 1),
        ))
        all_probs.append(step.probs)
    probs = np.array(all_probs)
    accuracy = float(np.mean([r.correct for r in rows])) if rows else 0.0
    return MetricsRecord(
        rows=rows,
        accuracy=accuracy,
        a_val=state.a_val,
        ece=compute_ece(probs, session.y) if rows else 0.0,
        floor_events=state.aligner.floor_events,
        skipped_steps=state.skipped_steps,
        config=cfg.replace(a_val=state.a_val).as_dict(),
        subject=session.subject_id,
        probs=probs,
    )


# -- presets and grids --------------------------------------------------------

TABLE_V_PRESETS = {
    "baseline": (False, False, False),
    "ea_only": (True, False, False),
    "bn_only": (False, True, False),
    "loss_only": (False, False, True),
    "ea_bn": (True, True, False),
    "ea_loss": (True, False, True),
    "bn_loss": (False, True, True),
    "full": (True, True, True),
}
NAMED_PRESETS = ("adabn", "tent")
SINGLE_COMPONENT_PRESETS = ("ea_only", "bn_only", "loss_only")
PRESET_NAMES = tuple(TABLE_V_PRESETS) + NAMED_PRESETS


def apply_preset(name, cfg=None):
    """Project ``cfg`` onto a named preset (flags, and for tent also lambda/mask)."""
    cfg = cfg or AdaptConfig()
    if name in TABLE_V_PRESETS:
        ea, bn, loss = TABLE_V_PRESETS[name]
        return cfg.replace(enable_ea=ea, enable_bn_update=bn, enable_loss_update=loss)
    if name == "adabn":
        return cfg.replace(enable_ea=False, enable_bn_update=True, enable_loss_update=False)
    if name == "tent":
        return cfg.replace(
            enable_ea=False, enable_bn_update=True, enable_loss_update=True,
            lambda_=0.0, update_mask=UpdateMask.BN_AFFINE,
        )
    raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")


def run_fold(corpus, held_out, tcfg, configs, seed=-1):
    """Train once per alignment variant needed and run every config on ``held_out``."""
    split = loso_split(corpus, held_out)
    session = next(s for s in corpus if s.subject_id == held_out)
    trained = {}
    records = []
    for name, cfg in configs.items():
        if cfg.enable_ea not in trained:
            trained[cfg.enable_ea] = train_offline(split, corpus, tcfg, use_ea=cfg.enable_ea, omega=cfg.omega)
        record = run_online_session(trained[cfg.enable_ea], session, cfg)
        record.preset, record.seed = name, seed
        records.append(record)
    return records


def run_grid(corpus, configs, tcfg, seed=-1):
    """One record per (config x held-out subject), folds run in parallel."""
    subjects = [s.subject_id for s in corpus]
    per_fold = parallel_map(lambda sid: run_fold(corpus, sid, tcfg, configs, seed), subjects)
    by_name = {name: [] for name in configs}
    for fold in per_fold:
        for record in fold:
            by_name[record.preset].append(record)
    return [r for name in configs for r in by_name[name]]


def run_ablation_grid(corpus, presets, tcfg, acfg=None, seed=-1):
    if not presets:
        raise ValueError("at least one preset is required")
    configs = {name: apply_preset(name, acfg) for name in presets}
    return run_grid(corpus, configs, tcfg, seed)


def lambda_grid(start=0.1, stop=1.9, step=0.1):
    n = int(round((stop - start) / step)) + 1
    return [round(start + i * step, 10) for i in range(n)]


def run_lambda_sweep(corpus, lambdas, tcfg, acfg=None, seed=-1):
    acfg = acfg or apply_preset("full")
    configs = {f"lambda={lam:g}": acfg.replace(lambda_=lam) for lam in lambdas}
    return run_grid(corpus, configs, tcfg, seed)


def run_batch_grid(corpus, batch_sizes, tcfg, acfg=None, components=("loss", "bn"), seed=-1):
    """Buffer loss and/or BN updates over ``b`` trials; alignment stays per trial."""
    acfg = acfg or apply_preset("full")
    configs = {}
    for b in batch_sizes:
        changes = {}
        if "loss" in components:
            changes["loss_batch"] = b
        if "bn" in components:
            changes["bn_batch"] = b
        configs[f"batch={b}"] = acfg.replace(**changes)
    return run_grid(corpus, configs, tcfg, seed)


def mean_accuracy(records):
    """Mean accuracy per preset, in first-seen order."""
    groups = {}
    for r in records:
        groups.setdefault(r.preset, []).append(r.accuracy)
    return {name: float(np.mean(accs)) for name, accs in groups.items()}


# -- CSV emission -------------------------------------------------------------

def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_session_csv(record, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SESSION_COLUMNS)
        for row in record.rows:
            writer.writerow([_fmt(getattr(row, c)) for c in SESSION_COLUMNS])
    return path


def write_aggregate_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(AGGREGATE_COLUMNS)
        for r in records:
            values = {
                "preset": r.preset, "seed": r.seed, "subject": r.subject,
                "n_trials": len(r.rows), "accuracy": r.accuracy, "a_val": r.a_val,
                "ece": r.ece, "floor_events": r.floor_events, "skipped_steps": r.skipped_steps,
            }
            writer.writerow([_fmt(values[c]) for c in AGGREGATE_COLUMNS])
    return path
