"""Deterministic multi-subject synthetic corpus with inter-subject spatial shift.

Each subject ``s`` has a mixing matrix ``M_s = I + shift * E_s`` where ``E_s``
has i.i.d. ``N(0, 1/C)`` entries.  A trial of class ``k`` is
``M_s @ sources + noise``.  All latent sources have unit variance.  Source
``k`` carries a phase-locked harmonic bank at the class frequency mixed with
Gaussian jitter.  Every other source is ongoing background activity made of
a few random-phase rhythms, whose power is the same in every trial.  Class
identity lives in the waveform shape of one spatial source rather than in
its power, so it survives per-trial normalisation while the covariance
structure still shifts from subject to subject.
"""

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

TRIAL_MAGIC = b"TTA1"
TRIAL_VERSION = 1
_TRIAL_HEADER = struct.Struct("<4sIIIi")
N_HARMONICS = 4
N_BACKGROUND_RHYTHMS = 3
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class GeneratorSpec:
    n_subjects: int = 8
    n_trials_per_subject: int = 80
    channels: int = 8
    samples: int = 128
    classes: int = 4
    subject_shift_strength: float = 0.5
    class_separation: float = 2.0
    noise_level: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("n_subjects", "n_trials_per_subject", "channels", "samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"GeneratorSpec.{name} must be >= 1")
        if self.classes < 2:
            raise ValueError("GeneratorSpec.classes must be >= 2")
        if self.subject_shift_strength < 0:
            raise ValueError("GeneratorSpec.subject_shift_strength must be >= 0")
        if self.class_separation <= 0:
            raise ValueError("GeneratorSpec.class_separation must be > 0")
        if self.noise_level < 0:
            raise ValueError("GeneratorSpec.noise_level must be >= 0")


@dataclass(frozen=True)
class Trial:
    data: np.ndarray  # (C, T)
    label: int = -1  # -1 when unlabelled


@dataclass(frozen=True)
class Session:
    subject_id: int
    x: np.ndarray  # (n_trials, C, T)
    y: np.ndarray  # (n_trials,)

    @property
    def trials(self):
        return [Trial(x, int(y)) for x, y in zip(self.x, self.y)]

    def __len__(self):
        return len(self.y)


def class_frequencies(n_classes, n_samples=None):
    """Fundamental frequencies in cycles/sample; top harmonic stays below 0.4.

    With ``n_samples`` the fundamentals are snapped to whole cycles per
    window when that keeps them distinct and below Nyquist.  A bank of whole
    cycles has zero window mean and the same power at every phase, so the
    class sources carry no per-trial offset or gain.
    """
    freqs = 0.4 / N_HARMONICS * (np.arange(n_classes) + 1) / n_classes
    if n_samples is None:
        return freqs
    cycles = np.maximum(np.round(freqs * n_samples), 1.0)
    if np.all(np.diff(cycles) > 0) and 2 * N_HARMONICS * cycles[-1] < n_samples:
        return cycles / n_samples
    return freqs


def _harmonic_bank(freq, n_samples, phase):
    t = np.arange(n_samples)
    bank = sum(np.cos(h * (2 * np.pi * freq * t + phase)) for h in range(1, N_HARMONICS + 1))
    return bank / np.sqrt(N_HARMONICS / 2.0)


def _background_rhythms(rng, n_sources, n_samples, reserved=()):
    """Unit-power ongoing activity: random-phase cosines at whole cycles per window.

    When the window has room, every component gets its own frequency, kept
    clear of ``reserved`` (the class harmonics).  Distinct whole-cycle
    cosines are orthogonal over the window, so the sources are then exactly
    uncorrelated with zero mean and unit power in every trial.
    """
    n_comp = N_BACKGROUND_RHYTHMS
    full_pool = np.arange(1, max(2, (n_samples + 1) // 2))
    pool = np.setdiff1d(full_pool, np.asarray(reserved, dtype=np.int64))
    if len(pool) >= n_sources * n_comp:
        cycles = rng.permutation(pool)[: n_sources * n_comp].reshape(n_sources, n_comp)
    else:
        cycles = rng.choice(full_pool, (n_sources, n_comp))
    phases = rng.uniform(0, 2 * np.pi, (n_sources, n_comp))
    t = np.arange(n_samples)
    waves = np.cos(2 * np.pi * cycles[:, :, None] * t / n_samples + phases[:, :, None])
    return np.sqrt(2.0 / n_comp) * waves.sum(axis=1)


def generate_corpus(spec):
    """List of :class:`Session`, a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    n_ch, n_t, n_cls = spec.channels, spec.samples, spec.classes
    freqs = class_frequencies(n_cls, n_t)
    sep, nl = spec.class_separation, spec.noise_level
    harmonics = np.outer(np.arange(1, N_HARMONICS + 1), freqs * n_t)
    reserved = np.unique(np.round(harmonics[np.isclose(harmonics, np.round(harmonics))]))
    corpus = []
    for subject in range(spec.n_subjects):
        shift = rng.standard_normal((n_ch, n_ch)) / np.sqrt(n_ch)
        mixing = np.eye(n_ch) + spec.subject_shift_strength * shift
        labels = np.arange(spec.n_trials_per_subject) % n_cls
        labels = rng.permutation(labels)
        x = np.empty((spec.n_trials_per_subject, n_ch, n_t))
        for i, label in enumerate(labels):
            sources = _background_rhythms(rng, n_ch, n_t, reserved)
            row = label % n_ch
            bank = _harmonic_bank(freqs[label], n_t, rng.uniform(0, 2 * np.pi))
            jitter = rng.standard_normal(n_t)
            # the class-bearing source keeps unit variance; its jitter scales with noise
            sources[row] = (sep * bank + nl * jitter) / np.sqrt(sep * sep + nl * nl)
            noise = nl * rng.standard_normal((n_ch, n_t))
            x[i] = mixing @ sources + noise
        corpus.append(Session(subject, x, labels.astype(np.int64)))
    return corpus


# -- TTA1 trial files ---------------------------------------------------------

def write_trial_file(path, trial):
    data = np.ascontiguousarray(trial.data, dtype="<f8")
    if data.ndim != 2:
        raise ValueError(f"trial data must be 2-D, got shape {data.shape}")
    header = _TRIAL_HEADER.pack(TRIAL_MAGIC, TRIAL_VERSION, data.shape[0], data.shape[1], int(trial.label))
    Path(path).write_bytes(header + data.tobytes())


def read_trial_file(path):
    blob = Path(path).read_bytes()
    if len(blob) < _TRIAL_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n_ch, n_t, label = _TRIAL_HEADER.unpack_from(blob)
    if magic != TRIAL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != TRIAL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _TRIAL_HEADER.size + 8 * n_ch * n_t
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f8", offset=_TRIAL_HEADER.size).reshape(n_ch, n_t)
    return Trial(data.astype(np.float64), label)


# -- corpus on disk -----------------------------------------------------------

def write_corpus(corpus, out_dir, spec=None):
    """Write every trial as a TTA1 file plus ``manifest.json``; returns the manifest path.

    Manifest fields: ``format`` ("tta-manifest"), ``version`` (1), ``spec``
    (generator echo or null), ``subjects``: list of ``{subject_id, trials:
    [{path, label}]}`` with paths relative to the manifest directory.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    subjects = []
    for session in corpus:
        sub_dir = out_dir / f"s{session.subject_id:03d}"
        sub_dir.mkdir(exist_ok=True)
        entries = []
        for i, trial in enumerate(session.trials):
            rel = f"{sub_dir.name}/trial_{i:05d}.tta"
            write_trial_file(out_dir / rel, trial)
            entries.append({"path": rel, "label": trial.label})
        subjects.append({"subject_id": session.subject_id, "trials": entries})
    manifest = {
        "format": "tta-manifest",
        "version": 1,
        "spec": asdict(spec) if spec is not None else None,
        "subjects": subjects,
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_corpus(manifest_path):
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: {exc}") from exc
    if manifest.get("format") != "tta-manifest" or manifest.get("version") != 1:
        raise FormatError(f"{manifest_path}: not a version-1 tta manifest")
    root = manifest_path.parent
    corpus = []
    for subject in manifest["subjects"]:
        trials = [read_trial_file(root / entry["path"]) for entry in subject["trials"]]
        x = np.stack([t.data for t in trials])
        y = np.array([t.label for t in trials], dtype=np.int64)
        corpus.append(Session(int(subject["subject_id"]), x, y))
    return corpus
