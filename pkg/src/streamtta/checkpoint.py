"""Versioned little-endian binary records for aligner, decoder and session state.

Aligner record::

    b"TTAR" u32 version u32 C f64 mass f64 omega u64 floor_events
    f64[C*C] reference  f64[C*C] ref_inv_sqrt

Decoder record::

    b"TTAD" u32 version u32 C u32 H u32 K f64 eps
    w1 b1 gamma beta w2 b2 (declared order)  bn_mu bn_var

Session record::

    b"TTAS" u32 version <aligner record> <decoder record>
    f64 a_val f64 val_ece u8 aligned u32 n_bytes utf-8 JSON AdaptConfig echo
"""

import io
import json
import struct

import numpy as np

from .adaptation import AdaptConfig
from .alignment import AlignerState
from .decoder import BnMode, BnState, DecoderParams, UpdateMask
from .errors import FormatError
from .harness import TrainedState

VERSION = 1
ALIGNER_MAGIC = b"TTAR"
DECODER_MAGIC = b"TTAD"
SESSION_MAGIC = b"TTAS"


def _read(stream, n):
    data = stream.read(n)
    if len(data) != n:
        raise FormatError("truncated record")
    return data


def _unpack(stream, fmt):
    s = struct.Struct(fmt)
    return s.unpack(_read(stream, s.size))


def _read_array(stream, shape):
    count = int(np.prod(shape))
    return np.frombuffer(_read(stream, 8 * count), dtype="<f8").astype(np.float64).reshape(shape)


def _write_array(stream, arr):
    stream.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _expect_header(stream, magic):
    found, version = _unpack(stream, "<4sI")
    if found != magic:
        raise FormatError(f"bad magic {found!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported record version {version}")


def write_aligner(stream, state):
    stream.write(struct.pack("<4sII", ALIGNER_MAGIC, VERSION, state.n_channels))
    stream.write(struct.pack("<ddQ", state.mass, state.omega, state.floor_events))
    _write_array(stream, state.reference)
    _write_array(stream, state.ref_inv_sqrt)


def read_aligner(stream):
    _expect_header(stream, ALIGNER_MAGIC)
    (n_ch,) = _unpack(stream, "<I")
    mass, omega, floor_events = _unpack(stream, "<ddQ")
    reference = _read_array(stream, (n_ch, n_ch))
    root = _read_array(stream, (n_ch, n_ch))
    return AlignerState(reference, root, mass, omega, floor_events)


def write_decoder(stream, params, bn):
    n_ch, hidden, n_cls = params.dims
    stream.write(struct.pack("<4sIIIId", DECODER_MAGIC, VERSION, n_ch, hidden, n_cls, bn.eps))
    for arr in params.arrays():
        _write_array(stream, arr)
    _write_array(stream, bn.mu)
    _write_array(stream, bn.var)


def read_decoder(stream):
    _expect_header(stream, DECODER_MAGIC)
    n_ch, hidden, n_cls, eps = _unpack(stream, "<IIId")
    shapes = [(hidden, n_ch), (hidden,), (hidden,), (hidden,), (n_cls, hidden), (n_cls,)]
    params = DecoderParams(*(_read_array(stream, s) for s in shapes))
    bn = BnState(_read_array(stream, (hidden,)), _read_array(stream, (hidden,)), eps)
    return params.validate(), bn


def config_from_dict(d):
    d = dict(d)
    d["update_mask"] = UpdateMask(d["update_mask"])
    d["bn_forward_mode"] = BnMode(d["bn_forward_mode"])
    return AdaptConfig(**d)


def session_bytes(trained, cfg):
    out = io.BytesIO()
    out.write(struct.pack("<4sI", SESSION_MAGIC, VERSION))
    write_aligner(out, trained.aligner)
    write_decoder(out, trained.params, trained.bn)
    echo = json.dumps(cfg.as_dict(), sort_keys=True).encode()
    out.write(struct.pack("<ddBI", trained.a_val, trained.val_ece, int(trained.aligned), len(echo)))
    out.write(echo)
    return out.getvalue()


def save_session(path, trained, cfg=None):
    with open(path, "wb") as fh:
        fh.write(session_bytes(trained, cfg or AdaptConfig()))
    return path


def load_session(path):
    """Return ``(TrainedState, AdaptConfig)`` from a session record."""
    with open(path, "rb") as fh:
        stream = io.BytesIO(fh.read())
    _expect_header(stream, SESSION_MAGIC)
    aligner = read_aligner(stream)
    params, bn = read_decoder(stream)
    a_val, val_ece, aligned, n_echo = _unpack(stream, "<ddBI")
    try:
        cfg = config_from_dict(json.loads(_read(stream, n_echo)))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad config echo: {exc}") from exc
    if stream.read(1):
        raise FormatError("trailing bytes after session record")
    trained = TrainedState(params, bn, aligner, a_val, bool(aligned), val_ece, params.dims[2])
    return trained, cfg
