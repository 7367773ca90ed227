"""Versioned little-endian binary formats for θ, factors and regularizer state."""
import io
import struct
from pathlib import Path
from typing import BinaryIO, Optional, Sequence, Tuple

import numpy as np

from csqn.errors import DataFormatError
from csqn.services.curvature import CompactBfgsFactor, Factor, LowRankFactor, invert_middle
from csqn.services.regularizer import RegularizerState, StoredFactor

CHECKPOINT_MAGIC = b"CSQN"
FACTOR_MAGIC = b"CSQF"
STATE_MAGIC = b"CSQS"
FORMAT_VERSION = 1

KIND_BFGS = 0
KIND_SR1Z = 1


def _pack(fmt: str, *values) -> bytes:
    return struct.pack("<" + fmt, *values)


def _read_exact(stream: BinaryIO, size: int) -> bytes:
    chunk = stream.read(size)
    if len(chunk) != size:
        raise DataFormatError("truncated binary stream")
    return chunk


def _unpack(stream: BinaryIO, fmt: str) -> tuple:
    return struct.unpack("<" + fmt, _read_exact(stream, struct.calcsize("<" + fmt)))


def _read_array(stream: BinaryIO, dtype: str, count: int) -> np.ndarray:
    chunk = _read_exact(stream, np.dtype(dtype).itemsize * count)
    return np.frombuffer(chunk, dtype=dtype, count=count).copy()


def _read_matrix(stream: BinaryIO, rows: int, cols: int) -> np.ndarray:
    flat = _read_array(stream, "<f8", rows * cols)
    return flat.reshape((rows, cols), order="F").astype(np.float64)


def _column_major(matrix: np.ndarray) -> bytes:
    return np.asarray(matrix, dtype="<f8").tobytes(order="F")


def _check_header(stream: BinaryIO, magic: bytes, what: str) -> None:
    found = stream.read(4)
    if found != magic:
        raise DataFormatError(f"not a {what} (magic {found!r})")
    (version,) = _unpack(stream, "H")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported {what} version {version}")


# Checkpoints

def save_checkpoint(path: Path, theta: np.ndarray, widths: Sequence[int]) -> None:
    header = CHECKPOINT_MAGIC + _pack("HQH", FORMAT_VERSION, theta.shape[0], len(widths))
    header += _pack("I" * len(widths), *widths)
    Path(path).write_bytes(header + np.asarray(theta, dtype="<f4").tobytes())


def load_checkpoint(path: Path) -> Tuple[np.ndarray, Tuple[int, ...]]:
    with open(path, "rb") as stream:
        _check_header(stream, CHECKPOINT_MAGIC, "checkpoint")
        n, count = _unpack(stream, "QH")
        widths = _unpack(stream, "I" * count)
        theta = _read_array(stream, "<f4", n).astype(np.float32)
    return theta, tuple(widths)


# Factors

def encode_factor(factor: Factor, include_b0: bool = False) -> bytes:
    bfgs = isinstance(factor, CompactBfgsFactor)
    matrix = factor.U if bfgs else factor.Z
    n, c = matrix.shape
    clamped = 0 if bfgs else int(factor.clamped)
    has_b0 = int(bfgs and include_b0 and factor.b0 is not None)
    out = io.BytesIO()
    out.write(FACTOR_MAGIC)
    out.write(_pack("HBQIBH", FORMAT_VERSION, KIND_BFGS if bfgs else KIND_SR1Z,
                    n, c, clamped, len(factor.provenance)))
    out.write(_pack("I" * len(factor.provenance), *factor.provenance))
    out.write(_pack("B", has_b0))
    out.write(_column_major(matrix))
    if bfgs:
        out.write(_column_major(factor.mid))
        if has_b0:
            out.write(np.asarray(factor.b0, dtype="<f8").tobytes())
    return out.getvalue()


def decode_factor(stream: BinaryIO) -> Factor:
    _check_header(stream, FACTOR_MAGIC, "factor blob")
    kind, n, c, clamped, count = _unpack(stream, "BQIBH")
    provenance = tuple(_unpack(stream, "I" * count))
    (has_b0,) = _unpack(stream, "B")
    matrix = _read_matrix(stream, n, c)
    if kind == KIND_SR1Z:
        return LowRankFactor(matrix, provenance, bool(clamped))
    if kind != KIND_BFGS:
        raise DataFormatError(f"unknown factor kind {kind}")
    mid = _read_matrix(stream, c, c)
    b0: Optional[np.ndarray] = _read_array(stream, "<f8", n) if has_b0 else None
    mid_inv = invert_middle(mid, "stored BFGS middle matrix", c // 2) if c else mid
    return CompactBfgsFactor(matrix, mid, mid_inv, b0, provenance)


# Regularizer state

def _write_text(out: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    out.write(_pack("H", len(raw)) + raw)


def _read_text(stream: BinaryIO) -> str:
    (size,) = _unpack(stream, "H")
    try:
        return _read_exact(stream, size).decode("utf-8")
    except UnicodeDecodeError as e:
        raise DataFormatError(f"stored text is not UTF-8: {e}") from e


def save_state(path: Path, state: RegularizerState) -> None:
    out = io.BytesIO()
    out.write(STATE_MAGIC + _pack("H", FORMAT_VERSION))
    _write_text(out, state.method)
    _write_text(out, state.strategy)
    n = 0 if state.anchor is None else state.anchor.shape[0]
    out.write(_pack("dIIQ", state.lam, state.columns, state.tasks_completed, n))
    if n:
        out.write(np.asarray(state.anchor, dtype="<f8").tobytes())
        out.write(np.asarray(state.b0, dtype="<f8").tobytes())
    out.write(_pack("I", len(state.factors)))
    for stored in state.factors:
        blob = encode_factor(stored.factor)
        out.write(_pack("IQ", stored.level, len(blob)) + blob)
    Path(path).write_bytes(out.getvalue())


def load_state(path: Path) -> RegularizerState:
    with open(path, "rb") as stream:
        _check_header(stream, STATE_MAGIC, "regularizer state")
        method = _read_text(stream)
        strategy = _read_text(stream)
        lam, columns, tasks, n = _unpack(stream, "dIIQ")
        state = RegularizerState(method, strategy, lam, columns, tasks_completed=tasks)
        if n:
            state.anchor = _read_array(stream, "<f8", n)
            state.b0 = _read_array(stream, "<f8", n)
        (count,) = _unpack(stream, "I")
        for _ in range(count):
            level, size = _unpack(stream, "IQ")
            blob = io.BytesIO(_read_exact(stream, size))
            state.factors.append(StoredFactor(decode_factor(blob), level))
    return state
