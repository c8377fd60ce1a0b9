"""Numeric kernels with a numba path and a pure-numpy fallback.

Set ``BRIDGEBENCH_DISABLE_NUMBA=1`` to force the numpy implementations.
Both paths produce bit-identical results; the scalar helpers here are plain
Python so per-packet calls stay cheap regardless of backend.
"""

from __future__ import annotations

import math
import os

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MUL1 = 0xBF58476D1CE4E5B9
MUL2 = 0x94D049BB133111EB

RECORD_WIDTH = 34
PARAM_NAMES = (b"TEMP", b"SALI", b"PRES", b"COND", b"OXYG", b"TURB", b"CHLA", b"PHXX")
_PARAM_TABLE = np.frombuffer(b"".join(PARAM_NAMES), dtype=np.uint8).reshape(len(PARAM_NAMES), 4).copy()

_U_GOLDEN = np.uint64(GOLDEN)
_U_MUL1 = np.uint64(MUL1)
_U_MUL2 = np.uint64(MUL2)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_S8 = np.uint64(8)
_INV53 = 1.0 / 9007199254740992.0


def _want_numba() -> bool:
    if os.environ.get("BRIDGEBENCH_DISABLE_NUMBA", "").strip() not in ("", "0"):
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


# -- scalar (pure Python) ----------------------------------------------------

def mix64(x: int) -> int:
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * MUL1) & MASK64
    z = ((z ^ (z >> 27)) * MUL2) & MASK64
    return z ^ (z >> 31)


def counter_hash(seed: int, key: int, direction: int, stream: int, ordinal: int) -> int:
    h = mix64(seed & MASK64)
    h = mix64(h ^ (key & MASK64))
    h = mix64(h ^ ((direction << 8) | stream))
    return mix64(h ^ (ordinal & MASK64))


def counter_uniform(seed: int, key: int, direction: int, stream: int, ordinal: int) -> float:
    """Uniform in [0, 1) determined only by the five integer coordinates."""
    return (counter_hash(seed, key, direction, stream, ordinal) >> 11) * _INV53


def segment_drop_probability(nbytes: int, loss_p: float, segment_size: int) -> float:
    if loss_p <= 0.0 or nbytes <= 0:
        return 0.0
    if loss_p >= 1.0:
        return 1.0
    segments = -(-nbytes // segment_size)
    return 1.0 - math.pow(1.0 - loss_p, float(segments))


# -- numpy implementations ---------------------------------------------------

def _mix64_np(x: np.ndarray) -> np.ndarray:
    z = x + _U_GOLDEN
    z = (z ^ (z >> _S30)) * _U_MUL1
    z = (z ^ (z >> _S27)) * _U_MUL2
    return z ^ (z >> _S31)


def _prefix(seed: int, key: int, direction: int, stream: int) -> np.uint64:
    h = mix64(seed & MASK64)
    h = mix64(h ^ (key & MASK64))
    return np.uint64(mix64(h ^ ((direction << 8) | stream)))


def uniform_batch_np(seed: int, key: int, direction: int, stream: int, ordinals: np.ndarray) -> np.ndarray:
    pre = _prefix(seed, key, direction, stream)
    with np.errstate(over="ignore"):
        h = _mix64_np(np.asarray(ordinals, dtype=np.uint64) ^ pre)
    return (h >> _S11).astype(np.float64) * _INV53


def drop_probability_np(nbytes: np.ndarray, loss_p: float, segment_size: int) -> np.ndarray:
    n = np.asarray(nbytes, dtype=np.int64)
    if loss_p <= 0.0:
        return np.zeros(n.shape)
    if loss_p >= 1.0:
        return np.where(n > 0, 1.0, 0.0)
    segments = -(-n // segment_size)
    # libm pow per distinct segment count, so results match the scalar path bit for bit
    uniq, inverse = np.unique(segments, return_inverse=True)
    table = np.array([1.0 - math.pow(1.0 - loss_p, float(s)) for s in uniq.tolist()])
    return np.where(n > 0, table[inverse].reshape(n.shape), 0.0)


def sensor_records_np(n_records: int, seed: int, hub_key: int, hub_label: int, seq: int) -> np.ndarray:
    out = np.empty((n_records, RECORD_WIDTH), dtype=np.uint8)
    if n_records == 0:
        return out.ravel()
    idx = np.arange(n_records, dtype=np.uint64)
    ords = (np.uint64(seq) << np.uint64(24)) | idx
    u = uniform_batch_np(seed, hub_key, 2, 0, ords)
    p = uniform_batch_np(seed, hub_key, 2, 1, ords)
    param = (p * len(PARAM_NAMES)).astype(np.int64)
    milli = (u * 199_999_998.0).astype(np.int64) - 99_999_999
    neg = milli < 0
    mag = np.abs(milli)
    ts = (seq * 1000 + np.arange(n_records, dtype=np.int64)) % 10_000_000_000

    def digits(values, width, col):
        for k in range(width):
            out[:, col + width - 1 - k] = 48 + (values // 10 ** k) % 10

    out[:, 0] = ord("R")
    out[:, 1] = ord(",")
    digits(np.full(n_records, hub_label % 1000, dtype=np.int64), 3, 2)
    out[:, 5] = ord(",")
    digits(ts, 10, 6)
    out[:, 16] = ord(",")
    out[:, 17:21] = _PARAM_TABLE[param]
    out[:, 21] = ord(",")
    out[:, 22] = np.where(neg, ord("-"), ord("+"))
    digits(mag // 1000, 6, 23)
    out[:, 29] = ord(".")
    digits(mag % 1000, 3, 30)
    out[:, 33] = ord("\n")
    return out.ravel()


def duplicate_flags_np(gateway: np.ndarray, seq: np.ndarray) -> np.ndarray:
    """Flag every (gateway, seq) occurrence after the first, in input order."""
    g = np.asarray(gateway, dtype=np.int64)
    s = np.asarray(seq, dtype=np.int64)
    flags = np.zeros(g.shape[0], dtype=np.bool_)
    if g.shape[0] < 2:
        return flags
    order = np.lexsort((np.arange(g.shape[0]), s, g))
    gs, ss = g[order], s[order]
    same = (gs[1:] == gs[:-1]) & (ss[1:] == ss[:-1])
    flags[order[1:][same]] = True
    return flags


# -- numba implementations ---------------------------------------------------

if _want_numba():
    from numba import njit

    @njit(cache=True, inline="always")
    def _mix64_nb(x):
        z = x + _U_GOLDEN
        z = (z ^ (z >> _S30)) * _U_MUL1
        z = (z ^ (z >> _S27)) * _U_MUL2
        return z ^ (z >> _S31)

    @njit(cache=True)
    def _uniform_kernel(pre, ordinals):
        out = np.empty(ordinals.shape[0], dtype=np.float64)
        for i in range(ordinals.shape[0]):
            h = _mix64_nb(ordinals[i] ^ pre)
            out[i] = np.float64(h >> _S11) * _INV53
        return out

    def uniform_batch_nb(seed, key, direction, stream, ordinals):
        pre = _prefix(seed, key, direction, stream)
        return _uniform_kernel(pre, np.ascontiguousarray(ordinals, dtype=np.uint64))

    @njit(cache=True)
    def _drop_kernel(n, loss_p, segment_size):
        out = np.zeros(n.shape[0], dtype=np.float64)
        for i in range(n.shape[0]):
            if n[i] <= 0 or loss_p <= 0.0:
                continue
            if loss_p >= 1.0:
                out[i] = 1.0
                continue
            segments = (n[i] + segment_size - 1) // segment_size
            out[i] = 1.0 - math.pow(1.0 - loss_p, np.float64(segments))
        return out

    def drop_probability_nb(nbytes, loss_p, segment_size):
        return _drop_kernel(np.ascontiguousarray(nbytes, dtype=np.int64), float(loss_p), int(segment_size))

    @njit(cache=True)
    def _put_digits(out, base, value, width):
        for k in range(width):
            out[base + width - 1 - k] = 48 + value % 10
            value //= 10

    @njit(cache=True)
    def _records_kernel(n_records, pre_u, pre_p, hub_label, seq, table):
        out = np.empty(n_records * 34, dtype=np.uint8)
        nparams = table.shape[0]
        sq = np.uint64(seq) << np.uint64(24)
        for i in range(n_records):
            o = sq | np.uint64(i)
            u = np.float64(_mix64_nb(o ^ pre_u) >> _S11) * _INV53
            p = np.float64(_mix64_nb(o ^ pre_p) >> _S11) * _INV53
            param = np.int64(p * nparams)
            milli = np.int64(u * 199_999_998.0) - 99_999_999
            neg = milli < 0
            mag = -milli if neg else milli
            ts = (seq * 1000 + i) % 10_000_000_000
            b = i * 34
            out[b] = 82
            out[b + 1] = 44
            _put_digits(out, b + 2, hub_label % 1000, 3)
            out[b + 5] = 44
            _put_digits(out, b + 6, ts, 10)
            out[b + 16] = 44
            for k in range(4):
                out[b + 17 + k] = table[param, k]
            out[b + 21] = 44
            out[b + 22] = 45 if neg else 43
            _put_digits(out, b + 23, mag // 1000, 6)
            out[b + 29] = 46
            _put_digits(out, b + 30, mag % 1000, 3)
            out[b + 33] = 10
        return out

    def sensor_records_nb(n_records, seed, hub_key, hub_label, seq):
        return _records_kernel(
            int(n_records),
            _prefix(seed, hub_key, 2, 0),
            _prefix(seed, hub_key, 2, 1),
            int(hub_label),
            int(seq),
            _PARAM_TABLE,
        )

    @njit(cache=True)
    def _dup_kernel(g, s):
        n = g.shape[0]
        flags = np.zeros(n, dtype=np.bool_)
        if n < 2:
            return flags
        keys = np.empty(n, dtype=np.int64)
        for i in range(n):
            keys[i] = (g[i] << 32) ^ s[i]
        order = np.argsort(keys, kind="mergesort")
        for j in range(1, n):
            a = order[j - 1]
            b = order[j]
            if g[a] == g[b] and s[a] == s[b]:
                flags[b] = True
        return flags

    def duplicate_flags_nb(gateway, seq):
        return _dup_kernel(
            np.ascontiguousarray(gateway, dtype=np.int64),
            np.ascontiguousarray(seq, dtype=np.int64),
        )

    BACKEND = "numba"
    uniform_batch = uniform_batch_nb
    drop_probability = drop_probability_nb
    sensor_records = sensor_records_nb
    duplicate_flags = duplicate_flags_nb
else:
    BACKEND = "numpy"
    uniform_batch = uniform_batch_np
    drop_probability = drop_probability_np
    sensor_records = sensor_records_np
    duplicate_flags = duplicate_flags_np
