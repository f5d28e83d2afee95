"""Syndrome-trellis codes.

The binary layer finds, for a parity-check matrix built from an ``h x w``
submatrix laid along the diagonal, the word ``y`` with ``H y = m`` that
minimizes ``sum(cost[j, y_j])``. Ternary (+-1) embedding stacks two binary
layers. Exactly one of the two directions flips a pixel's second bit, so the
second bit plane is coded first over all pixels (flip cost = cost of that
direction). The LSB plane follows: pixels whose second bit flipped must flip
their LSB too, the rest may flip it by moving the other way.

Framing used by :func:`stc_embed`: ``M = floor(q * n)`` syndrome bits are
embedded, carrying a length header of ``M.bit_length()`` bits, the message,
and pseudo-random padding. The split of ``M`` between the two layers depends
only on ``(n, q)`` so the receiver can recompute it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.optimize import brentq

from .errors import ConfigError, InfeasibleError, PayloadError, ShapeError
from .embedding import binary_entropy
from .maps import CostMap, is_wet

@dataclass(frozen=True)
class StcParams:
    h: int = 7
    payload_q: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.h <= 12:
            raise ConfigError(f"constraint height h={self.h} outside [2, 12]")
        if not 0 < self.payload_q < 1:
            raise ConfigError(f"payload {self.payload_q} bpp outside (0, 1)")


def block_widths(n: int, m: int) -> np.ndarray:
    """Columns assigned to each of the ``m`` message bits, summing to ``n``."""
    i = np.arange(m + 1, dtype=np.int64)
    edges = (i * n) // m
    return np.diff(edges)


def submatrix(h: int, w: int, seed: int = 0) -> np.ndarray:
    """``h x w`` binary submatrix; every column has its first and last bit set."""
    rng = np.random.default_rng([seed, h, w])
    cols = rng.integers(0, 1 << h, size=w, dtype=np.int64) | 1 | (1 << (h - 1))
    return ((cols[None, :] >> np.arange(h)[:, None]) & 1).astype(np.uint8)


def _column_patterns(n, m, h, seed):
    widths = block_widths(n, m)
    w = int(widths.max())
    sub = submatrix(h, w, seed)
    cols = (sub.astype(np.int64) << np.arange(h)[:, None]).sum(axis=0)
    block_of = np.repeat(np.arange(m), widths)
    starts = np.concatenate([[0], np.cumsum(widths)[:-1]])
    idx = np.arange(n) - starts[block_of]
    rows_left = np.minimum(h, m - block_of)
    return cols[idx] & ((1 << rows_left) - 1), widths, block_of


def parity_check_matrix(n: int, m: int, h: int, seed: int = 0) -> np.ndarray:
    """Dense ``m x n`` parity-check matrix (for small instances and checks)."""
    widths = block_widths(n, m)
    sub = submatrix(h, int(widths.max()), seed)
    H = np.zeros((m, n), dtype=np.uint8)
    col = 0
    for i, wi in enumerate(widths):
        rows = min(h, m - i)
        H[i:i + rows, col:col + wi] = sub[:rows, :wi]
        col += wi
    return H


@njit(cache=True)
def _viterbi(patterns, widths, cost0, cost1, msg, h):
    n = patterns.shape[0]
    S = 1 << h
    nbytes = (S + 7) >> 3
    path = np.zeros((n, nbytes), dtype=np.uint8)
    cost = np.full(S, np.inf)
    cost[0] = 0.0
    new = np.empty(S)
    j = 0
    for i in range(widths.shape[0]):
        for _ in range(widths[i]):
            c = patterns[j]
            c0 = cost0[j]
            c1 = cost1[j]
            for s in range(S):
                a = cost[s] + c0
                b = cost[s ^ c] + c1
                if b < a:
                    new[s] = b
                    path[j, s >> 3] |= np.uint8(1 << (s & 7))
                else:
                    new[s] = a
            for s in range(S):
                cost[s] = new[s]
            j += 1
        bit = msg[i]
        half = S >> 1
        for t in range(half):
            cost[t] = cost[2 * t + bit]
        for t in range(half, S):
            cost[t] = np.inf
    best = 0
    for s in range(S):
        if cost[s] < cost[best]:
            best = s
    total = cost[best]
    y = np.zeros(n, dtype=np.uint8)
    if not total < np.inf:
        # no finite path; the traceback would follow unset path bits
        return y, total
    state = best
    j = n - 1
    for i in range(widths.shape[0] - 1, -1, -1):
        state = (state << 1) | msg[i]
        for _ in range(widths[i]):
            if (path[j, state >> 3] >> (state & 7)) & 1:
                y[j] = 1
                state ^= patterns[j]
            j -= 1
    return y, total


def embed_layer(cost0, cost1, message, h: int, seed: int = 0):
    """Minimum-cost binary word whose syndrome equals ``message``.

    ``cost0[j]`` / ``cost1[j]`` are the costs of setting bit ``j`` to 0 / 1;
    ``inf`` forbids a value. Returns ``(y, total_cost)``.
    """
    cost0 = np.ascontiguousarray(cost0, dtype=np.float64)
    cost1 = np.ascontiguousarray(cost1, dtype=np.float64)
    msg = np.ascontiguousarray(message, dtype=np.int64)
    n, m = cost0.shape[0], msg.shape[0]
    if cost1.shape[0] != n:
        raise ShapeError("cost vectors differ in length")
    if m > n:
        raise PayloadError(f"{m} message bits do not fit in {n} cover elements")
    if m == 0:
        y = (cost1 < cost0).astype(np.uint8)
        return y, float(np.minimum(cost0, cost1).sum())
    patterns, widths, _ = _column_patterns(n, m, h, seed)
    y, total = _viterbi(patterns, widths, cost0, cost1, msg, h)
    if not math.isfinite(total):
        raise InfeasibleError("no syndrome-satisfying word avoids the wet elements")
    return y, float(total)


def syndrome(y, m: int, h: int, seed: int = 0) -> np.ndarray:
    """``H y mod 2`` without materialising ``H``."""
    y = np.asarray(y).astype(np.int64) & 1
    n = y.shape[0]
    if m == 0:
        return np.zeros(0, dtype=np.uint8)
    patterns, _, block_of = _column_patterns(n, m, h, seed)
    on = y.astype(bool)
    p, b = patterns[on], block_of[on]
    out = np.zeros(m, dtype=np.int64)
    for k in range(h):
        hit = ((p >> k) & 1).astype(bool)
        out += np.bincount(b[hit] + k, minlength=m + h)[:m]
    return (out & 1).astype(np.uint8)


def _uniform_change_rate(q: float) -> float:
    # change rate p of symmetric ternary embedding with entropy q per pixel:
    # h2(p) + p = q
    if q <= 0:
        return 0.0
    f = lambda p: -p * math.log2(p) - (1 - p) * math.log2(1 - p) + p - q
    return brentq(f, 1e-15, 2 / 3)


def frame_layout(n: int, params: StcParams) -> tuple[int, int, int]:
    """``(frame_bits, bit2_layer_bits, lsb_layer_bits)`` for ``n`` cover pixels.

    The split follows uniform-cost ternary embedding at rate ``q``: the second
    bit flips with probability ``p/2``, so that layer carries ``h2(p/2)`` bits
    per pixel and the LSB layer the remainder.
    """
    M = int(math.floor(params.payload_q * n))
    if M == 0:
        return 0, 0, 0
    q = M / n
    share = float(binary_entropy(_uniform_change_rate(q) / 2)) / q
    m_bit2 = int(math.floor(M * share))
    return M, m_bit2, M - m_bit2


def header_bits(frame_bits: int) -> int:
    return max(1, frame_bits.bit_length())


def max_message_bits(n: int, params: StcParams) -> int:
    M = frame_layout(n, params)[0]
    return max(0, M - header_bits(M))


def _permutation(n, seed):
    return np.random.default_rng([seed, n, 0x5743]).permutation(n)


def _to_bits(value, width):
    return np.array([(value >> (width - 1 - k)) & 1 for k in range(width)], dtype=np.uint8)


def _from_bits(bits):
    v = 0
    for b in bits:
        v = (v << 1) | int(b)
    return v


def stc_embed(cover, costs: CostMap, message, params: StcParams = StcParams()) -> np.ndarray:
    """Embed ``message`` (a bit sequence) into ``cover`` with +-1 changes.

    Changes that would leave [0, 255] are forbidden, so a saturated pixel can
    only move inward. Wet pixels are never touched.
    """
    cover = np.asarray(cover)
    if cover.shape != costs.shape:
        raise ShapeError(f"cover {cover.shape} vs costs {costs.shape}")
    msg = np.asarray(message, dtype=np.uint8).ravel()
    if np.any(msg > 1):
        raise PayloadError("message must be a sequence of 0/1 bits")
    n = cover.size
    M, m_a, _ = frame_layout(n, params)
    cap = max(0, M - header_bits(M))
    if msg.size > cap:
        raise PayloadError(f"message of {msg.size} bits exceeds capacity {cap} at q={params.payload_q}")
    if M == 0:
        return cover.copy()
    L = header_bits(M)
    pad = np.random.default_rng([params.seed, n, 0x9AD]).integers(0, 2, M - L - msg.size)
    frame = np.concatenate([_to_bits(msg.size, L), msg, pad.astype(np.uint8)])

    perm = _permutation(n, params.seed)
    x = cover.ravel().astype(np.int64)[perm]
    rp = np.asarray(costs.rho_plus, dtype=np.float64).ravel()[perm].copy()
    rm = np.asarray(costs.rho_minus, dtype=np.float64).ravel()[perm].copy()
    rp[is_wet(rp) | (x >= 255)] = np.inf
    rm[is_wet(rm) | (x <= 0)] = np.inf

    # -1 flips the second bit of an even value, +1 that of an odd one
    odd = (x & 1).astype(bool)
    d_flip = np.where(odd, 1, -1)
    cost_flip = np.where(odd, rp, rm)
    cost_keep = np.where(odd, rm, rp)

    bit2 = (x >> 1) & 1
    a0 = np.where(bit2 == 0, 0.0, cost_flip)
    a1 = np.where(bit2 == 1, 0.0, cost_flip)
    ya, _ = embed_layer(a0, a1, frame[:m_a], params.h, seed=params.seed)
    flipped = ya != bit2

    lsb = x & 1
    # a pixel whose second bit flipped has already paid for a change that flips its LSB
    b_same = np.where(flipped, np.inf, 0.0)
    b_other = np.where(flipped, 0.0, cost_keep)
    b0 = np.where(lsb == 0, b_same, b_other)
    b1 = np.where(lsb == 1, b_same, b_other)
    yb, _ = embed_layer(b0, b1, frame[m_a:], params.h, seed=params.seed + 1)

    delta = np.where(flipped, d_flip, np.where(yb != lsb, -d_flip, 0))
    stego = np.empty(n, dtype=np.int64)
    stego[perm] = x + delta
    return stego.reshape(cover.shape).astype(np.uint8)


def extract_frame(stego, params: StcParams = StcParams()) -> np.ndarray:
    """Raw syndrome bits of both layers (header and padding included)."""
    stego = np.asarray(stego)
    n = stego.size
    M, m_a, m_b = frame_layout(n, params)
    y = stego.ravel().astype(np.int64)[_permutation(n, params.seed)]
    sa = syndrome((y >> 1) & 1, m_a, params.h, seed=params.seed)
    sb = syndrome(y & 1, m_b, params.h, seed=params.seed + 1)
    return np.concatenate([sa, sb])


def stc_extract(stego, params: StcParams = StcParams()) -> np.ndarray:
    """Recover the message bits embedded by :func:`stc_embed`.

    A mismatched ``params`` cannot be detected; it yields garbage (or a
    header that fails the length check, reported as PayloadError).
    """
    frame = extract_frame(stego, params)
    M = frame.size
    if M == 0:
        return np.zeros(0, dtype=np.uint8)
    L = header_bits(M)
    k = _from_bits(frame[:L])
    if k > M - L:
        raise PayloadError("decoded length header exceeds capacity (wrong parameters?)")
    return frame[L:L + k].copy()
