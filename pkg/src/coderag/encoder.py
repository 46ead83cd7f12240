"""Bag-of-words encoder with fused mean / max / attention pooling.

A sequence of token ids is embedded column-wise into H (d x m), pooled three
ways, and the pooled vectors are combined as

    beta * (w_mean * h_mean + w_max * h_max + w_attn * h_attn)

The code-side encoder applies an extra affine alignment layer A v + b.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np
from scipy import sparse

from coderag.errors import DataError

POOL_MODES = ("mean", "max", "attn")
QUERY, CODE = "query", "code"
PARAM_HEADER = "fenc v1"


@dataclass
class EncoderParams:
    E: np.ndarray                    # (vocab_size, d)
    w_h: np.ndarray                  # (d,)
    w_fuse: np.ndarray               # (3,) = w_mean, w_max, w_attn
    beta: np.ndarray                 # (1,)
    A: np.ndarray | None = None      # (d, d), code side only
    b: np.ndarray | None = None      # (d,)

    @property
    def d(self) -> int:
        return self.E.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.E.shape[0]

    @property
    def has_align(self) -> bool:
        return self.A is not None

    @property
    def w_mean(self) -> float:
        return float(self.w_fuse[0])

    @property
    def w_max(self) -> float:
        return float(self.w_fuse[1])

    @property
    def w_attn(self) -> float:
        return float(self.w_fuse[2])

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"E": self.E, "w_h": self.w_h, "w_fuse": self.w_fuse, "beta": self.beta}
        if self.has_align:
            out["A"] = self.A
            out["b"] = self.b
        return out

    def copy(self) -> "EncoderParams":
        return EncoderParams(**{k: (None if v is None else v.copy()) for k, v in self.__dict__.items()})

    def check_finite(self) -> None:
        for name, t in self.tensors().items():
            if not np.all(np.isfinite(t)):
                raise FloatingPointError(f"non-finite values in {name}")


def init_params(vocab_size: int, d: int = 128, *, align: bool, seed: int = 0,
                dtype=np.float64) -> EncoderParams:
    """E ~ U(-0.05, 0.05); attention starts uniform, fusion weights 1/3, identity alignment."""
    rng = np.random.default_rng(seed)
    return EncoderParams(
        E=rng.uniform(-0.05, 0.05, size=(vocab_size, d)).astype(dtype),
        w_h=np.zeros(d, dtype),
        w_fuse=np.full(3, 1.0 / 3.0, dtype),
        beta=np.ones(1, dtype),
        A=np.eye(d, dtype=dtype) if align else None,
        b=np.zeros(d, dtype) if align else None,
    )


@dataclass
class EncoderPair:
    """Docstring-side and code-side encoders trained together."""

    query: EncoderParams
    code: EncoderParams

    def copy(self) -> "EncoderPair":
        return EncoderPair(self.query.copy(), self.code.copy())

    def side(self, name: str) -> EncoderParams:
        if name == QUERY:
            return self.query
        if name == CODE:
            return self.code
        raise ValueError(f"unknown side {name!r}")


def init_pair(query_vocab: int, code_vocab: int, d: int = 128, *, seed: int = 0,
              architecture: str = "fusion") -> EncoderPair:
    """Fresh encoders. ``architecture='mean'`` gives the mean-pooling-only ablation."""
    pair = EncoderPair(
        query=init_params(query_vocab, d, align=False, seed=seed),
        code=init_params(code_vocab, d, align=architecture == "fusion", seed=seed + 1),
    )
    if architecture == "mean":
        for p in (pair.query, pair.code):
            p.w_fuse[:] = (1.0, 0.0, 0.0)
    elif architecture != "fusion":
        raise ValueError(f"unknown architecture {architecture!r}")
    return pair


# -- single-sequence operations ------------------------------------------------

def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attention_weights(H: np.ndarray, w_h: np.ndarray) -> np.ndarray:
    """gamma = softmax(w_h^T H) over the m columns of H (d x m)."""
    return softmax(np.asarray(w_h) @ np.asarray(H))


def pool(H, mode: str, w_h=None) -> np.ndarray:
    """Pool the columns of H (d x m) into one d-vector."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] == 0:
        raise ValueError("cannot pool an empty token sequence")
    if mode == "mean":
        return H.mean(axis=1)
    if mode == "max":
        return H.max(axis=1)
    if mode == "attn":
        if w_h is None:
            raise ValueError("attention pooling needs w_h")
        return H @ attention_weights(H, w_h)
    raise ValueError(f"unknown pooling mode {mode!r}")


def fuse(h_mean, h_max, h_attn, w_mean, w_max, w_attn, beta) -> np.ndarray:
    return beta * (w_mean * np.asarray(h_mean) + w_max * np.asarray(h_max) + w_attn * np.asarray(h_attn))


def _check_ids(params: EncoderParams, ids: Sequence[int]) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.size == 0:
        raise ValueError("cannot encode an empty token sequence")
    if arr.min() < 0 or arr.max() >= params.vocab_size:
        raise ValueError(f"token id out of range [0, {params.vocab_size})")
    return arr


def encode(params: EncoderParams, ids: Sequence[int], side: str = QUERY) -> np.ndarray:
    """Unnormalized embedding of one sequence.

    Ids are sorted first so the summation order (and therefore the result) is
    independent of token order.
    """
    arr = np.sort(_check_ids(params, ids))
    H = params.E[arr].T.astype(np.float64)
    v = fuse(pool(H, "mean"), pool(H, "max"), pool(H, "attn", params.w_h),
             params.w_mean, params.w_max, params.w_attn, float(params.beta[0]))
    if side == CODE and params.has_align:
        v = params.A @ v + params.b
    elif side not in (QUERY, CODE):
        raise ValueError(f"unknown side {side!r}")
    return v


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.sqrt(v @ v))
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize a zero (or non-finite) vector")
    return v / n


# -- batched forward / backward -----------------------------------------------

def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence. Returns (ids, mask)."""
    lengths = np.fromiter((len(s) for s in seqs), dtype=np.int64, count=len(seqs))
    if lengths.size == 0 or lengths.min() == 0:
        raise ValueError("empty sequence in batch")
    ids = np.full((len(seqs), int(lengths.max())), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
    mask = np.arange(ids.shape[1])[None, :] < lengths[:, None]
    return ids, mask


@dataclass
class _Cache:
    ids: np.ndarray
    mask: np.ndarray
    H: np.ndarray
    h_mean: np.ndarray
    h_max: np.ndarray
    argmax: np.ndarray
    gamma: np.ndarray
    h_attn: np.ndarray
    fused: np.ndarray      # before beta
    v: np.ndarray          # after beta, before alignment
    lengths: np.ndarray


def forward(params: EncoderParams, ids: np.ndarray, mask: np.ndarray, side: str):
    """Encode a padded batch. Returns (B x d outputs, cache for backward)."""
    # padding repeats each row's first token: max and first-argmax are unchanged
    # and no masked copy of H is needed
    ids = np.where(mask, ids, ids[:, :1])
    H = params.E[ids]                                    # B, L, d
    lengths = mask.sum(axis=1).astype(H.dtype)
    h_mean = np.einsum("bl,bld->bd", mask / lengths[:, None], H)
    argmax = H.argmax(axis=1)                            # B, d (first maximal index)
    h_max = np.take_along_axis(H, argmax[:, None, :], axis=1)[:, 0, :]
    scores = np.where(mask, H @ params.w_h, -np.inf)
    gamma = softmax(scores, axis=1)
    h_attn = np.einsum("bl,bld->bd", gamma, H)
    w = params.w_fuse
    fused = w[0] * h_mean + w[1] * h_max + w[2] * h_attn
    v = params.beta[0] * fused
    out = v @ params.A.T + params.b if (side == CODE and params.has_align) else v
    cache = _Cache(ids, mask, H, h_mean, h_max, argmax, gamma, h_attn, fused, v, lengths)
    return out, cache


def backward(params: EncoderParams, cache: _Cache, g_out: np.ndarray, side: str) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given d loss / d outputs (B x d)."""
    grads: dict[str, np.ndarray] = {}
    if side == CODE and params.has_align:
        grads["A"] = g_out.T @ cache.v
        grads["b"] = g_out.sum(axis=0)
        g_v = g_out @ params.A
    else:
        g_v = g_out
    beta = params.beta[0]
    w = params.w_fuse
    grads["beta"] = np.array([np.sum(g_v * cache.fused)])
    g_fused = beta * g_v
    grads["w_fuse"] = np.array([np.sum(g_fused * cache.h_mean),
                                np.sum(g_fused * cache.h_max),
                                np.sum(g_fused * cache.h_attn)])
    H, mask = cache.H, cache.mask
    B, L, d = H.shape
    gamma = cache.gamma
    g_attn = w[2] * g_fused
    g_gamma = np.einsum("bld,bd->bl", H, g_attn)
    g_scores = gamma * (g_gamma - (gamma * g_gamma).sum(axis=1, keepdims=True))
    grads["w_h"] = np.einsum("bl,bld->d", g_scores, H)
    # dL/dH[b, l] = alpha[b, l] * g_fused[b]       (mean + attention value path)
    #             + g_scores[b, l] * w_h            (attention score path)
    #             + max-pooling routing to the first maximal position
    alpha = w[0] * mask / cache.lengths[:, None] + w[2] * gamma
    rows = cache.ids[mask]
    cols = np.broadcast_to(np.arange(B)[:, None], (B, L))[mask]
    spread = sparse.csr_matrix((alpha[mask], (rows, cols)), shape=(params.vocab_size, B))
    g_E = np.asarray(spread @ g_fused)
    g_E += np.outer(np.bincount(rows, weights=g_scores[mask], minlength=params.vocab_size), params.w_h)
    winners = np.take_along_axis(cache.ids, cache.argmax, axis=1)      # B, d
    flat = (winners * d + np.arange(d)).ravel()
    g_E += np.bincount(flat, weights=(w[1] * g_fused).ravel(),
                       minlength=params.vocab_size * d).reshape(params.vocab_size, d)
    grads["E"] = g_E
    return grads


def encode_batch(params: EncoderParams, seqs: Sequence[Sequence[int]], side: str,
                 batch_size: int = 512) -> np.ndarray:
    """Unnormalized embeddings for many sequences (n x d)."""
    out = []
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start:start + batch_size]
        ids, mask = pad_batch(chunk)
        v, _ = forward(params, ids, mask, side)
        out.append(v)
    if not out:
        return np.zeros((0, params.d))
    return np.concatenate(out)


# -- parameter files -----------------------------------------------------------

def _write_params(fh: BinaryIO, p: EncoderParams) -> None:
    fh.write(f"{PARAM_HEADER} {p.vocab_size} {p.d} {int(p.has_align)}\n".encode())
    parts = [p.E.ravel(), p.w_h, p.w_fuse, p.beta]
    if p.has_align:
        parts += [p.A.ravel(), p.b]
    fh.write(np.concatenate(parts).astype("<f4").tobytes())


def _read_params(fh: BinaryIO) -> EncoderParams:
    header = fh.readline().decode().split()
    if header[:2] != PARAM_HEADER.split() or len(header) != 5:
        raise DataError("not an fenc v1 parameter block")
    vocab, d, has_align = int(header[2]), int(header[3]), header[4] == "1"
    n = vocab * d + d + 3 + 1 + (d * d + d if has_align else 0)
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise DataError("truncated parameter block")
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    pos = 0

    def take(k):
        nonlocal pos
        out = flat[pos:pos + k].copy()
        pos += k
        return out

    E = take(vocab * d).reshape(vocab, d)
    w_h, w_fuse, beta = take(d), take(3), take(1)
    A = b = None
    if has_align:
        A = take(d * d).reshape(d, d)
        b = take(d)
    return EncoderParams(E=E, w_h=w_h, w_fuse=w_fuse, beta=beta, A=A, b=b)


def save_pair(pair: EncoderPair, path: str | Path) -> None:
    with open(path, "wb") as fh:
        _write_params(fh, pair.query)
        _write_params(fh, pair.code)


def load_pair(path: str | Path) -> EncoderPair:
    with open(path, "rb") as fh:
        q = _read_params(fh)
        c = _read_params(fh)
    return EncoderPair(q, c)
