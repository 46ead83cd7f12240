"""Contrastive bi-encoder training with in-batch (and optional sampled) negatives."""
from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np

from coderag.encoder import (
    CODE, QUERY, EncoderPair, backward, forward, init_pair, pad_batch,
)
from coderag.errors import DataError

logger = logging.getLogger(__name__)

Example = tuple[Sequence[int], Sequence[int]]


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr: float = 1e-3
    epochs: int = 10
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_query_len: int = 30
    max_code_len: int = 200
    d: int = 128
    architecture: str = "fusion"     # or "mean" for the mean-pooling-only ablation
    symmetric: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 so every query has a negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.architecture not in ("fusion", "mean"):
            raise ValueError(f"unknown architecture {self.architecture!r}")

    @property
    def frozen(self) -> frozenset[str]:
        return frozenset({"w_h", "w_fuse", "beta"}) if self.architecture == "mean" else frozenset()

    @classmethod
    def from_file(cls, path: str | Path, section: str = "train") -> "TrainConfig":
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise DataError(f"cannot read config {path}")
        return cls.from_mapping(parser[section] if parser.has_section(section) else {})

    @classmethod
    def from_mapping(cls, values) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                raw = values[f.name]
                if f.type in ("bool", bool):
                    kwargs[f.name] = str(raw).lower() in ("1", "true", "yes", "on")
                else:
                    kwargs[f.name] = {"int": int, "float": float}.get(f.type, str)(raw)
        return cls(**kwargs)


# -- loss ----------------------------------------------------------------------

def _logsumexp(S: np.ndarray) -> np.ndarray:
    m = S.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(S - m).sum(axis=1, keepdims=True)))[:, 0]


def _scores(Q, C, negatives):
    S = Q @ C.T
    if negatives is not None:
        S = np.concatenate([S, np.einsum("bd,bkd->bk", Q, negatives)], axis=1)
    return S


def contrastive_loss(Q, C, negatives=None) -> float:
    """Mean over queries of -log softmax(Q_i . C_j)_i.

    ``negatives`` (B x k x d), if given, adds k extra code columns per row.
    """
    Q = np.asarray(Q, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if Q.shape != C.shape or Q.shape[0] < 2:
        raise ValueError("need aligned B x d query and code matrices with B >= 2")
    if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(C))):
        raise ValueError("non-finite embeddings")
    S = _scores(Q, C, negatives)
    B = Q.shape[0]
    return float(np.sum(_logsumexp(S) - S[np.arange(B), np.arange(B)]) / B)


def per_row_losses(Q, C) -> np.ndarray:
    S = np.asarray(Q) @ np.asarray(C).T
    return _logsumexp(S) - np.diag(S)


def _loss_grads(Q, C, negatives, symmetric: bool):
    B = Q.shape[0]
    S = _scores(Q, C, negatives)
    lse = _logsumexp(S)
    diag = S[np.arange(B), np.arange(B)]
    loss = float(np.sum(lse - diag) / B)
    P = np.exp(S - lse[:, None])
    P[np.arange(B), np.arange(B)] -= 1.0
    gS = P / B
    gQ = gS[:, :B] @ C
    gC = gS[:, :B].T @ Q
    gN = None
    if negatives is not None:
        gQ += np.einsum("bk,bkd->bd", gS[:, B:], negatives)
        gN = gS[:, B:, None] * Q[:, None, :]
    if symmetric:
        St = S[:, :B].T
        lse_t = _logsumexp(St)
        loss += float(np.sum(lse_t - diag) / B)
        Pt = np.exp(St - lse_t[:, None])
        Pt[np.arange(B), np.arange(B)] -= 1.0
        gSt = Pt / B
        gC += gSt @ Q
        gQ += gSt.T @ C
    return loss, gQ, gC, gN


# -- gradients -----------------------------------------------------------------

@dataclass
class Batch:
    query: list[list[int]]
    code: list[list[int]]
    negatives: list[list[list[int]]] | None = None   # per query, k code sequences
    skipped: int = 0


def make_batch(examples: Sequence[Example], max_query_len: int = 30, max_code_len: int = 200,
               negatives: Sequence[Sequence[Sequence[int]]] | None = None) -> Batch:
    """Truncate; drop examples whose query or code becomes empty."""
    q, c, n, skipped = [], [], [], 0
    for i, (qi, ci) in enumerate(examples):
        qi, ci = list(qi[:max_query_len]), list(ci[:max_code_len])
        negs = None
        if negatives is not None:
            negs = [list(x[:max_code_len]) for x in negatives[i]]
        if not qi or not ci or (negs is not None and any(not x for x in negs)):
            skipped += 1
            continue
        q.append(qi)
        c.append(ci)
        if negs is not None:
            n.append(negs)
    return Batch(q, c, n if negatives is not None else None, skipped)


@dataclass
class GradientSet:
    query: dict[str, np.ndarray]
    code: dict[str, np.ndarray]

    def side(self, name: str) -> dict[str, np.ndarray]:
        return self.query if name == QUERY else self.code


def _forward_all(pair: EncoderPair, batch: Batch):
    qi, qm = pad_batch(batch.query)
    Q, qcache = forward(pair.query, qi, qm, QUERY)
    code_seqs = list(batch.code)
    k = 0
    if batch.negatives is not None:
        k = len(batch.negatives[0]) if batch.negatives else 0
        if any(len(x) != k for x in batch.negatives):
            raise ValueError("every query needs the same number of negatives")
        for negs in batch.negatives:
            code_seqs.extend(negs)
    ci, cm = pad_batch(code_seqs)
    allC, ccache = forward(pair.code, ci, cm, CODE)
    B = len(batch.query)
    C = allC[:B]
    N = allC[B:].reshape(B, k, -1) if batch.negatives is not None else None
    return Q, qcache, C, N, ccache


def batch_loss(pair: EncoderPair, batch: Batch, symmetric: bool = False):
    """Loss only, computed in the parameters' own dtype."""
    Q, _, C, N, _ = _forward_all(pair, batch)
    S = _scores(Q, C, N)
    B = Q.shape[0]
    diag = S[np.arange(B), np.arange(B)]
    loss = np.sum(_logsumexp(S) - diag) / B
    if symmetric:
        loss = loss + np.sum(_logsumexp(S[:, :B].T) - diag) / B
    return loss


def compute_gradients(pair: EncoderPair, batch: Batch, symmetric: bool = False,
                      frozen: Iterable[str] = ()) -> tuple[float, GradientSet]:
    """Loss and exact gradients for every parameter of both encoders."""
    if len(batch.query) < 2:
        raise ValueError("a batch needs at least two usable examples")
    Q, qcache, C, N, ccache = _forward_all(pair, batch)
    if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(C))):
        raise FloatingPointError("non-finite embeddings in batch")
    loss, gQ, gC, gN = _loss_grads(Q, C, N, symmetric)
    g_code_out = gC if gN is None else np.concatenate([gC, gN.reshape(-1, gC.shape[1])])
    grads = GradientSet(
        query=backward(pair.query, qcache, gQ, QUERY),
        code=backward(pair.code, ccache, g_code_out, CODE),
    )
    for name in frozen:
        for side in (grads.query, grads.code):
            if name in side:
                side[name] = np.zeros_like(side[name])
    return loss, grads


def _cast_pair(pair: EncoderPair, dtype) -> EncoderPair:
    out = pair.copy()
    for p in (out.query, out.code):
        for name, t in p.tensors().items():
            setattr(p, name, t.astype(dtype))
    return out


def grad_check(pair: EncoderPair, batch: Batch, epsilon: float = 1e-5, n_coords: int = 240,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Coordinates are sampled from every tensor of both encoders; embedding
    rows are drawn from tokens present in the batch. The finite differences
    are taken in extended precision so that structurally zero gradients
    (e.g. the alignment bias, which shifts a whole score row) are not
    swamped by float64 rounding.
    """
    _, grads = compute_gradients(pair, batch)
    probe = _cast_pair(pair, np.longdouble)
    rng = np.random.default_rng(seed)
    used = {
        QUERY: np.unique(np.concatenate([np.asarray(s) for s in batch.query])),
        CODE: np.unique(np.concatenate([np.asarray(s) for s in batch.code]
                                       + [np.asarray(x) for negs in (batch.negatives or []) for x in negs])),
    }
    targets = []
    for side in (QUERY, CODE):
        for name, tensor in probe.side(side).tensors().items():
            targets.append((side, name, tensor))
    per_tensor = max(1, -(-n_coords // len(targets)))
    h = np.longdouble(epsilon)
    worst = 0.0
    for side, name, tensor in targets:
        for _ in range(per_tensor):
            if name == "E":
                idx = (int(rng.choice(used[side])), int(rng.integers(tensor.shape[1])))
            else:
                idx = tuple(int(rng.integers(s)) for s in tensor.shape)
            orig = tensor[idx]
            tensor[idx] = orig + h
            up = batch_loss(probe, batch)
            tensor[idx] = orig - h
            down = batch_loss(probe, batch)
            tensor[idx] = orig
            g_num = float((up - down) / (2 * h))
            g_an = float(grads.side(side)[name][idx])
            rel = abs(g_an - g_num) / max(abs(g_an), abs(g_num), 1e-8)
            worst = max(worst, rel)
    return worst


# -- optimizers ----------------------------------------------------------------

class Optimizer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m: dict[tuple[str, str], np.ndarray] = {}
        self.v: dict[tuple[str, str], np.ndarray] = {}

    def step(self, pair: EncoderPair, grads: GradientSet) -> None:
        cfg = self.cfg
        self.t += 1
        for side in (QUERY, CODE):
            params = pair.side(side)
            for name, p in params.tensors().items():
                if name in cfg.frozen:
                    continue
                g = grads.side(side)[name]
                if cfg.optimizer == "sgd":
                    p -= cfg.lr * g
                    continue
                key = (side, name)
                m = self.m.setdefault(key, np.zeros_like(p))
                v = self.v.setdefault(key, np.zeros_like(p))
                m *= cfg.beta1
                m += (1 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1 - cfg.beta2) * g * g
                mhat = m / (1 - cfg.beta1 ** self.t)
                vhat = v / (1 - cfg.beta2 ** self.t)
                p -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)


# -- training loop -------------------------------------------------------------

@dataclass
class TrainResult:
    pair: EncoderPair
    losses: list[float]
    skipped: int = 0

    def loss_curve(self) -> str:
        return "".join(f"{e},{l!r}\n" for e, l in enumerate(self.losses, start=1))


def train_retriever(cfg: TrainConfig, examples: Sequence[Example], query_vocab: int, code_vocab: int,
                    init: EncoderPair | None = None,
                    negatives: Sequence[Sequence[Sequence[int]]] | None = None,
                    log_every: int = 0) -> TrainResult:
    """Train a fresh (or given) encoder pair; returns params and per-epoch mean loss.

    ``negatives`` optionally supplies, per example, extra negative code
    sequences that are scored alongside the in-batch ones.
    """
    if len(examples) < cfg.batch_size:
        raise DataError(f"{len(examples)} examples is fewer than one batch of {cfg.batch_size}")
    pair = init.copy() if init is not None else init_pair(
        query_vocab, code_vocab, cfg.d, seed=cfg.seed, architecture=cfg.architecture)
    opt = Optimizer(cfg)
    rng = np.random.default_rng(cfg.seed)
    losses: list[float] = []
    skipped = 0
    n_batches = len(examples) // cfg.batch_size
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        total, count = 0.0, 0
        for bi in range(n_batches):
            idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            batch = make_batch([examples[i] for i in idx], cfg.max_query_len, cfg.max_code_len,
                               None if negatives is None else [negatives[i] for i in idx])
            skipped += batch.skipped
            if len(batch.query) < 2:
                continue
            loss, grads = compute_gradients(pair, batch, cfg.symmetric, cfg.frozen)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch + 1}, batch {bi}")
            opt.step(pair, grads)
            total += loss
            count += 1
            if log_every and bi % log_every == 0:
                logger.info("epoch %d batch %d/%d loss %.4f", epoch + 1, bi, n_batches, loss)
        losses.append(total / max(count, 1))
        logger.info("epoch %d mean loss %.4f", epoch + 1, losses[-1])
    pair.query.check_finite()
    pair.code.check_finite()
    return TrainResult(pair=pair, losses=losses, skipped=skipped)


def sample_negatives(positives: Sequence[tuple[Hashable, Hashable]], pool: Iterable[Hashable],
                     k: int = 15, seed: int = 0) -> list[tuple[Hashable, Hashable, int]]:
    """Each positive (label 1) followed by k distinct random pool targets (label 0)."""
    candidates = sorted(set(pool), key=str)
    if len(candidates) <= k:
        raise DataError(f"negative pool of {len(candidates)} is too small for k={k}")
    rng = np.random.default_rng(seed)
    out = []
    for query, target in positives:
        out.append((query, target, 1))
        if k == 0:
            continue
        allowed = [c for c in candidates if c != target]
        for j in rng.choice(len(allowed), size=k, replace=False):
            out.append((query, allowed[int(j)], 0))
    return out
