"""Recurrent cell variants: LSTM, Mogrifier, no-zigzag Mogrifier, mLSTM.

The Mogrifier interleaves gate updates of the cell input x and the previous
output h_prev before the ordinary LSTM computation:

    x^i      = 2 sigmoid(Q^i h_prev^{i-1}) * x^{i-2}        (odd rounds)
    h_prev^i = 2 sigmoid(R^i x^{i-1})      * h_prev^{i-2}   (even rounds)

with x^{-1} = x and h_prev^0 = h_prev; the highest-indexed x and h_prev feed
the LSTM. Zero rounds is exactly the LSTM, and because the sigmoid is doubled,
all-zero gating matrices are exactly the identity as well. The gating matrices
may be stored factored (left @ right with inner dimension k) and are applied
right-factor-first so the full matrix is never materialized.

All cell functions accept a single vector input (shape (m,)) or a row-batched
matrix (shape (B, m)); states follow the same convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DimensionError
from .numerics import Tensor

CELL_KINDS = ("lstm", "mogrifier", "mogrifier_no_zigzag", "mlstm")


@dataclass
class CellState:
    c: Tensor
    h: Tensor


@dataclass
class LstmWeights:
    """Gate parameters of a plain LSTM with input size m and state size n."""

    m: int
    n: int
    wfx: Tensor
    wfh: Tensor
    wix: Tensor
    wih: Tensor
    wjx: Tensor
    wjh: Tensor
    wox: Tensor
    woh: Tensor
    bf: Tensor
    bi: Tensor
    bj: Tensor
    bo: Tensor

    def named_tensors(self):
        for name in ("wfx", "wfh", "wix", "wih", "wjx", "wjh", "wox", "woh",
                     "bf", "bi", "bj", "bo"):
            yield name, getattr(self, name)


@dataclass
class GatingMatrix:
    """One Q or R matrix, either dense or factored as left @ right."""

    full: Tensor | None = None
    left: Tensor | None = None
    right: Tensor | None = None

    def apply(self, v: Tensor) -> Tensor:
        if self.full is not None:
            return nm.affine(self.full, v)
        return nm.affine(self.left, nm.affine(self.right, v))

    def composed(self) -> Tensor:
        if self.full is not None:
            return self.full
        return compose_low_rank(self.left, self.right)

    def named_tensors(self):
        if self.full is not None:
            yield "full", self.full
        else:
            yield "left", self.left
            yield "right", self.right


@dataclass
class MogrifierWeights:
    """rounds gating matrices (alternating Q for x, R for h_prev) plus an LSTM.

    rank <= 0 selects the dense parameterization; otherwise each matrix is a
    rank-``rank`` product of two factors.
    """

    rounds: int
    rank: int
    q: list[GatingMatrix] = field(default_factory=list)  # odd rounds, gate x
    r: list[GatingMatrix] = field(default_factory=list)  # even rounds, gate h
    inner: LstmWeights = None

    def named_tensors(self):
        for i in range(1, self.rounds + 1):
            gm = self.q[i // 2] if i % 2 == 1 else self.r[i // 2 - 1]
            prefix = f"q{i}" if i % 2 == 1 else f"r{i}"
            for sub, t in gm.named_tensors():
                yield f"{prefix}_{sub}", t
        yield from self.inner.named_tensors()


@dataclass
class MlstmWeights:
    """Multiplicative LSTM: h_prev is replaced by (Wmx x) * (Wmh h_prev)."""

    wmx: Tensor
    wmh: Tensor
    inner: LstmWeights = None

    def named_tensors(self):
        yield "wmx", self.wmx
        yield "wmh", self.wmh
        yield from self.inner.named_tensors()


# ---------------------------------------------------------------------------
# Initialization. Uniform +-sqrt(1/fan_in) everywhere; the forget-gate bias
# starts at +1 and the doubled sigmoid keeps random gating matrices near
# identity, so no special scaling is needed for Q/R.


def _uniform(rng: nm.Rng, fan_in: int, shape, dtype) -> Tensor:
    bound = float(np.sqrt(1.0 / max(fan_in, 1)))
    return nm.parameter(rng.uniform(-bound, bound, shape=shape, dtype=dtype))


def init_lstm(m: int, n: int, rng: nm.Rng, dtype=np.float32) -> LstmWeights:
    def wx():
        return _uniform(rng, m, (n, m), dtype)

    def wh():
        return _uniform(rng, n, (n, n), dtype)

    return LstmWeights(
        m=m, n=n,
        wfx=wx(), wfh=wh(), wix=wx(), wih=wh(),
        wjx=wx(), wjh=wh(), wox=wx(), woh=wh(),
        bf=nm.parameter(np.ones(n, dtype=dtype)),
        bi=nm.parameter(np.zeros(n, dtype=dtype)),
        bj=nm.parameter(np.zeros(n, dtype=dtype)),
        bo=nm.parameter(np.zeros(n, dtype=dtype)),
    )


def _init_gating(rows: int, cols: int, rank: int, rng: nm.Rng, dtype) -> GatingMatrix:
    if rank <= 0:
        return GatingMatrix(full=_uniform(rng, cols, (rows, cols), dtype))
    return GatingMatrix(
        left=_uniform(rng, rank, (rows, rank), dtype),
        right=_uniform(rng, cols, (rank, cols), dtype),
    )


def init_mogrifier(m: int, n: int, rounds: int, rank: int, rng: nm.Rng,
                   dtype=np.float32) -> MogrifierWeights:
    if rounds < 0:
        raise ConfigError(f"mogrifier_rounds must be >= 0, got {rounds}")
    q = [_init_gating(m, n, rank, rng, dtype) for _ in range((rounds + 1) // 2)]
    r = [_init_gating(n, m, rank, rng, dtype) for _ in range(rounds // 2)]
    return MogrifierWeights(rounds=rounds, rank=rank, q=q, r=r,
                            inner=init_lstm(m, n, rng, dtype))


def init_mlstm(m: int, n: int, rng: nm.Rng, dtype=np.float32) -> MlstmWeights:
    return MlstmWeights(
        wmx=_uniform(rng, m, (n, m), dtype),
        wmh=_uniform(rng, n, (n, n), dtype),
        inner=init_lstm(m, n, rng, dtype),
    )


# ---------------------------------------------------------------------------
# Forward passes


def lstm_cell(x: Tensor, state: CellState, w: LstmWeights) -> CellState:
    """f,i,o = sigmoid, j = tanh of affine sums; c = f*c_prev + i*j; h = o*tanh(c)."""
    c_prev, h_prev = state.c, state.h
    f = nm.sigmoid(nm.add(nm.affine(w.wfx, x, w.bf), nm.affine(w.wfh, h_prev)))
    i = nm.sigmoid(nm.add(nm.affine(w.wix, x, w.bi), nm.affine(w.wih, h_prev)))
    j = nm.tanh(nm.add(nm.affine(w.wjx, x, w.bj), nm.affine(w.wjh, h_prev)))
    o = nm.sigmoid(nm.add(nm.affine(w.wox, x, w.bo), nm.affine(w.woh, h_prev)))
    c = nm.add(nm.hadamard(f, c_prev), nm.hadamard(i, j))
    h = nm.hadamard(o, nm.tanh(c))
    return CellState(c=c, h=h)


def _gate(gm: GatingMatrix, v: Tensor, target: Tensor) -> Tensor:
    return nm.hadamard(nm.scale(nm.sigmoid(gm.apply(v)), 2.0), target)


def mogrify(x: Tensor, h_prev: Tensor, w: MogrifierWeights) -> tuple[Tensor, Tensor]:
    """Alternating mutual gating; returns the highest-indexed (x, h_prev).

    Round 1 updates x from h_prev, round 2 updates h_prev from the fresh x,
    and so on (the zigzag). The cell state c is never read or written here.
    """
    if w.rounds < 0:
        raise ConfigError(f"mogrifier_rounds must be >= 0, got {w.rounds}")
    cur_x, cur_h = x, h_prev
    for i in range(1, w.rounds + 1):
        if i % 2 == 1:
            cur_x = _gate(w.q[i // 2], cur_h, cur_x)
        else:
            cur_h = _gate(w.r[i // 2 - 1], cur_x, cur_h)
    return cur_x, cur_h


def mogrify_no_zigzag(x: Tensor, h_prev: Tensor, w: MogrifierWeights) -> tuple[Tensor, Tensor]:
    """Ablation: every gate reads the *original* x / h_prev, not the refined ones."""
    if w.rounds < 0:
        raise ConfigError(f"mogrifier_rounds must be >= 0, got {w.rounds}")
    cur_x, cur_h = x, h_prev
    for i in range(1, w.rounds + 1):
        if i % 2 == 1:
            cur_x = _gate(w.q[i // 2], h_prev, cur_x)
        else:
            cur_h = _gate(w.r[i // 2 - 1], x, cur_h)
    return cur_x, cur_h


def mogrifier_cell(x: Tensor, state: CellState, w: MogrifierWeights,
                   zigzag: bool = True) -> CellState:
    """LSTM applied to the mutually gated inputs; c_prev passes through untouched."""
    up = mogrify if zigzag else mogrify_no_zigzag
    x_up, h_up = up(x, state.h, w)
    return lstm_cell(x_up, CellState(c=state.c, h=h_up), w.inner)


def mlstm_cell(x: Tensor, state: CellState, w: MlstmWeights) -> CellState:
    """LSTM on (x, c_prev, (Wmx x) * (Wmh h_prev)); the two maps are unsquashed."""
    h_m = nm.hadamard(nm.affine(w.wmx, x), nm.affine(w.wmh, state.h))
    return lstm_cell(x, CellState(c=state.c, h=h_m), w.inner)


def compose_low_rank(left: Tensor, right: Tensor) -> Tensor:
    """Materialize left @ right (rank bounded by the inner dimension)."""
    if left.ndim != 2 or right.ndim != 2:
        raise DimensionError("compose_low_rank needs 2-d factors")
    if left.shape[1] != right.shape[0]:
        raise DimensionError(
            f"factor inner dimensions differ: {left.shape} @ {right.shape}")
    if left.shape[1] < 1:
        raise DimensionError("factor rank must be >= 1")
    return nm.matmul(left, right)


# ---------------------------------------------------------------------------
# Uniform dispatch used by the model assembly


def init_cell(kind: str, m: int, n: int, rng: nm.Rng, dtype=np.float32,
              rounds: int = 0, rank: int = 0):
    if kind == "lstm":
        return init_lstm(m, n, rng, dtype)
    if kind in ("mogrifier", "mogrifier_no_zigzag"):
        return init_mogrifier(m, n, rounds, rank, rng, dtype)
    if kind == "mlstm":
        return init_mlstm(m, n, rng, dtype)
    raise ConfigError(f"unknown cell kind '{kind}' (one of {CELL_KINDS})")


def cell_forward(kind: str, x: Tensor, state: CellState, weights) -> CellState:
    if kind == "lstm":
        return lstm_cell(x, state, weights)
    if kind == "mogrifier":
        return mogrifier_cell(x, state, weights, zigzag=True)
    if kind == "mogrifier_no_zigzag":
        return mogrifier_cell(x, state, weights, zigzag=False)
    if kind == "mlstm":
        return mlstm_cell(x, state, weights)
    raise ConfigError(f"unknown cell kind '{kind}' (one of {CELL_KINDS})")
