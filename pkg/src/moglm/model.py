"""Deep recurrent language model: embeddings, cell stack, dropout, softmax head.

Dropout is variational: one mask per site per layer per batch row, sampled
once per BPTT window and reused at every time step inside it, with inverted
(1/(1-rate)) scaling so evaluation simply omits the masks. The four sites:

    input_dropout        embedded tokens entering layer 1
    inter_layer_dropout  h passed upward between layers
    state_dropout        h fed into the next time step's recurrence
    output_dropout       top-layer h before the (optional) projection and head

When input_embedding_ratio >= 1 the embedding width equals the hidden size
and there is no projection; below 1 the embedding narrows to
round(ratio * hidden) and a linear projection maps the cell output back into
embedding space before the (possibly tied) output embedding produces logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import cells, numerics as nm
from .cells import CELL_KINDS, CellState
from .errors import ConfigError, DimensionError
from .numerics import ParameterSet, Rng, Tensor


@dataclass
class ModelConfig:
    depth: int
    hidden_size: int
    vocab_size: int
    input_embedding_ratio: float = 1.0
    tie_embeddings: bool = True
    cell_kind: str = "lstm"
    mogrifier_rounds: int = 0
    mogrifier_rank: int = 0
    input_dropout: float = 0.0
    inter_layer_dropout: float = 0.0
    state_dropout: float = 0.0
    output_dropout: float = 0.0

    def embedding_size(self) -> int:
        if self.input_embedding_ratio >= 1.0:
            return self.hidden_size
        return max(1, round(self.input_embedding_ratio * self.hidden_size))

    def has_projection(self) -> bool:
        return self.input_embedding_ratio < 1.0

    def validate(self) -> "ModelConfig":
        if self.cell_kind not in CELL_KINDS:
            raise ConfigError(f"cell_kind: unknown '{self.cell_kind}' (one of {CELL_KINDS})")
        if self.depth < 1:
            raise ConfigError(f"depth: must be >= 1, got {self.depth}")
        if self.hidden_size < 1 or self.vocab_size < 1:
            raise ConfigError("hidden_size and vocab_size must be >= 1")
        if self.input_embedding_ratio < 0:
            raise ConfigError("input_embedding_ratio: must be >= 0")
        if self.mogrifier_rounds < 0:
            raise ConfigError("mogrifier_rounds: must be >= 0")
        for name in ("input_dropout", "inter_layer_dropout", "state_dropout",
                     "output_dropout"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name}: must be in [0, 1), got {v}")
        return self


@dataclass
class DropoutMasks:
    """Per-window masks; ``None`` stands for an all-ones (rate 0) mask."""

    input: Tensor | None = None
    inter: list = field(default_factory=list)   # depth-1 entries
    state: list = field(default_factory=list)   # depth entries
    output: Tensor | None = None


def sample_masks(config: ModelConfig, batch_size: int, rng: Rng, dtype,
                 rate_scale: float = 1.0) -> DropoutMasks:
    """Fresh mask set for one window; entries are 0 or 1/(1-rate)."""

    def mk(rate: float, width: int) -> Tensor | None:
        rate = rate * rate_scale
        if rate == 0.0:
            return None
        if not 0.0 < rate < 1.0:
            raise ConfigError(f"scaled dropout rate {rate} outside [0, 1)")
        keep = rng.random((batch_size, width)) >= rate
        return nm.constant(keep.astype(dtype) / np.asarray(1.0 - rate, dtype=dtype))

    e, n, d = config.embedding_size(), config.hidden_size, config.depth
    return DropoutMasks(
        input=mk(config.input_dropout, e),
        inter=[mk(config.inter_layer_dropout, n) for _ in range(d - 1)],
        state=[mk(config.state_dropout, n) for _ in range(d)],
        output=mk(config.output_dropout, n),
    )


def _masked(x: Tensor, mask: Tensor | None) -> Tensor:
    return x if mask is None else nm.hadamard(x, mask)


@dataclass
class Logits:
    """Unnormalized scores for one window, one (B, V) tensor per time step."""

    steps: list

    def array(self) -> np.ndarray:
        return np.stack([t.data for t in self.steps])


def embed(tokens: np.ndarray, table: Tensor, mask: Tensor | None = None) -> list:
    """Row lookups for a (T, B) id matrix, input mask applied at every step."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be (T, B), got {tokens.shape}")
    return [_masked(nm.embedding_lookup(table, tokens[t]), mask)
            for t in range(tokens.shape[0])]


# ---------------------------------------------------------------------------
# Parameter registry. Shapes are enumerated separately from allocation so the
# budget search never materializes candidate models.


def _cell_shapes(kind: str, m: int, n: int, rounds: int, rank: int):
    shapes = []
    if kind in ("mogrifier", "mogrifier_no_zigzag"):
        for i in range(1, rounds + 1):
            rows, cols = (m, n) if i % 2 == 1 else (n, m)
            prefix = f"q{i}" if i % 2 == 1 else f"r{i}"
            if rank <= 0:
                shapes.append((f"{prefix}_full", (rows, cols)))
            else:
                shapes.append((f"{prefix}_left", (rows, rank)))
                shapes.append((f"{prefix}_right", (rank, cols)))
    elif kind == "mlstm":
        shapes.append(("wmx", (n, m)))
        shapes.append(("wmh", (n, n)))
    elif kind != "lstm":
        raise ConfigError(f"unknown cell kind '{kind}'")
    for gate in ("f", "i", "j", "o"):
        shapes.append((f"w{gate}x", (n, m)))
        shapes.append((f"w{gate}h", (n, n)))
    for gate in ("f", "i", "j", "o"):
        shapes.append((f"b{gate}", (n,)))
    return shapes


def registry_shapes(config: ModelConfig, with_head: bool = True):
    """(name, shape) for every parameter, in allocation order."""
    e, n = config.embedding_size(), config.hidden_size
    shapes = [("embedding", (config.vocab_size, e))]
    for layer in range(config.depth):
        m = e if layer == 0 else n
        for name, shp in _cell_shapes(config.cell_kind, m, n,
                                      config.mogrifier_rounds, config.mogrifier_rank):
            shapes.append((f"layer{layer}/{name}", shp))
    if with_head:
        if config.has_projection():
            shapes.append(("projection", (e, n)))
        if not config.tie_embeddings:
            out_width = e if config.has_projection() else n
            shapes.append(("output_embedding", (config.vocab_size, out_width)))
        shapes.append(("output_bias", (config.vocab_size,)))
    return shapes


def parameter_count(config: ModelConfig, with_head: bool = True) -> int:
    """Exact number of trainable scalars in the registry."""
    config.validate()
    return sum(int(np.prod(shape)) for _, shape in registry_shapes(config, with_head))


def size_to_budget(budget: int, config: ModelConfig) -> int:
    """Largest hidden size whose parameter count stays within ``budget``."""

    def count(n: int) -> int:
        cfg = ModelConfig(**{**config.__dict__, "hidden_size": n})
        return parameter_count(cfg)

    if budget < 1 or count(1) > budget:
        raise ConfigError(f"parameter budget {budget} below the minimal model")
    lo, hi = 1, 2
    while count(hi) <= budget:
        lo, hi = hi, hi * 2
    while hi - lo > 1:  # count(lo) <= budget < count(hi)
        mid = (lo + hi) // 2
        if count(mid) <= budget:
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------------------


class LanguageModel:
    """Cell stack plus embeddings and head, owning a named ParameterSet.

    ``with_head=False`` builds an encoder-only tower (used by the reverse-copy
    benchmark) that exposes states but produces no logits.
    """

    def __init__(self, config: ModelConfig, rng: Rng, dtype=np.float32,
                 with_head: bool = True):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.with_head = with_head
        self.params = ParameterSet()
        init = rng.substream("init")
        e, n, v = config.embedding_size(), config.hidden_size, config.vocab_size

        bound = math.sqrt(1.0 / e)
        self.embedding = self.params.add(
            "embedding", nm.parameter(init.uniform(-bound, bound, (v, e), dtype=self.dtype)))

        self.layers = []
        for layer in range(config.depth):
            m = e if layer == 0 else n
            w = cells.init_cell(config.cell_kind, m, n, init.substream(f"layer{layer}"),
                                dtype=self.dtype, rounds=config.mogrifier_rounds,
                                rank=config.mogrifier_rank)
            for name, t in w.named_tensors():
                self.params.add(f"layer{layer}/{name}", t)
            self.layers.append(w)

        self.projection = None
        self.output_embedding = None
        self.output_bias = None
        if with_head:
            if config.has_projection():
                pb = math.sqrt(1.0 / n)
                self.projection = self.params.add(
                    "projection", nm.parameter(init.uniform(-pb, pb, (e, n), dtype=self.dtype)))
            if not config.tie_embeddings:
                width = e if config.has_projection() else n
                ob = math.sqrt(1.0 / width)
                self.output_embedding = self.params.add(
                    "output_embedding",
                    nm.parameter(init.uniform(-ob, ob, (v, width), dtype=self.dtype)))
            self.output_bias = self.params.add(
                "output_bias", nm.parameter(np.zeros(v, dtype=self.dtype)))

        expected = [name for name, _ in registry_shapes(config, with_head)]
        assert self.params.names() == expected, "registry drift"

    def initial_state(self, batch_size: int) -> list[CellState]:
        n = self.config.hidden_size
        return [CellState(c=nm.constant(np.zeros((batch_size, n), dtype=self.dtype)),
                          h=nm.constant(np.zeros((batch_size, n), dtype=self.dtype)))
                for _ in range(self.config.depth)]

    @staticmethod
    def detach_states(states: list[CellState]) -> list[CellState]:
        """Cut the tape at a window boundary (BPTT truncation)."""
        return [CellState(c=nm.constant(s.c.data), h=nm.constant(s.h.data)) for s in states]

    def output_matrix(self) -> Tensor:
        return self.embedding if self.config.tie_embeddings else self.output_embedding

    def forward_window(self, tokens: np.ndarray, states: list[CellState],
                       masks: DropoutMasks | None = None):
        """One window of time steps; returns (Logits, carried states).

        ``tokens`` is (T, B). States must match the depth and batch. With
        ``with_head=False`` the Logits steps list is empty.
        """
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise DimensionError(f"tokens must be (T, B), got shape {tokens.shape}")
        T, B = tokens.shape
        if T == 0:
            raise DimensionError("zero-length window")
        if len(states) != self.config.depth:
            raise DimensionError(
                f"got {len(states)} layer states for depth {self.config.depth}")
        for s in states:
            if s.h.shape != (B, self.config.hidden_size):
                raise DimensionError(
                    f"state shape {s.h.shape} incompatible with batch {B}")
        if masks is None:
            masks = DropoutMasks(inter=[None] * (self.config.depth - 1),
                                 state=[None] * self.config.depth)

        step_logits = []
        states = list(states)
        for t in range(T):
            x = _masked(nm.embedding_lookup(self.embedding, tokens[t]), masks.input)
            for layer, w in enumerate(self.layers):
                prev = states[layer]
                h_in = _masked(prev.h, masks.state[layer])
                out = cells.cell_forward(self.config.cell_kind, x,
                                         CellState(c=prev.c, h=h_in), w)
                states[layer] = out
                x = out.h
                if layer < self.config.depth - 1:
                    x = _masked(x, masks.inter[layer])
            if self.with_head:
                top = _masked(x, masks.output)
                if self.projection is not None:
                    top = nm.affine(self.projection, top)
                step_logits.append(nm.affine(self.output_matrix(), top, self.output_bias))
        return Logits(step_logits), states


def loss(logits: Logits, targets: np.ndarray, temperature: float = 1.0) -> Tensor:
    """Mean cross-entropy in nats per token over a (T, B) target matrix."""
    if temperature <= 0:
        raise ConfigError(f"temperature: must be > 0, got {temperature}")
    targets = np.asarray(targets)
    if targets.ndim != 2 or targets.shape[0] != len(logits.steps):
        raise DimensionError(
            f"targets {targets.shape} incompatible with {len(logits.steps)} logit steps")
    total = None
    for t, step in enumerate(logits.steps):
        step_loss = nm.cross_entropy(step, targets[t], temperature)
        total = step_loss if total is None else nm.add(total, step_loss)
    return nm.scale(total, 1.0 / len(logits.steps))


def metrics(nats: float) -> dict:
    """Cross-entropy conversions: perplexity = e^nats, bpc = nats / ln 2."""
    return {"perplexity": math.exp(nats), "bits_per_character": nats / math.log(2.0)}
