"""The solubility regression network.

Composition, per molecule batch: one graph-convolution layer lifts 92-dim
node features to the working width, a pre-norm transformer encoder mixes
node states with attention masked to each molecule, a single-layer LSTM
walks the atoms in SMILES order, and mean pooling plus a two-layer MLP
produce one prediction per molecule (in normalized label space).

Molecules are batched block-diagonally: node features are concatenated,
edge indices offset, and a ``graph_id`` vector tracks membership.  The
attention mask guarantees zero weight across molecule boundaries, so a
batch prediction equals the molecule's single-graph prediction.

Also owns the ``SOLGRAPH-CKPT v1`` checkpoint format: a sorted key=value
config document, named parameter blocks, and a trailing CRC-32 over all
float bytes.  Round-trips are bit-exact.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field, fields
from typing import BinaryIO, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SplitRng, Tape, Tensor
from .featurize import MoleculeGraph, NODE_FEATURE_DIM

__all__ = [
    "ModelConfig",
    "ModelParams",
    "Batch",
    "EmptyGraph",
    "make_batch",
    "normalized_adjacency",
    "gcn_forward",
    "attention",
    "transformer_block",
    "transformer_encode",
    "lstm_forward",
    "pool_and_head",
    "model_forward",
    "save_checkpoint",
    "load_checkpoint",
]

_CKPT_MAGIC = b"SOLGRAPH-CKPT v1\n"


class EmptyGraph(ValueError):
    def __init__(self) -> None:
        super().__init__("a graph with zero atoms cannot be batched or pooled")


@dataclass
class ModelConfig:
    """Hyperparameters of the network.

    ``lstm_hidden`` defaults to ``hidden_dim`` when left at None.  The
    working width must divide evenly into attention heads.
    """

    in_dim: int = NODE_FEATURE_DIM
    hidden_dim: int = 128
    transformer_depth: int = 6
    heads: int = 8
    mlp_dim: int = 256
    dropout: float = 0.2519
    lstm_hidden: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lstm_hidden is None:
            self.lstm_hidden = self.hidden_dim
        extents = (self.in_dim, self.hidden_dim, self.transformer_depth,
                   self.heads, self.mlp_dim, self.lstm_hidden)
        if any(int(x) != x or x <= 0 for x in extents):
            raise ValueError(f"all extents must be positive integers, got {extents}")
        if self.hidden_dim % self.heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads


def _glorot(rng: SplitRng, shape: tuple[int, int]) -> np.ndarray:
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(shape, -bound, bound).astype(np.float32)


class ModelParams:
    """All learnable arrays, keyed by name, plus the config that shaped them."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        self.arrays = arrays

    @classmethod
    def init(cls, config: ModelConfig) -> "ModelParams":
        """Deterministic initialization from the config seed.

        Matrices are Glorot-uniform; biases are zero except the LSTM
        forget-gate slice, which starts at one; layer-norm gains start at one.
        """
        rng = SplitRng(config.seed)
        h, m, L = config.hidden_dim, config.mlp_dim, config.lstm_hidden
        arrays: dict[str, np.ndarray] = {}

        arrays["gcn_weight"] = _glorot(rng, (config.in_dim, h))
        arrays["gcn_bias"] = np.zeros(h, dtype=np.float32)

        for layer in range(config.transformer_depth):
            p = f"t{layer:02d}_"
            arrays[p + "ln1_gain"] = np.ones(h, dtype=np.float32)
            arrays[p + "ln1_bias"] = np.zeros(h, dtype=np.float32)
            for name in ("wq", "wk", "wv", "wo"):
                arrays[p + name] = _glorot(rng, (h, h))
            arrays[p + "ln2_gain"] = np.ones(h, dtype=np.float32)
            arrays[p + "ln2_bias"] = np.zeros(h, dtype=np.float32)
            arrays[p + "ff1"] = _glorot(rng, (h, m))
            arrays[p + "ff2"] = _glorot(rng, (m, h))

        arrays["lstm_wx"] = _glorot(rng, (h, 4 * L))
        arrays["lstm_wh"] = _glorot(rng, (L, 4 * L))
        bias = np.zeros(4 * L, dtype=np.float32)
        bias[L : 2 * L] = 1.0  # forget gate open at the start of training
        arrays["lstm_bias"] = bias

        arrays["head_w1"] = _glorot(rng, (L, m))
        arrays["head_b1"] = np.zeros(m, dtype=np.float32)
        arrays["head_w2"] = _glorot(rng, (m, 1))
        arrays["head_b2"] = np.zeros(1, dtype=np.float32)
        return cls(config, arrays)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def wrap(self, tape: Tape) -> dict[str, Tensor]:
        """Wrap every array as a gradient-tracked tensor on the given tape."""
        return {k: tape.tensor(v, requires_grad=True) for k, v in self.arrays.items()}

    def num_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())


@dataclass
class Batch:
    """Block-diagonal concatenation of molecule graphs."""

    node_features: np.ndarray   # (N, in_dim) float32
    edge_index: np.ndarray      # (2, 2E) int64, indices offset per graph
    graph_id: np.ndarray        # (N,) int64, non-decreasing
    counts: np.ndarray          # (G,) int64 atoms per graph
    offsets: np.ndarray         # (G,) int64 first-node index per graph
    labels: np.ndarray | None = None  # (G,) float32
    _mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def num_graphs(self) -> int:
        return len(self.counts)

    @property
    def same_graph_mask(self) -> np.ndarray:
        """Boolean (N, N): true where both nodes belong to the same molecule."""
        if self._mask is None:
            self._mask = self.graph_id[:, None] == self.graph_id[None, :]
        return self._mask


def make_batch(graphs: Sequence[MoleculeGraph]) -> Batch:
    if not graphs:
        raise EmptyGraph()
    if any(g.num_atoms == 0 for g in graphs):
        raise EmptyGraph()
    counts = np.array([g.num_atoms for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    nodes = np.concatenate([g.node_features for g in graphs], axis=0)
    edges = np.concatenate(
        [g.edge_index + off for g, off in zip(graphs, offsets)], axis=1
    )
    graph_id = np.repeat(np.arange(len(graphs), dtype=np.int64), counts)
    labels = None
    if all(g.label is not None for g in graphs):
        labels = np.array([g.label for g in graphs], dtype=np.float32)
    return Batch(nodes, edges, graph_id, counts, offsets, labels)


def normalized_adjacency(batch: Batch) -> np.ndarray:
    """Dense symmetric-normalized adjacency with self-loops.

    D^{-1/2} (A + I) D^{-1/2}, block-diagonal across the batch because the
    edge list never crosses molecule boundaries.
    """
    n = batch.num_nodes
    a = np.zeros((n, n), dtype=np.float32)
    a[batch.edge_index[0], batch.edge_index[1]] = 1.0
    a += np.eye(n, dtype=np.float32)
    inv_sqrt_deg = 1.0 / np.sqrt(a.sum(axis=1))
    return a * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]


def gcn_forward(batch: Batch, params: dict[str, Tensor], tape: Tape) -> Tensor:
    """One graph convolution: h = ReLU(Â X W + b)."""
    x = tape.tensor(batch.node_features)
    a_hat = tape.tensor(normalized_adjacency(batch))
    return ad.relu(ad.add(ad.matmul(a_hat, ad.matmul(x, params["gcn_weight"])),
                          params["gcn_bias"]))


def attention(q: Tensor, k: Tensor, v: Tensor,
              mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention: softmax(QKᵀ/√d_k)V.

    ``mask`` restricts each query to positions of the same molecule; masked
    weights are exactly zero.
    """
    if q.shape != k.shape or k.shape != v.shape:
        raise ad.ShapeMismatch("attention", q.shape, k.shape)
    d_k = q.shape[1]
    scores = ad.mul(ad.matmul(q, ad.transpose(k)),
                    q.tape.tensor(1.0 / math.sqrt(d_k)))
    weights = ad.softmax_rows(scores, mask=mask)
    return ad.matmul(weights, v)


def _multi_head_attention(x: Tensor, params: dict[str, Tensor], prefix: str,
                          heads: int, mask: np.ndarray) -> Tensor:
    q = ad.matmul(x, params[prefix + "wq"])
    k = ad.matmul(x, params[prefix + "wk"])
    v = ad.matmul(x, params[prefix + "wv"])
    d = x.shape[1] // heads
    outs = [
        attention(
            ad.slice_cols(q, i * d, (i + 1) * d),
            ad.slice_cols(k, i * d, (i + 1) * d),
            ad.slice_cols(v, i * d, (i + 1) * d),
            mask=mask,
        )
        for i in range(heads)
    ]
    return ad.matmul(ad.concat(outs, axis=1), params[prefix + "wo"])


def transformer_block(x: Tensor, params: dict[str, Tensor], layer: int,
                      heads: int, mask: np.ndarray, dropout_p: float,
                      training: bool, rng: SplitRng | None) -> Tensor:
    """Pre-norm residual block: X' = X + MSA(LN(X)); out = X' + FF(LN(X'))."""
    p = f"t{layer:02d}_"
    attended = _multi_head_attention(
        ad.layer_norm(x, params[p + "ln1_gain"], params[p + "ln1_bias"]),
        params, p, heads, mask,
    )
    attended = ad.dropout(attended, dropout_p, training, rng)
    x = ad.add(x, attended)

    ff_in = ad.layer_norm(x, params[p + "ln2_gain"], params[p + "ln2_bias"])
    ff = ad.matmul(ad.relu(ad.matmul(ff_in, params[p + "ff1"])), params[p + "ff2"])
    ff = ad.dropout(ff, dropout_p, training, rng)
    return ad.add(x, ff)


def transformer_encode(x: Tensor, params: dict[str, Tensor], config: ModelConfig,
                       mask: np.ndarray, training: bool,
                       rng: SplitRng | None) -> Tensor:
    for layer in range(config.transformer_depth):
        x = transformer_block(x, params, layer, config.heads, mask,
                              config.dropout, training, rng)
    return x


def lstm_forward(x: Tensor, batch: Batch, params: dict[str, Tensor],
                 tape: Tape) -> Tensor:
    """Run the LSTM along each molecule's atom sequence.

    Sequences are batched stepwise: at step t every molecule contributes its
    t-th atom state (the last atom again once exhausted; those outputs are
    never read, so they influence nothing).  Returns per-node hidden states
    aligned with the input node order.
    """
    g = batch.num_graphs
    L = params["lstm_wh"].shape[0]
    max_len = int(batch.counts.max())

    h = tape.tensor(np.zeros((g, L), dtype=tape.dtype))
    c = tape.tensor(np.zeros((g, L), dtype=tape.dtype))
    step_outputs: list[Tensor] = []
    for t in range(max_len):
        idx = batch.offsets + np.minimum(t, batch.counts - 1)
        x_t = ad.gather_rows(x, idx)
        z = ad.add(ad.add(ad.matmul(x_t, params["lstm_wx"]),
                          ad.matmul(h, params["lstm_wh"])),
                   params["lstm_bias"])
        i_gate = ad.sigmoid(ad.slice_cols(z, 0, L))
        f_gate = ad.sigmoid(ad.slice_cols(z, L, 2 * L))
        g_gate = ad.tanh(ad.slice_cols(z, 2 * L, 3 * L))
        o_gate = ad.sigmoid(ad.slice_cols(z, 3 * L, 4 * L))
        c = ad.add(ad.mul(f_gate, c), ad.mul(i_gate, g_gate))
        h = ad.mul(o_gate, ad.tanh(c))
        step_outputs.append(h)

    stacked = ad.concat(step_outputs, axis=0)  # (max_len * G, L)
    position = np.arange(batch.num_nodes, dtype=np.int64) - batch.offsets[batch.graph_id]
    node_rows = position * g + batch.graph_id
    return ad.gather_rows(stacked, node_rows)


def pool_and_head(x: Tensor, batch: Batch, params: dict[str, Tensor]) -> Tensor:
    """Mean-pool node states per molecule, then the MLP head.  Returns (G,)."""
    if batch.num_graphs == 0 or (batch.counts == 0).any():
        raise EmptyGraph()
    pooled = ad.segment_mean(x, batch.graph_id, batch.num_graphs)
    z = ad.relu(ad.add(ad.matmul(pooled, params["head_w1"]), params["head_b1"]))
    out = ad.add(ad.matmul(z, params["head_w2"]), params["head_b2"])
    return ad.reshape(out, (batch.num_graphs,))


def model_forward(batch: Batch, params: dict[str, Tensor], config: ModelConfig,
                tape: Tape, training: bool = False,
                rng: SplitRng | None = None) -> Tensor:
    """Full forward pass; output is in normalized label space, one per graph."""
    h = gcn_forward(batch, params, tape)
    h = transformer_encode(h, params, config, batch.same_graph_mask, training, rng)
    h = lstm_forward(h, batch, params, tape)
    return pool_and_head(h, batch, params)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _config_document(config: ModelConfig, extra: dict[str, str]) -> bytes:
    entries: dict[str, str] = {}
    for f in fields(config):
        value = getattr(config, f.name)
        entries[f.name] = repr(value) if isinstance(value, float) else str(value)
    for key, value in extra.items():
        if "=" in key or "\n" in key or "\n" in str(value):
            raise ValueError(f"invalid config entry {key!r}")
        entries[key] = str(value)
    lines = [f"{k}={entries[k]}" for k in sorted(entries)]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_config_document(doc: bytes) -> tuple[ModelConfig, dict[str, str]]:
    entries: dict[str, str] = {}
    for line in doc.decode("utf-8").splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        entries[key] = value
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in entries:
            raise ValueError(f"checkpoint config missing key {f.name!r}")
        raw = entries.pop(f.name)
        kwargs[f.name] = float(raw) if f.name == "dropout" else int(raw)
    return ModelConfig(**kwargs), entries


def save_checkpoint(path: str, params: ModelParams,
                    extra: dict[str, str] | None = None) -> None:
    """Write params to the checkpoint container (bit-exact round-trip)."""
    doc = _config_document(params.config, extra or {})
    crc = 0
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(doc)))
        fh.write(doc)
        fh.write(struct.pack("<I", len(params.arrays)))
        for name in sorted(params.arrays):
            arr = np.ascontiguousarray(params.arrays[name], dtype="<f4")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            payload = arr.tobytes()
            crc = zlib.crc32(payload, crc)
            fh.write(payload)
        fh.write(struct.pack("<I", crc & 0xFFFFFFFF))


def _read_exact(fh: BinaryIO, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ValueError(f"truncated checkpoint: wanted {count} bytes, got {len(data)}")
    return data


def load_checkpoint(path: str) -> tuple[ModelParams, dict[str, str]]:
    """Read a checkpoint; returns the params and any extra config entries."""
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"{path!r} is not a SOLGRAPH-CKPT v1 file")
        (doc_len,) = struct.unpack("<I", _read_exact(fh, 4))
        config, extra = _parse_config_document(_read_exact(fh, doc_len))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays: dict[str, np.ndarray] = {}
        crc = 0
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            payload = _read_exact(fh, 4 * int(np.prod(shape, dtype=np.int64)))
            crc = zlib.crc32(payload, crc)
            arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        (stored,) = struct.unpack("<I", _read_exact(fh, 4))
        if stored != crc & 0xFFFFFFFF:
            raise ValueError(
                f"checkpoint checksum mismatch: stored {stored:#010x}, "
                f"computed {crc & 0xFFFFFFFF:#010x}"
            )
    return ModelParams(config, arrays), extra
