"""The message passing network: species embedding, interleaved edge updates,
gated message function, residual state transitions, and a two-layer readout.

Disabling edge updates leaves edge states equal to their radial-basis
features at every step, which reduces the network to the plain
continuous-filter architecture and allows a controlled comparison between the
two models.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, shifted_softplus_array
from .errors import DataError, ShapeError
from .graphs import MolecularGraph, RbfConfig, rbf_expand


@dataclass(frozen=True)
class ModelConfig:
    """Architecture switches. ``n_species`` is the embedding-table size;
    rows are indexed directly by atomic number."""

    hidden_dim: int = 64
    steps: int = 3
    edge_updates: bool = True
    message_agg: str = "sum"
    readout_agg: str = "sum"
    rbf: RbfConfig = field(default_factory=RbfConfig)
    n_species: int = 104

    def __post_init__(self):
        if self.hidden_dim < 1 or self.steps < 1:
            raise ValueError("hidden_dim and steps must be >= 1")
        if self.message_agg not in ("sum", "mean"):
            raise ValueError(f"bad message_agg {self.message_agg!r}")
        if self.readout_agg not in ("sum", "mean"):
            raise ValueError(f"bad readout_agg {self.readout_agg!r}")

    @property
    def message_edge_dim(self) -> int:
        """Width of the edge state consumed by the message function. Edge
        updates run before each message pass, so with them enabled the width
        is the hidden dimension at every step."""
        return self.hidden_dim if self.edge_updates else self.rbf.n_features

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["rbf"] = RbfConfig(**obj["rbf"])
        return cls(**obj)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every trainable array, in a fixed order."""
    c = config.hidden_dim
    f = config.rbf.n_features
    shapes: dict[str, tuple[int, ...]] = {"embedding": (config.n_species, c)}
    for t in range(config.steps):
        if config.edge_updates:
            in_dim = 2 * c + (f if t == 0 else c)
            shapes[f"edge_w1.{t}"] = (in_dim, 2 * c)
            shapes[f"edge_b1.{t}"] = (1, 2 * c)
            shapes[f"edge_w2.{t}"] = (2 * c, c)
            shapes[f"edge_b2.{t}"] = (1, c)
        e_dim = config.message_edge_dim
        shapes[f"msg_w1.{t}"] = (c, c)
        shapes[f"msg_w2.{t}"] = (e_dim, c)
        shapes[f"msg_b2.{t}"] = (1, c)
        shapes[f"msg_w3.{t}"] = (c, c)
        shapes[f"msg_b3.{t}"] = (1, c)
        shapes[f"trans_w4.{t}"] = (c, c)
        shapes[f"trans_b4.{t}"] = (1, c)
        shapes[f"trans_w5.{t}"] = (c, c)
        shapes[f"trans_b5.{t}"] = (1, c)
    shapes["readout_w6"] = (c, c)
    shapes["readout_b6"] = (1, c)
    shapes["readout_w7"] = (c, 1)
    shapes["readout_b7"] = (1, 1)
    return shapes


class ModelParams:
    """All trainable arrays, keyed by name."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        expected = parameter_shapes(config)
        if set(arrays) != set(expected):
            missing = set(expected) - set(arrays)
            extra = set(arrays) - set(expected)
            raise ShapeError(f"parameter names mismatch: missing={missing}, extra={extra}")
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise ShapeError(
                    f"parameter {name}: expected shape {shape}, got {arrays[name].shape}"
                )
            if not np.isfinite(arrays[name]).all():
                raise ShapeError(f"parameter {name}: non-finite entries")
        self.config = config
        self.arrays = {name: np.asarray(arrays[name], dtype=np.float64) for name in expected}

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in parameter_shapes(config).items():
            if _is_bias(name):
                arrays[name] = np.zeros(shape)
            else:
                bound = np.sqrt(6.0 / (shape[0] + shape[1]))
                arrays[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config, arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def parameter_count(self) -> int:
        return sum(a.size for a in self.arrays.values())


def _is_bias(name: str) -> bool:
    short = name.rsplit(".", 1)[0]
    return short.split("_")[-1].startswith("b")


def _forward_tensors(tape: Tape, graph: MolecularGraph, params: ModelParams,
                     config: ModelConfig, trace: dict | None = None):
    """Record the full forward pass on ``tape``; returns (prediction, leaves)."""
    if graph.node_species.max(initial=0) >= config.n_species:
        raise DataError(
            f"species index {int(graph.node_species.max())} outside embedding "
            f"table of size {config.n_species}"
        )
    if graph.edge_features.shape[1] != config.rbf.n_features:
        raise ShapeError("graph rbf features do not match the model rbf config")
    leaves = {name: tape.leaf(arr, name) for name, arr in params.arrays.items()}
    src, dst = graph.edge_src, graph.edge_dst
    n_nodes = graph.n_nodes

    h = ad.gather_rows(leaves["embedding"], graph.node_species)
    e = tape.leaf(graph.edge_features, "edge_features")
    if trace is not None:
        trace["h"] = [h.data.copy()]
        trace["e"] = [e.data.copy()]
    for t in range(config.steps):
        if config.edge_updates:
            stacked = ad.concat(ad.gather_rows(h, dst), ad.gather_rows(h, src), e)
            hidden = ad.shifted_softplus(
                ad.add(ad.matmul(stacked, leaves[f"edge_w1.{t}"]), leaves[f"edge_b1.{t}"])
            )
            e = ad.shifted_softplus(
                ad.add(ad.matmul(hidden, leaves[f"edge_w2.{t}"]), leaves[f"edge_b2.{t}"])
            )
        gate = ad.shifted_softplus(
            ad.add(ad.matmul(e, leaves[f"msg_w2.{t}"]), leaves[f"msg_b2.{t}"])
        )
        filt = ad.shifted_softplus(
            ad.add(ad.matmul(gate, leaves[f"msg_w3.{t}"]), leaves[f"msg_b3.{t}"])
        )
        sender = ad.matmul(ad.gather_rows(h, src), leaves[f"msg_w1.{t}"])
        messages = ad.mul(sender, filt)
        m = ad.segment_reduce(messages, dst, n_nodes, config.message_agg)
        pre = ad.shifted_softplus(
            ad.add(ad.matmul(m, leaves[f"trans_w4.{t}"]), leaves[f"trans_b4.{t}"])
        )
        h = ad.add(
            h, ad.add(ad.matmul(pre, leaves[f"trans_w5.{t}"]), leaves[f"trans_b5.{t}"])
        )
        if trace is not None:
            trace["h"].append(h.data.copy())
            trace["e"].append(e.data.copy())
    atom_hidden = ad.shifted_softplus(
        ad.add(ad.matmul(h, leaves["readout_w6"]), leaves["readout_b6"])
    )
    per_atom = ad.add(ad.matmul(atom_hidden, leaves["readout_w7"]), leaves["readout_b7"])
    y = ad.segment_reduce(per_atom, graph.segment_ids, graph.n_graphs, config.readout_agg)
    if trace is not None:
        trace["per_atom"] = per_atom.data.copy()
        trace["y"] = y.data.copy()
    return y, leaves


def predict(graph: MolecularGraph, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Per-graph predictions, one value per batched graph."""
    tape = Tape()
    y, _ = _forward_tensors(tape, graph, params, config)
    return y.data.ravel().copy()


def forward_trace(graph: MolecularGraph, params: ModelParams, config: ModelConfig) -> dict:
    """Forward pass that also returns per-step node/edge states and per-atom
    readout contributions (keys: h, e, per_atom, y)."""
    trace: dict = {}
    tape = Tape()
    _forward_tensors(tape, graph, params, config, trace)
    return trace


def loss_and_gradients(
    graph: MolecularGraph,
    params: ModelParams,
    config: ModelConfig,
    targets: np.ndarray,
    check_finite: bool = False,
):
    """Mean squared error over the batch and its parameter gradients."""
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    if t.shape[0] != graph.n_graphs:
        raise ShapeError(f"{t.shape[0]} targets for {graph.n_graphs} graphs")
    tape = Tape(check_finite=check_finite)
    y, leaves = _forward_tensors(tape, graph, params, config)
    diff = ad.sub(y, tape.leaf(t, "targets"))
    loss = ad.scale(ad.sum_all(ad.mul(diff, diff)), 1.0 / graph.n_graphs)
    tape.backward(loss)
    grads = {name: leaf.grad for name, leaf in leaves.items()}
    return float(loss.data[0, 0]), grads, y.data.ravel().copy()


@dataclass
class FilterTable:
    """First-step filter response per (receiver, sender, distance) point.

    ``values`` has shape (n_pairs, n_distances, n_filters); ``deviations`` is
    values minus the pair-averaged filter at each (distance, filter) point.
    """

    receivers: np.ndarray
    senders: np.ndarray
    distances: np.ndarray
    values: np.ndarray
    deviations: np.ndarray

    @property
    def n_filters(self) -> int:
        return self.values.shape[2]

    def sorted_filter_order(self) -> np.ndarray:
        """Filters ordered by their deviation at 1 Angstrom for the H->H pair
        (falls back to natural order when that pair or distance is absent)."""
        pair = np.flatnonzero((self.receivers == 1) & (self.senders == 1))
        if len(pair) == 0 or len(self.distances) == 0:
            return np.arange(self.n_filters)
        d_idx = int(np.argmin(np.abs(self.distances - 1.0)))
        key = self.deviations[pair[0], d_idx, :]
        return np.argsort(key, kind="stable")

    def write_csv(self, path) -> None:
        order = self.sorted_filter_order()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("receiver_Z,sender_Z,distance,filter_index,value,deviation\n")
            for rank, c in enumerate(order):
                for p in range(len(self.receivers)):
                    for d in range(len(self.distances)):
                        fh.write(
                            f"{self.receivers[p]},{self.senders[p]},"
                            f"{self.distances[d]!r},{rank},"
                            f"{self.values[p, d, c]!r},{self.deviations[p, d, c]!r}\n"
                        )


def export_filters(
    params: ModelParams,
    config: ModelConfig,
    d_grid,
    species_pairs,
) -> FilterTable:
    """Evaluate the first-step filter-generating function on a distance grid.

    With edge updates the first edge state depends on both species through the
    embeddings; without them the filter is species-independent and every pair
    row is identical.
    """
    d_grid = np.asarray(d_grid, dtype=np.float64)
    pairs = [(int(zv), int(zw)) for zv, zw in species_pairs]
    for zv, zw in pairs:
        if not (0 < zv < config.n_species and 0 < zw < config.n_species):
            raise DataError(f"species pair ({zv}, {zw}) outside embedding table")
    feats = rbf_expand(d_grid, config.rbf)
    g = shifted_softplus_array
    values = np.empty((len(pairs), len(d_grid), config.hidden_dim))
    emb = params["embedding"]
    for p, (zv, zw) in enumerate(pairs):
        if config.edge_updates:
            hv = np.tile(emb[zv], (len(d_grid), 1))
            hw = np.tile(emb[zw], (len(d_grid), 1))
            stacked = np.concatenate([hv, hw, feats], axis=1)
            hidden = g(stacked @ params["edge_w1.0"] + params["edge_b1.0"])
            e0 = g(hidden @ params["edge_w2.0"] + params["edge_b2.0"])
        else:
            e0 = feats
        gate = g(e0 @ params["msg_w2.0"] + params["msg_b2.0"])
        values[p] = g(gate @ params["msg_w3.0"] + params["msg_b3.0"])
    deviations = values - values.mean(axis=0, keepdims=True)
    return FilterTable(
        receivers=np.array([p[0] for p in pairs]),
        senders=np.array([p[1] for p in pairs]),
        distances=d_grid,
        values=values,
        deviations=deviations,
    )


_CKPT_MAGIC = b"EGCK"
_CKPT_VERSION = 1


def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    """Versioned container: JSON header (config + extras), then named
    shape-prefixed little-endian float64 arrays."""
    header = json.dumps(
        {"version": _CKPT_VERSION, "model": params.config.to_dict(), "extra": extra or {}}
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(params.arrays)))
        for name, arr in params.arrays.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        config = ModelConfig.from_dict(header["model"])
        (n_arrays,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy()
    return ModelParams(config, arrays), header.get("extra", {})
