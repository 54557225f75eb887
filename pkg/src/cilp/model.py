"""The composite provisioning network: graph encoder, window encoder,
transformer encoder/decoder, and the per-action likelihood head.

All inputs are normalized to [0,1] by the catalog's maximum capacities; the
two heads share one encoded representation per forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ModelParams, Tensor
from .domain import DemandVector, Host, VmCatalog, VmType

HOST_FEATURES = 6  # [used cpu, used ram, used disk, cap cpu, cap ram, cap disk]


@dataclass(frozen=True)
class ModelConfig:
    width: int = 64          # transformer model width (graph + window halves)
    heads: int = 4
    depth: int = 1           # encoder and decoder block count
    slope: float = 0.01      # LeakyReLU slope in feed-forward stacks
    gat_slope: float = 0.25  # LeakyReLU slope in the graph convolution
    ffn_hidden: int = 64
    ffn_layers: int = 1      # hidden layers inside encoder/decoder FFNs
    window_hidden: int = 32
    window_layers: int = 2
    likelihood_hidden: int = 32
    likelihood_layers: int = 2

    def __post_init__(self):
        if self.width % 2 != 0:
            raise ValueError("width must be even (graph/window halves)")
        if self.width % self.heads != 0:
            raise ValueError("heads must divide width")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """The full-size configuration (slow on a desk; defaults are reduced)."""
        return cls(width=128, heads=4, depth=1, ffn_hidden=128, ffn_layers=4,
                   window_hidden=256, window_layers=4,
                   likelihood_hidden=128, likelihood_layers=2)


@dataclass(frozen=True)
class FeatureScale:
    """Normalizes demands/capacities by the catalog's componentwise maxima."""

    cpu: float
    ram: float
    disk: float

    @classmethod
    def from_catalog(cls, catalog: VmCatalog) -> "FeatureScale":
        m = catalog.max_capacities()
        return cls(m.cpu, m.ram, m.disk)

    def as_array(self) -> np.ndarray:
        return np.array([self.cpu, self.ram, self.disk])

    def demand(self, d: DemandVector) -> np.ndarray:
        return d.as_array() / self.as_array()

    def demand_matrix(self, rows: np.ndarray) -> np.ndarray:
        return rows / self.as_array()

    def denorm_demands(self, rows: np.ndarray) -> np.ndarray:
        return rows * self.as_array()

    def host_vector(self, v: np.ndarray) -> np.ndarray:
        return v / np.concatenate([self.as_array(), self.as_array()])


@dataclass
class ScheduleGraph:
    """Bipartite schedule snapshot: workload and host nodes with neighbors.

    Node rows are stacked in stable order (workloads by id, then hosts by id);
    workload embeddings are the 3-feature demand zero-padded to the host
    6-feature layout. Isolated nodes (queued workloads, idle hosts) are fine.
    """

    workload_ids: list[int]
    host_ids: list[int]
    embeddings: np.ndarray           # (n_nodes, HOST_FEATURES), normalized
    neighbors: list[list[int]]       # node-index adjacency

    @property
    def n_workloads(self) -> int:
        return len(self.workload_ids)

    @property
    def n_nodes(self) -> int:
        return len(self.workload_ids) + len(self.host_ids)

    @classmethod
    def build(cls, hosts: Sequence[Host], placements: dict[int, int],
              demands: dict[int, DemandVector], scale: FeatureScale) -> "ScheduleGraph":
        workload_ids = sorted(demands)
        host_ids = sorted(h.id for h in hosts)
        host_by_id = {h.id: h for h in hosts}
        w_index = {wid: i for i, wid in enumerate(workload_ids)}
        h_index = {hid: len(workload_ids) + i for i, hid in enumerate(host_ids)}

        n = len(workload_ids) + len(host_ids)
        emb = np.zeros((n, HOST_FEATURES))
        neighbors: list[list[int]] = [[] for _ in range(n)]
        used: dict[int, np.ndarray] = {hid: np.zeros(3) for hid in host_ids}

        for wid in workload_ids:
            emb[w_index[wid], :3] = scale.demand(demands[wid])
        for wid, hid in placements.items():
            if wid not in w_index or hid not in h_index:
                continue
            neighbors[w_index[wid]].append(h_index[hid])
            neighbors[h_index[hid]].append(w_index[wid])
            used[hid] += demands[wid].as_array()
        for hid in host_ids:
            cap = host_by_id[hid].vm_type.capacity().as_array()
            emb[h_index[hid]] = np.concatenate([used[hid], cap]) / np.concatenate(
                [scale.as_array(), scale.as_array()])
        for adj in neighbors:
            adj.sort()
        return cls(workload_ids, host_ids, emb, neighbors)


@dataclass(frozen=True)
class ActionFeature:
    """One provisioning action candidate with its 6-feature descriptor."""

    kind: str                 # "deallocate" | "provision"
    host_id: int | None
    vm_type: str | None
    features: np.ndarray      # normalized HOST_FEATURES vector

    @classmethod
    def deallocate(cls, host_id: int, host_vector: np.ndarray,
                   scale: FeatureScale) -> "ActionFeature":
        return cls("deallocate", host_id, None, scale.host_vector(host_vector))

    @classmethod
    def provision(cls, vm_type: VmType, scale: FeatureScale) -> "ActionFeature":
        raw = np.concatenate([np.zeros(3), vm_type.capacity().as_array()])
        return cls("provision", None, vm_type.name, scale.host_vector(raw))


def _ffn_param_shapes(prefix: str, dims: list[int]) -> list[tuple[str, int, int]]:
    return [(f"{prefix}.w{i}", dims[i], dims[i + 1]) for i in range(len(dims) - 1)]


class CilpModel:
    """Two-headed provisioner network over any number of workloads and hosts."""

    def __init__(self, config: ModelConfig | None = None,
                 params: ModelParams | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.params = params if params is not None else self._init_params(seed)

    # -- parameter construction ------------------------------------------------

    def _ffn_dims(self, prefix: str) -> list[int]:
        cfg = self.config
        half = cfg.width // 2
        if prefix == "win":
            return [3] + [cfg.window_hidden] * cfg.window_layers + [half]
        if prefix == "lik":
            return ([cfg.width + HOST_FEATURES]
                    + [cfg.likelihood_hidden] * cfg.likelihood_layers + [1])
        # encoder/decoder residual FFNs
        return [cfg.width] + [cfg.ffn_hidden] * cfg.ffn_layers + [cfg.width]

    def _init_params(self, seed: int) -> ModelParams:
        cfg = self.config
        rng = np.random.default_rng(seed)
        half = cfg.width // 2
        p: dict[str, Tensor] = {}

        def add_ffn(prefix: str):
            for name, fi, fo in _ffn_param_shapes(prefix, self._ffn_dims(prefix)):
                p[name] = ad.glorot(rng, fi, fo)
                p[name.replace(".w", ".b")] = Tensor(np.zeros(fo), requires_grad=True)

        p["gat.w0"] = ad.glorot(rng, HOST_FEATURES, 1)
        p["gat.b0"] = Tensor(np.zeros(1), requires_grad=True)
        p["gat.w1"] = ad.glorot(rng, HOST_FEATURES, half)
        p["gat.b1"] = Tensor(np.zeros(half), requires_grad=True)
        add_ffn("win")

        def add_block(prefix: str):
            for name in ("wq", "wk", "wv", "wo"):
                p[f"{prefix}.att.{name}"] = ad.glorot(rng, cfg.width, cfg.width)
            for name in ("bq", "bv", "bo"):
                p[f"{prefix}.att.{name}"] = Tensor(np.zeros(cfg.width),
                                                   requires_grad=True)
            for ln in ("ln1", "ln2"):
                p[f"{prefix}.{ln}.g"] = Tensor(np.ones(cfg.width), requires_grad=True)
                p[f"{prefix}.{ln}.b"] = Tensor(np.zeros(cfg.width), requires_grad=True)
            add_ffn(f"{prefix}.ffn")

        for i in range(cfg.depth):
            add_block(f"enc{i}")
        p["dec.win"] = ad.glorot(rng, 3, cfg.width)
        p["dec.bin"] = Tensor(np.zeros(cfg.width), requires_grad=True)
        p["dec.ln0.g"] = Tensor(np.ones(cfg.width), requires_grad=True)
        p["dec.ln0.b"] = Tensor(np.zeros(cfg.width), requires_grad=True)
        for i in range(cfg.depth):
            add_block(f"dec{i}")
        p["dec.wout"] = ad.glorot(rng, cfg.width, 3)
        p["dec.bout"] = Tensor(np.zeros(3), requires_grad=True)
        add_ffn("lik")
        return ModelParams(p)

    # -- building blocks ---------------------------------------------------------

    def _ffn(self, x: Tensor, prefix: str, final_sigmoid: bool) -> Tensor:
        dims = self._ffn_dims(prefix)
        n = len(dims) - 1
        for i in range(n):
            x = ad.linear(x, self.params[f"{prefix}.w{i}"],
                          self.params[f"{prefix}.b{i}"])
            if i < n - 1:
                x = ad.leaky_relu(x, self.config.slope)
        return ad.sigmoid(x) if final_sigmoid else x

    def _attention(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        return ad.multi_head_attention(
            x, x, x,
            p[f"{prefix}.wq"], p[f"{prefix}.bq"], p[f"{prefix}.wk"],
            p[f"{prefix}.wv"], p[f"{prefix}.bv"], p[f"{prefix}.wo"],
            p[f"{prefix}.bo"], self.config.heads)

    def _block(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        a = ad.layer_norm(ad.add(x, self._attention(x, f"{prefix}.att")),
                          p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        return ad.layer_norm(ad.add(a, self._ffn(a, f"{prefix}.ffn", False)),
                             p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])

    # -- the four encode/predict operations ---------------------------------------

    def encode_graph(self, graph: ScheduleGraph) -> Tensor:
        """Graph-attention convolution; rows follow the graph's stable order."""
        half = self.config.width // 2
        if graph.n_nodes == 0:
            return Tensor(np.zeros((0, half)))
        emb = Tensor(graph.embeddings)
        scores = ad.leaky_relu(
            ad.linear(emb, self.params["gat.w0"], self.params["gat.b0"]),
            self.config.gat_slope)
        messages = ad.linear(emb, self.params["gat.w1"], self.params["gat.b1"])
        rows = []
        for adj in graph.neighbors:
            if adj:
                alpha = ad.softmax(ad.take_rows(scores, adj), axis=0)
                rows.append(ad.matmul(ad.transpose(alpha), ad.take_rows(messages, adj)))
            else:
                rows.append(Tensor(np.zeros((1, half))))  # empty neighbor sum
        return ad.sigmoid(ad.concat(rows, axis=0))

    def encode_window(self, w_prev: np.ndarray) -> Tensor:
        """Sigmoid feed-forward embedding of the normalized demand matrix."""
        w_prev = np.asarray(w_prev, dtype=np.float64).reshape(-1, 3)
        return self._ffn(Tensor(w_prev), "win", final_sigmoid=True)

    def encode(self, e_graph: Tensor, e_window: Tensor, n_workloads: int) -> Tensor:
        """Fuse the branches, add positional encodings, run the encoder blocks.

        The window branch covers workload rows only; host rows carry zeros in
        that half. Positions index workload rows by arrival rank; host rows get
        no positional offset so deallocation scoring stays order-equivariant.
        """
        n = e_graph.shape[0]
        half = self.config.width // 2
        if n == 0:
            return Tensor(np.zeros((0, self.config.width)))
        if e_window.shape[0] != n_workloads:
            raise ValueError("window rows must match workload count")
        if n_workloads < n:
            pad = Tensor(np.zeros((n - n_workloads, half)))
            e_window = ad.concat([e_window, pad], axis=0) if n_workloads else pad
        e = ad.concat([e_graph, e_window], axis=1)
        pe = np.zeros((n, self.config.width))
        pe[:n_workloads] = ad.positional_encoding(n_workloads, self.config.width).values
        e = ad.add(e, Tensor(pe))
        for i in range(self.config.depth):
            e = self._block(e, f"enc{i}")
        return e

    def predict_demands(self, e0: Tensor, w_prev: np.ndarray,
                        n_workloads: int) -> Tensor:
        """Decode next-interval demands (normalized space, unclamped)."""
        w_prev = np.asarray(w_prev, dtype=np.float64).reshape(-1, 3)
        if w_prev.shape[0] != n_workloads:
            raise ValueError(
                f"demand rows ({w_prev.shape[0]}) != workload rows ({n_workloads})")
        if n_workloads == 0:
            return Tensor(np.zeros((0, 3)))
        x = ad.linear(Tensor(w_prev), self.params["dec.win"], self.params["dec.bin"])
        e2 = ad.layer_norm(ad.add(x, ad.narrow(e0, 0, 0, n_workloads)),
                           self.params["dec.ln0.g"], self.params["dec.ln0.b"])
        for i in range(self.config.depth):
            e2 = self._block(e2, f"dec{i}")
        return ad.linear(e2, self.params["dec.wout"], self.params["dec.bout"])

    def likelihoods(self, e0: Tensor, candidates: Sequence[ActionFeature]) -> Tensor:
        """Score each action in (0,1) with one shared head; rows independent."""
        if not candidates:
            return Tensor(np.zeros(0))
        if e0.shape[0] == 0:
            pooled = Tensor(np.zeros((1, self.config.width)))
        else:
            pooled = ad.tmean(e0, axis=0, keepdims=True)
        ones = Tensor(np.ones((len(candidates), 1)))
        tiled = ad.matmul(ones, pooled)
        feats = Tensor(np.stack([c.features for c in candidates]))
        scores = self._ffn(ad.concat([tiled, feats], axis=1), "lik",
                           final_sigmoid=True)
        return ad.reshape(scores, (len(candidates),))

    def forward(self, graph: ScheduleGraph, w_prev: np.ndarray,
                candidates: Sequence[ActionFeature]) -> tuple[Tensor, Tensor]:
        """One shared-encoding pass: (demand predictions, likelihood scores)."""
        e_graph = self.encode_graph(graph)
        e_window = self.encode_window(w_prev)
        e0 = self.encode(e_graph, e_window, graph.n_workloads)
        w_hat = self.predict_demands(e0, w_prev, graph.n_workloads)
        scores = self.likelihoods(e0, candidates)
        return w_hat, scores

    # -- persistence ---------------------------------------------------------------

    def save(self, path: str) -> None:
        self.params.save(path, extra={"config": asdict(self.config)})

    @classmethod
    def load(cls, path: str) -> "CilpModel":
        params, meta = ModelParams.load(path)
        config = ModelConfig(**meta.get("config", {}))
        return cls(config=config, params=params)
