"""Multimodal graph data model, synthetic generation, partitioning, masks.

Graphs are small enough to live fully in memory; everything here is a pure
function of its seed, so results are immutable and shareable across threads.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

GRAPH_SCHEMA_VERSION = 1

MISSING_MODES = ("node", "client", "mixed")


class GraphFileError(ValueError):
    """Malformed or incompatible graph file."""


@dataclass
class Modality:
    name: str
    dim: int
    features: np.ndarray  # [N, dim]


@dataclass
class MultimodalGraph:
    """Undirected graph with one feature matrix per modality.

    ``natural_mask[i, m] == 0`` marks modality m of node i as absent in the
    data itself; the corresponding feature row is an all-zero placeholder
    and must never be read as data.
    """

    n: int
    edges: list[tuple[int, int]]
    modalities: list[Modality]
    labels: np.ndarray | None
    natural_mask: np.ndarray  # [N, M] in {0, 1}
    pairs: list[tuple[int, int]] | None = None

    def __post_init__(self):
        for u, v in self.edges:
            if u == v:
                raise ValueError(f"self-loop on node {u}")
            if not (0 <= u < self.n and 0 <= v < self.n):
                raise ValueError(f"edge ({u}, {v}) out of range")
        if self.natural_mask.shape != (self.n, self.num_modalities):
            raise ValueError("natural mask shape mismatch")
        for m, mod in enumerate(self.modalities):
            if mod.features.shape != (self.n, mod.dim):
                raise ValueError(f"feature shape mismatch for modality {mod.name}")
            if not np.isfinite(mod.features).all():
                raise ValueError(f"non-finite features in modality {mod.name}")
            absent = self.natural_mask[:, m] == 0
            mod.features[absent] = 0.0

    @property
    def num_modalities(self) -> int:
        return len(self.modalities)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=np.int64)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        for lst in adj:
            lst.sort()
        return adj


@dataclass
class MaskSet:
    """Natural mask r, artificial keep-mask, effective mask, recon indicator.

    effective = natural * keep and recon = natural - effective hold cellwise,
    so a naturally missing cell can never become a reconstruction target.
    """

    natural: np.ndarray
    keep: np.ndarray
    effective: np.ndarray = field(init=False)
    recon: np.ndarray = field(init=False)

    def __post_init__(self):
        nat = np.asarray(self.natural, dtype=np.float64)
        keep = np.asarray(self.keep, dtype=np.float64)
        if nat.shape != keep.shape:
            raise ValueError("mask shapes disagree")
        if not (np.isin(nat, (0.0, 1.0)).all() and np.isin(keep, (0.0, 1.0)).all()):
            raise ValueError("masks must be 0/1 valued")
        self.natural = nat
        self.keep = keep
        self.effective = nat * keep
        self.recon = nat - self.effective

    @classmethod
    def full_visibility(cls, natural: np.ndarray) -> "MaskSet":
        return cls(natural=natural, keep=np.ones_like(natural, dtype=np.float64))


@dataclass
class ClientPartition:
    """Disjoint node cover plus the induced per-client edge lists."""

    node_lists: list[list[int]]
    edge_lists: list[list[tuple[int, int]]]

    @property
    def num_clients(self) -> int:
        return len(self.node_lists)


@dataclass
class MissingnessConfig:
    rate: float
    mode: str = "node"
    seed: int = 0
    per_client_rates: list[float] | None = None

    def __post_init__(self):
        if not (0.0 <= self.rate < 1.0):
            raise ValueError("missing rate must lie in [0, 1)")
        if self.mode not in MISSING_MODES:
            raise ValueError(f"mode must be one of {MISSING_MODES}")
        if self.per_client_rates is not None:
            for r in self.per_client_rates:
                if not (0.0 <= r < 1.0):
                    raise ValueError("per-client rates must lie in [0, 1)")


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------


def generate_sbm_multimodal(blocks: int, nodes_per_block: int, p_in: float,
                            p_out: float, d_img: int = 512, d_txt: int = 768,
                            noise: float = 2.0, seed: int = 0,
                            latent_dim: int = 16) -> MultimodalGraph:
    """Stochastic block model with two feature channels per node.

    Both channels are fixed random linear projections of a shared per-block
    latent center plus isotropic noise, so one channel is recoverable from
    the other (and from same-block neighbors) by construction. Labels are
    block ids.
    """
    if nodes_per_block < 2:
        raise ValueError("nodes_per_block must be at least 2")
    if not (0.0 <= p_out <= p_in <= 1.0):
        raise ValueError("require 0 <= p_out <= p_in <= 1")
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x5B3])
    n = blocks * nodes_per_block
    labels = np.repeat(np.arange(blocks), nodes_per_block)

    centers = rng.normal(size=(blocks, latent_dim))
    proj_img = rng.normal(size=(latent_dim, d_img)) / np.sqrt(latent_dim)
    proj_txt = rng.normal(size=(latent_dim, d_txt)) / np.sqrt(latent_dim)
    latent = centers[labels]
    feat_img = latent @ proj_img + noise * rng.normal(size=(n, d_img))
    feat_txt = latent @ proj_txt + noise * rng.normal(size=(n, d_txt))

    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    hit = rng.random(iu.size) < prob
    edges = [(int(u), int(v)) for u, v in zip(iu[hit], ju[hit])]

    return MultimodalGraph(
        n=n,
        edges=edges,
        modalities=[Modality("img", d_img, feat_img), Modality("txt", d_txt, feat_txt)],
        labels=labels,
        natural_mask=np.ones((n, 2)),
        pairs=None,
    )


def partition_dirichlet(graph: MultimodalGraph, clients: int, alpha: float,
                        seed: int = 0) -> ClientPartition:
    """Label-skewed client split: per class, client shares ~ Dirichlet(alpha).

    Draws are resampled until every client owns at least one node. Cross
    client edges are dropped; each client keeps only its induced subgraph.
    """
    if clients < 1:
        raise ValueError("need at least one client")
    if clients > graph.n:
        raise ValueError("more clients than nodes")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0xD17])
    labels = graph.labels if graph.labels is not None else np.zeros(graph.n, dtype=np.int64)

    for _attempt in range(1000):
        assign = np.full(graph.n, -1, dtype=np.int64)
        for cls in np.unique(labels):
            idx = np.flatnonzero(labels == cls)
            rng.shuffle(idx)
            shares = rng.dirichlet(np.full(clients, alpha))
            counts = np.floor(shares * idx.size).astype(np.int64)
            # distribute the remainder to the largest fractional shares
            remainder = idx.size - counts.sum()
            if remainder > 0:
                frac = shares * idx.size - counts
                for k in np.argsort(-frac)[:remainder]:
                    counts[k] += 1
            pos = 0
            for k in range(clients):
                assign[idx[pos:pos + counts[k]]] = k
                pos += counts[k]
        sizes = np.bincount(assign, minlength=clients)
        if sizes.min() >= 1:
            break
    else:
        raise RuntimeError("could not draw a partition covering every client")

    node_lists = [sorted(np.flatnonzero(assign == k).tolist()) for k in range(clients)]
    edge_lists: list[list[tuple[int, int]]] = []
    for nodes in node_lists:
        members = set(nodes)
        edge_lists.append([(u, v) for u, v in graph.edges if u in members and v in members])
    return ClientPartition(node_lists=node_lists, edge_lists=edge_lists)


# ---------------------------------------------------------------------------
# Missingness and mask algebra
# ---------------------------------------------------------------------------


def apply_natural_missingness(graph: MultimodalGraph, cfg: MissingnessConfig,
                              partition: ClientPartition | None = None) -> np.ndarray:
    """Draw the natural availability mask for a graph.

    node: each (node, modality) cell goes missing independently with
    probability ``rate``. client: one whole modality is dropped on a
    ceil(rate * K) subset of clients. mixed: both effects. Per-client rates,
    when given, replace the single node-level rate.
    """
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 0x315])
    n, m = graph.n, graph.num_modalities
    mask = np.ones((n, m))

    if cfg.per_client_rates is not None:
        if partition is None:
            raise ValueError("per-client rates require a partition")
        if len(cfg.per_client_rates) != partition.num_clients:
            raise ValueError("one rate per client required")
        for nodes, rate in zip(partition.node_lists, cfg.per_client_rates):
            cells = rng.random((len(nodes), m)) < rate
            mask[nodes] = np.where(cells, 0.0, mask[nodes])
        return mask

    if cfg.mode in ("node", "mixed"):
        mask[rng.random((n, m)) < cfg.rate] = 0.0
    if cfg.mode in ("client", "mixed"):
        if partition is None:
            raise ValueError(f"{cfg.mode!r} missingness requires a partition")
        k = partition.num_clients
        affected = rng.permutation(k)[: math.ceil(cfg.rate * k)]
        for cid in affected:
            dropped = int(rng.integers(m))  # at most one modality per client
            mask[partition.node_lists[cid], dropped] = 0.0
    return mask


def empirical_missing_fraction(mask: np.ndarray) -> float:
    return float(1.0 - mask.mean())


def sample_artificial_mask(natural: np.ndarray, p_mask: float,
                           rng: np.random.Generator) -> MaskSet:
    """Hide observed cells with probability ``p_mask`` to create recon targets.

    Naturally missing cells keep keep-mask 1 (a no-op: they stay invisible
    and never enter the reconstruction indicator).
    """
    if not (0.0 <= p_mask < 1.0):
        raise ValueError("p_mask must lie in [0, 1)")
    keep = np.ones_like(natural, dtype=np.float64)
    observed = natural == 1.0
    keep[observed] = (rng.random(int(observed.sum())) >= p_mask).astype(np.float64)
    return MaskSet(natural=natural, keep=keep)


def missing_ratios(masks: MaskSet, partition: ClientPartition | None = None
                   ) -> tuple[np.ndarray, np.ndarray | None]:
    """Per-node and (optionally) per-client fractions of invisible modalities."""
    m = masks.effective.shape[1]
    rho_nodes = (m - masks.effective.sum(axis=1)) / m
    rho_clients = None
    if partition is not None:
        rho_clients = np.array([rho_nodes[nodes].mean() for nodes in partition.node_lists])
    return rho_nodes, rho_clients


# ---------------------------------------------------------------------------
# Induced subgraphs
# ---------------------------------------------------------------------------


def induced_subgraph(graph: MultimodalGraph, nodes: list[int]) -> MultimodalGraph:
    """Relabel a node subset to 0..len-1 and keep internal edges only."""
    remap = {old: new for new, old in enumerate(nodes)}
    idx = np.asarray(nodes, dtype=np.intp)
    edges = [(remap[u], remap[v]) for u, v in graph.edges
             if u in remap and v in remap]
    mods = [Modality(mod.name, mod.dim, mod.features[idx].copy())
            for mod in graph.modalities]
    labels = graph.labels[idx].copy() if graph.labels is not None else None
    pairs = None
    if graph.pairs is not None:
        pairs = [(remap[a], remap[b]) for a, b in graph.pairs
                 if a in remap and b in remap]
    return MultimodalGraph(n=len(nodes), edges=edges, modalities=mods,
                           labels=labels, natural_mask=graph.natural_mask[idx].copy(),
                           pairs=pairs)


# ---------------------------------------------------------------------------
# File IO (JSON, schema v1)
# ---------------------------------------------------------------------------


def save_graph(graph: MultimodalGraph, path: str) -> None:
    doc = {
        "schema": GRAPH_SCHEMA_VERSION,
        "n": graph.n,
        "modalities": [
            {"name": mod.name, "dim": mod.dim,
             "features": mod.features.tolist()}
            for mod in graph.modalities
        ],
        "edges": [[int(u), int(v)] for u, v in graph.edges],
        "labels": graph.labels.tolist() if graph.labels is not None else None,
        "natural_mask": graph.natural_mask.astype(int).tolist(),
        "pairs": [[int(a), int(b)] for a, b in graph.pairs] if graph.pairs is not None else None,
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
    os.replace(tmp, path)


def load_graph(path: str) -> MultimodalGraph:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise GraphFileError(f"cannot read graph file {path!r}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != GRAPH_SCHEMA_VERSION:
        raise GraphFileError(
            f"unsupported graph schema {doc.get('schema') if isinstance(doc, dict) else '?'} "
            f"(expected {GRAPH_SCHEMA_VERSION})")
    try:
        n = int(doc["n"])
        mods = [Modality(str(m["name"]), int(m["dim"]),
                         np.asarray(m["features"], dtype=np.float64))
                for m in doc["modalities"]]
        edges = [(int(u), int(v)) for u, v in doc["edges"]]
        labels = None if doc["labels"] is None else np.asarray(doc["labels"], dtype=np.int64)
        mask = np.asarray(doc["natural_mask"], dtype=np.float64)
        pairs = None if doc.get("pairs") is None else [(int(a), int(b)) for a, b in doc["pairs"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphFileError(f"malformed graph file {path!r}: {exc}") from exc
    for m_idx, mod in enumerate(mods):
        bad = (mask[:, m_idx] == 0) & np.any(mod.features != 0.0, axis=1)
        if bad.any():
            raise GraphFileError(
                f"modality {mod.name!r} has nonzero features at naturally missing cells")
    try:
        return MultimodalGraph(n=n, edges=edges, modalities=mods, labels=labels,
                               natural_mask=mask, pairs=pairs)
    except ValueError as exc:
        raise GraphFileError(f"invalid graph in {path!r}: {exc}") from exc
