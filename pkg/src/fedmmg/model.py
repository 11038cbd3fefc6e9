"""Model assembly: parameter construction and the full staged forward pass.

A single parameter store covers both operating modes. The full pipeline
runs encoding, anchor-guided generation, uncertainty-routed expert fusion,
and refinement; the bypass mode (used by the zero-fill baseline and for
paired comparisons) keeps only the shared backbone: encoders, adapters,
conv stack, mean fusion, refinement, task heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import encoding, fusion, generation
from . import numerics as nx
from .graphdata import MaskSet, MultimodalGraph
from .numerics import ParamStore, Tensor, const, glorot, param_rng


@dataclass
class ModelConfig:
    modalities: list[tuple[str, int]]
    hidden_dim: int = 256
    heads: int = 4
    neighbor_cap: int = 16
    warmup_rounds: int = 30
    router_temperature: float = 1.0
    gnn_layers: int = 2
    mask_embed_dim: int = 16
    modality_embed_dim: int = 16
    num_classes: int | None = None
    bypass_generation: bool = False
    lambda_bal: float = 0.5
    gamma_clamp: tuple[float, float] | None = None
    entropy_anchor_weights: bool = False
    uncertainty_clamp: float | None = None
    uniform_floor: float = 0.0

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by the head count")
        if self.router_temperature <= 0:
            raise ValueError("router temperature must be positive")
        if self.gnn_layers not in (1, 2):
            raise ValueError("conv stack depth must be 1 or 2")

    @property
    def estimator_hidden(self) -> int:
        return max(4, self.hidden_dim // 2)


def _add_linear(store: ParamStore, seed: int, name: str, fan_in: int,
                fan_out: int, bias: bool = True) -> None:
    rng = param_rng(seed, name)
    store.add(f"{name}.w", glorot(rng, fan_in, fan_out))
    if bias:
        # small nonzero biases keep hidden units off their relu kink even for
        # all-zero input rows (masked cells), which finite differences need
        store.add(f"{name}.b", rng.uniform(-0.05, 0.05, size=fan_out))


def _add_layer_norm(store: ParamStore, name: str, dim: int) -> None:
    store.add(f"{name}_g", np.ones(dim))
    store.add(f"{name}_b", np.zeros(dim))


def init_params(cfg: ModelConfig, seed: int) -> ParamStore:
    """Create every parameter the pipeline can touch. Initialization draws a
    dedicated stream per parameter name, so the values do not depend on
    creation order or on which mode will be run."""
    d = cfg.hidden_dim
    store = ParamStore()

    for name, raw_dim in cfg.modalities:
        _add_linear(store, seed, f"enc.{name}", raw_dim, d)
        _add_layer_norm(store, f"enc.{name}.ln", d)
        _add_linear(store, seed, f"adapter.{name}", d, d)
        store.add(f"anchor.null.{name}", np.zeros(d))

    for layer in (1, 2):
        for prefix in ("gnn", "strenc"):
            rng = param_rng(seed, f"{prefix}.l{layer}")
            store.add(f"{prefix}.l{layer}.w_self", glorot(rng, d, d))
            store.add(f"{prefix}.l{layer}.w_neigh", glorot(rng, d, d))
            store.add(f"{prefix}.l{layer}.b", rng.uniform(-0.05, 0.05, size=d))
    _add_linear(store, seed, "strenc.in", 1, d)

    m_count = len(cfg.modalities)
    e_mask, e_mod = cfg.mask_embed_dim, cfg.modality_embed_dim
    _add_linear(store, seed, "gen.query", d + e_mask + e_mod, d)
    store.add("gen.mask_embed.w", glorot(param_rng(seed, "gen.mask_embed"), m_count, e_mask))
    store.add("gen.mod_embed", 0.1 * param_rng(seed, "gen.mod_embed").normal(size=(m_count, e_mod)))
    for proj in ("wq", "wk", "wv", "wo"):
        store.add(f"gen.att.{proj}", glorot(param_rng(seed, f"gen.att.{proj}"), d, d))
    _add_linear(store, seed, "gen.gate", 2 * d, d)
    store.add("gen.self_proj.w", glorot(param_rng(seed, "gen.self_proj"), d, d))
    store.add("gen.anchor_proj.w", glorot(param_rng(seed, "gen.anchor_proj"), d, d))
    store.add("gen.align.w", glorot(param_rng(seed, "gen.align"), d, d))

    hid = cfg.estimator_hidden
    _add_linear(store, seed, "unc.l1", 3 * d, hid)
    _add_linear(store, seed, "unc.l2", hid, 1)
    _add_linear(store, seed, "router.l1", 4, hid)
    _add_linear(store, seed, "router.l2", hid, 2, bias=False)
    # routing weights only act on visible cells, where the observed expert
    # is the safe prior; start there and let training open the recovered path
    store.add("router.l2.b", np.array([1.5, 0.0]))
    for expert in ("obs", "rec", "struct"):
        _add_linear(store, seed, f"expert.{expert}", d, d)
    _add_linear(store, seed, "fallback", 2, 1, bias=False)
    # start with a mostly-closed fallback gate; it opens as missingness
    # and uncertainty push the logit up during training
    store.add("fallback.b", np.full(1, -2.0))
    _add_layer_norm(store, "fuse.ln", d)

    rng = param_rng(seed, "refine")
    store.add("refine.w_self", glorot(rng, d, d))
    store.add("refine.w_neigh", glorot(rng, d, d))
    store.add("refine.b", np.zeros(d))
    _add_layer_norm(store, "refine.ln", d)

    if cfg.num_classes is not None:
        _add_linear(store, seed, "head.nc", d, cfg.num_classes)
    store.add("head.mr.query.w", glorot(param_rng(seed, "head.mr.query"), d, d))
    store.add("head.mr.gallery.w", glorot(param_rng(seed, "head.mr.gallery"), d, d))
    return store


@dataclass
class GraphCaches:
    """Per-graph constants reused across epochs and rounds."""

    adjacency: list[list[int]]
    neigh_mat: Tensor
    degrees: np.ndarray

    @classmethod
    def build(cls, graph: MultimodalGraph, edges: list[tuple[int, int]] | None = None
              ) -> "GraphCaches":
        edges = graph.edges if edges is None else edges
        adj: list[list[int]] = [[] for _ in range(graph.n)]
        for u, v in edges:
            adj[u].append(v)
            adj[v].append(u)
        for lst in adj:
            lst.sort()
        deg = np.array([len(lst) for lst in adj], dtype=np.int64)
        return cls(adjacency=adj,
                   neigh_mat=const(nx.neighbor_mean_matrix(graph.n, edges)),
                   degrees=deg)


@dataclass
class FrozenTargets:
    """Base-point values of the stop-gradient quantities, for gradient checks.

    The tape differentiates an objective whose reconstruction targets and
    normalized-error labels are constants; central differences must probe
    that same function, so these values are captured once and pinned."""

    raw_targets: np.ndarray
    norm_err: np.ndarray


@dataclass
class ForwardBundle:
    refined: Tensor
    expert_flat: Tensor | None
    generated: Tensor | None
    uncertainty: Tensor | None
    route_weights: Tensor | None
    rec_loss: Tensor
    align_loss: Tensor
    route_loss: Tensor
    unc_loss_value: float
    bal_loss_value: float
    gamma: float
    cell_errors: np.ndarray | None
    norm_err: np.ndarray | None
    raw_cells: np.ndarray | None = None
    rho_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rho_client: float = 0.0
    reliability: np.ndarray | None = None
    alpha_fb: np.ndarray | None = None


def _flat_cells(per_modality: list[Tensor]) -> Tensor:
    return nx.concat(per_modality, axis=0)


def forward_pass(params: ParamStore, cfg: ModelConfig, graph: MultimodalGraph,
                 masks: MaskSet, round_t: int, rng: np.random.Generator,
                 caches: GraphCaches,
                 frozen: FrozenTargets | None = None) -> ForwardBundle:
    """Run the staged pipeline on one client graph under the given masks."""
    if cfg.bypass_generation:
        return _forward_bypass(params, cfg, graph, masks, caches)

    eff = masks.effective
    n, m_count = eff.shape
    raw = encoding.encode_modalities(params, graph, masks.natural)

    anchors, contexts = [], []
    for m, (name, _dim) in enumerate(cfg.modalities):
        anchor, _flags = encoding.structural_anchor(
            params, name, raw[m], caches.adjacency, eff[:, m], caches.degrees,
            cfg.entropy_anchor_weights)
        anchors.append(anchor)
        contexts.append(encoding.graph_context(
            params, name, raw[m], anchor, eff[:, m], caches.neigh_mat,
            cfg.gnn_layers))
    excl = [encoding.target_exclusive_context(contexts, eff, m) for m in range(m_count)]
    struct_repr = encoding.structure_only_repr(params, caches.degrees,
                                               caches.neigh_mat, cfg.gnn_layers)

    raw_flat = _flat_cells(raw)
    anchor_flat = _flat_cells(anchors)
    excl_flat = _flat_cells(excl)
    eff_flat = eff.T.reshape(-1)
    recon_flat = masks.recon.T.reshape(-1)

    banks = generation.build_bank_batch(caches.adjacency, eff, cfg.neighbor_cap, rng)
    queries = generation.build_query(params, excl_flat, eff, m_count)
    generated, gamma, _att = generation.generate_modalities(
        params, queries, banks, contexts, excl_flat, anchor_flat,
        round_t, cfg.warmup_rounds, cfg.heads, cfg.gamma_clamp)

    cell_err = generation.squared_cell_errors(
        generated, raw_flat, frozen.raw_targets if frozen else None)
    rec_loss = generation.reconstruction_loss(cell_err, recon_flat)
    align_loss = generation.alignment_loss(params, raw_flat, generated, eff)

    rho_nodes = (m_count - eff.sum(axis=1)) / m_count
    rho_client = float(rho_nodes.mean())

    uncertainty = fusion.estimate_uncertainty(params, generated, excl_flat,
                                              anchor_flat, eff_flat)
    weights = fusion.route(params, eff_flat, uncertainty, rho_nodes, rho_client,
                           cfg.router_temperature, m_count, cfg.uniform_floor)
    norm_err = frozen.norm_err if frozen else fusion.normalized_errors(
        cell_err.data.reshape(-1), recon_flat, m_count)
    route_loss, unc_loss, bal_loss = fusion.routing_loss(
        uncertainty, norm_err, recon_flat, weights, cfg.lambda_bal)

    expert_flat = fusion.expert_mix(params, raw_flat, generated, weights, eff_flat)
    fused, reliability, alpha_fb = fusion.fuse(
        params, expert_flat, uncertainty, rho_nodes, struct_repr, m_count,
        cfg.uncertainty_clamp)

    from .tasks import refine  # local import avoids a module cycle
    refined = refine(params, fused, caches.neigh_mat)

    return ForwardBundle(
        refined=refined, expert_flat=expert_flat, generated=generated,
        uncertainty=uncertainty, route_weights=weights,
        rec_loss=rec_loss, align_loss=align_loss, route_loss=route_loss,
        unc_loss_value=float(unc_loss.data), bal_loss_value=float(bal_loss.data),
        gamma=gamma, cell_errors=cell_err.data.reshape(-1).copy(),
        norm_err=norm_err, raw_cells=raw_flat.data.copy(),
        rho_nodes=rho_nodes, rho_client=rho_client,
        reliability=reliability, alpha_fb=alpha_fb)


def _forward_bypass(params: ParamStore, cfg: ModelConfig, graph: MultimodalGraph,
                    masks: MaskSet, caches: GraphCaches) -> ForwardBundle:
    """Backbone-only forward: zero-filled inputs, mean fusion, no generator."""
    eff = masks.effective
    n, m_count = eff.shape
    raw = [encoding.encode_modality(params, mod.name, mod.features, eff[:, m])
           for m, mod in enumerate(graph.modalities)]
    contexts = []
    for m, (name, _dim) in enumerate(cfg.modalities):
        adapted = nx.relu(nx.linear(raw[m], params[f"adapter.{name}.w"],
                                    params[f"adapter.{name}.b"]))
        contexts.append(encoding._conv_stack(params, "gnn", adapted,
                                             caches.neigh_mat, cfg.gnn_layers))
    stacked = nx.reshape(_flat_cells(contexts), (m_count, n, cfg.hidden_dim))
    mean_ctx = nx.scale(nx.sum_axis(stacked, 0), 1.0 / m_count)
    fused = nx.layer_norm(mean_ctx, params["fuse.ln_g"], params["fuse.ln_b"])

    from .tasks import refine
    refined = refine(params, fused, caches.neigh_mat)

    zero = const(np.asarray(0.0))
    rho_nodes = (m_count - eff.sum(axis=1)) / m_count
    return ForwardBundle(
        refined=refined, expert_flat=_flat_cells(contexts), generated=None,
        uncertainty=None, route_weights=None,
        rec_loss=zero, align_loss=zero, route_loss=zero,
        unc_loss_value=0.0, bal_loss_value=0.0, gamma=0.0,
        cell_errors=None, norm_err=None,
        rho_nodes=rho_nodes, rho_client=float(rho_nodes.mean()))
