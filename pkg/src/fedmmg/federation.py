"""Federated round loop: client training, reliability stats, aggregation.

The simulation is single-process. Clients within a round may run on worker
threads; every client draws from its own (seed, client, round, epoch) RNG
stream and owns a private parameter copy, and the server reduces results in
ascending client order, so outputs are identical for any worker count.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from . import tasks as task_ops
from .graphdata import (ClientPartition, MaskSet, MultimodalGraph,
                        induced_subgraph)
from .metrics import MetricsRow, evaluate_metrics
from .model import ForwardBundle, GraphCaches, ModelConfig, forward_pass, init_params
from .numerics import AdamState, GradientError, ParamStore, Tape
from .tasks import LossBreakdown, TaskSpec

_EPOCH_TAG = 0xC11E
_EVAL_TAG = 0xE7A1
_SERVER_TAG = 0x5E67
_CAL_TAG = 0xCA11


class ClientRoundError(RuntimeError):
    def __init__(self, cid: int, message: str):
        super().__init__(f"client {cid}: {message}")
        self.cid = cid


class FederationAborted(RuntimeError):
    pass


@dataclass
class ReliabilityStats:
    """Scalar summaries each client uploads next to its parameters."""

    mean_uncertainty: float
    mean_recon_error: float
    missing_ratio: float
    size: int

    def __post_init__(self):
        for v in (self.mean_uncertainty, self.mean_recon_error, self.missing_ratio):
            if not (0.0 <= v <= 1.0):
                raise ValueError("reliability statistics must lie in [0, 1]")
        if self.size < 1:
            raise ValueError("client size must be at least 1")


@dataclass
class ServerConfig:
    rounds: int = 30
    fraction: float = 1.0
    mode: str = "reliability"          # reliability | fedavg
    eta_u: float = 1.0
    eta_e: float = 1.0
    eta_rho: float = 1.0
    eps: float = 1e-12
    workers: int = 1

    def __post_init__(self):
        if not (0.0 < self.fraction <= 1.0):
            raise ValueError("client fraction must lie in (0, 1]")
        if self.mode not in ("reliability", "fedavg"):
            raise ValueError("aggregation mode must be reliability or fedavg")
        if min(self.eta_u, self.eta_e, self.eta_rho) < 0:
            raise ValueError("reliability coefficients must be nonnegative")


@dataclass
class TrainConfig:
    lr: float = 0.005
    local_epochs: int = 3
    clip_norm: float = 1.0
    p_mask: float = 0.3

    def __post_init__(self):
        if self.lr < 0 or self.local_epochs < 0:
            raise ValueError("invalid training configuration")


@dataclass
class ClientData:
    """A client's induced graph plus its frozen evaluation splits."""

    cid: int
    graph: MultimodalGraph
    caches: GraphCaches
    train_nodes: np.ndarray
    val_nodes: np.ndarray
    test_nodes: np.ndarray
    train_edges: np.ndarray
    val_edges: np.ndarray
    test_edges: np.ndarray
    edge_set: set[tuple[int, int]]


@dataclass
class ClientState:
    data: ClientData
    store: ParamStore
    adam: AdamState


@dataclass
class ClientRoundResult:
    cid: int
    params: dict[str, np.ndarray]
    stats: ReliabilityStats
    breakdown: LossBreakdown
    calib_uncertainty: np.ndarray
    calib_norm_err: np.ndarray


def _node_splits(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    if n >= 5:
        a, b = int(0.6 * n), int(0.8 * n)
        return np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:])
    if n >= 3:
        return np.sort(perm[:-1]), np.empty(0, dtype=np.intp), perm[-1:]
    return np.sort(perm), np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)


def build_client_data(cid: int, graph: MultimodalGraph, task: str, seed: int) -> ClientData:
    rng = np.random.default_rng([seed & 0xFFFFFFFF, cid, 0x5714])
    edges = np.asarray(graph.edges, dtype=np.intp).reshape(-1, 2)
    train_n, val_n, test_n = _node_splits(graph.n, rng)
    if task == "lp" and edges.shape[0] >= 1:
        perm = rng.permutation(edges.shape[0])
        a = max(1, int(0.7 * edges.shape[0]))
        b = max(a, int(0.85 * edges.shape[0]))
        train_e, val_e, test_e = edges[perm[:a]], edges[perm[a:b]], edges[perm[b:]]
        message_edges = [tuple(e) for e in train_e]
    else:
        train_e = edges
        val_e = test_e = np.empty((0, 2), dtype=np.intp)
        message_edges = graph.edges
    caches = GraphCaches.build(graph, message_edges)
    edge_set = {(min(u, v), max(u, v)) for u, v in graph.edges}
    return ClientData(cid=cid, graph=graph, caches=caches,
                      train_nodes=train_n, val_nodes=val_n, test_nodes=test_n,
                      train_edges=train_e, val_edges=val_e, test_edges=test_e,
                      edge_set=edge_set)


def _task_loss(params: ParamStore, bundle: ForwardBundle, data: ClientData,
               spec: TaskSpec, rng: np.random.Generator):
    graph = data.graph
    if spec.kind == "nc":
        return task_ops.nc_task_loss(params, bundle.refined, graph.labels,
                                     data.train_nodes)
    if spec.kind == "lp":
        return task_ops.lp_task_loss(bundle.refined, data.train_edges,
                                     data.edge_set, graph.n, spec, rng)
    if spec.kind == "mr":
        return task_ops.mr_task_loss(params, bundle.expert_flat, graph.n,
                                     graph.num_modalities, data.train_nodes, spec,
                                     refined=bundle.refined, labels=graph.labels)
    raise ValueError(f"unknown task {spec.kind!r}")


def client_local_round(state: ClientState, global_params: dict[str, np.ndarray],
                       model_cfg: ModelConfig, spec: TaskSpec, round_t: int,
                       train_cfg: TrainConfig, seed: int,
                       artificial_masks: bool = True) -> ClientRoundResult:
    """Load the broadcast model, run the local epochs, return update + stats."""
    data = state.data
    store = state.store
    store.load(global_params)
    store.zero_grads()

    last_bundle: ForwardBundle | None = None
    last_masks: MaskSet | None = None
    breakdown = LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0)

    from .graphdata import sample_artificial_mask

    for epoch in range(max(1, train_cfg.local_epochs)):
        rng = np.random.default_rng(
            [seed & 0xFFFFFFFF, data.cid, round_t, epoch, _EPOCH_TAG])
        if artificial_masks and not model_cfg.bypass_generation:
            masks = sample_artificial_mask(data.graph.natural_mask,
                                           train_cfg.p_mask, rng)
        else:
            masks = MaskSet.full_visibility(data.graph.natural_mask)

        with Tape() as tape:
            bundle = forward_pass(store, model_cfg, data.graph, masks, round_t,
                                  rng, data.caches)
            try:
                task_loss = _task_loss(store, bundle, data, spec, rng)
            except ValueError as exc:
                raise ClientRoundError(data.cid, str(exc)) from exc
            total, breakdown = task_ops.local_objective(
                spec, task_loss, bundle.rec_loss, bundle.align_loss,
                bundle.route_loss)
            if not np.isfinite(total.data).all():
                raise ClientRoundError(
                    data.cid, f"non-finite loss at round {round_t} epoch {epoch}")
            if train_cfg.local_epochs > 0 and train_cfg.lr > 0:
                try:
                    tape.backward(total)
                except GradientError as exc:
                    raise ClientRoundError(data.cid, str(exc)) from exc

        if train_cfg.local_epochs > 0:
            store.clip_grad_norm(train_cfg.clip_norm)
            try:
                nx.adam_step(store, state.adam, train_cfg.lr)
            except GradientError as exc:
                raise ClientRoundError(data.cid, str(exc)) from exc
        last_bundle, last_masks = bundle, masks

    assert last_bundle is not None and last_masks is not None
    eff_flat = last_masks.effective.T.reshape(-1)
    recon_flat = last_masks.recon.T.reshape(-1)
    if last_bundle.uncertainty is not None:
        u_vals = last_bundle.uncertainty.data.reshape(-1)
        hidden = eff_flat == 0.0
        mean_u = float(u_vals[hidden].mean()) if hidden.any() else 0.0
        calib_cells = recon_flat == 1.0
        calib_u = u_vals[calib_cells].copy()
        calib_err = last_bundle.norm_err[calib_cells].copy()
        mean_err = float(calib_err.mean()) if calib_cells.any() else 0.0
    else:
        mean_u = mean_err = 0.0
        calib_u = calib_err = np.empty(0)
    stats = ReliabilityStats(mean_uncertainty=mean_u, mean_recon_error=mean_err,
                             missing_ratio=last_bundle.rho_client,
                             size=data.graph.n)
    return ClientRoundResult(cid=data.cid, params=store.snapshot(), stats=stats,
                             breakdown=breakdown, calib_uncertainty=calib_u,
                             calib_norm_err=calib_err)


# ---------------------------------------------------------------------------
# Server side
# ---------------------------------------------------------------------------


def reliability_score(stats: ReliabilityStats, cfg: ServerConfig) -> float:
    """exp(-eta_u u - eta_e e - eta_rho rho); always positive, so clients are
    softly rescaled rather than excluded."""
    return float(np.exp(-cfg.eta_u * stats.mean_uncertainty
                        - cfg.eta_e * stats.mean_recon_error
                        - cfg.eta_rho * stats.missing_ratio))


def aggregate(params_by_cid: dict[int, dict[str, np.ndarray]],
              sizes: dict[int, int], scores: dict[int, float],
              eps: float = 1e-12) -> tuple[dict[str, np.ndarray], dict[int, float]]:
    """Size-and-reliability weighted parameter mean, reduced in cid order."""
    cids = sorted(params_by_cid)
    if not cids:
        raise ValueError("aggregate needs at least one client")
    denom = sum(sizes[c] * scores[c] for c in cids) + eps
    omega = {c: sizes[c] * scores[c] / denom for c in cids}

    names = sorted(params_by_cid[cids[0]])
    merged: dict[str, np.ndarray] = {}
    for name in names:
        shape = params_by_cid[cids[0]][name].shape
        acc = np.zeros(shape)
        for c in cids:
            part = params_by_cid[c][name]
            if part.shape != shape:
                raise ValueError(f"shape mismatch for parameter {name!r} "
                                 f"between clients {cids[0]} and {c}")
            acc += omega[c] * part
        merged[name] = acc
    return merged, omega


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate_client(store: ParamStore, model_cfg: ModelConfig, spec: TaskSpec,
                    data: ClientData, round_t: int, seed: int
                    ) -> tuple[MetricsRow | None, int]:
    """Held-out metrics under natural visibility (no artificial masking)."""
    rng = np.random.default_rng([seed & 0xFFFFFFFF, data.cid, round_t, _EVAL_TAG])
    masks = MaskSet.full_visibility(data.graph.natural_mask)
    bundle = forward_pass(store, model_cfg, data.graph, masks, round_t, rng,
                          data.caches)
    graph = data.graph
    if spec.kind == "nc":
        if data.test_nodes.size == 0:
            return None, 0
        logits = task_ops.nc_logits(store, nx.rows(bundle.refined, data.test_nodes))
        return evaluate_metrics("nc", logits.data, graph.labels[data.test_nodes]), \
            int(data.test_nodes.size)
    if spec.kind == "lp":
        if data.test_edges.shape[0] == 0:
            return None, 0
        pos = task_ops.lp_scores(bundle.refined, data.test_edges).data.reshape(-1)
        negs = []
        while len(negs) < pos.size:
            u, v = rng.integers(0, graph.n, size=2)
            if u != v and (min(u, v), max(u, v)) not in data.edge_set:
                negs.append((u, v))
        neg_pairs = np.asarray(negs, dtype=np.intp)
        neg = task_ops.lp_scores(bundle.refined, neg_pairs).data.reshape(-1)
        row = evaluate_metrics("lp", (pos, neg), None)
        return (row, pos.size) if row.valid else (None, 0)
    if spec.kind == "mr":
        if data.test_nodes.size == 0:
            return None, 0
        queries, gallery = task_ops.mr_embeddings(store, bundle.expert_flat,
                                                  graph.n, graph.num_modalities, spec)
        sim = task_ops.cosine_matrix(nx.rows(queries, data.test_nodes),
                                     nx.rows(gallery, data.test_nodes))
        targets = np.arange(data.test_nodes.size)
        return evaluate_metrics("mr", sim.data, targets), int(data.test_nodes.size)
    raise ValueError(f"unknown task {spec.kind!r}")


# ---------------------------------------------------------------------------
# Round history
# ---------------------------------------------------------------------------


@dataclass
class RoundRecord:
    round_index: int
    client_frac: float
    omega: dict[int, float]
    losses: dict[int, LossBreakdown]
    mean_loss: LossBreakdown
    metrics: MetricsRow
    errors: dict[int, str] = field(default_factory=dict)
    wall_ms: int = 0  # serialized as 0: emitted files must be byte-reproducible

    def to_json_dict(self) -> dict:
        return {
            "round": self.round_index,
            "client_frac": self.client_frac,
            "omega": {str(c): self.omega[c] for c in sorted(self.omega)},
            "losses": {str(c): vars(self.losses[c]) for c in sorted(self.losses)},
            "mean_loss": vars(self.mean_loss),
            "metrics": {"names": list(self.metrics.names),
                        "values": list(self.metrics.values)},
            "errors": {str(c): self.errors[c] for c in sorted(self.errors)},
            "wall_ms": self.wall_ms,
        }


@dataclass
class RoundHistory:
    mode: str
    task: str
    records: list[RoundRecord] = field(default_factory=list)
    final_params: dict[str, np.ndarray] = field(default_factory=dict)
    calibration: dict[str, np.ndarray] = field(default_factory=dict)
    timings_ms: list[float] = field(default_factory=list)

    def best_record(self) -> RoundRecord | None:
        usable = [r for r in self.records if np.isfinite(r.metrics.values[0])]
        if not usable:
            return None
        return max(usable, key=lambda r: r.metrics.values[0])


@dataclass
class FederationSetup:
    """Everything the round loop needs, in pre-validated form."""

    clients: list[ClientState]
    model_cfg: ModelConfig
    task_spec: TaskSpec
    server_cfg: ServerConfig
    train_cfg: TrainConfig
    seed: int


def make_client_states(graph: MultimodalGraph, partition: ClientPartition,
                       natural_mask: np.ndarray, model_cfg: ModelConfig,
                       task: str, seed: int) -> list[ClientState]:
    states = []
    graph.natural_mask[:] = natural_mask
    for m, mod in enumerate(graph.modalities):
        mod.features[natural_mask[:, m] == 0] = 0.0
    for cid, nodes in enumerate(partition.node_lists):
        sub = induced_subgraph(graph, nodes)
        data = build_client_data(cid, sub, task, seed)
        store = init_params(model_cfg, seed)
        states.append(ClientState(data=data, store=store,
                                  adam=AdamState.for_params(store)))
    return states


def run_federation(setup: FederationSetup) -> RoundHistory:
    """Synchronous rounds: broadcast, local training, aggregate, evaluate."""
    server = setup.server_cfg
    history = RoundHistory(mode=server.mode, task=setup.task_spec.kind)
    global_params = init_params(setup.model_cfg, setup.seed).snapshot()
    num_clients = len(setup.clients)

    for round_t in range(server.rounds):
        start = time.perf_counter()
        if server.fraction < 1.0:
            rng = np.random.default_rng([setup.seed & 0xFFFFFFFF, _SERVER_TAG, round_t])
            count = max(1, int(round(server.fraction * num_clients)))
            selected = sorted(rng.choice(num_clients, size=count, replace=False).tolist())
        else:
            selected = list(range(num_clients))

        def run_one(cid: int) -> ClientRoundResult:
            return client_local_round(setup.clients[cid], global_params,
                                      setup.model_cfg, setup.task_spec, round_t,
                                      setup.train_cfg, setup.seed)

        results: dict[int, ClientRoundResult] = {}
        errors: dict[int, str] = {}
        if server.workers > 1:
            with ThreadPoolExecutor(max_workers=server.workers) as pool:
                futures = {cid: pool.submit(run_one, cid) for cid in selected}
            for cid in selected:
                try:
                    results[cid] = futures[cid].result()
                except ClientRoundError as exc:
                    errors[cid] = str(exc)
        else:
            for cid in selected:
                try:
                    results[cid] = run_one(cid)
                except ClientRoundError as exc:
                    errors[cid] = str(exc)
        if not results:
            raise FederationAborted(
                f"every client failed in round {round_t}: {errors}")

        scores = {}
        for cid, res in results.items():
            scores[cid] = (reliability_score(res.stats, server)
                           if server.mode == "reliability" else 1.0)
        sizes = {cid: res.stats.size for cid, res in results.items()}
        global_params, omega = aggregate({c: r.params for c, r in results.items()},
                                         sizes, scores, server.eps)

        total_size = sum(sizes.values())
        def wmean(pick) -> float:
            return sum(pick(results[c]) * sizes[c] for c in results) / total_size
        mean_loss = LossBreakdown(
            task=wmean(lambda r: r.breakdown.task),
            rec=wmean(lambda r: r.breakdown.rec),
            align=wmean(lambda r: r.breakdown.align),
            route=wmean(lambda r: r.breakdown.route),
            total=wmean(lambda r: r.breakdown.total))

        metrics = _evaluate_global(setup, global_params, round_t)
        record = RoundRecord(
            round_index=round_t, client_frac=len(selected) / num_clients,
            omega=omega, losses={c: r.breakdown for c, r in results.items()},
            mean_loss=mean_loss, metrics=metrics, errors=errors)
        history.records.append(record)
        history.timings_ms.append(1000.0 * (time.perf_counter() - start))

    history.final_params = global_params
    history.calibration = _collect_calibration(setup, global_params)
    return history


def _collect_calibration(setup: FederationSetup,
                         global_params: dict[str, np.ndarray],
                         draws: int = 8) -> dict[str, np.ndarray]:
    """Uncertainty vs normalized reconstruction error of the final global
    model. Masks are resampled every epoch during training, so the natural
    population is pooled over several fresh mask draws per client."""
    from .graphdata import sample_artificial_mask

    cal_u: list[np.ndarray] = []
    cal_e: list[np.ndarray] = []
    if setup.model_cfg.bypass_generation:
        return {"uncertainty": np.empty(0), "norm_err": np.empty(0)}
    for state in setup.clients:
        state.store.load(global_params)
        for draw in range(draws):
            rng = np.random.default_rng(
                [setup.seed & 0xFFFFFFFF, state.data.cid,
                 setup.server_cfg.rounds, draw, _CAL_TAG])
            masks = sample_artificial_mask(state.data.graph.natural_mask,
                                           setup.train_cfg.p_mask, rng)
            bundle = forward_pass(state.store, setup.model_cfg, state.data.graph,
                                  masks, setup.server_cfg.rounds, rng,
                                  state.data.caches)
            cells = masks.recon.T.reshape(-1) == 1.0
            if bundle.uncertainty is not None and cells.any():
                cal_u.append(bundle.uncertainty.data.reshape(-1)[cells])
                cal_e.append(bundle.norm_err[cells])
    return {
        "uncertainty": np.concatenate(cal_u) if cal_u else np.empty(0),
        "norm_err": np.concatenate(cal_e) if cal_e else np.empty(0),
    }


def _evaluate_global(setup: FederationSetup, global_params: dict[str, np.ndarray],
                     round_t: int) -> MetricsRow:
    """Client-averaged held-out metrics, weighted by client test size."""
    values = np.zeros(2)
    weight_sum = 0
    names = ("metric_1", "metric_2")
    for state in setup.clients:
        state.store.load(global_params)
        row, weight = evaluate_client(state.store, setup.model_cfg,
                                      setup.task_spec, state.data, round_t,
                                      setup.seed)
        if row is not None and weight > 0:
            values += weight * np.asarray(row.values)
            weight_sum += weight
            names = row.names
    if weight_sum == 0:
        return MetricsRow(names=names, values=(0.0, 0.0), valid=False)
    vals = values / weight_sum
    return MetricsRow(names=names, values=(float(vals[0]), float(vals[1])))


def fedavg_zero_setup(setup: FederationSetup) -> FederationSetup:
    """Baseline variant: zero-filled missing cells straight into the backbone,
    no generator/router/fallback, data-size FedAvg aggregation."""
    model_cfg = ModelConfig(**{**vars(setup.model_cfg), "bypass_generation": True})
    server_cfg = ServerConfig(**{**vars(setup.server_cfg), "mode": "fedavg"})
    train_cfg = TrainConfig(**{**vars(setup.train_cfg), "p_mask": 0.0})
    return FederationSetup(clients=setup.clients, model_cfg=model_cfg,
                           task_spec=setup.task_spec, server_cfg=server_cfg,
                           train_cfg=train_cfg, seed=setup.seed)


def fedavg_zero_baseline(setup: FederationSetup) -> RoundHistory:
    history = run_federation(fedavg_zero_setup(setup))
    history.mode = "fedavg-zero"
    return history
