"""Experiment configuration: defaults, validation, file/flag parsing.

Config files are JSON with nested sections. Every value is range-checked
before a run starts; unknown keys are rejected by name. CLI flags override
file values. A parsed config serializes back to an equal config.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .federation import (FederationSetup, ServerConfig, TrainConfig,
                         make_client_states)
from .graphdata import (MISSING_MODES, MissingnessConfig, MultimodalGraph,
                        apply_natural_missingness, empirical_missing_fraction,
                        generate_sbm_multimodal, load_graph, partition_dirichlet)
from .model import ModelConfig
from .tasks import TASK_KINDS, TaskSpec

RUN_MODES = ("reliability", "fedavg", "fedavg-zero")


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass
class DataSection:
    kind: str = "sbm"              # sbm | file
    path: str | None = None
    blocks: int = 4
    nodes_per_block: int = 50
    p_in: float = 0.3
    p_out: float = 0.05
    d_img: int = 512
    d_txt: int = 768
    noise: float = 2.0
    latent_dim: int = 16


@dataclass
class MissingnessSection:
    rate: float = 0.3
    mode: str = "node"
    p_mask: float = 0.3
    per_client_rates: list[float] | None = None


@dataclass
class FederationSection:
    clients: int = 4
    alpha: float = 0.5
    rounds: int = 30
    fraction: float = 1.0
    mode: str = "reliability"
    eta_u: float = 1.0
    eta_e: float = 1.0
    eta_rho: float = 1.0
    eps: float = 1e-12
    workers: int = 1


@dataclass
class ModelSection:
    hidden_dim: int = 256
    heads: int = 4
    neighbor_cap: int = 16
    warmup_rounds: int = 30
    router_temperature: float = 1.0
    gnn_layers: int = 2
    lr: float = 0.005
    local_epochs: int = 3
    clip_norm: float = 1.0
    lambda_rec: float | None = None   # task default when unset
    lambda_align: float = 0.01
    lambda_route: float = 0.01
    lambda_bal: float = 0.5
    gamma_clamp: list[float] | None = None
    entropy_anchor_weights: bool = False
    uncertainty_clamp: float | None = None
    uniform_floor: float = 0.0


@dataclass
class ExperimentConfig:
    seed: int = 0
    task: str = "nc"
    out: str | None = None
    data: DataSection = field(default_factory=DataSection)
    missingness: MissingnessSection = field(default_factory=MissingnessSection)
    federation: FederationSection = field(default_factory=FederationSection)
    model: ModelSection = field(default_factory=ModelSection)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        cfg = cls()
        _fill_section(cfg, doc, "<root>")
        validate_config(cfg)
        return cfg


_SECTIONS = {"data": DataSection, "missingness": MissingnessSection,
             "federation": FederationSection, "model": ModelSection}


def _fill_section(target, doc: dict, where: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = vars(target)
    for key, value in doc.items():
        if key not in fields:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in _SECTIONS:
            _fill_section(getattr(target, key), value, key)
        else:
            setattr(target, key, value)


def _check(name: str, ok: bool) -> None:
    if not ok:
        raise ConfigError(f"value out of range for {name!r}")


def validate_config(cfg: ExperimentConfig) -> None:
    _check("seed", isinstance(cfg.seed, int) and 0 <= cfg.seed < 2 ** 64)
    _check("task", cfg.task in TASK_KINDS)

    d = cfg.data
    _check("data.kind", d.kind in ("sbm", "file"))
    if d.kind == "file":
        _check("data.path", isinstance(d.path, str) and len(d.path) > 0)
    _check("data.blocks", isinstance(d.blocks, int) and d.blocks >= 1)
    _check("data.nodes_per_block", isinstance(d.nodes_per_block, int) and d.nodes_per_block >= 2)
    _check("data.p_in", 0.0 <= d.p_out <= d.p_in <= 1.0)
    _check("data.d_img", d.d_img >= 1)
    _check("data.d_txt", d.d_txt >= 1)
    _check("data.noise", d.noise >= 0.0)
    _check("data.latent_dim", d.latent_dim >= 1)

    m = cfg.missingness
    _check("missingness.rate", 0.0 <= m.rate < 1.0)
    _check("missingness.mode", m.mode in MISSING_MODES)
    _check("missingness.p_mask", 0.0 <= m.p_mask < 1.0)
    if m.per_client_rates is not None:
        _check("missingness.per_client_rates",
               all(0.0 <= r < 1.0 for r in m.per_client_rates))

    f = cfg.federation
    _check("federation.clients", isinstance(f.clients, int) and f.clients >= 1)
    _check("federation.alpha", f.alpha > 0.0)
    _check("federation.rounds", isinstance(f.rounds, int) and f.rounds >= 0)
    _check("federation.fraction", 0.0 < f.fraction <= 1.0)
    _check("federation.mode", f.mode in RUN_MODES)
    _check("federation.eta_u", f.eta_u >= 0.0)
    _check("federation.eta_e", f.eta_e >= 0.0)
    _check("federation.eta_rho", f.eta_rho >= 0.0)
    _check("federation.eps", f.eps > 0.0)
    _check("federation.workers", isinstance(f.workers, int) and f.workers >= 1)

    mo = cfg.model
    _check("model.hidden_dim", mo.hidden_dim >= 4)
    _check("model.heads", mo.heads >= 1 and mo.hidden_dim % mo.heads == 0)
    _check("model.neighbor_cap", mo.neighbor_cap >= 0)
    _check("model.warmup_rounds", mo.warmup_rounds >= 0)
    _check("model.router_temperature", mo.router_temperature > 0.0)
    _check("model.gnn_layers", mo.gnn_layers in (1, 2))
    _check("model.lr", mo.lr >= 0.0)
    _check("model.local_epochs", isinstance(mo.local_epochs, int) and mo.local_epochs >= 0)
    _check("model.clip_norm", mo.clip_norm > 0.0)
    if mo.lambda_rec is not None:
        _check("model.lambda_rec", mo.lambda_rec >= 0.0)
    _check("model.lambda_align", mo.lambda_align >= 0.0)
    _check("model.lambda_route", mo.lambda_route >= 0.0)
    _check("model.lambda_bal", mo.lambda_bal >= 0.0)
    if mo.gamma_clamp is not None:
        _check("model.gamma_clamp", len(mo.gamma_clamp) == 2
               and 0.0 <= mo.gamma_clamp[0] <= mo.gamma_clamp[1] <= 1.0)
    if mo.uncertainty_clamp is not None:
        _check("model.uncertainty_clamp", 0.0 <= mo.uncertainty_clamp <= 1.0)
    _check("model.uniform_floor", 0.0 <= mo.uniform_floor < 0.5)


def parse_config(path: str | None = None, overrides: dict | None = None
                 ) -> ExperimentConfig:
    """Load a JSON config file (missing/empty => all defaults) and apply
    flag overrides on top. Overrides use dotted keys, e.g. federation.mode."""
    doc: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read().strip()
            doc = json.loads(text) if text else {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from exc
    cfg = ExperimentConfig()
    _fill_section(cfg, doc, "<root>")
    for dotted, value in (overrides or {}).items():
        _apply_override(cfg, dotted, value)
    validate_config(cfg)
    return cfg


def _apply_override(cfg: ExperimentConfig, dotted: str, value) -> None:
    target = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise ConfigError(f"unknown key {dotted!r}")
        target = getattr(target, part)
    if not hasattr(target, parts[-1]):
        raise ConfigError(f"unknown key {dotted!r}")
    setattr(target, parts[-1], value)


# ---------------------------------------------------------------------------
# Assembly: config -> data -> federation setup
# ---------------------------------------------------------------------------


@dataclass
class RunAssembly:
    setup: FederationSetup
    graph: MultimodalGraph
    natural_mask: np.ndarray
    missing_fraction: float
    baseline: bool


def build_graph(cfg: ExperimentConfig) -> MultimodalGraph:
    d = cfg.data
    if d.kind == "file":
        return load_graph(d.path)
    return generate_sbm_multimodal(
        blocks=d.blocks, nodes_per_block=d.nodes_per_block, p_in=d.p_in,
        p_out=d.p_out, d_img=d.d_img, d_txt=d.d_txt, noise=d.noise,
        seed=cfg.seed, latent_dim=d.latent_dim)


def assemble_run(cfg: ExperimentConfig) -> RunAssembly:
    graph = build_graph(cfg)
    partition = partition_dirichlet(graph, cfg.federation.clients,
                                    cfg.federation.alpha, cfg.seed)
    if cfg.data.kind == "file":
        natural = graph.natural_mask.copy()
    else:
        mcfg = MissingnessConfig(rate=cfg.missingness.rate,
                                 mode=cfg.missingness.mode, seed=cfg.seed,
                                 per_client_rates=cfg.missingness.per_client_rates)
        natural = apply_natural_missingness(graph, mcfg, partition)

    labels = graph.labels
    num_classes = int(labels.max()) + 1 if labels is not None else None
    baseline = cfg.federation.mode == "fedavg-zero"
    model_cfg = ModelConfig(
        modalities=[(mod.name, mod.dim) for mod in graph.modalities],
        hidden_dim=cfg.model.hidden_dim, heads=cfg.model.heads,
        neighbor_cap=cfg.model.neighbor_cap,
        warmup_rounds=cfg.model.warmup_rounds,
        router_temperature=cfg.model.router_temperature,
        gnn_layers=cfg.model.gnn_layers, num_classes=num_classes,
        bypass_generation=baseline, lambda_bal=cfg.model.lambda_bal,
        gamma_clamp=tuple(cfg.model.gamma_clamp) if cfg.model.gamma_clamp else None,
        entropy_anchor_weights=cfg.model.entropy_anchor_weights,
        uncertainty_clamp=cfg.model.uncertainty_clamp,
        uniform_floor=cfg.model.uniform_floor)
    task_spec = TaskSpec.for_kind(cfg.task, cfg.model.lambda_rec,
                                  cfg.model.lambda_align, cfg.model.lambda_route)
    server_cfg = ServerConfig(
        rounds=cfg.federation.rounds, fraction=cfg.federation.fraction,
        mode="fedavg" if baseline else cfg.federation.mode,
        eta_u=cfg.federation.eta_u, eta_e=cfg.federation.eta_e,
        eta_rho=cfg.federation.eta_rho, eps=cfg.federation.eps,
        workers=cfg.federation.workers)
    train_cfg = TrainConfig(lr=cfg.model.lr, local_epochs=cfg.model.local_epochs,
                            clip_norm=cfg.model.clip_norm,
                            p_mask=0.0 if baseline else cfg.missingness.p_mask)
    clients = make_client_states(graph, partition, natural, model_cfg,
                                 cfg.task, cfg.seed)
    setup = FederationSetup(clients=clients, model_cfg=model_cfg,
                            task_spec=task_spec, server_cfg=server_cfg,
                            train_cfg=train_cfg, seed=cfg.seed)
    return RunAssembly(setup=setup, graph=graph, natural_mask=natural,
                       missing_fraction=empirical_missing_fraction(natural),
                       baseline=baseline)
