"""Stage 1: modality encoders, structural anchors, graph-enhanced context.

All functions are pure in (parameters, graph, masks); the per-modality flow
is: raw features -> shared hidden space -> neighbor anchors for invisible
cells -> per-modality adapter -> shared mean-aggregation conv stack. The
structure-only path sees degree features exclusively, so it is literally
independent of every modality feature.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .numerics import ParamStore, Tensor, const

ANCHOR_EPS = 1e-12


def encode_modality(params: ParamStore, name: str, features: np.ndarray,
                    natural_col: np.ndarray) -> Tensor:
    """Project one modality into the hidden space; absent rows stay zero."""
    w = params[f"enc.{name}.w"]
    if features.shape[1] != w.shape[0]:
        raise ValueError(
            f"modality {name!r} expects raw dim {w.shape[0]}, got {features.shape[1]}")
    z = nx.linear(const(features), w, params[f"enc.{name}.b"])
    z = nx.layer_norm(z, params[f"enc.{name}.ln_g"], params[f"enc.{name}.ln_b"])
    return nx.mul(z, const(natural_col.reshape(-1, 1)))


def encode_modalities(params: ParamStore, graph, natural: np.ndarray) -> list[Tensor]:
    return [encode_modality(params, mod.name, mod.features, natural[:, m])
            for m, mod in enumerate(graph.modalities)]


def anchor_coefficients(adjacency: list[list[int]], eff_col: np.ndarray,
                        degrees: np.ndarray, entropy_weights: bool = False
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Constant mixing matrix C and no-visible-neighbor flags for one modality.

    Row i of C holds a_ij * eff_j / (sum_j a_ij * eff_j + eps) over the
    neighbors of i, with uniform a_ij = 1/|N(i)| by default or the optional
    degree-suppressing variant. Rows are (sub-)convex combinations.
    """
    n = len(adjacency)
    coeff = np.zeros((n, n))
    flags = np.zeros(n)
    for i, neigh in enumerate(adjacency):
        if not neigh:
            flags[i] = 1.0
            continue
        if entropy_weights:
            raw = 1.0 / (1.0 + np.log1p(degrees[neigh]))
        else:
            raw = np.ones(len(neigh))
        a = raw / raw.sum()
        vis = eff_col[neigh]
        denom = float((a * vis).sum()) + ANCHOR_EPS
        if (a * vis).sum() == 0.0:
            flags[i] = 1.0
            continue
        coeff[i, neigh] = a * vis / denom
    return coeff, flags


def structural_anchor(params: ParamStore, name: str, raw_embed: Tensor,
                      adjacency: list[list[int]], eff_col: np.ndarray,
                      degrees: np.ndarray, entropy_weights: bool = False
                      ) -> tuple[Tensor, np.ndarray]:
    """Visibility-weighted neighbor mean; learnable null token as fallback."""
    coeff, flags = anchor_coefficients(adjacency, eff_col, degrees, entropy_weights)
    anchor = nx.matmul(const(coeff), raw_embed)
    if flags.any():
        null_row = nx.reshape(params[f"anchor.null.{name}"], (1, -1))
        anchor = nx.add(anchor, nx.matmul(const(flags.reshape(-1, 1)), null_row))
    return anchor, flags


def _conv_stack(params: ParamStore, prefix: str, x: Tensor, neigh_mat: Tensor,
                layers: int) -> Tensor:
    out = x
    for layer in range(1, layers + 1):
        out = nx.sage_conv(out, neigh_mat,
                           params[f"{prefix}.l{layer}.w_self"],
                           params[f"{prefix}.l{layer}.w_neigh"],
                           params[f"{prefix}.l{layer}.b"])
        if layer < layers:
            out = nx.relu(out)
    return out


def graph_context(params: ParamStore, name: str, raw_embed: Tensor,
                  anchor: Tensor, eff_col: np.ndarray, neigh_mat: Tensor,
                  layers: int = 2) -> Tensor:
    """Mix visible embedding with the anchor, adapt, then run the shared conv."""
    vis = const(eff_col.reshape(-1, 1))
    inv = const((1.0 - eff_col).reshape(-1, 1))
    mixed = nx.add(nx.mul(vis, raw_embed), nx.mul(inv, anchor))
    adapted = nx.relu(nx.linear(mixed, params[f"adapter.{name}.w"],
                                params[f"adapter.{name}.b"]))
    return _conv_stack(params, "gnn", adapted, neigh_mat, layers)


def target_exclusive_context(contexts: list[Tensor], eff: np.ndarray,
                             target: int) -> Tensor:
    """Mean of the *other* visible modality contexts; zero when none exist."""
    n, m_count = eff.shape
    others = [m for m in range(m_count) if m != target]
    counts = eff[:, others].sum(axis=1)
    safe = np.maximum(counts, 1.0)
    total = None
    for m in others:
        term = nx.mul(const((eff[:, m] / safe).reshape(-1, 1)), contexts[m])
        total = term if total is None else nx.add(total, term)
    if total is None:
        total = const(np.zeros((n, contexts[target].shape[1])))
    return total


def structure_only_repr(params: ParamStore, degrees: np.ndarray,
                        neigh_mat: Tensor, layers: int = 2) -> Tensor:
    """Topology-only node representation from log-degree features."""
    feats = np.log1p(degrees.astype(np.float64)).reshape(-1, 1)
    x = nx.linear(const(feats), params["strenc.in.w"], params["strenc.in.b"])
    return _conv_stack(params, "strenc", x, neigh_mat, layers)
