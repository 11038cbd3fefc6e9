"""Graph data model, generators, partitioning, masks, file round trip."""

import json

import numpy as np
import pytest

from fedmmg.graphdata import (GraphFileError, MaskSet, MissingnessConfig,
                              MultimodalGraph, Modality,
                              apply_natural_missingness,
                              empirical_missing_fraction,
                              generate_sbm_multimodal, induced_subgraph,
                              load_graph, missing_ratios, partition_dirichlet,
                              sample_artificial_mask, save_graph)


class TestMaskAlgebra:
    def test_exhaustive_truth_table(self):
        # all combinations of (natural, keep) on a 2x2 grid of cells
        natural = np.array([[0.0, 0.0], [1.0, 1.0]])
        keep = np.array([[0.0, 1.0], [0.0, 1.0]])
        masks = MaskSet(natural=natural, keep=keep)
        np.testing.assert_array_equal(masks.effective, [[0, 0], [0, 1]])
        np.testing.assert_array_equal(masks.recon, [[0, 0], [1, 0]])
        # invariants: recon=1 implies natural=1; natural=0 implies both zero
        assert ((masks.recon == 1) <= (natural == 1)).all()
        assert ((natural == 0) <= ((masks.effective == 0) & (masks.recon == 0))).all()

    def test_naturally_missing_never_a_target(self):
        rng = np.random.default_rng(0)
        natural = (rng.random((30, 2)) > 0.4).astype(float)
        masks = sample_artificial_mask(natural, 0.5, rng)
        assert (masks.recon[natural == 0] == 0).all()
        assert (masks.effective[natural == 0] == 0).all()

    def test_keep_all_and_mask_all(self):
        natural = np.ones((4, 2))
        all_kept = MaskSet(natural=natural, keep=np.ones((4, 2)))
        assert (all_kept.effective == 1).all() and (all_kept.recon == 0).all()
        none_kept = MaskSet(natural=natural, keep=np.zeros((4, 2)))
        assert (none_kept.effective == 0).all() and (none_kept.recon == 1).all()

    def test_non_binary_mask_rejected(self):
        with pytest.raises(ValueError):
            MaskSet(natural=np.array([[0.5]]), keep=np.array([[1.0]]))


class TestSBM:
    def test_two_isolated_cliques(self):
        g = generate_sbm_multimodal(2, 5, p_in=1.0, p_out=0.0, d_img=8,
                                    d_txt=6, noise=0.1, seed=3)
        adj = g.adjacency()
        for i in range(10):
            block = set(range(5)) if i < 5 else set(range(5, 10))
            assert set(adj[i]) == block - {i}

    def test_zero_noise_gives_identical_block_features(self):
        g = generate_sbm_multimodal(3, 4, 0.5, 0.1, d_img=8, d_txt=6,
                                    noise=0.0, seed=4)
        for mod in g.modalities:
            for b in range(3):
                block = mod.features[g.labels == b]
                np.testing.assert_allclose(block, np.tile(block[0], (len(block), 1)))

    def test_empirical_densities(self):
        p_in, p_out = 0.3, 0.05
        intra_rate, inter_rate, intra_n, inter_n = 0.0, 0.0, 0, 0
        for seed in range(10):
            g = generate_sbm_multimodal(4, 50, p_in, p_out, d_img=4, d_txt=4,
                                        noise=1.0, seed=seed)
            same = g.labels[:, None] == g.labels[None, :]
            adj = np.zeros((g.n, g.n), dtype=bool)
            for u, v in g.edges:
                adj[u, v] = adj[v, u] = True
            iu = np.triu_indices(g.n, 1)
            intra = same[iu]
            intra_rate += adj[iu][intra].sum()
            intra_n += intra.sum()
            inter_rate += adj[iu][~intra].sum()
            inter_n += (~intra).sum()
        assert abs(intra_rate / intra_n - p_in) < 0.05
        assert abs(inter_rate / inter_n - p_out) < 0.05

    def test_cross_modal_recovery_is_learnable(self):
        # both feature channels are linear images of one latent, so a linear
        # map fitted from one channel predicts the other above chance
        g = generate_sbm_multimodal(4, 30, 0.3, 0.05, d_img=16, d_txt=12,
                                    noise=0.2, seed=5)
        x = g.modalities[0].features
        y = g.modalities[1].features
        coef, *_ = np.linalg.lstsq(x, y, rcond=None)
        residual = np.linalg.norm(y - x @ coef) / np.linalg.norm(y)
        assert residual < 0.5

    def test_small_block_rejected(self):
        with pytest.raises(ValueError):
            generate_sbm_multimodal(2, 1, 0.3, 0.1)


class TestPartition:
    def test_single_client_owns_everything(self):
        g = generate_sbm_multimodal(2, 6, 0.4, 0.1, d_img=4, d_txt=4, seed=0)
        part = partition_dirichlet(g, 1, alpha=0.5, seed=0)
        assert part.node_lists[0] == list(range(g.n))
        assert len(part.edge_lists[0]) == len(g.edges)

    def test_disjoint_cover(self):
        g = generate_sbm_multimodal(4, 25, 0.3, 0.05, d_img=4, d_txt=4, seed=1)
        for seed in range(5):
            part = partition_dirichlet(g, 4, alpha=0.5, seed=seed)
            seen = [n for lst in part.node_lists for n in lst]
            assert sorted(seen) == list(range(g.n))
            assert min(len(lst) for lst in part.node_lists) >= 1

    def test_large_alpha_approaches_global_histogram(self):
        g = generate_sbm_multimodal(4, 50, 0.3, 0.05, d_img=4, d_txt=4, seed=2)
        global_hist = np.bincount(g.labels, minlength=4) / g.n
        tv_max = 0.0
        for seed in range(10):
            part = partition_dirichlet(g, 4, alpha=1000.0, seed=seed)
            for nodes in part.node_lists:
                hist = np.bincount(g.labels[nodes], minlength=4) / len(nodes)
                tv_max = max(tv_max, 0.5 * np.abs(hist - global_hist).sum())
        assert tv_max < 0.1

    def test_induced_edges_stay_internal(self):
        g = generate_sbm_multimodal(3, 20, 0.3, 0.1, d_img=4, d_txt=4, seed=3)
        part = partition_dirichlet(g, 3, alpha=0.5, seed=3)
        for nodes, edges in zip(part.node_lists, part.edge_lists):
            members = set(nodes)
            assert all(u in members and v in members for u, v in edges)

    def test_too_many_clients_rejected(self):
        g = generate_sbm_multimodal(2, 2, 0.5, 0.1, d_img=4, d_txt=4, seed=4)
        with pytest.raises(ValueError):
            partition_dirichlet(g, g.n + 1, alpha=0.5, seed=0)


class TestMissingness:
    def test_zero_rate_keeps_everything(self):
        g = generate_sbm_multimodal(2, 10, 0.4, 0.1, d_img=4, d_txt=4, seed=0)
        mask = apply_natural_missingness(g, MissingnessConfig(rate=0.0, seed=0))
        assert (mask == 1).all()

    def test_node_level_rate_matches_target(self):
        g = generate_sbm_multimodal(4, 250, 0.01, 0.001, d_img=2, d_txt=2, seed=1)
        assert g.n * 2 == 2000
        mask = apply_natural_missingness(g, MissingnessConfig(rate=0.3, seed=7))
        frac = empirical_missing_fraction(mask)
        assert abs(frac - 0.30) < 0.03

    def test_client_mode_drops_single_modality(self):
        g = generate_sbm_multimodal(4, 25, 0.3, 0.05, d_img=4, d_txt=4, seed=2)
        part = partition_dirichlet(g, 4, alpha=0.5, seed=2)
        mask = apply_natural_missingness(
            g, MissingnessConfig(rate=0.3, mode="client", seed=2), part)
        dropped_clients = 0
        for nodes in part.node_lists:
            col_gone = [(mask[nodes, m] == 0).all() for m in range(2)]
            assert sum(col_gone) <= 1  # never strips a client of all modalities
            dropped_clients += any(col_gone)
        assert dropped_clients == int(np.ceil(0.3 * 4))

    def test_per_client_rates(self):
        g = generate_sbm_multimodal(4, 50, 0.3, 0.05, d_img=2, d_txt=2, seed=3)
        part = partition_dirichlet(g, 4, alpha=100.0, seed=3)
        cfg = MissingnessConfig(rate=0.3, seed=3,
                                per_client_rates=[0.8, 0.1, 0.1, 0.1])
        mask = apply_natural_missingness(g, cfg, part)
        rates = [1.0 - mask[nodes].mean() for nodes in part.node_lists]
        assert rates[0] > 0.6
        assert max(rates[1:]) < 0.3

    def test_missing_ratio_hand_cases(self):
        natural = np.array([[1.0, 1.0], [1.0, 0.0], [0.0, 0.0]])
        masks = MaskSet.full_visibility(natural)
        rho_nodes, _ = missing_ratios(masks)
        np.testing.assert_allclose(rho_nodes, [0.0, 0.5, 1.0])
        from fedmmg.graphdata import ClientPartition
        part = ClientPartition(node_lists=[[0, 1, 2]], edge_lists=[[]])
        _, rho_clients = missing_ratios(masks, part)
        np.testing.assert_allclose(rho_clients, [0.5])
        assert ((rho_nodes >= 0) & (rho_nodes <= 1)).all()

    def test_artificial_mask_resamples_between_draws(self):
        natural = np.ones((50, 2))
        rng = np.random.default_rng(11)
        first = sample_artificial_mask(natural, 0.3, rng)
        second = sample_artificial_mask(natural, 0.3, rng)
        assert (first.keep != second.keep).any()


class TestGraphIO:
    def _graph(self):
        g = generate_sbm_multimodal(2, 4, 0.5, 0.1, d_img=3, d_txt=2,
                                    noise=0.7, seed=9)
        mask = apply_natural_missingness(g, MissingnessConfig(rate=0.4, seed=9))
        g.natural_mask[:] = mask
        for m, mod in enumerate(g.modalities):
            mod.features[mask[:, m] == 0] = 0.0
        return g

    def test_round_trip_is_exact(self, tmp_path):
        g = self._graph()
        path = str(tmp_path / "graph.json")
        save_graph(g, path)
        loaded = load_graph(path)
        assert loaded.n == g.n and loaded.edges == g.edges
        np.testing.assert_array_equal(loaded.natural_mask, g.natural_mask)
        np.testing.assert_array_equal(loaded.labels, g.labels)
        for a, b in zip(loaded.modalities, g.modalities):
            assert a.name == b.name and a.dim == b.dim
            np.testing.assert_array_equal(a.features, b.features)

    def test_truncated_file_fails_cleanly(self, tmp_path):
        g = self._graph()
        path = str(tmp_path / "graph.json")
        save_graph(g, path)
        with open(path) as fh:
            text = fh.read()
        with open(path, "w") as fh:
            fh.write(text[: len(text) // 2])
        with pytest.raises(GraphFileError):
            load_graph(path)

    def test_schema_mismatch_rejected(self, tmp_path):
        path = str(tmp_path / "bad.json")
        with open(path, "w") as fh:
            json.dump({"schema": 99}, fh)
        with pytest.raises(GraphFileError, match="schema"):
            load_graph(path)

    def test_nonzero_missing_row_rejected(self, tmp_path):
        g = self._graph()
        path = str(tmp_path / "graph.json")
        save_graph(g, path)
        with open(path) as fh:
            doc = json.load(fh)
        hidden = np.argwhere(np.asarray(doc["natural_mask"]) == 0)
        i, m = hidden[0]
        doc["modalities"][m]["features"][i][0] = 5.0
        with open(path, "w") as fh:
            json.dump(doc, fh)
        with pytest.raises(GraphFileError, match="missing"):
            load_graph(path)

    def test_empty_edge_list_is_legal(self, tmp_path):
        g = MultimodalGraph(
            n=3, edges=[],
            modalities=[Modality("img", 2, np.zeros((3, 2))),
                        Modality("txt", 2, np.zeros((3, 2)))],
            labels=None, natural_mask=np.ones((3, 2)))
        path = str(tmp_path / "empty.json")
        save_graph(g, path)
        assert load_graph(path).edges == []


class TestInducedSubgraph:
    def test_relabeling(self):
        g = generate_sbm_multimodal(2, 5, 0.6, 0.2, d_img=3, d_txt=3, seed=6)
        nodes = [1, 3, 4, 7]
        sub = induced_subgraph(g, nodes)
        assert sub.n == 4
        for u, v in sub.edges:
            assert (min(nodes[u], nodes[v]), max(nodes[u], nodes[v])) in {
                (min(a, b), max(a, b)) for a, b in g.edges}
        np.testing.assert_array_equal(sub.labels, g.labels[nodes])
