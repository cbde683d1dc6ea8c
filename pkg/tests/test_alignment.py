import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oct2octa.alignment import (
    PatchEmbeddingGrid,
    ProjectionHead,
    contrastive_distribution,
    csa_loss,
    patch_cosine_matrix,
    patchify_features,
    vsa_loss,
)
from oct2octa.errors import ConfigError, ShapeError, ValidationError
from oct2octa.volume import ProjectionMap


def grid_from_rows(rows: torch.Tensor, gl: int, gw: int) -> PatchEmbeddingGrid:
    return PatchEmbeddingGrid(
        embeddings=rows.reshape(gl, gw, -1), patch_side=1, normalized=True
    )


def orthonormal_grid(k: int, dim: int) -> PatchEmbeddingGrid:
    rows = torch.eye(dim, dtype=torch.float64)[:k]
    return grid_from_rows(rows, 1, k)


class TestPatchify:
    def seeded_head(self, in_channels, embed_dim, seed=0):
        head = ProjectionHead(in_channels, embed_dim)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            head.linear.weight.uniform_(-0.5, 0.5, generator=g)
            head.linear.bias.uniform_(-0.1, 0.1, generator=g)
        return head

    def test_constant_grid_gives_identical_embeddings(self):
        head = self.seeded_head(3, 8)
        feats = torch.full((3, 8, 8, 4), 0.25)
        grid = patchify_features(feats, 2, head)
        flat = grid.flat()
        assert torch.allclose(flat, flat[0].expand_as(flat))

    def test_full_size_patch_is_global_average(self):
        head = self.seeded_head(2, 4, seed=3)
        feats = torch.rand(2, 6, 6, 3)
        grid = patchify_features(feats, 6, head)
        assert grid.grid_shape == (1, 1)
        pooled = feats.mean(dim=(1, 2, 3))
        expected = head(pooled.unsqueeze(0))
        expected = expected / expected.norm()
        assert torch.allclose(grid.flat()[0], expected[0], atol=1e-6)

    def test_matches_brute_force_pooling_oracle(self):
        head = self.seeded_head(5, 7, seed=9)
        feats = torch.rand(5, 6, 4, 3, generator=torch.Generator().manual_seed(1))
        s = 2
        grid = patchify_features(feats, s, head)
        for a in range(3):
            for b in range(2):
                patch = feats[:, a * s : (a + 1) * s, b * s : (b + 1) * s, :]
                pooled = patch.reshape(5, -1).mean(dim=1)
                proj = head(pooled.unsqueeze(0))[0]
                expected = proj / proj.norm()
                assert torch.allclose(grid.embeddings[a, b], expected, atol=1e-6)

    def test_embeddings_are_unit_norm(self):
        head = self.seeded_head(4, 16, seed=2)
        feats = torch.rand(4, 8, 8, 2)
        grid = patchify_features(feats, 2, head)
        norms = grid.flat().double().norm(dim=-1)
        assert (norms - 1.0).abs().max().item() <= 1e-6

    def test_indivisible_plane_rejected(self):
        head = self.seeded_head(2, 4)
        with pytest.raises(ShapeError):
            patchify_features(torch.rand(2, 6, 6, 2), 4, head)


class TestContrastiveDistribution:
    def test_uniform_for_equal_similarities(self):
        k = 8
        rows = torch.ones(k, 4, dtype=torch.float64) / 2.0  # all identical unit vectors
        grid = grid_from_rows(rows, 2, 4)
        probs = contrastive_distribution(rows[0], grid, tau=0.5)
        assert torch.allclose(probs, torch.full((k,), 1.0 / k, dtype=torch.float64), atol=1e-9)

    def test_two_candidate_numeric_value(self):
        grid = orthonormal_grid(2, 2)
        anchor = grid.flat()[0]
        probs = contrastive_distribution(anchor, grid, tau=1.0)
        # softmax of logits (1, 0)
        expected = torch.tensor([math.e / (math.e + 1.0), 1.0 / (math.e + 1.0)],
                                dtype=torch.float64)
        assert torch.allclose(probs, expected, atol=1e-9)
        assert abs(probs[0].item() - 0.7311) < 1e-4
        assert abs(probs[1].item() - 0.2689) < 1e-4

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**16), k=st.integers(2, 12), tau=st.floats(0.05, 5.0))
    def test_sums_to_one_with_positive_entries(self, seed, k, tau):
        g = torch.Generator().manual_seed(seed)
        raw = torch.randn(k, 6, generator=g, dtype=torch.float64)
        rows = raw / raw.norm(dim=-1, keepdim=True)
        grid = grid_from_rows(rows, 1, k)
        probs = contrastive_distribution(rows[0], grid, tau)
        assert abs(probs.sum().item() - 1.0) <= 1e-6
        assert (probs > 0).all()

    def test_nonpositive_tau_rejected(self):
        grid = orthonormal_grid(2, 2)
        with pytest.raises(ConfigError):
            contrastive_distribution(grid.flat()[0], grid, tau=0.0)

    def test_unnormalized_rejected(self):
        rows = torch.full((4, 4), 2.0, dtype=torch.float64)
        grid = PatchEmbeddingGrid(rows.reshape(2, 2, 4), patch_side=1, normalized=True)
        with pytest.raises(ValidationError):
            contrastive_distribution(rows[0], grid, tau=1.0)


class TestCsaLoss:
    def test_uniform_landmark_ln_k(self):
        k = 16
        rows = torch.zeros(k, 4, dtype=torch.float64)
        rows[:, 0] = 1.0  # identical embeddings -> all similarities equal
        q = grid_from_rows(rows, 4, 4)
        p = grid_from_rows(rows.clone(), 4, 4)
        loss = csa_loss(q, p, tau=0.7)
        assert abs(loss.item() - math.log(16)) <= 1e-5

    def test_strong_positive_landmark(self):
        # positives at similarity 1, all 15 negatives at 0, tau = 0.1:
        # loss = log(1 + 15 exp(-10)) ~= 15 exp(-10) ~= 6.81e-4
        k, dim = 16, 32
        basis = torch.eye(dim, dtype=torch.float64)
        q = grid_from_rows(basis[:k], 4, 4)
        p = grid_from_rows(basis[:k].clone(), 4, 4)
        loss = csa_loss(q, p, tau=0.1)
        expected = math.log(1.0 + 15.0 * math.exp(-10.0))
        assert abs(loss.item() - expected) <= 1e-9
        assert loss.item() <= 1e-3

    def test_monotone_decrease_in_positive_similarity(self):
        k, dim = 16, 32
        b = torch.eye(dim, dtype=torch.float64)
        anchors = b[:k]
        extras = b[k : 2 * k]
        losses = []
        for sim in (0.0, 0.25, 0.5, 0.75, 1.0):
            pos = sim * anchors + math.sqrt(1.0 - sim**2) * extras
            q = grid_from_rows(anchors, 4, 4)
            p = grid_from_rows(pos, 4, 4)
            losses.append(csa_loss(q, p, tau=0.5).item())
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_matching_orthogonal_grids_beat_uniform_landmark(self):
        g = torch.Generator().manual_seed(4)
        raw = torch.randn(16, 256, generator=g, dtype=torch.float64)
        rows = raw / raw.norm(dim=-1, keepdim=True)  # ~orthogonal in high dim
        q = grid_from_rows(rows, 4, 4)
        p = grid_from_rows(rows.clone(), 4, 4)
        assert csa_loss(q, p, tau=0.5).item() < math.log(16)

    def test_nonnegative_and_mi_bound_sane(self):
        for seed in range(5):
            g = torch.Generator().manual_seed(seed)
            raw_q = torch.randn(9, 8, generator=g, dtype=torch.float64)
            raw_p = torch.randn(9, 8, generator=g, dtype=torch.float64)
            q = grid_from_rows(raw_q / raw_q.norm(dim=-1, keepdim=True), 3, 3)
            p = grid_from_rows(raw_p / raw_p.norm(dim=-1, keepdim=True), 3, 3)
            loss = csa_loss(q, p, tau=0.1).item()
            assert loss >= 0.0
            k = 9
            assert math.log(k - 1) - loss <= math.log(k - 1)

    def test_shape_mismatch(self):
        q = orthonormal_grid(4, 8)
        p = orthonormal_grid(2, 8)
        with pytest.raises(ShapeError):
            csa_loss(q, p, tau=1.0)


class TestPatchCosineMatrix:
    def test_identical_patches_all_ones(self):
        pm = np.full((8, 8), 0.5)
        sims = patch_cosine_matrix(pm, 4)
        assert torch.allclose(sims, torch.ones(4, 4, dtype=torch.float64))

    def test_orthogonal_indicator_patches(self):
        pm = np.zeros((2, 4))
        pm[0, 0] = 1.0  # patch (0,0): corner indicator
        pm[1, 3] = 1.0  # patch (0,1): different in-patch position
        sims = patch_cosine_matrix(pm, 2)
        assert sims[0, 1].item() == 0.0

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(17)
        pm = rng.random((12, 8))
        s = 4
        sims = patch_cosine_matrix(pm, s).numpy()
        gl, gw = 12 // s, 8 // s
        patches = []
        for i in range(gl):
            for j in range(gw):
                patches.append(pm[i * s : (i + 1) * s, j * s : (j + 1) * s].reshape(-1))
        for a in range(len(patches)):
            for b in range(len(patches)):
                if a == b:
                    continue
                pa, pb = patches[a], patches[b]
                expected = float(pa @ pb / (np.linalg.norm(pa) * np.linalg.norm(pb)))
                assert abs(sims[a, b] - expected) <= 1e-6

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_flat_index_convention(self):
        # entry for patches (i, j) and (m, n) sits at row i*(W/S)+j, col m*(W/S)+n
        pm = np.zeros((4, 6))
        pm[0:2, 2:4] = 1.0  # patch (0, 1) all ones
        pm[2:4, 4:6] = 1.0  # patch (1, 2) all ones
        sims = patch_cosine_matrix(pm, 2).numpy()
        assert sims[0 * 3 + 1, 1 * 3 + 2] == pytest.approx(1.0)

    def test_symmetric_with_entries_in_range(self):
        rng = np.random.default_rng(3)
        pm = rng.random((16, 16))
        sims = patch_cosine_matrix(pm, 4)
        assert torch.equal(sims, sims.T)
        assert sims.min().item() >= -1.0
        assert sims.max().item() <= 1.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(23)
        pm = rng.random((8, 8))
        a = patch_cosine_matrix(pm, 2)
        b = patch_cosine_matrix(0.37 * pm, 2)
        assert torch.allclose(a, b, atol=1e-9)

    def test_zero_norm_patch_warns_and_gives_zero(self):
        pm = np.zeros((4, 4))
        pm[0, 0] = 1.0
        with pytest.warns(RuntimeWarning):
            sims = patch_cosine_matrix(pm, 2)
        assert sims[0, 1].item() == 0.0

    def test_indivisible_rejected(self):
        with pytest.raises(ShapeError):
            patch_cosine_matrix(np.zeros((5, 5)), 2)


class TestVsaLoss:
    def test_identical_maps_zero(self):
        rng = np.random.default_rng(2)
        pm = rng.random((16, 16))
        assert vsa_loss(pm, pm.copy(), 4).item() == 0.0

    def test_constructed_unit_gap(self):
        # map A: all patches identical -> off-diagonal cosines all 1
        pm_a = np.ones((16, 16))
        # map B: patch p holds a lone indicator at in-patch position p
        pm_b = np.zeros((16, 16))
        s = 4
        for p in range(16):
            gi, gj = divmod(p, 4)
            li, lj = divmod(p, s)
            pm_b[gi * s + li, gj * s + lj] = 1.0
        assert vsa_loss(pm_a, pm_b, s).item() == pytest.approx(1.0)

    def test_argument_symmetry(self):
        rng = np.random.default_rng(31)
        pm_a = rng.random((8, 8))
        pm_b = rng.random((8, 8))
        assert vsa_loss(pm_a, pm_b, 2).item() == vsa_loss(pm_b, pm_a, 2).item()

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**16))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        pm_a = rng.random((8, 8))
        pm_b = rng.random((8, 8))
        assert vsa_loss(pm_a, pm_b, 4).item() >= 0.0

    def test_zero_iff_equal_matrices(self):
        rng = np.random.default_rng(6)
        pm_a = rng.random((8, 8))
        pm_b = pm_a * 2.0 / 3.0  # scaling preserves all cosines
        pm_b = np.clip(pm_b, 0.0, 1.0)
        assert vsa_loss(pm_a, pm_b, 4).item() == pytest.approx(0.0, abs=1e-12)
        pm_c = rng.random((8, 8))
        assert vsa_loss(pm_a, pm_c, 4).item() > 0.0

    def test_dims_mismatch(self):
        with pytest.raises(ShapeError):
            vsa_loss(np.zeros((8, 8)), np.zeros((4, 4)), 2)

    def test_accepts_projection_map_objects(self):
        rng = np.random.default_rng(8)
        pm = ProjectionMap(rng.random((8, 8)))
        assert vsa_loss(pm, pm, 4).item() == 0.0

    def test_gradient_flows_through_torch_inputs(self):
        g = torch.Generator().manual_seed(0)
        pm_a = torch.rand(8, 8, generator=g, dtype=torch.float64)
        pm_b = torch.rand(8, 8, generator=g, dtype=torch.float64).requires_grad_(True)
        vsa_loss(pm_a, pm_b, 4).backward()
        assert pm_b.grad is not None
        assert pm_b.grad.abs().sum().item() > 0
