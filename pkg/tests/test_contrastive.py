import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from mixtask.contrastive import PairBatch, build_pairs, info_nce, info_nce_loss, positive_rank_mean, similarity

from oracles import central_differences, info_nce_oracle, max_relative_error


def random_embeddings(n_tasks, steps, dim, seed, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return {f"task{i}": torch.randn(steps, dim, generator=g, dtype=dtype) for i in range(n_tasks)}


def check_structure(pairs: PairBatch):
    for i in range(len(pairs.queries)):
        qt, qs = pairs.query_source[i]
        keys = pairs.key_source[i]
        pos = pairs.positive_index[i].item()
        assert keys[pos][0] == qt and keys[pos][1] != qs
        for j, (kt, _) in enumerate(keys):
            if j != pos:
                assert kt != qt


class TestBuildPairs:
    def test_two_tasks_forced(self):
        emb = random_embeddings(2, 2, 3, 0)
        pairs = build_pairs(emb, 20, 2, np.random.default_rng(0))
        check_structure(pairs)
        for i in range(20):
            neg = pairs.key_source[i][1 - pairs.positive_index[i].item()]
            assert neg[0] == 1 - pairs.query_source[i][0]

    def test_exhaustive_ten_tasks(self):
        emb = random_embeddings(10, 64, 5, 1)
        pairs = build_pairs(emb, 10, 8, np.random.default_rng(1))
        assert pairs.keys.shape == (10, 8, 5)
        check_structure(pairs)

    @given(st.integers(2, 6), st.integers(2, 10), st.integers(1, 12), st.integers(2, 9), st.integers(0, 10_000))
    def test_structure_property(self, n_tasks, steps, nq, nk, seed):
        pairs = build_pairs(random_embeddings(n_tasks, steps, 2, seed), nq, nk, np.random.default_rng(seed))
        check_structure(pairs)

    def test_values_match_sources(self):
        emb = list(random_embeddings(3, 6, 4, 2).values())
        pairs = build_pairs(emb, 5, 4, np.random.default_rng(3))
        for i in range(5):
            t, s = pairs.query_source[i]
            assert torch.equal(pairs.queries[i], emb[t][s])
            for j, (kt, ks) in enumerate(pairs.key_source[i]):
                assert torch.equal(pairs.keys[i, j], emb[kt][ks])

    def test_positive_slot_randomised(self):
        pairs = build_pairs(random_embeddings(4, 8, 2, 0), 400, 4, np.random.default_rng(0))
        counts = np.bincount(pairs.positive_index.numpy(), minlength=4)
        assert counts.min() > 60

    def test_single_task_rejected(self):
        with pytest.raises(ValueError):
            build_pairs(random_embeddings(1, 10, 2, 0), 4, 2, np.random.default_rng(0))

    def test_gradient_reaches_embeddings(self):
        emb = {k: v.requires_grad_() for k, v in random_embeddings(3, 5, 2, 0).items()}
        info_nce_loss(build_pairs(emb, 6, 3, np.random.default_rng(0))).backward()
        assert any(v.grad is not None and v.grad.abs().sum() > 0 for v in emb.values())


class TestSimilarity:
    def test_examples(self):
        a = torch.tensor([1.0, 2.0])
        assert similarity(a, a).item() == 0.0
        assert similarity(torch.tensor([0.0, 0.0]), torch.tensor([0.0, 1.0])).item() == -1.0

    @given(st.integers(0, 10_000))
    def test_symmetry(self, seed):
        g = torch.Generator().manual_seed(seed)
        a, b = torch.randn(5, 3, generator=g), torch.randn(5, 3, generator=g)
        assert torch.equal(similarity(a, b), similarity(b, a))


class TestInfoNce:
    def test_equidistant_keys(self):
        q = torch.zeros(3, 2)
        angles = torch.arange(5) * 2 * math.pi / 5
        keys = torch.stack([torch.cos(angles), torch.sin(angles)], -1).expand(3, 5, 2)
        j = info_nce(PairBatch(q, keys, torch.tensor([0, 2, 4])))
        assert j.item() == pytest.approx(math.log(1 / 5), abs=1e-6)

    def test_dominated_softmax(self):
        q = torch.zeros(1, 2, dtype=torch.float64)
        keys = torch.tensor([[[10.0, 0.0]] * 8], dtype=torch.float64)
        keys[0, 3] = 0.0
        j = info_nce(PairBatch(q, keys, torch.tensor([3]))).item()
        assert j == pytest.approx(-math.log(1 + 7 * math.exp(-10)), rel=1e-12)
        assert j == pytest.approx(-7 * math.exp(-10), rel=1e-3)

    @given(st.integers(1, 10), st.integers(2, 9), st.integers(1, 8), st.integers(0, 10_000))
    def test_cross_entropy_oracle(self, nq, nk, dim, seed):
        g = torch.Generator().manual_seed(seed)
        q = torch.randn(nq, dim, generator=g, dtype=torch.float64) * 3
        keys = torch.randn(nq, nk, dim, generator=g, dtype=torch.float64) * 3
        pos = torch.randint(nk, (nq,), generator=g)
        got = info_nce_loss(PairBatch(q, keys, pos))
        assert got.item() == pytest.approx(info_nce_oracle(q, keys, pos).item(), rel=1e-12, abs=1e-12)

    @given(st.integers(0, 10_000), st.floats(-100, 100))
    def test_translation_invariance(self, seed, shift):
        g = torch.Generator().manual_seed(seed)
        q, keys = torch.randn(4, 3, generator=g, dtype=torch.float64), torch.randn(4, 5, 3, generator=g, dtype=torch.float64)
        pos = torch.randint(5, (4,), generator=g)
        c = torch.full((3,), shift, dtype=torch.float64)
        a = info_nce(PairBatch(q, keys, pos)).item()
        b = info_nce(PairBatch(q + c, keys + c, pos)).item()
        assert a == pytest.approx(b, rel=1e-9, abs=1e-9)

    @given(st.integers(0, 10_000), st.floats(0.0, 20.0))
    def test_bounds(self, seed, gap):
        g = torch.Generator().manual_seed(seed)
        q = torch.randn(3, 4, generator=g, dtype=torch.float64)
        direction = torch.randn(3, 6, 4, generator=g, dtype=torch.float64)
        direction = direction / direction.norm(dim=-1, keepdim=True)
        keys = q[:, None, :] + (gap + torch.rand(3, 6, 1, generator=g, dtype=torch.float64)) * direction
        keys[:, 2] = q
        loss = info_nce_loss(PairBatch(q, keys, torch.full((3,), 2))).item()
        assert 0 <= loss <= math.log(1 + 5 * math.exp(-gap)) + 1e-12

    def test_stable_for_large_distances(self):
        q = torch.zeros(1, 1)
        keys = torch.tensor([[[1e4], [2e4]]])
        assert torch.isfinite(info_nce(PairBatch(q, keys, torch.tensor([1]))))

    def test_gradient_matches_finite_differences(self):
        g = torch.Generator().manual_seed(0)
        q = torch.randn(4, 8, generator=g, dtype=torch.float64, requires_grad=True)
        keys = torch.randn(4, 5, 8, generator=g, dtype=torch.float64, requires_grad=True)
        pos = torch.tensor([0, 3, 1, 4])

        def loss():
            return info_nce_loss(PairBatch(q, keys, pos))
        analytic = torch.autograd.grad(loss(), [q, keys])
        assert max_relative_error(analytic, central_differences(loss, [q, keys])) < 1e-3

    def test_positive_rank(self):
        q = torch.zeros(2, 1)
        keys = torch.tensor([[[0.0], [1.0], [2.0]], [[0.5], [3.0], [0.1]]])
        # first positive is nearest (rank 0); second has one closer key (rank 1)
        assert positive_rank_mean(PairBatch(q, keys, torch.tensor([0, 0]))) == 0.5
