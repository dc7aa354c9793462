import logging

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from cpfs3d import oracles
from cpfs3d.backbone import SeedFeatureSet
from cpfs3d.protobank import (AssignmentResult, CrossAttention, GeometricPrototypeBank, assign, init_bank,
                              momentum_update, refine_seeds)


def test_init_bank_deterministic_and_unit_norm():
    a, b = init_bank(3, 128, 256), init_bank(3, 128, 256)
    assert torch.equal(a, b)
    assert a.shape == (128, 256)
    assert torch.allclose(a.norm(dim=1), torch.ones(128), atol=1e-6)
    assert not torch.equal(a, init_bank(4, 128, 256))


def test_init_bank_abs_variant_is_nonnegative():
    g = init_bank(0, 16, 8, init="abs_gaussian")
    assert (g >= 0).all()
    assert torch.allclose(g.norm(dim=1), torch.ones(16), atol=1e-6)
    with pytest.raises(ValueError):
        init_bank(0, 4, 4, init="uniform")


def test_bank_defaults_and_validation():
    bank = GeometricPrototypeBank()
    assert bank.W == 128 and bank.g.shape == (128, 256) and bank.gamma == 0.999
    assert not bank.g.requires_grad
    assert list(bank.parameters()) == []
    with pytest.raises(ValueError):
        GeometricPrototypeBank(W=0)
    with pytest.raises(ValueError):
        GeometricPrototypeBank(gamma=1.5)


def test_assign_hand_case():
    bank = torch.eye(4)[:2]
    res = assign(torch.tensor([[0.9, 0.1, 0.0, 0.0]]), bank)
    assert res.labels.tolist() == [0]


def test_assign_self_similarity():
    bank = init_bank(0, 10, 6)
    assert assign(bank.clone(), bank).labels.tolist() == list(range(10))


def test_assign_background_and_tie():
    bank = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    feats = torch.tensor([[1.0, 1.0], [0.0, 2.0], [5.0, 0.0]])
    res = assign(feats, bank, torch.tensor([True, True, False]))
    assert res.labels.tolist() == [0, 1, -1]


def test_assign_zero_feature_warns(caplog):
    with caplog.at_level(logging.WARNING):
        res = assign(torch.zeros(1, 3), torch.eye(3)[[2, 1]])
    assert res.labels.tolist() == [0]
    assert "zero-norm" in caplog.text


def test_assign_empty_foreground():
    res = assign(torch.randn(5, 4), init_bank(0, 3, 4), torch.zeros(5, dtype=torch.bool))
    assert res.labels.tolist() == [-1] * 5 and res.groups == {} and res.nonempty_ids == []


def test_assign_matches_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n, W, d = int(rng.integers(1, 30)), int(rng.integers(1, 12)), int(rng.integers(2, 9))
        f, g = rng.normal(size=(n, d)), rng.normal(size=(W, d))
        res = assign(torch.from_numpy(f), torch.from_numpy(g))
        assert res.labels.tolist() == oracles.assign(f, g)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 10), st.integers(0, 10_000))
def test_assignment_consistency(n, W, seed):
    gen = torch.Generator().manual_seed(seed)
    feats = torch.randn(n, 5, generator=gen, dtype=torch.float64)
    fg = torch.rand(n, generator=gen) > 0.3
    res = assign(feats, init_bank(seed, W, 5).double(), fg)
    assert sum(rows.shape[0] for rows in res.groups.values()) == int(fg.sum())
    assert ((res.labels >= 0) == fg).all()
    for w in res.nonempty_ids:
        rows = feats[res.labels == w]
        assert torch.equal(rows, res.groups[w])
        assert torch.equal(rows.mean(dim=0), res.means[w])


def _single_group(w, mean):
    mean = torch.as_tensor(mean, dtype=torch.float64)
    return AssignmentResult(torch.tensor([w]), {w: mean[None]}, {w: mean})


def test_momentum_hand_value():
    bank = torch.tensor([[1.0, 0.0], [0.3, 0.3]], dtype=torch.float64)
    out = momentum_update(bank, _single_group(0, [0.0, 2.0]), 0.9)
    assert torch.allclose(out[0], torch.tensor([0.9, 0.2], dtype=torch.float64), rtol=0, atol=1e-15)
    assert torch.equal(out[1], bank[1])


def test_momentum_endpoints():
    rng = np.random.default_rng(1)
    bank = torch.from_numpy(rng.normal(size=(5, 4)))
    feats = torch.from_numpy(rng.normal(size=(20, 4)))
    res = assign(feats, bank)
    assert torch.equal(momentum_update(bank, res, 1.0), bank)
    copied = momentum_update(bank, res, 0.0)
    for w in range(5):
        expected = res.means[w] if w in res.means else bank[w]
        assert torch.equal(copied[w], expected)


def test_momentum_matches_direct_evaluation():
    rng = np.random.default_rng(2)
    for _ in range(40):
        bank = rng.normal(size=(6, 5))
        feats = torch.from_numpy(rng.normal(size=(15, 5)))
        res = assign(feats, torch.from_numpy(bank))
        gamma = float(rng.uniform())
        groups = {w: rows.tolist() for w, rows in res.groups.items()}
        for renorm in (False, True):
            got = momentum_update(torch.from_numpy(bank), res, gamma, renorm).numpy()
            assert np.abs(got - np.asarray(oracles.momentum_update(bank, groups, gamma, renorm))).max() <= 1e-12


def test_bank_module_update_counts_usage():
    bank = GeometricPrototypeBank(W=4, d=3, gamma=0.5, renormalize=False)
    feats = bank.g[[1, 1, 3]].clone()
    res = bank.assign(feats)
    before = bank.g.clone()
    bank.momentum_update(res)
    assert bank.usage_count.tolist() == [0, 2, 0, 1]
    assert torch.equal(bank.g[0], before[0]) and torch.equal(bank.g[2], before[2])


def test_momentum_steps_shrink_on_stationary_features():
    gen = torch.Generator().manual_seed(0)
    centers = F.normalize(torch.randn(8, 16, generator=gen), dim=1)
    bank = GeometricPrototypeBank(W=8, d=16, gamma=0.999, seed=1)
    medians = []
    for _ in range(200):
        idx = torch.randint(0, 8, (64,), generator=gen)
        feats = centers[idx] + 0.05 * torch.randn(64, 16, generator=gen)
        before = bank.g.clone()
        bank.momentum_update(bank.assign(feats))
        medians.append(float((bank.g - before).norm(dim=1).median()))
    assert np.mean(medians[-20:]) < np.mean(medians[:20])


def _seeds(feats):
    M = feats.shape[0]
    return SeedFeatureSet(feats, torch.zeros(M, 3), torch.zeros(M, dtype=torch.bool), torch.full((M,), -1))


def test_refine_zero_values_is_identity():
    attn = CrossAttention(8)
    torch.nn.init.zeros_(attn.v.weight)
    torch.nn.init.zeros_(attn.v.bias)
    f = torch.randn(4, 8)
    out = refine_seeds(_seeds(f), init_bank(0, 3, 8), attn)
    assert torch.equal(out.features, f)


def test_refine_single_prototype_weight_is_one():
    attn = CrossAttention(8)
    w = attn.weights(torch.randn(5, 8), init_bank(0, 1, 8))
    assert torch.equal(w, torch.ones(5, 1))


def test_refine_matches_dense_oracle():
    torch.manual_seed(0)
    attn = CrossAttention(8).double()
    f = torch.randn(4, 8, dtype=torch.float64)
    g = init_bank(1, 3, 8).double()
    seeds = _seeds(f)
    out = refine_seeds(seeds, g, attn)
    p = {k: v.detach().numpy() for k, v in attn.state_dict().items()}
    ref = oracles.attention(f.numpy(), g.numpy(), p["q.weight"], p["q.bias"], p["k.weight"], p["k.bias"],
                            p["v.weight"], p["v.bias"])
    assert np.abs(out.features.detach().numpy() - np.asarray(ref)).max() < 1e-6
    assert out.positions is seeds.positions
