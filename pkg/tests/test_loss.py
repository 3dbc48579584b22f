import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mpcs.errors import DegenerateBatch, ZeroVector
from mpcs.loss import (
    ContrastiveBatch,
    cosine_sim,
    interleaved_pairs,
    nt_xent,
    nt_xent_grad,
    nt_xent_loss,
    per_anchor_losses,
)


def oracle_anchor_losses(Z, pair_of, tau, exclude_positive=False):
    """Direct double-loop transcription of the per-anchor NT-Xent loss."""
    Z = np.asarray(Z, dtype=np.float64)
    n = len(Z)
    out = []
    for i in range(n):
        def s(a, b):
            return float(Z[a] @ Z[b] / (math.sqrt(Z[a] @ Z[a]) * math.sqrt(Z[b] @ Z[b])))

        num = math.exp(s(i, pair_of[i]) / tau)
        den = 0.0
        for k in range(n):
            if k == i or (exclude_positive and k == pair_of[i]):
                continue
            den += math.exp(s(i, k) / tau)
        out.append(math.log(den) - math.log(num))
    return np.array(out)


def oracle_loss(Z, pair_of, tau):
    return float(np.mean(oracle_anchor_losses(Z, pair_of, tau)))


def _random_batch(rng, n_views, dim, tau, shuffle=True):
    Z = rng.normal(size=(n_views, dim))
    pair_of = interleaved_pairs(n_views)
    if shuffle:
        perm = rng.permutation(n_views)
        inv = np.argsort(perm)
        Z = Z[perm]
        pair_of = [int(inv[pair_of[perm[i]]]) for i in range(n_views)]
    return ContrastiveBatch(torch.tensor(Z, dtype=torch.float64), pair_of, tau)


def _fd_grad(batch, h=1e-6):
    Z = batch.Z.detach().clone()
    g = np.zeros(Z.shape)
    for idx in np.ndindex(*Z.shape):
        plus, minus = Z.clone(), Z.clone()
        plus[idx] += h
        minus[idx] -= h
        lp = nt_xent(ContrastiveBatch(plus, batch.pair_of, batch.temperature)).item()
        lm = nt_xent(ContrastiveBatch(minus, batch.pair_of, batch.temperature)).item()
        g[idx] = (lp - lm) / (2 * h)
    return g


# ---------------------------------------------------------------- cosine


def test_cosine_examples():
    assert cosine_sim([1, 0, 0], [1, 0, 0]) == pytest.approx(1.0)
    assert cosine_sim([1, 0, 0], [-1, 0, 0]) == pytest.approx(-1.0)
    assert cosine_sim([1, 1, 0], [1, 0, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-8)


def test_cosine_zero_vector():
    with pytest.raises(ZeroVector):
        cosine_sim([0, 0], [1, 0])


# ---------------------------------------------------------------- loss values


def test_single_pair_loss_and_grad_are_zero():
    rng = np.random.default_rng(0)
    for _ in range(20):
        batch = ContrastiveBatch(torch.tensor(rng.normal(size=(2, 5))), [1, 0], 0.01)
        assert nt_xent(batch).item() == 0.0
        assert np.all(nt_xent_grad(batch) == 0.0)


def test_two_pair_hand_value():
    e1, e2 = [1.0, 0.0], [0.0, 1.0]
    batch = ContrastiveBatch(torch.tensor([e1, e1, e2, e2], dtype=torch.float64), [1, 0, 3, 2], 1.0)
    expected = -math.log(math.e / (math.e + 2))
    np.testing.assert_allclose(per_anchor_losses(batch).numpy(), [expected] * 4, atol=1e-12)
    assert nt_xent(batch).item() == pytest.approx(0.55144471, abs=1e-8)
    assert oracle_loss(batch.Z.numpy(), batch.pair_of, 1.0) == pytest.approx(expected, abs=1e-12)


def test_scale_invariance():
    rng = np.random.default_rng(1)
    batch = _random_batch(rng, 6, 4, 0.1)
    scaled = ContrastiveBatch(batch.Z * 5, batch.pair_of, 0.1)
    assert nt_xent(scaled).item() == pytest.approx(nt_xent(batch).item(), abs=1e-12)


@pytest.mark.parametrize("tau", [0.01, 0.1, 1.0])
def test_oracle_equivalence(tau):
    rng = np.random.default_rng(int(tau * 1000))
    for _ in range(40):
        n_views = 2 * int(rng.integers(1, 5))
        batch = _random_batch(rng, n_views, int(rng.integers(2, 6)), tau)
        np.testing.assert_allclose(per_anchor_losses(batch).numpy(),
                                   oracle_anchor_losses(batch.Z.numpy(), batch.pair_of, tau), atol=1e-9, rtol=0)


def test_strict_exclusion_matches_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        batch = _random_batch(rng, 6, 3, 0.5)
        np.testing.assert_allclose(
            per_anchor_losses(batch, exclude_positive=True).numpy(),
            oracle_anchor_losses(batch.Z.numpy(), batch.pair_of, 0.5, exclude_positive=True), atol=1e-9)
    with pytest.raises(DegenerateBatch):
        per_anchor_losses(ContrastiveBatch(torch.ones(2, 2), [1, 0], 1.0), exclude_positive=True)


def test_stable_at_small_temperature():
    Z = torch.tensor([[1.0, 0.0], [0.9, 0.1], [-1.0, 0.0], [-0.9, -0.1]], dtype=torch.float64)
    loss = nt_xent(ContrastiveBatch(Z, [1, 0, 3, 2], 0.001))
    assert torch.isfinite(loss)


def test_separated_clusters_approach_zero():
    # each pair is its own tight cluster; positives beat every negative
    Z = torch.tensor([[1.0, 0.0], [1.0, 0.01], [0.0, 1.0], [0.01, 1.0], [-1.0, 0.0], [-1.0, 0.01]],
                     dtype=torch.float64)
    losses = per_anchor_losses(ContrastiveBatch(Z, interleaved_pairs(6), 0.01))
    assert losses.max().item() < 1e-6


def test_monotone_in_positive_similarity():
    rng = np.random.default_rng(3)
    Z = rng.normal(size=(6, 3))
    prev = None
    for t in np.linspace(0, 1, 6):
        Zt = Z.copy()
        Zt[1] = (1 - t) * Z[1] + t * Z[0]
        loss = per_anchor_losses(ContrastiveBatch(torch.tensor(Zt), interleaved_pairs(6), 0.5))[0].item()
        if prev is not None:
            assert loss <= prev + 1e-12
        prev = loss


def test_permutation_equivariance():
    rng = np.random.default_rng(4)
    batch = _random_batch(rng, 8, 4, 0.2, shuffle=False)
    perm = rng.permutation(8)
    inv = np.argsort(perm)
    pair_p = [int(inv[batch.pair_of[perm[i]]]) for i in range(8)]
    permuted = ContrastiveBatch(batch.Z[perm], pair_p, 0.2)
    np.testing.assert_allclose(per_anchor_losses(permuted).numpy(), per_anchor_losses(batch).numpy()[perm],
                               atol=1e-12)
    assert nt_xent(permuted).item() == pytest.approx(nt_xent(batch).item(), abs=1e-12)


def test_batch_validation():
    with pytest.raises(DegenerateBatch):
        ContrastiveBatch(torch.ones(1, 3), [0], 1.0)
    with pytest.raises(ValueError):
        ContrastiveBatch(torch.ones(4, 3), [0, 1, 2, 3], 1.0)
    with pytest.raises(ValueError):
        ContrastiveBatch(torch.ones(4, 3), [1, 2, 3, 0], 1.0)
    with pytest.raises(ValueError):
        ContrastiveBatch(torch.ones(2, 3), [1, 0], 0.0)
    with pytest.raises(ZeroVector):
        nt_xent(ContrastiveBatch(torch.tensor([[0.0, 0.0], [1.0, 0.0]]), [1, 0], 1.0))


def test_training_entry_point_uses_interleaved_pairs():
    rng = np.random.default_rng(5)
    Z = torch.tensor(rng.normal(size=(6, 3)))
    assert nt_xent_loss(Z, 0.1).item() == pytest.approx(oracle_loss(Z.numpy(), interleaved_pairs(6), 0.1), abs=1e-9)


# ---------------------------------------------------------------- gradients


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    for _ in range(10):
        n_views = 2 * int(rng.integers(1, 9))
        batch = _random_batch(rng, n_views, int(rng.integers(2, 5)), float(rng.choice([0.1, 0.5, 1.0])))
        g = nt_xent_grad(batch)
        fd = _fd_grad(batch)
        assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)


def test_two_pair_gradient_finite_difference():
    batch = ContrastiveBatch(torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]], dtype=torch.float64),
                             [1, 0, 3, 2], 1.0)
    np.testing.assert_allclose(nt_xent_grad(batch), _fd_grad(batch, 1e-6), atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_gradient_orthogonal_on_unit_sphere(seed, n_pairs):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(2 * n_pairs, 4))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    g = nt_xent_grad(ContrastiveBatch(torch.tensor(Z), interleaved_pairs(2 * n_pairs), 0.5))
    np.testing.assert_allclose(np.sum(g * Z, axis=1), 0.0, atol=1e-10)
