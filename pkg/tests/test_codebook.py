import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from chunkspace.codebook import Codebook, commitment_loss, quantize, straight_through
from helpers import fd_max_rel_error


def _book(codes, decay=0.99, eps=1e-5):
    codes = torch.as_tensor(codes, dtype=torch.float64)
    book = Codebook(len(codes), codes.shape[1], decay, eps).double()
    book.codes.copy_(codes)
    return book


def test_nearest_code_two_dimensions():
    idx, zq = quantize(torch.tensor([[0.9, 0.1]], dtype=torch.float64), _book([[0, 0], [1, 0]]))
    assert idx.tolist() == [1]
    assert zq.tolist() == [[1.0, 0.0]]


def test_exact_code_maps_to_itself():
    book = _book(np.random.default_rng(0).normal(size=(5, 3)))
    idx, zq = book.quantize(book.codes[3:4].clone())
    assert idx.tolist() == [3] and torch.equal(zq, book.codes[3:4])


def test_ties_resolve_to_lowest_index():
    idx, _ = _book([[1, 0], [-1, 0]]).quantize(torch.zeros(1, 2, dtype=torch.float64))
    assert idx.tolist() == [0]


def test_quantize_agrees_with_brute_force_scan():
    rng = np.random.default_rng(1)
    codes = rng.normal(size=(4, 16))
    z = rng.normal(size=(1000, 16))
    idx, _ = _book(codes).quantize(torch.from_numpy(z))
    brute = [min(range(4), key=lambda i: float(np.sum((row - codes[i]) ** 2))) for row in z]
    assert idx.tolist() == brute


def test_quantize_rejects_wrong_width():
    with pytest.raises(ValueError):
        _book([[0, 0], [1, 1]]).quantize(torch.zeros(2, 3, dtype=torch.float64))


def test_lookup_range_is_checked():
    book = _book([[0, 0], [1, 1]])
    with pytest.raises(IndexError):
        book.lookup([2])


def test_straight_through_value_and_gradient():
    z = torch.randn(5, 16, dtype=torch.float64, requires_grad=True)
    zq = torch.randn(5, 16, dtype=torch.float64)
    out = straight_through(z, zq)
    assert torch.equal(out.detach(), zq)
    out.sum().backward()
    assert torch.equal(z.grad, torch.ones_like(z))


def test_straight_through_gradient_equals_decoder_gradient_at_the_code():
    torch.manual_seed(0)
    dec = torch.nn.Sequential(torch.nn.Linear(4, 6), torch.nn.Tanh(), torch.nn.Linear(6, 3)).double()
    target = torch.randn(2, 3, dtype=torch.float64)
    zq = torch.randn(2, 4, dtype=torch.float64)
    z = (zq + 0.3 * torch.randn(2, 4, dtype=torch.float64)).requires_grad_()
    ((dec(straight_through(z, zq)) - target) ** 2).sum().backward()
    # oracle: finite differences of the decoder loss with respect to its own input, taken at z_q
    probe = zq.clone().requires_grad_()
    assert fd_max_rel_error(lambda: ((dec(probe) - target) ** 2).sum(), [probe]) < 1e-4
    torch.testing.assert_close(z.grad, probe.grad, rtol=0, atol=1e-12)


def test_commitment_loss_values_and_gradient():
    zq = torch.randn(5, 16, dtype=torch.float64)
    assert float(commitment_loss(zq.clone(), zq)) == 0.0
    z = zq.clone()
    z[2, 0] += 1.0
    assert float(commitment_loss(z, zq)) == pytest.approx(1 / 80, abs=1e-15)
    z = (zq + torch.randn(5, 16, dtype=torch.float64)).requires_grad_()
    zq_param = zq.clone().requires_grad_()
    commitment_loss(z, zq_param).backward()
    torch.testing.assert_close(z.grad, 2 * (z - zq).detach() / 80, rtol=0, atol=1e-15)
    assert zq_param.grad is None
    z.grad = None
    assert fd_max_rel_error(lambda: commitment_loss(z, zq), [z]) < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=6, max_size=6), st.lists(st.floats(-10, 10), min_size=6, max_size=6))
def test_commitment_loss_is_nonnegative_and_zero_only_at_the_code(a, b):
    z = torch.tensor(a, dtype=torch.float64).view(2, 3)
    zq = torch.tensor(b, dtype=torch.float64).view(2, 3)
    val = float(commitment_loss(z, zq))
    assert val >= 0.0
    assert (val == 0.0) == bool(torch.equal(z, zq))


def test_ema_fixed_point():
    book = _book([[0.0, 1.0], [2.0, -1.0], [5.0, 5.0]])
    book.ema_counts.fill_(10.0)
    book.ema_sums.copy_(book.codes * 10.0)
    book.lifetime.fill_(10.0)
    # an exactly balanced batch keeps counts at their converged value
    z = book.codes.repeat_interleave(10, 0)
    idx = torch.arange(3).repeat_interleave(10)
    before = book.codes.clone()
    for _ in range(5):
        book.ema_update(z, idx)
    assert torch.max(torch.abs(book.codes - before)) < 1e-9


def test_ema_without_memory_copies_the_sample():
    book = _book([[0.0, 0.0], [3.0, 3.0]], decay=0.0, eps=1e-12)
    z = torch.tensor([[0.4, -0.2]], dtype=torch.float64)
    book.ema_update(z, torch.tensor([0]))
    torch.testing.assert_close(book.codes[0], z[0], rtol=0, atol=1e-9)
    # the never-assigned code keeps its initial value
    assert book.codes[1].tolist() == [3.0, 3.0]


def test_ema_rejects_bad_assignment():
    with pytest.raises(IndexError):
        _book([[0, 0], [1, 1]]).ema_update(torch.zeros(1, 2, dtype=torch.float64), torch.tensor([2]))


def _three_clusters(rng, count):
    centers = np.array([[2.0, 0.0], [-1.0, 1.7], [-1.0, -1.7]])
    labels = rng.integers(0, 3, count)
    return centers, centers[labels] + 0.3 * rng.normal(size=(count, 2))


def test_ema_converges_to_cluster_means():
    rng = np.random.default_rng(2)
    centers, _ = _three_clusters(rng, 1)
    book = _book(centers + rng.normal(scale=0.4, size=centers.shape))
    for _ in range(200):
        _, pts = _three_clusters(rng, 256)
        z = torch.from_numpy(pts)
        idx, _ = book.quantize(z)
        book.ema_update(z, idx)
    # oracle: Lloyd iterations (exact k-means) on a large fresh sample
    _, pts = _three_clusters(rng, 20000)
    means = book.codes.numpy().copy()
    for _ in range(20):
        lab = np.argmin(((pts[:, None] - means[None]) ** 2).sum(-1), 1)
        means = np.stack([pts[lab == i].mean(0) for i in range(3)])
    assert np.max(np.linalg.norm(book.codes.numpy() - means, axis=1)) < 0.05


def test_unused_code_drift_is_bounded():
    book = _book([[0.0, 0.0], [4.0, 4.0]], eps=1e-5)
    book.ema_counts.fill_(5.0)
    book.ema_sums.copy_(book.codes * 5.0)
    book.lifetime.fill_(5.0)
    start = book.codes[1].clone()
    for _ in range(50):
        book.ema_update(torch.zeros(8, 2, dtype=torch.float64), torch.zeros(8, dtype=torch.long))
    # an idle code decays with its own accumulators; only the count smoothing moves it
    drift = float(torch.norm(book.codes[1] - start))
    n_idle = 5.0 * 0.99 ** 50
    assert drift <= float(torch.norm(start)) * 4 * 1e-5 / n_idle


def test_kmeanspp_seeding_picks_batch_points():
    book = Codebook(4, 3)
    z = torch.randn(64, 3)
    book.seed_from(z, np.random.default_rng(0))
    for code in book.codes:
        assert bool((z == code).all(1).any())
    assert len({tuple(c.tolist()) for c in book.codes}) == 4


def test_state_round_trip():
    book = Codebook(4, 3, seed=5)
    back = Codebook.from_state(book.state())
    assert torch.equal(back.codes, book.codes)
