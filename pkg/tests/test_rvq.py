"""Residual quantizer contracts against brute-force oracles."""

from __future__ import annotations

import pytest
import torch

from calm.rvq import RvqCodebooks, RvqError, rvq_decode, rvq_encode, train_codebooks


def test_zero_codebooks_pass_input_through_residual():
    books = RvqCodebooks([torch.zeros(1, 3), torch.zeros(1, 3)])
    x = torch.tensor([1.0, -2.0, 0.5])
    codes, quant, resid = rvq_encode(x, books)
    assert codes.tolist() == [0, 0]
    assert torch.equal(quant, torch.zeros(3))
    assert torch.equal(resid, x)


def test_exact_centroid_zero_residual():
    level1 = torch.tensor([[1.0, 2.0], [0.0, 0.0], [-3.0, 1.0]])
    level2 = torch.zeros(2, 2)
    books = RvqCodebooks([level1, level2])
    x = torch.tensor([-3.0, 1.0])
    codes, quant, resid = rvq_encode(x, books)
    assert codes[0].item() == 2
    assert torch.equal(quant, x)
    assert torch.equal(resid, torch.zeros(2))


def test_matches_brute_force_greedy_tree():
    gen = torch.Generator().manual_seed(0)
    books = RvqCodebooks([torch.randn(4, 3, generator=gen) for _ in range(2)])
    for trial in range(20):
        x = torch.randn(3, generator=gen)
        codes, quant, _ = rvq_encode(x, books)
        # oracle: exhaustive nearest-neighbor at each greedy level
        best1 = min(range(4), key=lambda i: (x - books.books[0][i]).norm().item())
        r1 = x - books.books[0][best1]
        best2 = min(range(4), key=lambda i: (r1 - books.books[1][i]).norm().item())
        assert codes.tolist() == [best1, best2]
        expect = books.books[0][best1] + books.books[1][best2]
        assert torch.allclose(quant, expect)


def test_reconstruction_error_non_increasing_in_levels():
    gen = torch.Generator().manual_seed(1)
    frames = torch.randn(512, 4, generator=gen)
    books = train_codebooks(frames, n_levels=8, codebook_size=16, iters=15, seed=0)
    x = torch.randn(64, 4, generator=gen)
    errs = []
    for k in range(1, 9):
        sub = RvqCodebooks(books.books[:k])
        _, quant, _ = rvq_encode(x, sub)
        errs.append((x - quant).norm(dim=1).mean().item())
    for a, b in zip(errs[:-1], errs[1:]):
        assert b <= a + 1e-6, errs


def test_training_reduces_error_vs_random_books():
    gen = torch.Generator().manual_seed(2)
    frames = torch.randn(1024, 4, generator=gen) * 2 + 1
    trained = train_codebooks(frames, n_levels=2, codebook_size=32, iters=25, seed=0)
    random_books = RvqCodebooks([torch.randn(32, 4, generator=gen) for _ in range(2)])
    test = torch.randn(256, 4, generator=gen) * 2 + 1
    err_t = (test - rvq_encode(test, trained)[1]).norm(dim=1).mean()
    err_r = (test - rvq_encode(test, random_books)[1]).norm(dim=1).mean()
    assert err_t < err_r


def test_decode_inverts_lookup():
    gen = torch.Generator().manual_seed(3)
    books = RvqCodebooks([torch.randn(8, 2, generator=gen) for _ in range(3)])
    x = torch.randn(10, 2, generator=gen)
    codes, quant, _ = rvq_encode(x, books)
    assert torch.allclose(rvq_decode(codes, books), quant)


def test_dimension_mismatch_rejected():
    books = RvqCodebooks([torch.zeros(2, 3)])
    with pytest.raises(RvqError, match="dim"):
        rvq_encode(torch.zeros(4), books)


def test_code_out_of_range_rejected():
    books = RvqCodebooks([torch.zeros(2, 3)])
    with pytest.raises(RvqError, match="range"):
        rvq_decode(torch.tensor([5]), books)


def test_empty_codebook_rejected():
    with pytest.raises(RvqError):
        RvqCodebooks([])


def test_state_round_trip():
    gen = torch.Generator().manual_seed(4)
    books = RvqCodebooks([torch.randn(4, 2, generator=gen) for _ in range(2)])
    state = books.state_tensors()
    back = RvqCodebooks.from_state_tensors(state)
    assert back.n_levels == 2
    for a, b in zip(books.books, back.books):
        assert torch.equal(a, b)
