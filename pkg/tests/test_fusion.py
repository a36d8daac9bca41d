import pytest
import torch

from qcount.encoders import CategoryEmbedding
from qcount.fusion import Fusion, FusionConfig


def category(t, d=64, b=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    return CategoryEmbedding(torch.randn(b, t, d, generator=g), torch.ones(b, t, dtype=torch.bool))


def test_shape():
    torch.manual_seed(0)
    fuse = Fusion(FusionConfig())
    out = fuse(torch.randn(2, 256, 64), category(4, b=2))
    assert out.shape == (2, 256, 64)


def test_zero_init_is_identity():
    torch.manual_seed(0)
    fuse = Fusion(FusionConfig())
    fuse.zero_init()
    f_i = torch.randn(1, 256, 64)
    torch.testing.assert_close(fuse(f_i, category(4)), f_i, rtol=0, atol=0)


def test_invariant_to_category_row_order():
    torch.manual_seed(0)
    fuse = Fusion(FusionConfig()).double()
    f_i = torch.randn(1, 256, 64, dtype=torch.float64)
    cat = category(5)
    cat = CategoryEmbedding(cat.tokens.double(), cat.pad_mask)
    perm = torch.tensor([3, 0, 4, 2, 1])
    shuffled = CategoryEmbedding(cat.tokens[:, perm], cat.pad_mask[:, perm])
    torch.testing.assert_close(fuse(f_i, cat), fuse(f_i, shuffled))


def test_padding_rows_are_ignored():
    torch.manual_seed(0)
    fuse = Fusion(FusionConfig())
    f_i = torch.randn(1, 256, 64)
    cat = category(4)
    padded = CategoryEmbedding(
        torch.cat([cat.tokens, torch.randn(1, 2, 64)], dim=1),
        torch.tensor([[True] * 4 + [False] * 2]),
    )
    torch.testing.assert_close(fuse(f_i, cat), fuse(f_i, padded))


def test_rejects_empty_and_mismatched_category():
    fuse = Fusion(FusionConfig())
    with pytest.raises(ValueError):
        fuse(torch.randn(1, 256, 64), CategoryEmbedding(torch.zeros(1, 0, 64), torch.zeros(1, 0, dtype=torch.bool)))
    with pytest.raises(ValueError):
        fuse(torch.randn(1, 256, 64), category(4, d=32))
    with pytest.raises(ValueError):
        FusionConfig(n_blocks=0)
