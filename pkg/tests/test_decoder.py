import math

import pytest
import torch

from qcount.config import parse_variant
from qcount.decoder import DACDecoder, DecoderConfig, GatingNet, T2CAdapter

SMALL = dict(image_size=32, embed_dim=16, token_grid=4, channels=(8, 8, 4), transformer_depth=2, heads=2,
             adapter_heads=1, adapter_dim=8)


def small(seed=0, **flags):
    return DACDecoder(DecoderConfig(**SMALL, **flags), init_seed=seed)


def tokens(b=2, seed=0, dtype=torch.float32):
    return torch.randn(b, 16, 16, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def test_full_size_shapes_and_gate():
    dec = DACDecoder(DecoderConfig())
    out = dec(torch.randn(2, 256, 64))
    for d in (out.d_cnn, out.d_trans, out.d_final):
        assert d.shape == (2, 128, 128)
    assert torch.allclose(out.w.sum(1), torch.ones(2), atol=1e-6)


def test_t2c_output_shape():
    ad = T2CAdapter(32, 64)
    assert ad(torch.randn(1, 32, 32, 32), torch.randn(1, 256, 64)).shape == (1, 32, 32, 32)


def test_t2c_rejects_channel_mismatch():
    ad = T2CAdapter(32, 64)
    with pytest.raises(ValueError):
        ad(torch.randn(1, 16, 8, 8), torch.randn(1, 256, 64))


def test_t2c_half_excitation_case():
    ad = T2CAdapter(8, 16)
    torch.nn.init.zeros_(ad.excite[-1].weight)
    torch.nn.init.zeros_(ad.excite[-1].bias)
    ad.zero_init_ca()
    f = torch.randn(2, 8, 4, 4)
    torch.testing.assert_close(ad(f, torch.randn(2, 16, 16)), 0.5 * f)


def _scalar_t2c(ad, f_cnn, f_trans):
    """Loop-level evaluation of both adapter branches for a single image."""
    c, h, w = len(f_cnn), len(f_cnn[0]), len(f_cnn[0][0])
    p, d = len(f_trans), len(f_trans[0])
    W = lambda lin: (lin.weight.tolist(), lin.bias.tolist() if lin.bias is not None else None)

    def linear(x, lin):
        wt, b = W(lin)
        return [sum(wt[o][i] * x[i] for i in range(len(x))) + (b[o] if b else 0.0) for o in range(len(wt))]

    def sigmoid(z):
        return 1 / (1 + math.exp(-z))

    pooled = [sum(f_trans[t][k] for t in range(p)) / p for k in range(d)]
    hidden = [max(0.0, z) for z in linear(pooled, ad.excite[0])]
    gate = [sigmoid(z) for z in linear(hidden, ad.excite[2])]

    keys = [linear(f_trans[t], ad.attn.k) for t in range(p)]
    vals = [linear(f_trans[t], ad.attn.v) for t in range(p)]
    out = [[[0.0] * w for _ in range(h)] for _ in range(c)]
    for y in range(h):
        for x in range(w):
            q = linear([f_cnn[ch][y][x] for ch in range(c)], ad.attn.q)
            scores = [sum(qi * ki for qi, ki in zip(q, keys[t])) / math.sqrt(len(q)) for t in range(p)]
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            z = sum(e)
            mixed = [sum(e[t] / z * vals[t][k] for t in range(p)) for k in range(len(q))]
            a = linear(mixed, ad.attn.out)
            mu = sum(a) / c
            var = sum((ai - mu) ** 2 for ai in a) / c
            normed = [(ai - mu) / math.sqrt(var + ad.norm.eps) * g + b
                      for ai, g, b in zip(a, ad.norm.weight.tolist(), ad.norm.bias.tolist())]
            hid = [0.5 * u * (1 + math.erf(u / math.sqrt(2))) for u in linear(normed, ad.mlp[0])]
            a = [ai + mi for ai, mi in zip(a, linear(hid, ad.mlp[2]))]
            for ch in range(c):
                out[ch][y][x] = f_cnn[ch][y][x] * gate[ch] + a[ch]
    return out, gate


def test_t2c_toy_tensor_against_scalar_oracle():
    torch.manual_seed(3)
    ad = T2CAdapter(2, 4, heads=1, attn_dim=2, ce_bias=False).double()
    f_cnn = torch.randn(1, 2, 2, 2, dtype=torch.float64)
    zeros = torch.zeros(1, 3, 4, dtype=torch.float64)
    got = ad(f_cnn, zeros)
    want, gate = _scalar_t2c(ad, f_cnn[0].tolist(), zeros[0].tolist())
    assert gate == [0.5, 0.5]
    torch.testing.assert_close(got[0], torch.tensor(want, dtype=torch.float64), rtol=1e-12, atol=1e-12)
    # with zero tokens the attention branch sees only the value bias, so it is the same at every pixel
    ca = got[0] - 0.5 * f_cnn[0]
    torch.testing.assert_close(ca, ca[:, :1, :1].expand_as(ca))

    tok = torch.randn(1, 3, 4, dtype=torch.float64)
    want, _ = _scalar_t2c(ad, f_cnn[0].tolist(), tok[0].tolist())
    torch.testing.assert_close(ad(f_cnn, tok)[0], torch.tensor(want, dtype=torch.float64), rtol=1e-12, atol=1e-12)


def test_gate_examples():
    gate = GatingNet(16)
    torch.nn.init.zeros_(gate.fc2.weight)
    torch.nn.init.zeros_(gate.fc2.bias)
    assert gate(torch.randn(3, 16, 16)).tolist() == [[0.5, 0.5]] * 3
    with torch.no_grad():
        gate.fc2.bias.copy_(torch.tensor([10.0, -10.0]))
    assert float(gate(torch.randn(1, 16, 16)).detach()[0, 0]) > 0.9999


@torch.no_grad()
def test_gate_sums_to_one_and_maps_nonnegative():
    dec = small()
    for seed in range(100):
        f_v = tokens(seed=seed) * (1 + seed % 7)
        out = dec(f_v)
        assert torch.allclose(out.w.sum(1), torch.ones(2), atol=1e-6)
        assert bool(((out.w >= 0) & (out.w <= 1)).all())
        for d in (out.d_cnn, out.d_trans, out.d_final):
            assert bool((d >= 0).all())
        mix = out.w[:, 0, None, None] * out.d_cnn + out.w[:, 1, None, None] * out.d_trans
        assert float((out.d_final - mix).abs().max()) <= 1e-6


def test_forced_weights_select_cnn_stream():
    dec = small()
    out = dec(tokens(), force_w=(1.0, 0.0))
    assert torch.equal(out.d_final, out.d_cnn)


def test_avg_gate():
    out = small(gate="avg")(tokens())
    assert out.w.tolist() == [[0.5, 0.5]] * 2
    assert not hasattr(small(gate="avg"), "gate")


def test_single_stream_variants():
    out = small(use_cnn=False)(tokens())
    assert out.d_cnn is None and torch.equal(out.d_final, out.d_trans)
    out = small(use_trans=False)(tokens())
    assert out.d_trans is None and torch.equal(out.d_final, out.d_cnn)
    with pytest.raises(ValueError):
        small(use_cnn=False, use_trans=False)


def test_adapters_receive_no_gradient_from_transformer_map():
    dec = small()
    out = dec(tokens())
    out.d_trans.sum().backward()
    adapter_grads = [p.grad for n, p in dec.named_parameters() if n.startswith("t2c.")]
    assert adapter_grads and all(g is None or torch.count_nonzero(g) == 0 for g in adapter_grads)
    dec.zero_grad()
    dec(tokens()).d_cnn.sum().backward()
    assert any(p.grad is not None and torch.count_nonzero(p.grad) > 0
               for n, p in dec.named_parameters() if n.startswith("t2c."))


def _params(name):
    return dict(small(**parse_variant(name).decoder).named_parameters())


@pytest.mark.parametrize(
    "variant, removed, added",
    [
        ("no_t2c", ("t2c.",), ()),
        ("no_trans", ("t2c.", "blocks.", "norm_trans.", "head_trans.", "gate."), ()),
        ("no_cnn", ("t2c.", "convs.", "head_cnn.", "gate."), ()),
        ("avg_w", ("gate.",), ()),
        ("c2t", ("t2c.",), ("c2t.",)),
        ("bid", (), ("c2t.",)),
        ("no_ce", ("excite.",), ()),
        ("no_ca", (".attn.", ".norm.", ".mlp."), ()),
    ],
)
def test_variant_changes_only_its_subgraph(variant, removed, added):
    full, other = _params("full"), _params(variant)
    gone = set(full) - set(other)
    new = set(other) - set(full)
    assert bool(gone) == bool(removed) and bool(new) == bool(added)
    assert all(any(tag in n for tag in removed) for n in gone)
    assert all(any(n.startswith(tag) for tag in added) for n in new)
    for n in set(full) & set(other):
        assert torch.equal(full[n], other[n]), n


def test_adapter_map_validation():
    with pytest.raises(ValueError):
        DecoderConfig(**{**SMALL, "adapter_map": {4: 1}})
    with pytest.raises(ValueError):
        DecoderConfig(**{**SMALL, "channels": (8, 4)})
    cfg = DecoderConfig(**SMALL)
    assert cfg.adapter_map == {1: 1, 2: 2, 3: 2}
