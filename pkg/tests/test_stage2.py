import math

import numpy as np
import pytest
import torch
from scipy import stats

from nerfvq.diffcore import ContractViolation, make_generator
from nerfvq.stage2 import SamplerConfig, TokenTransformer, filter_probs, filtered_sample, generate, nll


def _model(vocab=8, seq_len=6, n_classes=0, seed=0):
    torch.manual_seed(seed)
    return TokenTransformer(vocab, seq_len, n_classes, dim=32, depth=2, heads=2)


def test_uniform_logits_nll():
    m = _model()
    with torch.no_grad():
        m.head.weight.zero_()
        m.head.bias.zero_()
    tokens = torch.randint(0, 8, (3, 6))
    assert nll(m, tokens).item() == pytest.approx(math.log(8), abs=1e-6)


def test_causality():
    m = _model(vocab=10, seq_len=8).eval()
    gen = make_generator(0)
    a = torch.randint(0, 10, (1, 7), generator=gen)
    la = m(a)
    for t in range(7):
        b = a.clone()
        b[0, t:] = torch.randint(0, 10, (7 - t,), generator=gen)
        lb = m(b)
        # positions 0..t only see tokens < t
        assert torch.allclose(la[0, : t + 1], lb[0, : t + 1], atol=1e-6)


def test_conditional_needs_class():
    m = _model(n_classes=3)
    with pytest.raises(ContractViolation):
        m(torch.zeros(1, 2, dtype=torch.long))
    out = m(torch.zeros(2, 2, dtype=torch.long), torch.tensor([0, 2]))
    assert out.shape == (2, 3, 8)


def test_filter_prefix_mass_rule():
    kept = filter_probs(torch.tensor([0.5, 0.3, 0.2]), 3, 0.8)
    assert torch.allclose(kept, torch.tensor([0.625, 0.375, 0.0], dtype=torch.float64))
    # boundary token is included
    kept = filter_probs(torch.tensor([0.5, 0.3, 0.2]), 3, 0.5)
    assert torch.allclose(kept, torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64))
    kept = filter_probs(torch.tensor([0.5, 0.3, 0.2]), 3, 0.51)
    assert torch.allclose(kept, torch.tensor([0.625, 0.375, 0.0], dtype=torch.float64))


def test_filter_order_topk_then_topp():
    probs = torch.tensor([0.4, 0.3, 0.2, 0.1])
    kept = filter_probs(probs, 2, 0.5)
    # after top-2 the survivors renormalise to (4/7, 3/7); 4/7 >= 0.5 stops the prefix
    assert torch.allclose(kept, torch.tensor([1.0, 0, 0, 0], dtype=torch.float64))


def test_filter_reductions():
    gen = make_generator(1)
    for _ in range(20):
        p = torch.softmax(torch.randn(12, generator=gen, dtype=torch.float64), -1)
        k = int(torch.randint(1, 13, (1,), generator=gen))
        top = p.argmax()
        kept = filter_probs(p, k, 1.0)
        ref = torch.zeros_like(p)
        idx = torch.topk(p, k).indices
        ref[idx] = p[idx] / p[idx].sum()
        assert torch.allclose(kept, ref)
        q = float(torch.rand(1, generator=gen)) * 0.99 + 0.01
        assert kept[top] > 0 and filter_probs(p, 12, q)[top] > 0
        assert torch.allclose(filter_probs(p, 12, 1.0), p)


def test_top_p_frequencies():
    n = 100_000
    draws = filtered_sample(torch.tensor([0.5, 0.3, 0.2]), SamplerConfig(3, 0.8), make_generator(2), n)
    counts = np.bincount(draws.numpy(), minlength=3)
    assert counts[2] == 0
    sigma = math.sqrt(0.625 * 0.375 / n)
    assert abs(counts[0] / n - 0.625) < 3 * sigma


def test_no_filter_matches_distribution():
    p = torch.tensor([0.1, 0.2, 0.3, 0.4])
    draws = filtered_sample(p, SamplerConfig(4, 1.0), make_generator(3), 50_000)
    counts = np.bincount(draws.numpy(), minlength=4)
    assert stats.chisquare(counts, p.numpy() * 50_000).pvalue > 0.01


def test_top_k_one_is_argmax():
    p = torch.tensor([0.2, 0.5, 0.3])
    a = filtered_sample(p, SamplerConfig(1), make_generator(4), 10)
    b = filtered_sample(p, SamplerConfig(1), make_generator(99), 10)
    assert (a == 1).all() and torch.equal(a, b)


def test_sampler_config_validation():
    for cfg in (SamplerConfig(0), SamplerConfig(5, 1.0), SamplerConfig(2, 0.0), SamplerConfig(2, 1.0, -1)):
        with pytest.raises(ContractViolation):
            cfg.validate(4)


def test_generate_deterministic_and_greedy():
    m = _model(vocab=16, seq_len=5).eval()
    cfg = SamplerConfig(16, 0.9, 1.0)
    a = generate(m, None, cfg, make_generator(7))
    b = generate(m, None, cfg, make_generator(7))
    assert torch.equal(a.tokens, b.tokens) and a.tokens.shape == (5,)
    greedy = generate(m, None, SamplerConfig(16, 1.0, 0.0))
    topk1 = generate(m, None, SamplerConfig(1, 1.0, 1.0), make_generator(0))
    cold = generate(m, None, SamplerConfig(16, 1.0, 1e-4), make_generator(0))
    assert torch.equal(greedy.tokens, topk1.tokens) and torch.equal(greedy.tokens, cold.tokens)


def test_memorise_three_sequences():
    torch.manual_seed(0)
    m = TokenTransformer(12, 6, n_classes=3, dim=32, depth=2, heads=2)
    data = torch.randint(0, 12, (3, 6), generator=make_generator(5))
    cls = torch.arange(3)
    opt = torch.optim.Adam(m.parameters(), lr=3e-3)
    for _ in range(300):
        loss = nll(m, data, cls)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert loss.item() < 0.05
    m.eval()
    for c in range(3):
        out = generate(m, c, SamplerConfig(1))
        assert torch.equal(out.tokens, data[c])
