from types import SimpleNamespace

import numpy as np
import pytest
import torch

from spiraldiff.nnet import DenoiseModel, ModelConfig
from spiraldiff.schedule import build_sqrt_schedule
from spiraldiff.selfcond import SelfCondCombiner, training_two_pass
from spiraldiff.train import loss_vlb

from oracles import rel_err

MICRO = dict(L_e=1, L_d=1, d_c=8, d_x=4, heads=2, k_c=3, k_x=3, T=20, ffn_mult=2)


def _model(selfcond="c-type", seed=0, **kw):
    torch.manual_seed(seed)
    return DenoiseModel(ModelConfig(**{**MICRO, "selfcond": selfcond, **kw}), vocab_size=7).double()


def _batch(seed=0, B=3):
    gen = torch.Generator().manual_seed(seed)
    w_c = torch.randint(4, 7, (B, 3), generator=gen)
    w_x = torch.randint(4, 7, (B, 3), generator=gen)
    x_t = torch.randn(B, 3, 4, dtype=torch.float64, generator=gen)
    t = torch.randint(1, 21, (B,), generator=gen)
    return w_c, w_x, x_t, t


class TestCombine:
    def test_none_is_identity(self):
        x = torch.randn(3, 4)
        assert torch.equal(SelfCondCombiner("none", 4)(x, torch.randn(3, 4)), x)
        assert torch.equal(SelfCondCombiner("none", 4)(x, None), x)

    def test_a_type(self):
        x, p = torch.randn(3, 4), torch.randn(3, 4)
        comb = SelfCondCombiner("a-type", 4)
        assert torch.equal(comb(x, torch.zeros(3, 4)), x)
        assert torch.equal(comb(x, p), x + p)

    def test_c_type_initial_block_matrix(self):
        comb = SelfCondCombiner("c-type", 4)
        expected = torch.cat([torch.eye(4), torch.zeros(4, 4)], dim=1)
        assert torch.equal(comb.proj.weight.detach(), expected)
        x = torch.randn(5, 4, dtype=torch.float64)
        for _ in range(3):
            out = comb.double()(x, torch.randn(5, 4, dtype=torch.float64) * 10)
            torch.testing.assert_close(out, x, atol=0, rtol=0)

    def test_c_type_is_concat_projection(self):
        torch.manual_seed(0)
        comb = SelfCondCombiner("c-type", 4).double()
        torch.nn.init.normal_(comb.proj.weight)
        torch.nn.init.normal_(comb.proj.bias)
        x, p = torch.randn(2, 3, 4, dtype=torch.float64), torch.randn(2, 3, 4, dtype=torch.float64)
        W, b = comb.proj.weight.detach(), comb.proj.bias.detach()
        expected = x @ W[:, :4].T + p @ W[:, 4:].T + b
        torch.testing.assert_close(comb(x, p), expected)

    def test_superposition(self):
        torch.manual_seed(1)
        a = SelfCondCombiner("a-type", 4).double()
        c = SelfCondCombiner("c-type", 4).double()
        torch.nn.init.normal_(c.proj.weight)
        torch.nn.init.normal_(c.proj.bias)
        x1, x2, p1, p2 = (torch.randn(3, 4, dtype=torch.float64) for _ in range(4))
        torch.testing.assert_close(a(x1 + x2, p1 + p2), a(x1, p1) + a(x2, p2))
        lam = 0.3
        mix = c(lam * x1 + (1 - lam) * x2, lam * p1 + (1 - lam) * p2)
        torch.testing.assert_close(mix, lam * c(x1, p1) + (1 - lam) * c(x2, p2))

    def test_errors(self):
        with pytest.raises(ValueError):
            SelfCondCombiner("b-type", 4)
        with pytest.raises(ValueError):
            SelfCondCombiner("c-type", 4)(torch.randn(3, 4), torch.randn(2, 4))
        with pytest.raises(ValueError):
            SelfCondCombiner("a-type", 4)(torch.randn(3, 4), None)


class _Stub:
    """Counts calls; the estimate is a simple function of its inputs."""

    def __init__(self, selfcond="c-type"):
        self.cfg = SimpleNamespace(selfcond=selfcond)
        self.calls = []

    def __call__(self, x_t, x0_prev, w_c, t):
        self.calls.append(None if x0_prev is None else x0_prev.clone())
        return x_t * 0.5 + (0.0 if x0_prev is None else x0_prev) + 1.0


class _Fixed:
    """numpy-like rng stand-in that always returns ``u``."""

    def __init__(self, u):
        self.u = u

    def random(self):
        return self.u


class TestTwoPass:
    def test_branch_forward_counts(self):
        x = torch.randn(2, 3, 4)
        stub = _Stub()
        training_two_pass(stub, x, None, None, _Fixed(0.2), zero_prob=0.5)
        assert len(stub.calls) == 1 and torch.equal(stub.calls[0], torch.zeros_like(x))
        stub = _Stub()
        out = training_two_pass(stub, x, None, None, _Fixed(0.7), zero_prob=0.5)
        assert len(stub.calls) == 2
        first = x * 0.5 + 1.0
        assert torch.equal(stub.calls[1], first)
        assert torch.equal(out, x * 0.5 + first + 1.0)

    def test_model_counters(self):
        model = _model()
        w_c, _, x_t, t = _batch()
        model.stats.clear()
        training_two_pass(model, x_t, w_c, t, _Fixed(0.0), zero_prob=0.5)
        assert model.stats["forward_calls"] == 1
        model.stats.clear()
        loss = training_two_pass(model, x_t, w_c, t, _Fixed(0.99), zero_prob=0.5).sum()
        assert model.stats["forward_calls"] == 2
        backward = []
        model.head.weight.register_hook(lambda g: backward.append(1))
        loss.backward()
        assert backward == [1]

    def test_expected_forward_count(self):
        rng = np.random.default_rng(0)
        stub = _Stub()
        n = 20000
        x = torch.zeros(1, 1, 1)
        for _ in range(n):
            training_two_pass(stub, x, None, None, rng, zero_prob=0.5)
        mean = len(stub.calls) / n
        assert abs(mean - 1.5) <= 3 * 0.5 / np.sqrt(n)

    def test_none_runs_once_without_estimate(self):
        stub = _Stub("none")
        training_two_pass(stub, torch.zeros(1, 2, 2), None, None, _Fixed(0.99))
        assert stub.calls == [None]

    def test_stop_gradient_constant_substitution(self):
        model = _model(seed=4)
        w_c, _, x_t, t = _batch(1)
        zeros = torch.zeros_like(x_t)
        params = list(model.parameters())
        # the combiner must actually read the estimate for the test to bite
        with torch.no_grad():
            model.combiner.proj.weight.add_(0.3 * torch.randn_like(model.combiner.proj.weight))

        model.zero_grad()
        (training_two_pass(model, x_t, w_c, t, _Fixed(0.99), zero_prob=0.5) ** 2).sum().backward()
        params = [p for p in params if p.grad is not None]
        got = [p.grad.clone() for p in params]

        with torch.no_grad():
            const = torch.tensor(model(x_t, zeros, w_c, t).numpy().copy())
        model.zero_grad()
        (model(x_t, const, w_c, t) ** 2).sum().backward()
        for g, p in zip(got, params):
            assert rel_err(g, p.grad) <= 1e-10

        # without the stop-gradient the gradients would differ
        model.zero_grad()
        first = model(x_t, zeros, w_c, t)
        (model(x_t, first, w_c, t) ** 2).sum().backward()
        assert any(rel_err(g, p.grad) > 1e-6 for g, p in zip(got, params))

    def test_always_fallback_matches_no_selfcond(self):
        sc = _model("c-type", seed=2)
        plain = DenoiseModel(ModelConfig(**{**MICRO, "selfcond": "none"}), vocab_size=7).double()
        state = {k: v for k, v in sc.state_dict().items() if not k.startswith("combiner")}
        plain.load_state_dict(state)
        sched = build_sqrt_schedule(20)
        w_c, w_x, _, t = _batch(3)
        losses = []
        for model in (sc, plain):
            loss, _ = loss_vlb(model, sched, w_c, w_x, t, generator=torch.Generator().manual_seed(9),
                               rng=np.random.default_rng(1), zero_prob=1.0)
            losses.append(float(loss.detach()))
        assert losses[0] == losses[1]
