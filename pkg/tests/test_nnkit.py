import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from oracles import FROZEN
from p4dkit.nnkit import (
    Adam,
    CheckpointError,
    cosine_warmup_lr,
    cross_entropy,
    current_mode,
    float_mode,
    gelu,
    gelu_grad,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    sinusoidal_encoding,
    smooth_l1,
    smooth_l1_per_frame,
    state_hash,
    xavier_bound,
    xavier_init,
    zero_init,
)
from p4dkit.nnkit.checkpoint import decode_checkpoint, encode_checkpoint
from p4dkit.nnkit.layers import MLP, Block, Linear
from p4dkit.nnkit.trace import count_invocations, traced

finite = st.floats(-50, 50, allow_nan=False)


# -- smooth_l1 ----------------------------------------------------------------------------

def test_smooth_l1_examples(f64):
    z = torch.zeros(1)
    assert smooth_l1(z, z).item() == 0.0
    assert smooth_l1(torch.tensor([0.5]), z).item() == pytest.approx(FROZEN["smooth_l1_half"], abs=1e-12)
    assert smooth_l1(torch.tensor([2.0]), z).item() == pytest.approx(FROZEN["smooth_l1_two"], abs=1e-12)


def test_smooth_l1_rejects_bad_input():
    with pytest.raises(ValueError):
        smooth_l1(torch.zeros(2), torch.zeros(3))
    with pytest.raises(ValueError):
        smooth_l1(torch.zeros(2), torch.zeros(2), delta=0.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=1, max_size=12), st.floats(0.1, 5.0))
def test_smooth_l1_matches_oracle(values, delta):
    with float_mode("64"):
        got = smooth_l1(torch.tensor(values), torch.zeros(len(values)), delta).item()
    assert got == pytest.approx(oracles.smooth_l1(values, delta), rel=1e-12, abs=1e-12)


def test_smooth_l1_continuous_at_transition(f64):
    delta = 1.0
    for side in (-1e-9, 1e-9):
        d = torch.tensor([delta + side], requires_grad=True)
        v = smooth_l1(d, torch.zeros(1), delta)
        v.backward()
        assert v.item() == pytest.approx(0.5 * delta, abs=1e-8)
        assert d.grad.item() == pytest.approx(1.0, abs=1e-8)


def test_smooth_l1_per_frame(f64):
    a = torch.randn(3, 4, 5, generator=torch.Generator().manual_seed(0))
    got = smooth_l1_per_frame(a, torch.zeros_like(a)).numpy()
    np.testing.assert_allclose(got, oracles.smooth_l1_frames(a.numpy(), np.zeros((3, 4, 5))), rtol=1e-12)


# -- cross entropy --------------------------------------------------------------------------

def test_cross_entropy_examples(f64):
    assert cross_entropy(torch.zeros(8), 3).item() == pytest.approx(FROZEN["ce_uniform_8"], abs=1e-12)
    assert cross_entropy(torch.tensor([10.0, -10.0]), 0).item() == pytest.approx(FROZEN["ce_pm10"], rel=1e-6)
    assert cross_entropy(torch.zeros(2), 1).item() == pytest.approx(math.log(2), abs=1e-12)


def test_cross_entropy_rejects_non_finite():
    with pytest.raises(ValueError):
        cross_entropy(torch.tensor([0.0, float("nan")]), 0)
    with pytest.raises(ValueError):
        cross_entropy(torch.zeros(3), 5)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=2, max_size=10), st.floats(-1e3, 1e3), st.data())
def test_cross_entropy_shift_invariant(logits, shift, data):
    t = data.draw(st.integers(0, len(logits) - 1))
    with float_mode("64"):
        a = cross_entropy(torch.tensor(logits), t).item()
        b = cross_entropy(torch.tensor(logits) + shift, t).item()
    assert a == pytest.approx(oracles.cross_entropy(logits, t), abs=1e-9)
    assert abs(a - b) < 1e-12 * max(1.0, abs(shift))


def test_cross_entropy_mask(f64):
    logits = torch.tensor([[0.0, 0.0], [5.0, 0.0]])
    mask = torch.tensor([1.0, 0.0])
    assert cross_entropy(logits, [0, 1], mask).item() == pytest.approx(math.log(2))


# -- timestamp encoding -------------------------------------------------------------------------

def test_sinusoidal_examples(f64):
    assert sinusoidal_encoding(0.0, 6).tolist() == [0.0, 1.0] * 3
    got = sinusoidal_encoding(1.0, 2).tolist()
    assert got == pytest.approx(FROZEN["tpe_t1_d2"], abs=1e-12)
    assert abs(sinusoidal_encoding(math.pi, 2)[0].item()) < 1e-12


def test_sinusoidal_rejects_odd_width():
    with pytest.raises(ValueError):
        sinusoidal_encoding(1.0, 5)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1e4), st.sampled_from([2, 4, 8, 64]))
def test_sinusoidal_matches_oracle(t, dim):
    with float_mode("64"):
        got = sinusoidal_encoding(t, dim).tolist()
    assert got == pytest.approx(oracles.tpe(t, dim), abs=1e-9)


def test_sinusoidal_batched_shape():
    assert sinusoidal_encoding(torch.zeros(2, 3), 4).shape == (2, 3, 4)


# -- GELU -----------------------------------------------------------------------------------------

def test_gelu_examples(f64):
    assert gelu(torch.tensor(0.0)).item() == 0.0
    assert gelu(torch.tensor(3.0)).item() == pytest.approx(FROZEN["gelu_3"], abs=1e-12)
    assert abs(gelu(torch.tensor(-10.0)).item()) < 1e-6


@settings(max_examples=60, deadline=None)
@given(finite)
def test_gelu_grad_matches_autograd(x):
    with float_mode("64"):
        t = torch.tensor(x, requires_grad=True)
        gelu(t).backward()
        assert t.grad.item() == pytest.approx(gelu_grad(torch.tensor(x)).item(), abs=1e-10)
        assert gelu(torch.tensor(x)).item() == pytest.approx(oracles.gelu(x), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 20), st.floats(0, 20))
def test_gelu_monotone_on_positive_axis(a, b):
    lo, hi = sorted((a, b))
    with float_mode("64"):
        assert gelu(torch.tensor(lo)).item() <= gelu(torch.tensor(hi)).item()


# -- initialisers ---------------------------------------------------------------------------------

def test_xavier_bound_and_samples():
    assert xavier_bound((100, 100)) == pytest.approx(FROZEN["xavier_100x100"], abs=1e-12)
    w = xavier_init((100, 100), seed=0, dtype=torch.float64)
    assert w.abs().max().item() <= FROZEN["xavier_100x100"]
    assert w.var().item() == pytest.approx(2 / 200, rel=0.1)
    assert torch.equal(w, xavier_init((100, 100), seed=0, dtype=torch.float64))
    assert zero_init((7,)).abs().sum().item() == 0.0


def test_xavier_rejects_zero_fan():
    with pytest.raises(ValueError):
        xavier_init((0, 4), seed=0)
    with pytest.raises(ValueError):
        xavier_bound((5,))


def test_linear_and_mlp_init():
    gen = torch.Generator().manual_seed(0)
    mlp = MLP([4, 8, 8, 2], gen)
    assert len(mlp.layers) == 3
    for layer in mlp.layers:
        assert layer.bias.abs().sum().item() == 0.0
        assert layer.weight.abs().max().item() <= xavier_bound(tuple(layer.weight.shape))
    assert Linear(3, 2, gen, zero=True).weight.abs().sum().item() == 0.0


# -- schedule and optimizer --------------------------------------------------------------------------

def test_cosine_schedule_examples():
    total, ratio, base = 100, 0.03, 1.0
    assert cosine_warmup_lr(3, total, ratio, base) == pytest.approx(base)
    assert cosine_warmup_lr(total, total, ratio, base) == pytest.approx(0.0, abs=1e-15)
    mid = 3 + (total - 3) / 2
    assert cosine_warmup_lr(int(mid), total, ratio, base) == pytest.approx(oracles.cosine_lr(int(mid), total, ratio, base))
    assert cosine_warmup_lr(0, 200, 0.0, 2.0) == 2.0
    # exact midpoint of the decay phase
    assert cosine_warmup_lr(52, 102, 0.0, 1.0) == pytest.approx(0.5 * (1 + math.cos(math.pi * 52 / 102)))
    assert cosine_warmup_lr(50, 100, 0.0, 1.0) == pytest.approx(0.5, abs=1e-15)


def test_cosine_schedule_errors():
    with pytest.raises(ValueError):
        cosine_warmup_lr(0, 10, 1.0, 1.0)
    with pytest.raises(ValueError):
        cosine_warmup_lr(11, 10, 0.03, 1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 500), st.floats(0, 0.5), st.data())
def test_cosine_schedule_matches_oracle(total, ratio, data):
    step = data.draw(st.integers(0, total))
    got = cosine_warmup_lr(step, total, ratio, 3e-4)
    assert got == pytest.approx(oracles.cosine_lr(step, total, ratio, 3e-4), rel=1e-12, abs=1e-18)
    assert 0.0 <= got <= 3e-4 + 1e-18


def test_optimizer_leaves_frozen_params_untouched():
    gen = torch.Generator().manual_seed(0)
    a, b = Linear(3, 3, gen), Linear(3, 3, gen)
    for p in b.parameters():
        p.requires_grad_(False)
    before = state_hash(b)
    opt = Adam(list(a.parameters()) + list(b.parameters()), 1e-2, 10)
    for _ in range(10):
        loss = b(a(torch.randn(4, 3, generator=gen))).pow(2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert state_hash(b) == before
    assert len(opt.state.lr_history) == 10
    assert opt.state.step == 10


# -- gradient checker --------------------------------------------------------------------------------

def test_grad_check_quadratic(f64):
    w = torch.tensor([3.0], requires_grad=True)
    res = grad_check(lambda: (w**2).sum(), [w])
    assert res.max_rel_error < 1e-8
    g = torch.autograd.grad((w**2).sum(), w)[0]
    assert g.item() == 6.0


def test_grad_check_linear_and_constant(f64):
    w = torch.randn(5, requires_grad=True)
    c = torch.arange(5.0)
    assert grad_check(lambda: (w * c).sum(), [w]).max_rel_error < 1e-9
    res = grad_check(lambda: w.sum() * 0.0 + 1.0, [w])
    assert res.max_rel_error == 0.0


def test_grad_check_non_finite_names_coordinate(f64):
    w = torch.tensor([1e-12, 1.0], requires_grad=True)
    with pytest.raises(FloatingPointError, match=r"w\[0\]"):
        grad_check(lambda: torch.log(w).sum(), {"w": w}, epsilon=1e-5)


def test_grad_check_on_block(f64):
    gen = torch.Generator().manual_seed(0)
    blk = Block(8, 2, gen, causal=True)
    x = torch.randn(2, 5, 8, generator=gen)
    res = grad_check(lambda: blk(x).pow(2).mean(), dict(blk.named_parameters()), samples_per_param=3)
    assert res.max_rel_error < 1e-4


# -- checkpoints, precision, tracing ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    tensors = {"a": torch.arange(6, dtype=torch.float32).reshape(2, 3), "b": np.arange(4, dtype=np.int64),
               "c": torch.ones(2, dtype=torch.float64)}
    digest = save_checkpoint(tmp_path / "x.ckpt", "unit", tensors)
    assert len(digest) == 64
    back = load_checkpoint(tmp_path / "x.ckpt", "unit")
    assert set(back) == {"a", "b", "c"}
    np.testing.assert_array_equal(back["a"], tensors["a"].numpy())
    assert back["b"].dtype == np.int64 and back["c"].dtype == np.float64
    blob = (tmp_path / "x.ckpt").read_bytes()
    assert blob[:8] == b"P4DCKPT\0"
    assert encode_checkpoint("unit", tensors) == blob


def test_checkpoint_errors():
    blob = encode_checkpoint("s", {"a": np.zeros(3)})
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"garbage!" + blob[8:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob, "other")
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:-4])
    with pytest.raises(CheckpointError):
        encode_checkpoint("s", {"a": np.zeros(2, dtype=np.int8)})


def test_float_mode_switches_and_restores():
    before = torch.get_default_dtype()
    with float_mode("64"):
        assert current_mode() == "64"
        assert torch.zeros(1).dtype == torch.float64
    assert torch.get_default_dtype() == before
    with pytest.raises(ValueError):
        with float_mode("16"):
            pass


def test_trace_counts_only_inside_context():
    @traced("X")
    def f():
        return 1

    f()
    with count_invocations() as c:
        f()
        f()
    f()
    assert c["X"] == 2
