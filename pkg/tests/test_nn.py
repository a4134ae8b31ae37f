import io
import json

import numpy as np
import pytest

from memnav import nn
from memnav.dnc import DncState
from memnav.errors import InvalidCheckpoint, InvalidOperation, ShapeMismatch
from memnav.nn import ArchSpec, MemorySpec, Params


ARCHS = {
    'ff': ArchSpec('ff', 6, (8, 7)),
    'lstm': ArchSpec('lstm', 6, (8, 7)),
    'dnc-ff': ArchSpec('dnc-ff', 6, (8, 7), memory=MemorySpec(5, 4, 2)),
    'dnc-lstm': ArchSpec('dnc-lstm', 6, (8, 6, 7), memory=MemorySpec(5, 4, 2), mem_l2=0.1),
    'ff-conv': ArchSpec('ff', 21, (8,), beam_dim=20, conv=((4, 2, 3), (3, 1, 2))),
}


def toy_setup(arch, rng, warmup=3):
    params = nn.init_params(arch, rng)
    params.theta += 0.1 * rng.normal(size=params.size)
    mem = nn.fresh_state(arch)
    for _ in range(warmup):
        _, mem, _ = nn.forward(arch, params, rng.normal(size=arch.input_dim), mem)
    return params, mem


def test_param_count():
    assert nn.count_params(ArchSpec('ff', 6, (8,))) == 8 * 6 + 8 + 4 * 8 + 4
    lstm = ArchSpec('lstm', 6, (8,))
    assert nn.count_params(lstm) == 32 * 6 + 32 * 8 + 32 + 4 * 8 + 4

def test_conv_shapes():
    arch = ARCHS['ff-conv']
    assert arch.conv_shapes == [(1, 20, 3, 9), (3, 9, 2, 7)]
    assert arch.trunk_dim == 15
    with pytest.raises(InvalidOperation):
        ArchSpec('ff', 21, (8,), beam_dim=20, conv=((30, 1, 2),))

def test_invalid_archs():
    with pytest.raises(InvalidOperation):
        ArchSpec('ff', 6, ())
    with pytest.raises(InvalidOperation):
        ArchSpec('dnc-ff', 6, (8, 7))
    with pytest.raises(InvalidOperation):
        ArchSpec('dnc-lstm', 6, (8,), memory=MemorySpec(5, 4, 2))
    with pytest.raises(InvalidOperation):
        MemorySpec(5, 4, 2, write_heads=2)

def test_memory_view():
    arch = ARCHS['dnc-lstm']
    assert nn.memory_param_names(arch) == ['layer1.W', 'layer1.U', 'layer1.b',
                                           'layer0.Wr', 'iface.W', 'iface.b', 'fuse.Wr']
    assert nn.memory_param_names(ARCHS['ff']) == []
    params = Params(arch, np.ones(nn.count_params(arch)))
    n = params.memory_mask().sum()
    assert nn.regularizer(arch, params) == pytest.approx(0.5 * 0.1 * n)
    assert nn.regularizer(ARCHS['ff'], Params(ARCHS['ff'], np.ones(nn.count_params(ARCHS['ff'])))) == 0.0

def test_init(rng):
    arch = ARCHS['lstm']
    params = nn.init_params(arch, rng)
    b = params['layer1.b']
    assert np.all(b[7:14] == 1.0)
    assert np.all(b[:7] == 0.0)
    a = np.sqrt(6.0 / (28 + 8))
    assert np.abs(params['layer1.W']).max() <= a

def test_feedforward_is_memoryless(rng):
    arch = ARCHS['ff']
    params, mem = toy_setup(arch, rng)
    x = rng.normal(size=6)
    out1, mem1, _ = nn.forward(arch, params, x, mem)
    out2, mem2, _ = nn.forward(arch, params, x, mem1)
    assert mem1 is mem
    assert np.array_equal(out1.logits, out2.logits)
    assert out1.probs.sum() == pytest.approx(1.0)
    assert out1.psi.shape == (arch.feature_dim,)

@pytest.mark.parametrize('kind', ['lstm', 'dnc-ff', 'dnc-lstm'])
def test_memory_networks_remember(kind, rng):
    arch = ARCHS[kind]
    params, _ = toy_setup(arch, rng)
    mem = nn.fresh_state(arch)
    x = rng.normal(size=6)
    out1, mem, _ = nn.forward(arch, params, x, mem)
    out2, mem, _ = nn.forward(arch, params, x, mem)
    assert not np.allclose(out1.psi, out2.psi)

def test_shape_checks(rng):
    arch = ARCHS['lstm']
    params, mem = toy_setup(arch, rng)
    with pytest.raises(ShapeMismatch):
        nn.forward(arch, params, np.zeros(5), mem)
    with pytest.raises(ShapeMismatch):
        nn.forward(arch, params, np.zeros(6), nn.MemoryState())
    with pytest.raises(ShapeMismatch):
        Params(arch, np.zeros(3))

def test_sampling_is_seeded(rng):
    arch = ARCHS['ff']
    params, mem = toy_setup(arch, rng)
    x = rng.normal(size=6)
    a = [nn.forward(arch, params, x, mem, np.random.default_rng(7))[0].chosen for _ in range(3)]
    assert a[0] == a[1] == a[2]
    greedy = nn.forward(arch, params, x, mem)[0]
    assert greedy.chosen == int(np.argmax(greedy.probs))

def test_window_limits(rng):
    arch = ARCHS['ff']
    params, mem = toy_setup(arch, rng)
    trace = nn.ForwardTrace(2)
    for _ in range(2):
        trace.append(nn.forward(arch, params, np.zeros(6), mem)[2])
    with pytest.raises(InvalidOperation):
        trace.append(nn.forward(arch, params, np.zeros(6), mem)[2])
    _, traces, _ = nn.run_window(arch, params, [np.zeros(6)] * 6, mem)
    with pytest.raises(InvalidOperation):
        nn.backward(arch, params, traces, [0] * 6)
    with pytest.raises(ShapeMismatch):
        nn.loss([], [0], arch, params)

def test_loss_is_mean_cross_entropy(rng):
    arch = ARCHS['ff']
    params, mem = toy_setup(arch, rng)
    xs = [rng.normal(size=6) for _ in range(3)]
    labels = [0, 3, 1]
    outputs, _, _ = nn.run_window(arch, params, xs, mem)
    want = np.mean([-np.log(o.probs[l]) for o, l in zip(outputs, labels)])
    assert nn.loss(outputs, labels, arch, params) == pytest.approx(want)
    assert nn.window_loss(arch, params, xs, labels, mem) == pytest.approx(want)

@pytest.mark.parametrize('kind', sorted(ARCHS))
def test_gradient_matches_finite_differences(kind, rng):
    arch = ARCHS[kind]
    params, mem = toy_setup(arch, rng)
    xs = [rng.normal(size=arch.input_dim) for _ in range(nn.K_BPTT)]
    labels = [int(l) for l in rng.integers(4, size=nn.K_BPTT)]
    _, traces, _ = nn.run_window(arch, params, xs, mem)
    grad = nn.backward(arch, params, traces, labels)
    pinned = [tr.mem_in.dnc for tr in traces] if arch.is_dnc else None
    h = 1e-6
    coords = rng.choice(params.size, size=min(50, params.size), replace=False)
    for k in coords:
        plus = params.copy()
        plus.theta[k] += h
        minus = params.copy()
        minus.theta[k] -= h
        fd = (nn.window_loss(arch, plus, xs, labels, mem, pinned)
              - nn.window_loss(arch, minus, xs, labels, mem, pinned)) / (2 * h)
        g = grad.theta[k]
        assert abs(g - fd) <= 1e-4 * max(abs(g), abs(fd)) + 1e-9, (params.names(), k, g, fd)

def test_rmsprop_first_step():
    theta = np.array([1.0, 1.0, 1.0])
    grad = np.array([2.0, -0.5, 0.0])
    new, s = nn.rmsprop_update(np.zeros(3), theta, grad, lr=0.01)
    assert s == pytest.approx(0.1 * grad ** 2)
    step = 0.01 / np.sqrt(0.1)
    assert new == pytest.approx([1.0 - step, 1.0 + step, 1.0], rel=1e-6)
    with pytest.raises(ShapeMismatch):
        nn.rmsprop_update(np.zeros(2), theta, grad)

def test_checkpoint_round_trip(rng):
    arch = ARCHS['dnc-lstm']
    params, _ = toy_setup(arch, rng)
    opt = rng.random(params.size)
    f = io.StringIO()
    nn.save_checkpoint(nn.Checkpoint(arch, params, opt, 17, 3, 'desk'), f)
    f.seek(0)
    ckpt = nn.load_checkpoint(f)
    assert ckpt.arch == arch
    assert np.array_equal(ckpt.params.theta, params.theta)
    assert np.array_equal(ckpt.opt_state, opt)
    assert (ckpt.J, ckpt.seed, ckpt.preset) == (17, 3, 'desk')

def test_checkpoint_without_optimizer_state(rng):
    arch = ARCHS['ff-conv']
    params, _ = toy_setup(arch, rng)
    f = io.StringIO()
    nn.save_checkpoint(nn.Checkpoint(arch, params), f)
    f.seek(0)
    ckpt = nn.load_checkpoint(f)
    assert ckpt.opt_state is None
    assert ckpt.arch.conv == arch.conv

def test_bad_checkpoints(rng):
    arch = ARCHS['ff']
    params, _ = toy_setup(arch, rng)
    f = io.StringIO()
    nn.save_checkpoint(nn.Checkpoint(arch, params), f)
    good = json.loads(f.getvalue())

    def load(j):
        return nn.load_checkpoint(io.StringIO(json.dumps(j)))

    with pytest.raises(InvalidCheckpoint):
        nn.load_checkpoint(io.StringIO('{not json'))
    with pytest.raises(InvalidCheckpoint):
        load(dict(good, format='something-else'))
    with pytest.raises(InvalidCheckpoint):
        load({k: v for k, v in good.items() if k != 'theta'})
    with pytest.raises(InvalidCheckpoint):
        load(dict(good, theta=dict(good['theta'], size=3)))
    with pytest.raises(InvalidCheckpoint):
        load(dict(good, arch=dict(good['arch'], hidden_sizes=[9, 7])))
    broken = params.copy()
    broken.theta[3] = np.inf
    f = io.StringIO()
    nn.save_checkpoint(nn.Checkpoint(arch, broken), f)
    f.seek(0)
    with pytest.raises(InvalidCheckpoint):
        nn.load_checkpoint(f)

def test_memory_state_fields():
    assert nn.MemoryState.__annotations__['dnc'] is DncState
    mem = nn.fresh_state(ARCHS['dnc-ff'])
    assert isinstance(mem, nn.MemoryState)
    assert isinstance(mem.dnc, DncState)
    assert mem.h is None and mem.c is None
    assert nn.fresh_state(ARCHS['ff']).dnc is None
