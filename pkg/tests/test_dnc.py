import numpy as np
import pytest

from memnav import dnc, validation
from memnav.nn import MemorySpec


def warm_state(spec, rng, steps=4):
    """A memory that has been written to, so usage values are distinct."""
    state = dnc.fresh_state(spec)
    for _ in range(steps):
        state, _ = dnc.memory_step(state, rng.normal(size=dnc.interface_size(spec)), spec)
    return state


def test_interface_size():
    spec = MemorySpec(rows=5, cols=4, read_heads=2)
    assert dnc.interface_size(spec) == 33
    xi = np.arange(33.0)
    parts = dnc.split_interface(xi, spec)
    assert parts['read_modes'].shape == (2, 3)
    assert parts['write_gate'][0] == 26.0
    assert np.array_equal(dnc.join_interface(parts, spec), xi)

def test_allocation_prefers_free_rows():
    a, _ = dnc.allocation(np.array([0.5, 0.1, 0.9]))
    assert a == pytest.approx([0.05, 0.9, 0.005])
    a, _ = dnc.allocation(np.zeros(4))
    assert a.tolist() == [1.0, 0.0, 0.0, 0.0]

def test_cosine():
    m = np.array([[1.0, 0.0], [0.0, 2.0], [-3.0, 0.0]])
    sim, _, _ = dnc.cosine(m, np.array([[2.0, 0.0]]))
    assert sim[0] == pytest.approx([1.0, 0.0, -1.0], abs=1e-5)

@pytest.mark.parametrize('links', [True, False])
def test_addressing_stays_on_simplex(links, rng):
    spec = MemorySpec(rows=6, cols=3, read_heads=3, links=links)
    state = dnc.fresh_state(spec)
    for _ in range(30):
        state, _ = dnc.memory_step(state, 3.0 * rng.normal(size=dnc.interface_size(spec)), spec)
        isValid, es = validation.addressing_simplex(state)
        assert isValid, es
    assert np.all(np.diag(state.link) == 0)

def test_without_links_reads_are_content_based(rng):
    spec = MemorySpec(rows=5, cols=4, read_heads=2, links=False)
    state = warm_state(spec, rng)
    state, cache = dnc.memory_step(state, rng.normal(size=dnc.interface_size(spec)), spec)
    assert np.array_equal(state.read_weights, cache['cr'])
    assert np.array_equal(state.link, np.zeros((5, 5)))

def test_write_lands_where_allocated(rng):
    spec = MemorySpec(rows=4, cols=3, read_heads=1)
    parts = dnc.split_interface(np.zeros(dnc.interface_size(spec)), spec)
    parts['write_vector'][...] = [1.0, 2.0, 3.0]
    parts['alloc_gate'][...] = 50.0
    parts['write_gate'][...] = 50.0
    parts['erase'][...] = 50.0
    state, _ = dnc.memory_step(dnc.fresh_state(spec), dnc.join_interface(parts, spec), spec)
    assert state.memory[0] == pytest.approx([1.0, 2.0, 3.0], abs=1e-6)
    assert np.abs(state.memory[1:]).max() < 1e-6
    assert state.write_weights[0] == pytest.approx(1.0, abs=1e-6)
    #-- usage catches up with a write on the next step
    keep = dnc.split_interface(np.zeros(dnc.interface_size(spec)), spec)
    keep['free_gates'][...] = -50.0
    state, _ = dnc.memory_step(state, dnc.join_interface(keep, spec), spec)
    assert state.usage[0] == pytest.approx(1.0, abs=1e-6)

@pytest.mark.parametrize('links', [True, False])
def test_memory_backward_matches_finite_differences(links, rng):
    spec = MemorySpec(rows=5, cols=4, read_heads=2, links=links)
    state = warm_state(spec, rng)
    xi = rng.normal(size=dnc.interface_size(spec))
    dreads = rng.normal(size=(spec.read_heads, spec.cols))

    def f(v):
        return float((dreads * dnc.memory_step(state, v, spec)[0].reads).sum())

    _, cache = dnc.memory_step(state, xi, spec)
    grad = dnc.memory_backward(dreads, cache)
    h = 1e-6
    fd = np.zeros_like(xi)
    for k in range(len(xi)):
        e = np.zeros_like(xi)
        e[k] = h
        fd[k] = (f(xi + e) - f(xi - e)) / (2 * h)
    assert np.allclose(grad, fd, rtol=1e-4, atol=1e-8)
