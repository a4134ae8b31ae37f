import io
import os
import time

import numpy as np
import pytest

from memnav import config, dagger, evaluation, expert, gridworld, nn
from memnav.errors import InvalidOperation
from memnav.gridworld import ObstacleKind, ParamGrid
from memnav.nn import ArchSpec


@pytest.fixture(scope='module')
def desk():
    return config.get_preset('desk')

@pytest.fixture(scope='module')
def desk_ff(desk):
    return config.make_arch(desk, 'ff')


def short_run(desk, arch, J_max=10, n_learners=1, lr=nn.LEARNING_RATE, **kw):
    cfg = dagger.LearnerConfig(t_max=30, J_max=J_max, n_learners=n_learners, lr=lr, seed=3)
    return dagger.train(arch, config.GRIDS['train-desk'], desk.sensor, cfg, **kw)


def test_learner_config():
    with pytest.raises(InvalidOperation):
        dagger.LearnerConfig(j_max=nn.K_BPTT + 1)
    with pytest.raises(InvalidOperation):
        dagger.LearnerConfig(j_max=0)
    with pytest.raises(InvalidOperation):
        dagger.LearnerConfig(n_learners=0)
    cfg = dagger.LearnerConfig(action_selection='argmax')
    assert cfg.action_selection is dagger.ActionSelection.Argmax

def test_apply_async():
    shared = dagger.SharedParams(np.zeros(3), lr=0.01)
    assert shared.apply([np.nan, 0.0, 1.0]) is None
    assert shared.J == 0
    assert np.array_equal(shared.snapshot(), np.zeros(3))
    assert dagger.apply_async(shared, [1.0, -1.0, 0.0], J_max=1) == 1
    theta, opt, J = shared.state()
    assert theta[0] < 0 < theta[1]
    assert theta[2] == 0.0
    assert opt == pytest.approx([0.1, 0.1, 0.0])
    assert J == 1
    #-- the store is full
    assert shared.apply([1.0, 1.0, 1.0], J_max=1) is None
    assert dagger.apply_async(shared, [1.0, 1.0, 1.0], J_max=1) is None
    assert np.array_equal(shared.snapshot(), theta)

def test_apply_matches_rmsprop(rng):
    theta = rng.normal(size=5)
    shared = dagger.SharedParams(theta, lr=0.05)
    want, s = theta, np.zeros(5)
    for J in range(1, 4):
        grad = rng.normal(size=5)
        want, s = nn.rmsprop_update(s, want, grad, 0.05)
        assert shared.apply(grad) == J
    assert np.allclose(shared.snapshot(), want)
    assert np.allclose(shared.opt_state(), s)

def test_thread_dataset(rng):
    arch = ArchSpec('ff', 6, (8,))
    params = nn.init_params(arch, rng)
    mem = nn.fresh_state(arch)
    ds = dagger.ThreadDataset(2)
    for label in (1, 3):
        out, _, tr = nn.forward(arch, params, rng.normal(size=6), mem)
        ds.add(out, label, tr)
    assert ds.full
    assert len(ds) == 2
    assert ds.labels[1].tolist() == [0.0, 0.0, 0.0, 1.0]
    with pytest.raises(InvalidOperation):
        ds.add(out, 0, tr)
    ds.reset()
    assert len(ds) == 0

def test_training_log():
    tlog = dagger.TrainingLog()
    for J in range(20, 0, -1):
        tlog.append(dagger.LogRow(J, 1.0 * J, float(J), 'running', 'culdesac', 4.0))
    assert tlog.decile_medians() == (1.5, 19.5)
    f = io.StringIO()
    tlog.write_csv(f)
    assert f.getvalue().splitlines()[0] == ','.join(dagger.LOG_COLUMNS)
    f.seek(0)
    back = dagger.TrainingLog.read_csv(f)
    assert [r.J for r in back.rows] == list(range(1, 21))
    assert np.array_equal(back.losses(), tlog.losses())

def test_single_learner_is_deterministic(desk, desk_ff):
    seen = []
    a = short_run(desk, desk_ff, on_update=lambda row, shared: seen.append(row.J))
    b = short_run(desk, desk_ff)
    assert a.J == 10
    assert seen == list(range(1, 11))
    assert [r.J for r in a.log.rows] == list(range(1, 11))
    assert np.array_equal(a.params.theta, b.params.theta)
    assert np.array_equal(a.log.losses(), b.log.losses())
    assert np.all(np.isfinite(a.log.losses()))
    assert {r.map_kind for r in a.log.rows} <= {'culdesac', 'walls'}

def test_resume(desk, desk_ff):
    first = short_run(desk, desk_ff, J_max=5)
    runs = [short_run(desk, desk_ff, params=first.params.copy(), opt_state=first.opt_state.copy(), J=first.J)
            for _ in range(2)]
    for r in runs:
        assert r.J == 10
        assert [row.J for row in r.log.rows] == list(range(6, 11))
    assert np.array_equal(runs[0].params.theta, runs[1].params.theta)

def test_learners_share_one_counter(desk, desk_ff):
    res = short_run(desk, desk_ff, n_learners=2)
    assert res.J == 10
    assert sorted(r.J for r in res.log.rows) == list(range(1, 11))

@pytest.mark.slow
def test_loss_decreases(desk, desk_ff):
    res = short_run(desk, desk_ff, J_max=600, lr=1e-3)
    early, late = res.log.decile_medians()
    assert late < early

def test_J_max_zero_leaves_theta(desk, desk_ff, rng):
    params = nn.init_params(desk_ff, rng)
    res = short_run(desk, desk_ff, J_max=0, params=params.copy())
    assert res.J == 0
    assert res.log.rows == []
    assert np.array_equal(res.params.theta, params.theta)
    assert not np.any(res.opt_state)

def test_converges_on_a_straight_corridor(desk, desk_ff):
    #-- one map, the expert says Right on every step
    corridor = ParamGrid(kind=(ObstacleKind.ParallelWalls,), length=(2.0,), orientation=(0,))
    cfg = dagger.LearnerConfig(t_max=30, J_max=300, lr=1e-2, seed=3)
    res = dagger.train(desk_ff, corridor, desk.sensor, cfg)
    early, late = res.log.decile_medians()
    assert late < 0.3
    assert late < early
    gmap = gridworld.generate_map(gridworld.sample_spec(corridor, np.random.default_rng(0)))
    policy = evaluation.NetworkPolicy(desk_ff, res.params, desk.sensor)
    r = evaluation.run_episode(policy, gmap, desk.sensor, 50)
    assert r.success
    assert r.steps == expert.optimal_plan(gmap, 2).cost

@pytest.mark.slow
@pytest.mark.acceptance
def test_learners_scale(desk, desk_ff):
    if (os.cpu_count() or 1) < 4:
        pytest.skip("needs four cores")
    rates = {}
    late = {}
    for n in (1, 4):
        t = time.perf_counter()
        res = short_run(desk, desk_ff, J_max=2000, n_learners=n, lr=1e-3)
        rates[n] = res.J / (time.perf_counter() - t)
        late[n] = res.log.decile_medians()[1]
    assert rates[4] >= 2.0 * rates[1]
    assert late[4] <= 2.0 * late[1]
