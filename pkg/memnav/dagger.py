"""Asynchronous DAgger.

Each learner acts with the current global policy, labels every visited state
with the belief expert and pushes one RMSProp update per window of at most
`j_max` steps into a parameter store shared between processes.
"""
import csv
import logging
import multiprocessing as mp
import queue
import time
from ctypes import c_double, c_long
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from memnav import gridworld, nn
from memnav.errors import InfeasibleSpec, InvalidOperation, NoPath
from memnav.expert import BeliefExpert
from memnav.gridworld import Terminal


log = logging.getLogger(__name__)

MAX_MAP_DRAWS = 100
LOG_COLUMNS = ('J', 'wall_ms', 'loss', 'episode_result', 'map_kind', 'map_length')


class ActionSelection(Enum):
    Sample = 'sample'
    Argmax = 'argmax'


@dataclass(frozen=True)
class LearnerConfig:
    j_max: int = nn.K_BPTT
    t_max: int = 200
    J_max: int = 1000
    n_learners: int = 1
    action_selection: ActionSelection = ActionSelection.Sample
    lr: float = nn.LEARNING_RATE
    seed: int = 0
    prev_action: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'action_selection', ActionSelection(self.action_selection))
        if not 1 <= self.j_max <= nn.K_BPTT:
            raise InvalidOperation("j_max must lie in [1, %d]" % nn.K_BPTT)
        if self.t_max < 1 or self.n_learners < 1 or self.J_max < 0:
            raise InvalidOperation("t_max and n_learners must be >= 1, J_max >= 0")


class SharedParams:
    """Global theta, RMSProp state and update counter in shared memory.

    Reads copy theta under the lock so a learner never sees a half-applied
    update; updates are serialized by the same lock.
    """

    def __init__(self, theta, opt_state=None, J=0, lr=nn.LEARNING_RATE, ctx=None):
        ctx = ctx or mp.get_context()
        theta = np.asarray(theta, dtype=np.float64)
        self.lr = lr
        self._theta = ctx.Array(c_double, theta.size, lock=False)
        self._opt = ctx.Array(c_double, theta.size, lock=False)
        self._J = ctx.Value(c_long, int(J), lock=False)
        self.lock = ctx.Lock()
        self._views()
        self.theta_view[:] = theta
        if opt_state is not None:
            self.opt_view[:] = opt_state

    def _views(self):
        self.theta_view = np.frombuffer(self._theta, dtype=np.float64)
        self.opt_view = np.frombuffer(self._opt, dtype=np.float64)

    def __getstate__(self):
        state = dict(self.__dict__)
        del state['theta_view']
        del state['opt_view']
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._views()

    @property
    def J(self):
        return self._J.value

    def snapshot(self):
        with self.lock:
            return self.theta_view.copy()

    def opt_state(self):
        with self.lock:
            return self.opt_view.copy()

    def state(self):
        """(theta, optimizer state, J) read under one lock."""
        with self.lock:
            return self.theta_view.copy(), self.opt_view.copy(), self._J.value

    def apply(self, grad, J_max=None):
        """Apply one RMSProp step and return the new counter J.

        A non-finite gradient, or a store that already holds J_max updates, leaves
        everything unchanged and returns None.
        """
        grad = np.asarray(grad, dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            log.error("rejected a non-finite gradient at J=%d", self.J)
            return None
        with self.lock:
            if J_max is not None and self._J.value >= J_max:
                return None
            theta, s = nn.rmsprop_update(self.opt_view, self.theta_view, grad, self.lr)
            self.theta_view[:] = theta
            self.opt_view[:] = s
            self._J.value += 1
            return self._J.value


def apply_async(shared, grad, J_max=None):
    return shared.apply(grad, J_max)


class ThreadDataset:
    """One learner's window of (policy output, expert label) pairs with their traces."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.reset()

    def reset(self):
        self.outputs = []
        self.labels = []
        self.traces = nn.ForwardTrace(self.capacity)

    def add(self, output, label, trace):
        if self.full:
            raise InvalidOperation("thread dataset is full")
        self.traces.append(trace)
        self.outputs.append(output)
        self.labels.append(gridworld.one_hot(label))

    @property
    def full(self):
        return len(self.outputs) >= self.capacity

    def __len__(self):
        return len(self.outputs)


class MapSampler:
    """Environment factory: a fresh feasible map from a parameter grid."""

    def __init__(self, grid):
        self.grid = grid

    def __call__(self, rng):
        for _ in range(MAX_MAP_DRAWS):
            try:
                return gridworld.generate_map(gridworld.sample_spec(self.grid, rng))
            except InfeasibleSpec as e:
                log.debug("redrawing: %s", e)
        raise InfeasibleSpec("no feasible map in %d draws from the grid" % MAX_MAP_DRAWS)


@dataclass(frozen=True)
class LogRow:
    J: int
    wall_ms: float
    loss: float
    episode_result: str
    map_kind: str
    map_length: float


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def append(self, row):
        self.rows.append(row)

    def losses(self):
        return np.array([r.loss for r in sorted(self.rows, key=lambda r: r.J)])

    def decile_medians(self):
        """Median loss over the first and the last tenth of the updates."""
        l = self.losses()
        k = max(1, len(l) // 10)
        return float(np.median(l[:k])), float(np.median(l[-k:]))

    def write_csv(self, f):
        w = csv.writer(f, lineterminator='\n')
        w.writerow(LOG_COLUMNS)
        for r in sorted(self.rows, key=lambda r: r.J):
            w.writerow([r.J, '%.1f' % r.wall_ms, repr(r.loss), r.episode_result, r.map_kind, r.map_length])

    @classmethod
    def read_csv(cls, f):
        out = cls()
        for d in csv.DictReader(f):
            out.append(LogRow(int(d['J']), float(d['wall_ms']), float(d['loss']),
                              d['episode_result'], d['map_kind'], float(d['map_length'])))
        return out


def _flush(shared, arch, params, dataset, cfg, t0, gmap, result, emit):
    grad = nn.backward(arch, params, dataset.traces, dataset.labels)
    loss = nn.loss(dataset.outputs, dataset.labels, arch, params)
    J = shared.apply(grad.theta, cfg.J_max)
    dataset.reset()
    if J is None:
        return False
    spec = gmap.spec
    emit(LogRow(J, 1000.0 * (time.time() - t0), loss, result,
                spec.kind.value if spec else '', spec.length if spec else 0.0))
    return True


def run_learner(shared, env_factory, arch, sensor, cfg, learner_id=0, emit=None,
                expert_factory=BeliefExpert, t0=None):
    """One learner: episodes under the global policy until the store holds J_max updates."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, learner_id, shared.J]))
    sample = cfg.action_selection is ActionSelection.Sample
    emit = emit or (lambda row: None)
    t0 = time.time() if t0 is None else t0
    dataset = ThreadDataset(cfg.j_max)
    while shared.J < cfg.J_max:
        gmap = env_factory(rng)
        expert = expert_factory(gmap, sensor)
        state = gmap.start_state
        heading = gridworld.initial_heading(gmap)
        mem = nn.fresh_state(arch)
        prev = None
        params = nn.Params(arch, shared.snapshot())
        result = 'timeout'
        for t in range(cfg.t_max):
            obs = gridworld.sense(gmap, state, heading, sensor)
            expert.observe(state, obs, heading)
            try:
                label = expert.action(state)
            except NoPath as e:
                log.warning("learner %d: discarding episode on %s (%s)", learner_id,
                            gmap.spec.to_record() if gmap.spec else 'map', e)
                result = 'discarded'
                dataset.reset()
                break
            x = gridworld.encode_step(obs, sensor, cfg.prev_action, prev)
            out, mem, tr = nn.forward(arch, params, x, mem, rng if sample else None)
            dataset.add(out, label, tr)
            outcome = gridworld.step(gmap, state, out.chosen, sensor)
            state = outcome.next_state
            heading = prev = out.chosen
            done = outcome.terminal is not Terminal.Running
            if done:
                result = outcome.terminal.value
            last = done or t == cfg.t_max - 1
            if dataset.full or last:
                _flush(shared, arch, params, dataset, cfg, t0, gmap,
                       result if last else 'running', emit)
                if shared.J >= cfg.J_max:
                    break
                params = nn.Params(arch, shared.snapshot())
            if done:
                break
        log.debug("learner %d: episode %s after %d steps, J=%d", learner_id, result, t + 1, shared.J)


def _learner_main(shared, env_factory, arch, sensor, cfg, learner_id, rows, t0):
    run_learner(shared, env_factory, arch, sensor, cfg, learner_id, rows.put, t0=t0)


@dataclass(eq=False)
class TrainResult:
    params: nn.Params
    opt_state: np.ndarray
    J: int
    log: TrainingLog


def train(arch, train_grid, sensor, cfg, params=None, opt_state=None, J=0, on_update=None):
    """Run `cfg.n_learners` learners against one store until it holds J_max updates.

    `on_update(row, shared)` runs in the calling process after every applied
    update, in the order the rows arrive.
    """
    if params is None:
        params = nn.init_params(arch, np.random.default_rng(cfg.seed))
    shared = SharedParams(params.theta, opt_state, J, cfg.lr)
    env_factory = MapSampler(train_grid)
    tlog = TrainingLog()
    t0 = time.time()

    def emit(row):
        tlog.append(row)
        if on_update is not None:
            on_update(row, shared)

    if cfg.n_learners == 1:
        run_learner(shared, env_factory, arch, sensor, cfg, 0, emit, t0=t0)
    else:
        ctx = mp.get_context()
        rows = ctx.Queue()
        workers = [ctx.Process(target=_learner_main,
                               args=(shared, env_factory, arch, sensor, cfg, i, rows, t0))
                   for i in range(cfg.n_learners)]
        for w in workers:
            w.start()
        #-- drain while the learners run, a full queue would block their exit
        while any(w.is_alive() for w in workers):
            try:
                emit(rows.get(timeout=0.1))
            except queue.Empty:
                pass
        for w in workers:
            w.join()
        while True:
            try:
                emit(rows.get(timeout=0.1))
            except queue.Empty:
                break
        failed = [w.exitcode for w in workers if w.exitcode != 0]
        if failed:
            raise InvalidOperation("%d learners exited abnormally (exit codes %s)" % (len(failed), failed))
    log.info("training done: J=%d, %d log rows, %.1f s", shared.J, len(tlog.rows), time.time() - t0)
    return TrainResult(nn.Params(arch, shared.snapshot()), shared.opt_state(), shared.J, tlog)
