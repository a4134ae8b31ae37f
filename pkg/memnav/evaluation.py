"""Episode rollouts and the three suite metrics: success rate, agreement with
the expert's action, and path length relative to the expert's.
"""
import csv
import logging
import multiprocessing as mp
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from memnav import gridworld, nn
from memnav.errors import InvalidOperation, NoPath
from memnav.expert import BeliefExpert, OccupancyGrid, expert_action, expert_rollout, optimal_plan
from memnav.gridworld import Action, MapSpec, ObstacleKind, Terminal


log = logging.getLogger(__name__)

REFERENCE_CAP = 10000
RESULT_COLUMNS = ('model', 'suite', 'map_kind', 'length', 'success', 'steps', 'agree',
                  'expert_cost', 'termination')
SUMMARY_COLUMNS = ('model', 'suite', 'map_kind', 'episodes', 'success_rate', 'class_acc',
                   'astar_ratio')
CURVE_COLUMNS = ('model', 'suite', 'map_kind', 'length', 'episodes', 'success_rate',
                 'class_acc', 'astar_ratio')


class Termination(Enum):
    Goal = 'goal'
    Collision = 'collision'
    Timeout = 'timeout'


class Reference(Enum):
    Belief = 'belief'
    Optimal = 'optimal'


#-- policies

class NetworkPolicy:
    """Argmax actions of a network, memory reset every episode."""

    def __init__(self, arch, params, sensor, prev_action=False):
        self.arch = arch
        self.params = params
        self.sensor = sensor
        self.prev_action = prev_action

    def reset(self, gmap):
        self.mem = nn.fresh_state(self.arch)
        self.prev = None

    def act(self, state, obs, heading):
        x = gridworld.encode_step(obs, self.sensor, self.prev_action, self.prev)
        out, self.mem, _ = nn.forward(self.arch, self.params, x, self.mem)
        self.prev = out.chosen
        return out.chosen


class ExpertPolicy:

    def __init__(self, sensor):
        self.sensor = sensor

    def reset(self, gmap):
        self.expert = BeliefExpert(gmap, self.sensor)

    def act(self, state, obs, heading):
        self.expert.observe(state, obs, heading)
        return self.expert.action(state)


class TurnAtFraction:
    """Scripted policy: run into the obstacle to `fraction` of its length, back out
    past the mouth, then follow the optimal path of the closed cul-de-sac twin.

    fraction 1 turns at the closed end, 0.5 halfway.
    """

    def __init__(self, sensor, fraction=1.0):
        self.sensor = sensor
        self.fraction = fraction

    def reset(self, gmap):
        spec = gmap.spec
        if spec is None:
            raise InvalidOperation("scripted policies need maps with a spec")
        self.gmap = gmap
        self.inward = gridworld.corridor_action(spec.orientation)
        self.turn_at = self.fraction * spec.length - gridworld.WALL_CELLS * spec.resolution
        twin = gridworld.generate_map(replace(spec, kind=ObstacleKind.CulDeSac))
        self.twin = OccupancyGrid.from_map(twin)
        self.stride = gridworld.step_cells(self.sensor, gmap.resolution)
        self.phase = 1

    def act(self, state, obs, heading):
        lx, _ = gridworld.obstacle_frame(self.gmap, state)
        if self.phase == 1:
            ahead = gridworld.step(self.gmap, state, self.inward, self.sensor)
            if lx + self.sensor.step_size <= self.turn_at + 1e-9 and \
                    ahead.terminal is not Terminal.Collision:
                return self.inward
            self.phase = 2
        if self.phase == 2:
            if lx > 1e-9:
                return gridworld.opposite(self.inward)
            self.phase = 3
        return expert_action(self.twin, state, self.gmap.goal_region, self.stride)


class RandomPolicy:

    def __init__(self, seed=0):
        self.seed = seed

    def reset(self, gmap):
        self.rng = np.random.default_rng(self.seed)

    def act(self, state, obs, heading):
        return Action(int(self.rng.integers(4)))


#-- episodes

@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    steps: int
    agree: int
    expert_cost: int
    map: MapSpec
    termination: Termination
    optimal_cost: int = None

    @property
    def ratio(self):
        return self.steps / self.expert_cost if self.expert_cost else float('nan')


def reference_costs(gmap, sensor):
    """(belief expert trace length, full-map optimal cost)."""
    stride = gridworld.step_cells(sensor, gmap.resolution)
    trace = expert_rollout(gmap, sensor, REFERENCE_CAP)
    if trace.terminal is not Terminal.Goal:
        log.warning("expert reference did not reach the goal on %s",
                    gmap.spec.to_record() if gmap.spec else 'map')
    return trace.steps, optimal_plan(gmap, stride).cost


def run_episode(policy, gmap, sensor, step_cap, reference=Reference.Belief,
                full_map_labels=False, costs=None):
    """Roll out `policy` while a belief expert maps alongside and labels every step."""
    reference = Reference(reference)
    stride = gridworld.step_cells(sensor, gmap.resolution)
    belief, optimal = costs if costs is not None else reference_costs(gmap, sensor)
    policy.reset(gmap)
    labeler = BeliefExpert(gmap, sensor)
    full = OccupancyGrid.from_map(gmap) if full_map_labels else None
    state = gmap.start_state
    heading = gridworld.initial_heading(gmap)
    steps = agree = 0
    termination = Termination.Timeout
    for _ in range(step_cap):
        obs = gridworld.sense(gmap, state, heading, sensor)
        labeler.observe(state, obs, heading)
        try:
            if full is not None:
                label = expert_action(full, state, gmap.goal_region, stride)
            else:
                label = labeler.action(state)
        except NoPath:
            label = None
        action = Action(policy.act(state, obs, heading))
        if label is not None and action == label:
            agree += 1
        outcome = gridworld.step(gmap, state, action, sensor)
        steps += 1
        state = outcome.next_state
        heading = action
        if outcome.terminal is Terminal.Goal:
            termination = Termination.Goal
            break
        if outcome.terminal is Terminal.Collision:
            termination = Termination.Collision
            break
    cost = belief if reference is Reference.Belief else optimal
    return EpisodeResult(success=termination is Termination.Goal, steps=steps, agree=agree,
                         expert_cost=cost, map=gmap.spec, termination=termination,
                         optimal_cost=optimal)


#-- suites

@dataclass(frozen=True)
class KindSummary:
    episodes: int
    success_rate: float
    class_acc: float
    astar_ratio: float


def summarize(results):
    n = len(results)
    if n == 0:
        return KindSummary(0, float('nan'), float('nan'), float('nan'))
    steps = sum(r.steps for r in results)
    ratios = [r.ratio for r in results if r.success]
    return KindSummary(episodes=n,
                       success_rate=sum(r.success for r in results) / n,
                       class_acc=sum(r.agree for r in results) / steps if steps else float('nan'),
                       astar_ratio=float(np.mean(ratios)) if ratios else float('nan'))


@dataclass
class SuiteReport:
    results: list = field(default_factory=list)

    def kinds(self):
        return sorted({r.map.kind for r in self.results}, key=lambda k: k.value)

    def by_kind(self):
        return {k: summarize([r for r in self.results if r.map.kind is k]) for k in self.kinds()}

    def curves(self):
        """Per (kind, obstacle length) summaries, ordered by length."""
        keys = sorted({(r.map.kind.value, r.map.length) for r in self.results})
        return {(ObstacleKind(k), l): summarize([r for r in self.results
                                                 if r.map.kind.value == k and r.map.length == l])
                for k, l in keys}

    def write_results(self, f, model, suite):
        w = csv.writer(f, lineterminator='\n')
        w.writerow(RESULT_COLUMNS)
        for r in self.results:
            w.writerow([model, suite, r.map.kind.value, r.map.length, int(r.success), r.steps,
                        r.agree, r.expert_cost, r.termination.value])

    def write_summary(self, f, model, suite):
        w = csv.writer(f, lineterminator='\n')
        w.writerow(SUMMARY_COLUMNS)
        for kind, s in self.by_kind().items():
            w.writerow([model, suite, kind.value, s.episodes, '%.4f' % s.success_rate,
                        '%.4f' % s.class_acc, '%.4f' % s.astar_ratio])

    def write_curves(self, f, model, suite):
        w = csv.writer(f, lineterminator='\n')
        w.writerow(CURVE_COLUMNS)
        for (kind, length), s in self.curves().items():
            w.writerow([model, suite, kind.value, length, s.episodes, '%.4f' % s.success_rate,
                        '%.4f' % s.class_acc, '%.4f' % s.astar_ratio])


def _episode_task(args):
    policy, spec, sensor, cap, reference, full_map_labels = args
    gmap = gridworld.generate_map(spec)
    return run_episode(policy, gmap, sensor, cap, reference, full_map_labels)


def evaluate_suite(policy, specs, sensor, cap, reference=Reference.Belief,
                   full_map_labels=False, workers=1, on_result=None):
    """Every map of the suite once; results keep the order of `specs`."""
    if len(specs) == 0:
        raise InvalidOperation("empty suite")
    tasks = [(policy, spec, sensor, cap, Reference(reference), full_map_labels) for spec in specs]
    report = SuiteReport()
    if workers > 1:
        with mp.get_context().Pool(workers) as pool:
            for r in pool.imap(_episode_task, tasks):
                report.results.append(r)
                if on_result is not None:
                    on_result(r)
    else:
        for t in tasks:
            report.results.append(_episode_task(t))
            if on_result is not None:
                on_result(report.results[-1])
    return report
