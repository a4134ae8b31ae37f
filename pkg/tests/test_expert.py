import io
import json
from collections import deque

import numpy as np
import pytest

from memnav import config, expert, gridworld
from memnav.errors import NoPath
from memnav.expert import BeliefExpert, CellState, OccupancyGrid
from memnav.gridworld import Action, MapSpec, MOVES, Terminal


def bfs_cost(blocked, start, goals, stride=1):
    rows, cols = blocked.shape
    seen = {start: 0}
    todo = deque([start])
    while todo:
        cell = todo.popleft()
        if cell in goals:
            return seen[cell]
        for dr, dc in MOVES.values():
            ok = all(0 <= cell[0] + dr * i < rows and 0 <= cell[1] + dc * i < cols
                     and not blocked[cell[0] + dr * i, cell[1] + dc * i] for i in range(1, stride + 1))
            nxt = (cell[0] + dr * stride, cell[1] + dc * stride)
            if ok and nxt not in seen:
                seen[nxt] = seen[cell] + 1
                todo.append(nxt)
    return None


def random_case(rng):
    cells = np.where(rng.random((20, 20)) < 0.3, CellState.Occupied, CellState.Free).astype(np.int8)
    free = np.argwhere(cells == CellState.Free)
    a, b = rng.choice(len(free), size=2, replace=False)
    return OccupancyGrid(cells, 1.0), tuple(free[a]), frozenset([tuple(free[b])])


@pytest.mark.parametrize('stride', [1, 2])
def test_astar_matches_bfs(stride, rng):
    for _ in range(200):
        grid, start, goals = random_case(rng)
        want = bfs_cost(grid.cells == CellState.Occupied, start, goals, stride)
        if want is None:
            with pytest.raises(NoPath):
                expert.astar_plan(grid, start, goals, stride)
            continue
        plan = expert.astar_plan(grid, start, goals, stride)
        assert plan.cost == want
        assert plan.path[0] == start and plan.path[-1] in goals
        assert all(abs(a[0] - b[0]) + abs(a[1] - b[1]) == stride for a, b in zip(plan.path, plan.path[1:]))

def test_astar_matches_bfs_on_builtin_suites(rng):
    for name in ('train-desk', 'interp-desk', 'extrap-desk', 'interp-small', 'train-large'):
        grid = config.GRIDS[name]
        for spec in config.suite_specs(grid, 5, rng):
            gmap = gridworld.generate_map(spec)
            #-- one meter steps on 0.5 grids, half meter steps on 0.25 grids
            stride = 2
            start = gmap.start_state.cell(gmap.resolution)
            plan = expert.optimal_plan(gmap, stride)
            assert plan.cost == bfs_cost(gmap.occupancy, start, gmap.goal_region, stride)

def test_optimal_costs(culdesac, walls):
    #-- out of the mouth, around the closed end, back down to the goal row
    assert expert.optimal_plan(culdesac, 2).cost == 8
    assert expert.optimal_plan(walls, 2).cost == 4

def test_unknown_is_traversable(culdesac):
    grid = OccupancyGrid.blank(culdesac)
    plan = expert.astar_plan(grid, culdesac.start_state.cell(0.5), culdesac.goal_region, 2)
    assert plan.cost == 4

def test_difficulty_grows_with_obstacle(culdesac):
    free = OccupancyGrid(np.full(culdesac.shape, CellState.Free, dtype=np.int8), culdesac.resolution)
    start = culdesac.start_state.cell(culdesac.resolution)
    open_plan = expert.astar_plan(free, start, culdesac.goal_region, 2)
    assert expert.map_difficulty(culdesac, 2) > open_plan.expanded
    #-- the corridor, the row above the wall and a few cells at both ends
    assert expert.map_difficulty(culdesac, 2) == 14

@pytest.mark.parametrize('kind', ['culdesac', 'walls'])
@pytest.mark.parametrize('length', [4.0, 10.0])
def test_difficulty_ignores_orientation(kind, length):
    scores = set()
    costs = set()
    for o in gridworld.ORIENTATIONS:
        gmap = gridworld.generate_map(MapSpec(kind, length, 2.0, orientation=o))
        scores.add(expert.map_difficulty(gmap, 2))
        costs.add(expert.optimal_plan(gmap, 2).cost)
    assert len(scores) == 1
    assert len(costs) == 1

@pytest.mark.parametrize('kind', ['culdesac', 'walls'])
def test_difficulty_grows_with_length(kind):
    scores = [expert.map_difficulty(gridworld.generate_map(MapSpec(kind, float(l), 2.0)), 2)
              for l in range(2, 21)]
    assert scores == sorted(scores)
    assert scores[-1] > scores[0]

def test_difficulty_without_path():
    gmap = gridworld.generate_map(MapSpec('culdesac', 2.0, 2.0))
    occ = np.ones(gmap.shape, dtype=bool)
    occ[gmap.start_state.cell(gmap.resolution)] = False
    sealed = gridworld.GridMap(occ, gmap.resolution, gmap.goal_region, gmap.start_state)
    with pytest.raises(NoPath):
        expert.map_difficulty(sealed, 2)

def test_update_occupancy(culdesac, desk_sensor):
    obs = gridworld.sense(culdesac, culdesac.start_state, Action.Right, desk_sensor)
    grid = expert.update_occupancy(OccupancyGrid.blank(culdesac), culdesac.start_state, obs, desk_sensor)
    assert grid.cells[8, 9] == CellState.Occupied
    assert grid.cells[9, 6] == CellState.Occupied
    assert grid.cells[8, 6] == grid.cells[8, 7] == grid.cells[8, 8] == CellState.Free
    #-- nothing seen through the walls
    assert grid.cells[11, 7] == CellState.Unknown
    #-- only true obstacles are ever marked occupied
    assert np.all(culdesac.occupancy[grid.cells == CellState.Occupied])

def test_belief_expert_rollouts(culdesac, walls, long_culdesac, desk_sensor):
    trace = expert.expert_rollout(walls, desk_sensor, 100)
    assert trace.terminal is Terminal.Goal
    assert trace.steps == 4
    assert trace.actions == [Action.Right] * 4
    trace = expert.expert_rollout(culdesac, desk_sensor, 100)
    assert trace.terminal is Terminal.Goal
    assert trace.steps >= 8
    #-- the far end is out of range at the mouth, so the expert goes in first
    trace = expert.expert_rollout(long_culdesac, desk_sensor, 200)
    assert trace.terminal is Terminal.Goal
    assert trace.actions[0] is Action.Right
    assert Action.Left in trace.actions
    assert trace.steps > expert.optimal_plan(long_culdesac, 2).cost

def test_expert_reaches_goal_on_suite(manifest, desk_sensor):
    for spec in manifest:
        trace = expert.expert_rollout(gridworld.generate_map(spec), desk_sensor, 200)
        assert trace.terminal is Terminal.Goal

def test_belief_expert_action(culdesac, desk_sensor):
    e = BeliefExpert(culdesac, desk_sensor)
    obs = gridworld.sense(culdesac, culdesac.start_state, Action.Right, desk_sensor)
    e.observe(culdesac.start_state, obs, Action.Right)
    assert e.action(culdesac.start_state) is Action.Left

def test_write_plans(culdesac, walls):
    f = io.StringIO()
    expert.write_plans([expert.optimal_plan(m, 2) for m in (culdesac, walls)], f)
    lines = f.getvalue().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[1])
    assert rec['cost'] == 4
    assert rec['path'][0] == [8, 6]
    assert rec['path'][-1] == [8, 14]
