"""The supervision oracle: occupancy-grid mapping fused with A* replanning."""
import heapq
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from memnav import gridworld
from memnav.errors import InvalidOperation, NoPath
from memnav.gridworld import Action, MOVES, Terminal


log = logging.getLogger(__name__)

#-- tolerance, in cell units, when matching a measured range to a cell boundary
RANGE_TOL = 1e-7


class CellState(IntEnum):
    Unknown = 0
    Free = 1
    Occupied = 2


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    cells: np.ndarray
    resolution: float

    @classmethod
    def blank(cls, gmap):
        return cls(np.zeros(gmap.shape, dtype=np.int8), gmap.resolution)

    @classmethod
    def from_map(cls, gmap):
        """The fully known grid: ground-truth occupancy, everything else free."""
        cells = np.where(gmap.occupancy, CellState.Occupied, CellState.Free).astype(np.int8)
        return cls(cells, gmap.resolution)

    def count(self, state):
        return int((self.cells == state).sum())


@dataclass(frozen=True)
class PlanResult:
    path: tuple
    expanded: int
    cost: int


def update_occupancy(grid, state, obs, cfg, heading_hint=None):
    res = grid.resolution
    cells = grid.cells.copy()
    rows, cols = cells.shape
    r0, c0 = state.cell(res)
    if 0 <= r0 < rows and 0 <= c0 < cols and cells[r0, c0] != CellState.Occupied:
        cells[r0, c0] = CellState.Free
    dx, dy = gridworld.beam_directions(cfg)
    ranges = obs.ranges / res
    hit = obs.ranges < cfg.z_max
    use = np.ones(cfg.n_beams, dtype=bool)
    if cfg.blind_rear and heading_hint is not None:
        #-- blind beams carry no information
        hx, hy = gridworld.HEADINGS[Action(heading_hint)]
        use = dx * hx + dy * hy >= -1e-12
    prev_r = np.full(cfg.n_beams, r0)
    prev_c = np.full(cfg.n_beams, c0)
    z_min = cfg.z_min / res

    def settle(sel, t):
        beyond = t > ranges[sel] + RANGE_TOL
        #-- the previous cell holds the beam endpoint once a cell starts past the range
        pr, pc = prev_r[sel], prev_c[sel]
        end = beyond & hit[sel]
        cells[pr[end], pc[end]] = CellState.Occupied
        clear = ~end
        pr, pc = pr[clear], pc[clear]
        keep = cells[pr, pc] != CellState.Occupied
        cells[pr[keep], pc[keep]] = CellState.Free
        return beyond

    def visit(sel, iy, ix, t, inside):
        beyond = settle(sel, t)
        prev_r[sel] = iy
        prev_c[sel] = ix
        return beyond

    def touch(sel, iy, ix, t, inside):
        #-- a range ending on a corner does not tell which of its cells is the obstacle
        beyond = settle(sel, t)
        r = ranges[sel]
        ambiguous = hit[sel] & ~beyond & ((t >= r - RANGE_TOL) | (r <= z_min + RANGE_TOL))
        return beyond | ambiguous

    sel = np.flatnonzero(use)
    if len(sel) > 0:
        def visit_used(s, iy, ix, t, inside):
            return visit(sel[s], iy, ix, t, inside)

        def touch_used(s, iy, ix, t, inside):
            return touch(sel[s], iy, ix, t, inside)
        #-- the limit leaves room for the look-ahead cell past the endpoint
        gridworld.march_beams(cells.shape, state.x / res, state.y / res, dx[sel], dy[sel],
                              ranges[sel] + 1.5, visit_used, touch_used)
    return OccupancyGrid(cells, res)


def _heuristic(cell, goals, stride):
    r, c = cell
    return min(-(-abs(r - gr) // stride) + -(-abs(c - gc) // stride) for (gr, gc) in goals)


def _successors(blocked, cell, stride):
    """(action, cell) pairs one stride away with every crossed cell free."""
    rows, cols = blocked.shape
    r, c = cell
    for action in Action:
        dr, dc = MOVES[action]
        if all(0 <= r + dr * i < rows and 0 <= c + dc * i < cols and not blocked[r + dr * i, c + dc * i]
               for i in range(1, stride + 1)):
            yield action, (r + dr * stride, c + dc * stride)


def astar_plan(grid, start, goal_region, stride=1):
    """Optimal plan on the stride lattice, unknown cells treated as traversable.

    Ties on f are broken by the smaller heuristic, then by the action order
    Down < Right < Up < Left, then first come first served.
    """
    blocked = grid.cells == CellState.Occupied
    rows, cols = blocked.shape
    start = tuple(int(v) for v in start)
    if not (0 <= start[0] < rows and 0 <= start[1] < cols) or blocked[start]:
        raise InvalidOperation("start %s is occupied or off the grid" % (start,))
    goals = sorted(goal_region)
    if len(goals) == 0:
        raise NoPath("empty goal region")
    h0 = _heuristic(start, goals, stride)
    g = {start: 0}
    parent = {start: None}
    closed = set()
    heap = [(h0, h0, -1, 0, start)]
    counter = 0
    expanded = 0
    while heap:
        _, _, _, _, cell = heapq.heappop(heap)
        if cell in closed:
            continue
        closed.add(cell)
        expanded += 1
        if cell in goal_region:
            path = [cell]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            path.reverse()
            return PlanResult(tuple(path), expanded, len(path) - 1)
        for action, nxt in _successors(blocked, cell, stride):
            ng = g[cell] + 1
            if nxt in closed or ng >= g.get(nxt, np.inf):
                continue
            g[nxt] = ng
            parent[nxt] = cell
            counter += 1
            h = _heuristic(nxt, goals, stride)
            heapq.heappush(heap, (ng + h, h, int(action), counter, nxt))
    raise NoPath("goal unreachable from %s after %d expansions" % (start, expanded))


def expert_action(grid, state, goal_region, stride=1):
    plan = astar_plan(grid, state.cell(grid.resolution), goal_region, stride)
    if len(plan.path) < 2:
        raise InvalidOperation("robot already stands in the goal region")
    return gridworld.action_between(plan.path[0], plan.path[1])


def optimal_plan(gmap, stride=1):
    return astar_plan(OccupancyGrid.from_map(gmap), gmap.start_state.cell(gmap.resolution),
                      gmap.goal_region, stride)


def map_difficulty(gmap, stride=1):
    """Cells A* may expand on the fully known map, under any tie breaking.

    This is the number of lattice cells n with g*(n) + h(n) <= C*, the cells
    an A* search with this heuristic may pop before it settles the goal. It
    depends on the geometry only, so quarter turns and mirror images of a map
    score the same.
    """
    blocked = gmap.occupancy
    start = gmap.start_state.cell(gmap.resolution)
    goals = sorted(gmap.goal_region)
    g = {start: 0}
    todo = deque([start])
    while todo:
        cell = todo.popleft()
        for _, nxt in _successors(blocked, cell, stride):
            if nxt not in g:
                g[nxt] = g[cell] + 1
                todo.append(nxt)
    reached = [g[c] for c in goals if c in g]
    if not reached:
        raise NoPath("goal unreachable from %s" % (start,))
    best = min(reached)
    return sum(1 for cell, cost in g.items() if cost + _heuristic(cell, goals, stride) <= best)


class BeliefExpert:
    """The expert as a learner sees it: it maps what the robot senses and replans every step."""

    def __init__(self, gmap, cfg):
        self.gmap = gmap
        self.cfg = cfg
        self.stride = gridworld.step_cells(cfg, gmap.resolution)
        self.grid = OccupancyGrid.blank(gmap)

    def observe(self, state, obs, heading_hint=None):
        self.grid = update_occupancy(self.grid, state, obs, self.cfg, heading_hint)

    def action(self, state):
        return expert_action(self.grid, state, self.gmap.goal_region, self.stride)


@dataclass
class ExpertTrace:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    terminal: Terminal = Terminal.Running

    @property
    def steps(self):
        return len(self.actions)


def expert_rollout(gmap, cfg, cap):
    """Drive the belief expert through one episode."""
    expert = BeliefExpert(gmap, cfg)
    trace = ExpertTrace()
    state = gmap.start_state
    heading = gridworld.initial_heading(gmap)
    trace.states.append(state)
    for _ in range(cap):
        obs = gridworld.sense(gmap, state, heading, cfg)
        expert.observe(state, obs, heading)
        action = expert.action(state)
        outcome = gridworld.step(gmap, state, action, cfg)
        trace.actions.append(action)
        state = outcome.next_state
        heading = action
        trace.states.append(state)
        if outcome.terminal is not Terminal.Running:
            trace.terminal = outcome.terminal
            break
    return trace


def plan_record(result):
    return {'cost': result.cost, 'expanded': result.expanded,
            'path': [[int(v) for v in c] for c in result.path]}


def write_plans(results, f):
    for result in results:
        f.write(json.dumps(plan_record(result)) + '\n')
