"""Grid world with cul-de-sac and parallel-wall obstacles.

Positions are in meters, x to the right and y up. The occupancy grid is
indexed ``[row, col]`` with rows growing with y, so cell ``(r, c)`` covers
``x in [c*res, (c+1)*res)`` and ``y in [r*res, (r+1)*res)``.
"""
import math
import logging
from dataclasses import dataclass, fields
from enum import Enum, IntEnum

import numpy as np

from memnav.errors import InfeasibleSpec, InvalidOperation


log = logging.getLogger(__name__)

WALL_CELLS = 1          #-- obstacle walls are one cell thick
PADDING = 3.0           #-- free meters around every feature of a map
GOAL_CLEARANCE = 2.0    #-- meters between the far end and the goal center
GOAL_RADIUS = 1         #-- Chebyshev radius of the goal region, in cells
EPS = 1e-9
CORNER_TOL = 1e-12      #-- axis crossings this close count as one corner crossing


class ObstacleKind(Enum):
    CulDeSac = 'culdesac'
    ParallelWalls = 'walls'


class Action(IntEnum):
    Down = 0
    Right = 1
    Up = 2
    Left = 3


class Terminal(Enum):
    Running = 'none'
    Goal = 'goal'
    Collision = 'collision'


#-- (drow, dcol) of each action
MOVES = {
    Action.Down: (-1, 0),
    Action.Right: (0, 1),
    Action.Up: (1, 0),
    Action.Left: (0, -1),
}

#-- unit (x, y) direction of each action
HEADINGS = {a: (float(dc), float(dr)) for a, (dr, dc) in MOVES.items()}

ORIENTATIONS = (0, 90, 180, 270)
_ROTATIONS = {0: (1, 0), 90: (0, 1), 180: (-1, 0), 270: (0, -1)}


def opposite(action):
    return Action((int(action) + 2) % 4)


def one_hot(action):
    e = np.zeros(4)
    e[int(action)] = 1.0
    return e


def action_between(a, b):
    """The action moving from cell a to cell b (same row or column)."""
    dr = np.sign(b[0] - a[0])
    dc = np.sign(b[1] - a[1])
    for action, move in MOVES.items():
        if move == (dr, dc):
            return action
    raise InvalidOperation("cells %s and %s are not aligned" % (a, b))


@dataclass(frozen=True)
class MapSpec:
    kind: ObstacleKind
    length: float
    width: float
    orientation: int = 0
    row_disp: float = 0.0
    col_disp: float = 0.0
    resolution: float = 0.5

    def __post_init__(self):
        if not isinstance(self.kind, ObstacleKind):
            object.__setattr__(self, 'kind', ObstacleKind(self.kind))
        if self.length <= 0 or self.width <= 0 or self.resolution <= 0:
            raise InfeasibleSpec("length, width and resolution must be positive (%s)" % self.to_record())
        if self.orientation not in ORIENTATIONS:
            raise InfeasibleSpec("orientation must be one of %s, not %s" % (ORIENTATIONS, self.orientation))
        inner = self.width / 2.0 - WALL_CELLS * self.resolution
        if abs(self.row_disp) >= inner:
            raise InfeasibleSpec("start is not between the walls (%s)" % self.to_record())

    def to_record(self):
        return ' '.join('%s=%s' % (k, v) for k, v in self.items())

    def items(self):
        for f in fields(self):
            v = getattr(self, f.name)
            yield f.name, (v.value if isinstance(v, ObstacleKind) else v)

    @classmethod
    def from_record(cls, line):
        kv = dict(tok.split('=', 1) for tok in line.split())
        try:
            return cls(kind=ObstacleKind(kv['kind']),
                       length=float(kv['length']),
                       width=float(kv['width']),
                       orientation=int(kv.get('orientation', 0)),
                       row_disp=float(kv.get('row_disp', 0.0)),
                       col_disp=float(kv.get('col_disp', 0.0)),
                       resolution=float(kv.get('resolution', 0.5)))
        except (KeyError, ValueError) as e:
            raise InfeasibleSpec("bad map record '%s' (%s)" % (line.strip(), e))


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float

    def cell(self, resolution):
        return (int(math.floor(self.y / resolution + EPS)),
                int(math.floor(self.x / resolution + EPS)))


@dataclass(frozen=True, eq=False)
class GridMap:
    occupancy: np.ndarray
    resolution: float
    goal_region: frozenset
    start_state: RobotState
    spec: MapSpec = None

    @property
    def shape(self):
        return self.occupancy.shape

    @property
    def bounds(self):
        rows, cols = self.occupancy.shape
        return (cols * self.resolution, rows * self.resolution)

    @property
    def goal_position(self):
        cells = np.array(sorted(self.goal_region), dtype=float)
        r, c = cells.mean(axis=0)
        return ((c + 0.5) * self.resolution, (r + 0.5) * self.resolution)

    def in_bounds(self, cell):
        rows, cols = self.occupancy.shape
        return 0 <= cell[0] < rows and 0 <= cell[1] < cols

    def is_free(self, cell):
        return self.in_bounds(cell) and not self.occupancy[cell]

    def same_as(self, other):
        return (self.resolution == other.resolution and
                self.goal_region == other.goal_region and
                self.start_state == other.start_state and
                self.spec == other.spec and
                np.array_equal(self.occupancy, other.occupancy))


@dataclass(frozen=True)
class SensorConfig:
    n_beams: int
    z_min: float
    z_max: float
    step_size: float
    fov: float = 360.0
    blind_rear: bool = False
    goal_term: str = 'heading'

    def __post_init__(self):
        if self.n_beams < 1:
            raise InvalidOperation("n_beams must be >= 1")
        if not self.z_min < self.z_max:
            raise InvalidOperation("z_min must be smaller than z_max")
        if not 0 < self.fov <= 360:
            raise InvalidOperation("fov must be in (0, 360]")
        if self.goal_term not in ('heading', 'displacement'):
            raise InvalidOperation("goal_term is 'heading' or 'displacement'")

    @property
    def goal_dim(self):
        return 1 if self.goal_term == 'heading' else 2


@dataclass(frozen=True, eq=False)
class Observation:
    ranges: np.ndarray
    goal_term: np.ndarray


@dataclass(frozen=True)
class StepOutcome:
    next_state: RobotState
    reward: int
    terminal: Terminal


@dataclass(frozen=True)
class ParamGrid:
    """Candidate values per map parameter; each draw picks one uniformly."""
    kind: tuple = (ObstacleKind.CulDeSac, ObstacleKind.ParallelWalls)
    length: tuple = (10.0,)
    width: tuple = (2.0,)
    orientation: tuple = ORIENTATIONS
    row_disp: tuple = (0.0,)
    col_disp: tuple = (0.0,)
    resolution: tuple = (0.5,)

    def __post_init__(self):
        for f in fields(self):
            if len(getattr(self, f.name)) == 0:
                raise InvalidOperation("parameter grid '%s' is empty" % f.name)


def step_cells(cfg, resolution):
    k = cfg.step_size / resolution
    if abs(k - round(k)) > 1e-9 or round(k) < 1:
        raise InvalidOperation("step %s is not a multiple of the resolution %s" % (cfg.step_size, resolution))
    return int(round(k))


#-- map generation

def _rotate(x, y, orientation):
    c, s = _ROTATIONS[orientation]
    return (c * x - s * y, s * x + c * y)


def _local_features(spec):
    """Obstacle rectangles (x0, x1, y0, y1), start and goal in the obstacle frame.

    The mouth is centered on the origin and the corridor runs along +x.
    """
    t = WALL_CELLS * spec.resolution
    half = spec.width / 2.0
    rects = [(0.0, spec.length, half - t, half),
             (0.0, spec.length, -half, -half + t)]
    if spec.kind is ObstacleKind.CulDeSac:
        rects.append((spec.length - t, spec.length, -half, half))
    start = (spec.col_disp, spec.row_disp)
    goal = (spec.length + GOAL_CLEARANCE, 0.0)
    return rects, start, goal


def _turn_cell(cell, shape, turns):
    """Cell (r, c) of a grid of `shape` after `turns` quarter turns counterclockwise."""
    r, c = cell
    rows, cols = shape
    for _ in range(turns):
        r, c = c, rows - 1 - r
        rows, cols = cols, rows
    return (r, c)


def _turn_grid(occ, turns):
    for _ in range(turns):
        occ = occ[::-1].T
    return np.ascontiguousarray(occ)


def _layout(spec, goal_radius):
    """Occupancy, start position and goal cells of the obstacle at orientation 0."""
    res = spec.resolution
    rects, start, goal = _local_features(spec)
    #-- bounding box of everything, padded and snapped to the grid
    xs = [v for r in rects for v in r[:2]] + [start[0], goal[0]]
    ys = [v for r in rects for v in r[2:]] + [start[1], goal[1]]
    x_lo = math.floor((min(xs) - PADDING) / res) * res
    x_hi = math.ceil((max(xs) + PADDING) / res) * res
    y_lo = math.floor((min(ys) - PADDING) / res) * res
    y_hi = math.ceil((max(ys) + PADDING) / res) * res
    cols = int(round((x_hi - x_lo) / res))
    rows = int(round((y_hi - y_lo) / res))
    #-- a cell is occupied when its center lies in a rectangle
    cx = x_lo + (np.arange(cols) + 0.5) * res
    cy = y_lo + (np.arange(rows) + 0.5) * res
    occ = np.zeros((rows, cols), dtype=bool)
    for (x0, x1, y0, y1) in rects:
        inx = (cx >= x0 - EPS) & (cx <= x1 + EPS)
        iny = (cy >= y0 - EPS) & (cy <= y1 + EPS)
        occ |= np.outer(iny, inx)
    start_state = RobotState(round(start[0] - x_lo, 9), round(start[1] - y_lo, 9))
    sr, sc = start_state.cell(res)
    if not (0 <= sr < rows and 0 <= sc < cols) or occ[sr, sc]:
        raise InfeasibleSpec("start falls inside the obstacle or off the grid (%s)" % spec.to_record())
    gr, gc = RobotState(goal[0] - x_lo, goal[1] - y_lo).cell(res)
    goals = []
    for dr in range(-goal_radius, goal_radius + 1):
        for dc in range(-goal_radius, goal_radius + 1):
            cell = (gr + dr, gc + dc)
            if not (0 <= cell[0] < rows and 0 <= cell[1] < cols) or occ[cell]:
                raise InfeasibleSpec("goal region collides with the obstacle (%s)" % spec.to_record())
            goals.append(cell)
    return occ, start_state, goals


def generate_map(spec, goal_radius=GOAL_RADIUS):
    """Lay the obstacle out at orientation 0, then turn the whole grid.

    A rotated map is the exact quarter turn of the unrotated one, cell for
    cell. The robot keeps its offset from the lower left corner of its cell.
    """
    res = spec.resolution
    occ, start, goals = _layout(spec, goal_radius)
    turns = spec.orientation // 90
    sr, sc = start.cell(res)
    r, c = _turn_cell((sr, sc), occ.shape, turns)
    start_state = RobotState(round(c * res + (start.x - sc * res), 9),
                             round(r * res + (start.y - sr * res), 9))
    goal = frozenset(_turn_cell(g, occ.shape, turns) for g in goals)
    return GridMap(occupancy=_turn_grid(occ, turns), resolution=res, goal_region=goal,
                   start_state=start_state, spec=spec)


def obstacle_frame(gmap, state):
    """Position in the frame of the obstacle: mouth at the origin, corridor along +x."""
    spec = gmap.spec
    if spec is None:
        raise InvalidOperation("map carries no spec")
    dx = state.x - gmap.start_state.x
    dy = state.y - gmap.start_state.y
    lx, ly = _rotate(dx, dy, (360 - spec.orientation) % 360)
    return (lx + spec.col_disp, ly + spec.row_disp)


def corridor_action(orientation):
    """The absolute action that runs along the corridor into the obstacle."""
    c, s = _ROTATIONS[orientation]
    for action, heading in HEADINGS.items():
        if heading == (float(c), float(s)):
            return action


def sample_spec(param_grid, rng):
    values = {}
    for f in fields(param_grid):
        candidates = getattr(param_grid, f.name)
        values[f.name] = candidates[int(rng.integers(len(candidates)))]
    return MapSpec(**values)


#-- dynamics

def step(gmap, state, action, cfg):
    k = step_cells(cfg, gmap.resolution)
    r, c = state.cell(gmap.resolution)
    dr, dc = MOVES[Action(action)]
    for i in range(1, k + 1):
        if not gmap.is_free((r + dr * i, c + dc * i)):
            return StepOutcome(state, -1, Terminal.Collision)
    nxt = RobotState(round(state.x + dc * cfg.step_size, 9),
                     round(state.y + dr * cfg.step_size, 9))
    if nxt.cell(gmap.resolution) in gmap.goal_region:
        return StepOutcome(nxt, 1, Terminal.Goal)
    return StepOutcome(nxt, 0, Terminal.Running)


#-- sensing

def beam_directions(cfg):
    """Unit (dx, dy) per beam; beam k points fov*k/n_beams ccw from +x."""
    angles = np.deg2rad(cfg.fov * np.arange(cfg.n_beams) / cfg.n_beams)
    #-- snap so that axis-aligned beams have exact zero components
    return np.round(np.cos(angles), 12), np.round(np.sin(angles), 12)


def march_beams(shape, px, py, dx, dy, limit, visit, touch=None):
    """Walk every beam cell by cell until `visit` stops it or it passes `limit`.

    Coordinates and distances are in cell units. `visit(sel, iy, ix, t, inside)`
    receives the beams `sel` that just entered cells (iy, ix) at distance t and
    returns a boolean mask of those that stop there. A beam passing through a
    cell corner touches the two cells beside the corner before it steps into
    the diagonal one; `touch`, with the signature of `visit`, sees those.
    """
    n = len(dx)
    rows, cols = shape
    limit = np.broadcast_to(np.asarray(limit, dtype=float), (n,))
    ix = np.full(n, int(math.floor(px + EPS)))
    iy = np.full(n, int(math.floor(py + EPS)))
    sx = np.sign(dx).astype(int)
    sy = np.sign(dy).astype(int)
    with np.errstate(divide='ignore'):
        tdx = np.where(dx != 0, 1.0 / np.abs(dx), np.inf)
        tdy = np.where(dy != 0, 1.0 / np.abs(dy), np.inf)
    tmx = np.where(dx > 0, (ix + 1 - px) * tdx, np.where(dx < 0, (px - ix) * tdx, np.inf))
    tmy = np.where(dy > 0, (iy + 1 - py) * tdy, np.where(dy < 0, (py - iy) * tdy, np.inf))
    tmx = np.maximum(tmx, 0.0)
    tmy = np.maximum(tmy, 0.0)
    active = np.ones(n, dtype=bool)

    def inside(y, x):
        return (x >= 0) & (x < cols) & (y >= 0) & (y < rows)

    while active.any():
        t = np.minimum(tmx, tmy)
        active &= t < limit
        mx = active & (tmx <= tmy + CORNER_TOL)
        my = active & (tmy <= tmx + CORNER_TOL)
        corner = np.flatnonzero(mx & my)
        if touch is not None and len(corner) > 0:
            for cy, cx in ((iy[corner], ix[corner] + sx[corner]), (iy[corner] + sy[corner], ix[corner])):
                live = active[corner]
                sel = corner[live]
                if len(sel) == 0:
                    break
                ins = inside(cy[live], cx[live])
                stop = touch(sel, cy[live], cx[live], t[sel], ins)
                active[sel[stop | ~ins]] = False
            mx &= active
            my &= active
        ix[mx] += sx[mx]
        iy[my] += sy[my]
        tmx[mx] += tdx[mx]
        tmy[my] += tdy[my]
        sel = np.flatnonzero(active)
        if len(sel) == 0:
            break
        ins = inside(iy[sel], ix[sel])
        stop = visit(sel, iy[sel], ix[sel], t[sel], ins)
        active[sel[stop | ~ins]] = False


def sense(gmap, state, heading_hint, cfg):
    res = gmap.resolution
    occ = gmap.occupancy
    dx, dy = beam_directions(cfg)
    hits = np.full(cfg.n_beams, cfg.z_max)

    def visit(sel, iy, ix, t, inside):
        blocked = ~inside
        blocked[inside] = occ[iy[inside], ix[inside]]
        hits[sel[blocked]] = t[blocked] * res
        return blocked

    march_beams(occ.shape, state.x / res, state.y / res, dx, dy, cfg.z_max / res, visit, touch=visit)
    ranges = np.clip(hits, cfg.z_min, cfg.z_max)
    if cfg.blind_rear and heading_hint is not None:
        hx, hy = HEADINGS[Action(heading_hint)]
        ranges[dx * hx + dy * hy < -1e-12] = cfg.z_max
    gx, gy = gmap.goal_position
    if cfg.goal_term == 'heading':
        goal = np.array([math.atan2(state.y - gy, state.x - gx)])
    else:
        goal = np.array([state.x - gx, state.y - gy])
    return Observation(ranges=ranges, goal_term=goal)


def input_dim(cfg, prev_action=False):
    return cfg.n_beams + cfg.goal_dim + (4 if prev_action else 0)


def encode(obs, cfg, prev_action=None):
    """Network input: ranges scaled by z_max, the goal term, optionally u_{t-1}."""
    parts = [obs.ranges / cfg.z_max, obs.goal_term]
    if prev_action is not None:
        parts.append(one_hot(prev_action))
    return np.concatenate(parts)


def encode_step(obs, cfg, with_prev, prev=None):
    """`encode` with a fixed width: no previous action yet encodes as zeros."""
    x = encode(obs, cfg)
    if not with_prev:
        return x
    return np.concatenate([x, one_hot(prev) if prev is not None else np.zeros(4)])


def initial_heading(gmap):
    """Absolute action that best points from the start toward the goal."""
    gx, gy = gmap.goal_position
    vx = gx - gmap.start_state.x
    vy = gy - gmap.start_state.y
    return max(Action, key=lambda a: HEADINGS[a][0] * vx + HEADINGS[a][1] * vy)


#-- files

def write_map(gmap, f):
    spec = gmap.spec
    if spec is not None:
        for k, v in spec.items():
            f.write('%s=%s\n' % (k, v))
    else:
        f.write('resolution=%r\n' % gmap.resolution)
    f.write('start=%r,%r\n' % (gmap.start_state.x, gmap.start_state.y))
    f.write('goal=%s\n' % ';'.join('%d,%d' % c for c in sorted(gmap.goal_region)))
    rows, cols = gmap.shape
    f.write('rows=%d\ncols=%d\n' % (rows, cols))
    for r in range(rows - 1, -1, -1):
        f.write(''.join('#' if o else '.' for o in gmap.occupancy[r]) + '\n')


def read_map(f):
    header = {}
    lines = [l.rstrip('\n') for l in f]
    i = 0
    while i < len(lines) and '=' in lines[i]:
        k, v = lines[i].split('=', 1)
        header[k.strip()] = v.strip()
        i += 1
    try:
        rows = int(header['rows'])
        cols = int(header['cols'])
        grid = lines[i:i + rows]
        if len(grid) != rows or any(len(l) != cols for l in grid):
            raise ValueError("grid does not have %d rows of %d cells" % (rows, cols))
        occ = np.array([[ch == '#' for ch in l] for l in reversed(grid)], dtype=bool).reshape(rows, cols)
        x, y = (float(v) for v in header['start'].split(','))
        goal = frozenset(tuple(int(v) for v in c.split(',')) for c in header['goal'].split(';'))
        spec = None
        if 'kind' in header:
            spec = MapSpec.from_record(' '.join('%s=%s' % kv for kv in header.items()
                                                if kv[0] in MapSpec.__dataclass_fields__))
        res = float(header['resolution'])
    except (KeyError, ValueError) as e:
        raise InvalidOperation("not a map file (%s)" % e)
    return GridMap(occupancy=occ, resolution=res, goal_region=goal,
                   start_state=RobotState(x, y), spec=spec)


def write_manifest(specs, f):
    for spec in specs:
        f.write(spec.to_record() + '\n')


def read_manifest(f):
    specs = []
    for line in f:
        line = line.strip()
        if len(line) == 0 or line.startswith('#'):
            continue
        specs.append(MapSpec.from_record(line))
    return specs


def render_map(gmap, state=None):
    rows, cols = gmap.shape
    canvas = [['#' if gmap.occupancy[r, c] else '.' for c in range(cols)] for r in range(rows)]
    for (r, c) in gmap.goal_region:
        canvas[r][c] = 'G'
    r, c = (state or gmap.start_state).cell(gmap.resolution)
    canvas[r][c] = 'S'
    return '\n'.join(''.join(row) for row in reversed(canvas))
