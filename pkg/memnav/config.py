"""Named presets, builtin map grids and the run configuration.

Values merge in the order preset < config file < command-line flags.
"""
import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from memnav import gridworld, validation
from memnav.errors import InfeasibleSpec, InvalidConfig
from memnav.gridworld import MapSpec, ObstacleKind, ParamGrid, SensorConfig
from memnav.nn import ArchKind, ArchSpec, ConvLayer, MemorySpec


log = logging.getLogger(__name__)

INTERP_CAP = 200
EXTRAP_CAP = 500


@dataclass(frozen=True)
class Preset:
    name: str
    sensor: SensorConfig
    resolution: float
    hidden_sizes: tuple
    memory: MemorySpec
    conv: tuple = ()
    learners: int = 32
    J_max: int = 100000


PRESETS = {
    'small': Preset('small',
                    SensorConfig(n_beams=144, z_min=0.1, z_max=5.0, step_size=1.0, goal_term='heading'),
                    resolution=0.5,
                    hidden_sizes=(128, 128, 128),
                    memory=MemorySpec(rows=128, cols=32, read_heads=2)),
    'large': Preset('large',
                    SensorConfig(n_beams=1080, z_min=0.1, z_max=2.0, step_size=0.5,
                                 goal_term='displacement'),
                    resolution=0.25,
                    hidden_sizes=(256, 256, 256),
                    memory=MemorySpec(rows=256, cols=64, read_heads=4),
                    conv=(ConvLayer(10, 10, 10), ConvLayer(10, 10, 32))),
    'desk': Preset('desk',
                   SensorConfig(n_beams=64, z_min=0.1, z_max=5.0, step_size=1.0, goal_term='heading'),
                   resolution=0.5,
                   hidden_sizes=(32, 32),
                   memory=MemorySpec(rows=16, cols=8, read_heads=2),
                   learners=4,
                   J_max=30000),
}


def get_preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise InvalidConfig("unknown preset '%s' (one of %s)" % (name, ', '.join(sorted(PRESETS))))


def sensor_config(preset, blind_rear=False):
    s = preset.sensor
    if blind_rear:
        return SensorConfig(s.n_beams, s.z_min, s.z_max, s.step_size, s.fov, True, s.goal_term)
    return s


def make_arch(preset, kind, mem_l2=0.0, prev_action=False, links=True):
    """The preset's network; DNC kinds add a fusion layer of the feature width."""
    kind = ArchKind(kind)
    hidden = preset.hidden_sizes
    memory = None
    if kind in (ArchKind.DncFF, ArchKind.DncLSTM):
        hidden = hidden + (hidden[-1],)
        m = preset.memory
        memory = MemorySpec(m.rows, m.cols, m.read_heads, m.write_heads, links)
    return ArchSpec(kind=kind,
                    input_dim=gridworld.input_dim(preset.sensor, prev_action),
                    hidden_sizes=hidden,
                    beam_dim=preset.sensor.n_beams if preset.conv else 0,
                    conv=preset.conv,
                    memory=memory,
                    mem_l2=mem_l2)


#-- map grids

_BOTH = (ObstacleKind.CulDeSac, ObstacleKind.ParallelWalls)


def _lengths(lo, hi, step):
    return tuple(float(v) for v in range(lo, hi + 1, step))


_LARGE_TRAIN_DISP = (-0.5, -0.3, -0.1, 0.1, 0.3, 0.5)
_LARGE_TEST_ROW_DISP = (-0.4, -0.2, 0.0, 0.2, 0.4)

GRIDS = {
    'train-small': ParamGrid(kind=_BOTH, length=_lengths(2, 20, 2), width=(2.0,), resolution=(0.5,)),
    'interp-small': ParamGrid(kind=_BOTH, length=_lengths(3, 19, 2), width=(2.0,), resolution=(0.5,)),
    'extrap-small': ParamGrid(kind=_BOTH, length=_lengths(20, 119, 1), width=(2.0,), resolution=(0.5,)),
    'train-large': ParamGrid(kind=_BOTH, length=(6.0, 8.0, 10.0, 12.0), width=(2.0, 3.0, 4.0),
                             row_disp=_LARGE_TRAIN_DISP, col_disp=_LARGE_TRAIN_DISP,
                             resolution=(0.25,)),
    'interp-large': ParamGrid(kind=_BOTH, length=(7.0, 9.0, 11.0), width=(2.5, 3.5),
                              row_disp=_LARGE_TEST_ROW_DISP, col_disp=_LARGE_TRAIN_DISP,
                              resolution=(0.25,)),
    'extrap-large': ParamGrid(kind=_BOTH, length=(20.0, 24.0, 28.0), width=(2.5, 3.5),
                              row_disp=_LARGE_TEST_ROW_DISP, col_disp=_LARGE_TRAIN_DISP,
                              resolution=(0.25,)),
    'train-desk': ParamGrid(kind=_BOTH, length=_lengths(2, 10, 2), width=(2.0,), resolution=(0.5,)),
    'interp-desk': ParamGrid(kind=_BOTH, length=_lengths(3, 9, 2), width=(2.0,), resolution=(0.5,)),
    'extrap-desk': ParamGrid(kind=_BOTH, length=_lengths(11, 30, 1), width=(2.0,), resolution=(0.5,)),
}

#-- builtin suites drawn a fixed number of maps per obstacle length
PER_LENGTH = {'extrap-small': 2, 'extrap-desk': 2}


def read_grid(f):
    """A grid file: `key=v1,v2,...` lines, unnamed keys keep their defaults."""
    values = {}
    names = {f_.name for f_ in fields(ParamGrid)}
    for line in f:
        line = line.strip()
        if len(line) == 0 or line.startswith('#'):
            continue
        if '=' not in line:
            raise InvalidConfig("bad grid line '%s'" % line)
        k, v = (s.strip() for s in line.split('=', 1))
        if k not in names:
            raise InvalidConfig("unknown grid parameter '%s'" % k)
        items = [s.strip() for s in v.split(',') if s.strip()]
        try:
            if k == 'kind':
                values[k] = tuple(ObstacleKind(s) for s in items)
            elif k == 'orientation':
                values[k] = tuple(int(s) for s in items)
            else:
                values[k] = tuple(float(s) for s in items)
        except ValueError as e:
            raise InvalidConfig("bad values for '%s': %s" % (k, e))
    try:
        return ParamGrid(**values)
    except Exception as e:
        raise InvalidConfig(str(e))


def get_grid(name_or_path):
    if name_or_path in GRIDS:
        return GRIDS[name_or_path]
    try:
        with open(name_or_path) as f:
            return read_grid(f)
    except OSError:
        raise InvalidConfig("'%s' is neither a builtin grid (%s) nor a readable file"
                            % (name_or_path, ', '.join(sorted(GRIDS))))


def default_cap(suite_name):
    return EXTRAP_CAP if 'extrap' in str(suite_name) else INTERP_CAP


def _feasible_draw(grid, rng):
    try:
        spec = gridworld.sample_spec(grid, rng)
        gridworld.generate_map(spec)
    except InfeasibleSpec as e:
        log.warning("skipping map: %s", e)
        return None
    return spec


def suite_specs(grid, count, rng, per_length=None):
    """Draw map specs from a grid, skipping infeasible draws.

    With `per_length` the count is ignored and every obstacle length of the
    grid gets that many draws.
    """
    if per_length is None:
        draws = [_feasible_draw(grid, rng) for _ in range(count)]
    else:
        draws = []
        for length in grid.length:
            sub = ParamGrid(**dict(asdict(grid), length=(length,)))
            draws += [_feasible_draw(sub, rng) for _ in range(per_length)]
    return [spec for spec in draws if spec is not None]


#-- run configuration

@dataclass(frozen=True)
class RunConfig:
    preset: str = 'small'
    seed: int = 0
    arch: str = 'ff'
    mem_l2: float = 0.0
    links: bool = True
    prev_action: bool = False
    blind_rear: bool = False
    learners: int = 32
    j_max: int = 5
    t_max: int = 200
    J_max: int = 100000
    action_selection: str = 'sample'
    lr: float = 1e-4
    checkpoint_every: int = 1000
    gamma: float = 0.99     #-- part of the MDP, unused by supervised training
    train_grid: str = None
    suite: str = None
    cap: int = None
    episodes: int = 100
    svm_c: float = 1.0
    out: str = '.'

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, value):
    t = _TYPES[key]
    if t in (bool, 'bool'):
        v = str(value).strip().lower()
        if v in ('1', 'true', 'yes', 'on'):
            return True
        if v in ('0', 'false', 'no', 'off'):
            return False
        raise ValueError("'%s' is not a boolean" % value)
    if t in (int, 'int'):
        return int(value)
    if t in (float, 'float'):
        return float(value)
    return str(value)


def read_config_file(f):
    values = {}
    for n, line in enumerate(f, start=1):
        line = line.strip()
        if len(line) == 0 or line.startswith('#'):
            continue
        if '=' not in line:
            raise InvalidConfig("line %d: expected key=value" % n)
        k, v = (s.strip() for s in line.split('=', 1))
        if k not in _TYPES:
            raise InvalidConfig("line %d: unknown key '%s'" % (n, k))
        try:
            values[k] = _coerce(k, v)
        except ValueError as e:
            raise InvalidConfig("line %d: %s" % (n, e))
    return values


def make_run_config(file_values=None, flags=None):
    """Merge preset defaults, config file values and flags (None means not given)."""
    file_values = dict(file_values or {})
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    name = flags.get('preset', file_values.get('preset', 'small'))
    preset = get_preset(name)
    merged = dict(preset=name, learners=preset.learners, J_max=preset.J_max,
                  train_grid='train-%s' % name)
    merged.update(file_values)
    merged.update(flags)
    unknown = set(merged) - set(_TYPES)
    if unknown:
        raise InvalidConfig("unknown configuration keys: %s" % ', '.join(sorted(unknown)))
    rc = RunConfig(**merged)
    isValid, es = validation.runconfig(rc.to_dict())
    if not isValid:
        raise InvalidConfig('; '.join(es))
    return rc


def write_run_config(rc, f):
    for k, v in rc.to_dict().items():
        f.write('%s=%s\n' % (k, v))
