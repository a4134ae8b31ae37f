import os.path
from os import makedirs

import click
import json
import logging
import sys
from dataclasses import replace

import numpy as np

import memnav
from memnav import config, dagger, evaluation, expert, gridworld, nn, vcdim
from memnav.errors import (DegenerateData, InfeasibleSpec, InvalidCheckpoint, InvalidConfig,
                           InvalidOperation, NoPath)


log = logging.getLogger(__name__)

#-- exit codes
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_INTERNAL = 3

INPUT_ERRORS = (InfeasibleSpec, InvalidCheckpoint, InvalidConfig, DegenerateData)

POLICIES = ('expert', 'turn-at-end', 'turn-at-half', 'random')


class MemnavGroup(click.Group):
    """Group that maps failures to exit codes: 1 usage, 2 bad input, 3 internal."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super(MemnavGroup, self).main(args, prog_name, complete_var,
                                               standalone_mode=False, **extra)
        except click.UsageError as e:
            e.show()
            sys.exit(EXIT_USAGE)
        except click.Abort:
            click.echo('Aborted!', err=True)
            sys.exit(EXIT_USAGE)
        except INPUT_ERRORS as e:
            click.echo(click.style(str(e), fg='red'), err=True)
            sys.exit(EXIT_INPUT)
        except (InvalidOperation, click.ClickException) as e:
            click.echo(click.style(str(e), fg='red'), err=True)
            sys.exit(EXIT_INTERNAL)
        except Exception as e:
            log.exception("internal error")
            click.echo(click.style("internal error: %s" % e, fg='red'), err=True)
            sys.exit(EXIT_INTERNAL)
        sys.exit(rv if isinstance(rv, int) else 0)


def print_cmd_status(s):
    click.echo(click.style(s, bg='cyan', fg='black'))


def _out_dir(out):
    d = os.path.abspath(out)
    if not os.path.isdir(d):
        makedirs(d)
    return d


def _open_out(d, name):
    p = os.path.join(d, name)
    try:
        return click.open_file(p, mode='w')
    except IOError as e:
        raise click.ClickException('Invalid output file: "%s".\n%s' % (p, e))


def _load_checkpoint(path):
    try:
        with open(path, 'r') as f:
            return nn.load_checkpoint(f)
    except IOError as e:
        raise InvalidCheckpoint('cannot read "%s" (%s)' % (path, e.strerror or e))


def _network_inputs(arch, sensor):
    """Whether the network reads the previous action, judged from its input width."""
    if arch.input_dim == gridworld.input_dim(sensor):
        return False
    if arch.input_dim == gridworld.input_dim(sensor, True):
        return True
    raise InvalidCheckpoint("network reads %d inputs, the sensor gives %d"
                            % (arch.input_dim, gridworld.input_dim(sensor)))


def load_suite(suite, count, seed):
    """Map specs of a gen-maps directory, a manifest file, a builtin grid or a grid file."""
    if os.path.isdir(suite):
        suite = os.path.join(suite, 'manifest.txt')
    if suite.endswith('manifest.txt'):
        try:
            with open(suite, 'r') as f:
                return gridworld.read_manifest(f)
        except IOError as e:
            raise InvalidConfig('cannot read manifest "%s" (%s)' % (suite, e.strerror or e))
    grid = config.get_grid(suite)
    rng = np.random.default_rng(seed)
    return config.suite_specs(grid, count, rng, config.PER_LENGTH.get(suite))


def _suite_name(suite):
    return os.path.basename(os.path.normpath(suite))


@click.group(cls=MemnavGroup)
@click.version_option(version=memnav.__version__)
@click.option('--verbose', '-v', is_flag=True, help='Log debug messages.')
def cli(verbose):
    """Train memory-based navigation policies by imitating an A* expert
    in lidar-sensed cul-de-sac worlds, evaluate them, and estimate their
    VC dimension from the last-layer features.

    To get help on specific command, eg for 'train':

    \b
        memnav train --help

    Usage examples:

    \b
        memnav gen-maps interp-small --out suites/interp
        memnav train --preset desk --arch lstm --learners 4 --out runs/lstm
        memnav eval --checkpoint runs/lstm/checkpoint.json --suite extrap-desk
        memnav vc --checkpoint runs/lstm/checkpoint.json --episodes 100
    """
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format='%(levelname)s %(name)s: %(message)s')


@cli.command('gen-maps')
@click.argument('grid')
@click.option('--count', type=int, default=None,
              help='Number of maps to draw (default 100, or a fixed number per length for extrap suites).')
@click.option('--per-length', type=int, default=None, help='Draw this many maps per obstacle length.')
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--out', default='.', show_default=True, help='Output directory.')
def gen_maps_cmd(grid, count, per_length, seed, out):
    """Draw a suite from GRID (builtin name or grid file) and write
    manifest.txt plus one map file per entry.

    Builtin grids: train-small, interp-small, extrap-small, the same
    three for 'large' and 'desk'.
    """
    if count is not None and count < 0:
        raise click.BadParameter('must be >= 0', param_hint='--count')
    pg = config.get_grid(grid)
    if per_length is None and count is None:
        per_length = config.PER_LENGTH.get(grid)
        count = 100
    print_cmd_status("Generating maps from '%s'" % grid)
    specs = config.suite_specs(pg, count, np.random.default_rng(seed), per_length)
    d = _out_dir(out)
    with _open_out(d, 'manifest.txt') as fo:
        gridworld.write_manifest(specs, fo)
    for i, spec in enumerate(specs):
        with _open_out(d, 'map_%04d.txt' % i) as fo:
            gridworld.write_map(gridworld.generate_map(spec), fo)
    click.echo("%d maps written to %s" % (len(specs), d))


@cli.command('train')
@click.option('--config', 'config_file', type=click.File('r'), default=None,
              help='key=value configuration file; flags override it.')
@click.option('--preset', type=click.Choice(sorted(config.PRESETS)), default=None)
@click.option('--arch', type=click.Choice([k.value for k in nn.ArchKind]), default=None)
@click.option('--lambda', 'mem_l2', type=float, default=None,
              help='Weight of the L2 penalty on the memory parameters (regularized DNC).')
@click.option('--no-links', is_flag=True, help='DNC without temporal link reads.')
@click.option('--prev-action', is_flag=True, help='Feed the previous action to the network.')
@click.option('--blind-rear', is_flag=True, help='Drop the beams behind the robot.')
@click.option('--learners', type=int, default=None)
@click.option('--J-max', 'J_max', type=int, default=None, help='Total number of updates.')
@click.option('--lr', type=float, default=None)
@click.option('--grid', 'train_grid', default=None, help='Training grid (builtin name or grid file).')
@click.option('--checkpoint-every', type=int, default=None)
@click.option('--seed', type=int, default=None)
@click.option('--out', default=None, help='Output directory.')
@click.option('--resume', type=click.Path(), default=None, help='Continue from a checkpoint.')
def train_cmd(config_file, preset, arch, mem_l2, no_links, prev_action, blind_rear, learners,
              J_max, lr, train_grid, checkpoint_every, seed, out, resume):
    """Train a policy with asynchronous DAgger.

    Writes checkpoint.json, periodic checkpoint_J*.json, training_log.csv
    and the merged configuration run.cfg to the output directory.
    """
    file_values = config.read_config_file(config_file) if config_file else {}
    flags = dict(preset=preset, arch=arch, mem_l2=mem_l2, learners=learners, J_max=J_max, lr=lr,
                 train_grid=train_grid, checkpoint_every=checkpoint_every, seed=seed, out=out,
                 links=False if no_links else None,
                 prev_action=True if prev_action else None,
                 blind_rear=True if blind_rear else None)
    rc = config.make_run_config(file_values, flags)
    p = config.get_preset(rc.preset)
    sensor = config.sensor_config(p, rc.blind_rear)
    params = opt_state = None
    J0 = 0
    if resume is not None:
        ckpt = _load_checkpoint(resume)
        arch_spec = ckpt.arch
        _network_inputs(arch_spec, sensor)
        params, opt_state, J0 = ckpt.params, ckpt.opt_state, ckpt.J
        rc = replace(rc, arch=arch_spec.kind.value, mem_l2=arch_spec.mem_l2,
                     links=arch_spec.memory.links if arch_spec.memory else rc.links)
        print_cmd_status("Resuming %s at J=%d" % (arch_spec.kind.value, J0))
    else:
        arch_spec = config.make_arch(p, rc.arch, rc.mem_l2, rc.prev_action, rc.links)
    cfg = dagger.LearnerConfig(j_max=rc.j_max, t_max=rc.t_max, J_max=rc.J_max,
                               n_learners=rc.learners, action_selection=rc.action_selection,
                               lr=rc.lr, seed=rc.seed, prev_action=_network_inputs(arch_spec, sensor))
    grid = config.get_grid(rc.train_grid)
    d = _out_dir(rc.out)
    with _open_out(d, 'run.cfg') as fo:
        config.write_run_config(rc, fo)

    def save(name, theta, s, J):
        ckpt = nn.Checkpoint(arch_spec, nn.Params(arch_spec, theta), s, J, rc.seed, rc.preset)
        with _open_out(d, name) as fo:
            nn.save_checkpoint(ckpt, fo)

    print_cmd_status("Training %s (%s preset, %d learners, J_max=%d)"
                     % (arch_spec.kind.value, rc.preset, cfg.n_learners, cfg.J_max))
    with click.progressbar(length=max(0, cfg.J_max - J0), label='updates') as bar:
        def on_update(row, shared):
            bar.update(1)
            if rc.checkpoint_every > 0 and row.J % rc.checkpoint_every == 0:
                theta, s, J = shared.state()
                save('checkpoint_J%07d.json' % row.J, theta, s, J)

        result = dagger.train(arch_spec, grid, sensor, cfg, params, opt_state, J0, on_update)
    save('checkpoint.json', result.params.theta, result.opt_state, result.J)
    with _open_out(d, 'training_log.csv') as fo:
        result.log.write_csv(fo)
    if len(result.log.rows) > 0:
        first, last = result.log.decile_medians()
        click.echo("J=%d, median loss %.4f (first tenth) -> %.4f (last tenth)" % (result.J, first, last))


@cli.command('eval')
@click.option('--checkpoint', type=click.Path(), default=None, help='Network to evaluate.')
@click.option('--policy', type=click.Choice(POLICIES), default=None,
              help='Evaluate a scripted policy instead of a network.')
@click.option('--preset', type=click.Choice(sorted(config.PRESETS)), default=None,
              help='Sensor preset (default: the checkpoint\'s, else small).')
@click.option('--blind-rear', is_flag=True)
@click.option('--suite', default=None, help='Builtin grid, grid file, gen-maps directory or manifest.')
@click.option('--count', type=int, default=100, show_default=True,
              help='Maps drawn from a grid suite.')
@click.option('--cap', type=int, default=None, help='Step cap (default 500 for extrap suites, else 200).')
@click.option('--reference', type=click.Choice([r.value for r in evaluation.Reference]),
              default='belief', show_default=True, help='Denominator of the A* ratio.')
@click.option('--full-map-labels', is_flag=True, help='Class accuracy against the full-map expert.')
@click.option('--workers', type=int, default=1, show_default=True)
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--model', default=None, help='Model name in the CSVs.')
@click.option('--out', default='.', show_default=True)
def eval_cmd(checkpoint, policy, preset, blind_rear, suite, count, cap, reference, full_map_labels,
             workers, seed, model, out):
    """Success rate, class accuracy and A* ratio on a suite.

    Writes results.csv (one row per episode), summary.csv (per obstacle
    kind) and curves.csv (per kind and obstacle length).
    """
    if (checkpoint is None) == (policy is None):
        raise click.UsageError("give exactly one of --checkpoint and --policy")
    ckpt = _load_checkpoint(checkpoint) if checkpoint is not None else None
    preset = preset or (ckpt.preset if ckpt is not None and ckpt.preset else 'small')
    sensor = config.sensor_config(config.get_preset(preset), blind_rear)
    if ckpt is not None:
        pol = evaluation.NetworkPolicy(ckpt.arch, ckpt.params, sensor,
                                       _network_inputs(ckpt.arch, sensor))
        model = model or ckpt.arch.kind.value
    elif policy == 'expert':
        pol = evaluation.ExpertPolicy(sensor)
    elif policy == 'turn-at-end':
        pol = evaluation.TurnAtFraction(sensor, 1.0)
    elif policy == 'turn-at-half':
        pol = evaluation.TurnAtFraction(sensor, 0.5)
    else:
        pol = evaluation.RandomPolicy(seed)
    model = model or policy
    suite = suite or 'interp-%s' % preset
    name = _suite_name(suite)
    cap = cap or config.default_cap(name)
    specs = load_suite(suite, count, seed)
    print_cmd_status("Evaluating %s on %s (%d maps, cap %d)" % (model, name, len(specs), cap))
    with click.progressbar(length=len(specs), label='episodes') as bar:
        report = evaluation.evaluate_suite(pol, specs, sensor, cap, reference, full_map_labels,
                                           workers, on_result=lambda r: bar.update(1))
    d = _out_dir(out)
    with _open_out(d, 'results.csv') as fo:
        report.write_results(fo, model, name)
    with _open_out(d, 'summary.csv') as fo:
        report.write_summary(fo, model, name)
    with _open_out(d, 'curves.csv') as fo:
        report.write_curves(fo, model, name)
    for kind, s in report.by_kind().items():
        click.echo("%-9s success %.3f  class acc %.3f  A* ratio %.3f  (%d episodes)"
                   % (kind.value, s.success_rate, s.class_acc, s.astar_ratio, s.episodes))


@cli.command('vc')
@click.option('--checkpoint', type=click.Path(), required=True)
@click.option('--preset', type=click.Choice(sorted(config.PRESETS)), default=None)
@click.option('--suite', default=None, help='Where the episodes come from (default: the training grid).')
@click.option('--episodes', type=int, default=100, show_default=True)
@click.option('--cap', type=int, default=None)
@click.option('--svm-c', type=float, default=1.0, show_default=True, help='Slack penalty of the SVM.')
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--model', default=None)
@click.option('--out', default='.', show_default=True)
def vc_cmd(checkpoint, preset, suite, episodes, cap, svm_c, seed, model, out):
    """VC dimension estimate per action class from last-layer features.

    Writes vc_report.csv, features.csv, pca.csv and (with matplotlib)
    pca.svg.
    """
    if episodes < 1:
        raise click.BadParameter('must be >= 1', param_hint='--episodes')
    if svm_c <= 0:
        raise click.BadParameter('must be > 0', param_hint='--svm-c')
    ckpt = _load_checkpoint(checkpoint)
    preset = preset or ckpt.preset or 'small'
    sensor = config.sensor_config(config.get_preset(preset))
    prev_action = _network_inputs(ckpt.arch, sensor)
    model = model or ckpt.arch.kind.value
    suite = suite or 'train-%s' % preset
    name = _suite_name(suite)
    cap = cap or config.default_cap(name)
    specs = load_suite(suite, episodes, seed)
    print_cmd_status("Collecting features of %s on %d %s maps" % (model, len(specs), name))
    maps = [gridworld.generate_map(s) for s in specs]
    fs = vcdim.collect_features(ckpt.arch, ckpt.params, maps, sensor, cap, prev_action,
                                provenance={'model': model, 'suite': name, 'seed': seed})
    print_cmd_status("Fitting %d SVMs and the enclosing ball (N=%d, D=%d)" % (4, fs.n, fs.dim))
    entries = vcdim.vc_report(fs, svm_c)
    d = _out_dir(out)
    with _open_out(d, 'vc_report.csv') as fo:
        vcdim.write_report(entries, fo, model)
    with _open_out(d, 'features.csv') as fo:
        vcdim.write_features(fs, fo)
    pca = vcdim.pca_project(fs)
    with _open_out(d, 'pca.csv') as fo:
        vcdim.write_pca_csv(pca, fo)
    try:
        vcdim.write_pca_svg(pca, os.path.join(d, 'pca.svg'), entries[0].radius, model)
    except InvalidOperation as e:
        click.echo(click.style("SVG export skipped: %s" % e.msg, fg='red'))
    for e in entries:
        click.echo("%-5s eta %.4g  margin %.4g  nSV %d  error %.3f"
                   % (e.action.name.lower(), e.eta_est, e.margin, e.n_support, e.training_error))


@cli.command('difficulty')
@click.argument('suite')
@click.option('--count', type=int, default=100, show_default=True)
@click.option('--preset', type=click.Choice(sorted(config.PRESETS)), default='small', show_default=True)
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--out', type=click.File('w'), default='-', help='JSON-lines output (default stdout).')
def difficulty_cmd(suite, count, preset, seed, out):
    """Full-map A* plan of every map of SUITE, one JSON object per line."""
    sensor = config.get_preset(preset).sensor
    for spec in load_suite(suite, count, seed):
        gmap = gridworld.generate_map(spec)
        stride = gridworld.step_cells(sensor, gmap.resolution)
        try:
            plan = expert.optimal_plan(gmap, stride)
        except NoPath as e:
            log.warning("skipping %s: %s", spec.to_record(), e)
            continue
        record = dict(spec=dict(spec.items()), difficulty=expert.map_difficulty(gmap, stride))
        record.update(expert.plan_record(plan))
        out.write(json.dumps(record) + '\n')


@cli.command('info')
@click.argument('mapfile', type=click.File('r'))
@click.option('--preset', type=click.Choice(sorted(config.PRESETS)), default='small', show_default=True)
def info_cmd(mapfile, preset):
    """Print a map file, its size and its difficulty."""
    try:
        gmap = gridworld.read_map(mapfile)
    except InvalidOperation as e:
        raise InvalidConfig(e.msg)
    sensor = config.get_preset(preset).sensor
    click.echo(gridworld.render_map(gmap))
    rows, cols = gmap.shape
    w, h = gmap.bounds
    click.echo("size: %d x %d cells (%g x %g m, resolution %g)" % (rows, cols, w, h, gmap.resolution))
    if gmap.spec is not None:
        click.echo("spec: %s" % gmap.spec.to_record())
    try:
        stride = gridworld.step_cells(sensor, gmap.resolution)
        plan = expert.optimal_plan(gmap, stride)
        click.echo("difficulty: %d expansions, optimal cost %d" % (expert.map_difficulty(gmap, stride), plan.cost))
    except NoPath:
        click.echo(click.style("no path from the start to the goal", fg='red'))
