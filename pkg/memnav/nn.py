"""Policy networks written directly against numpy.

Four kinds share one flat parameter vector and one readout: a feed-forward
trunk, an LSTM (the last controller layer is recurrent), and a DNC around
either controller. Every hidden unit is tanh. The last upstream layer psi is
mapped to action logits by a single linear readout.
"""
import base64
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

import memnav
from memnav import dnc, validation
from memnav.dnc import DncState
from memnav.errors import InvalidCheckpoint, InvalidOperation, ShapeMismatch
from memnav.gridworld import Action


log = logging.getLogger(__name__)

N_ACTIONS = 4
K_BPTT = 5
LEARNING_RATE = 1e-4
RMS_RHO = 0.9
RMS_EPS = 1e-8


class ArchKind(Enum):
    FF = 'ff'
    LSTM = 'lstm'
    DncFF = 'dnc-ff'
    DncLSTM = 'dnc-lstm'


@dataclass(frozen=True)
class ConvLayer:
    kernel: int
    stride: int
    channels: int


@dataclass(frozen=True)
class MemorySpec:
    rows: int
    cols: int
    read_heads: int
    write_heads: int = 1
    links: bool = True

    def __post_init__(self):
        if min(self.rows, self.cols, self.read_heads) < 1:
            raise InvalidOperation("memory rows, cols and read heads must be >= 1")
        if self.write_heads != 1:
            raise InvalidOperation("exactly one write head is supported, not %d" % self.write_heads)


@dataclass(frozen=True)
class ArchSpec:
    kind: ArchKind
    input_dim: int
    hidden_sizes: tuple
    beam_dim: int = 0
    conv: tuple = ()
    memory: MemorySpec = None
    mem_l2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'kind', ArchKind(self.kind))
        object.__setattr__(self, 'hidden_sizes', tuple(int(h) for h in self.hidden_sizes))
        object.__setattr__(self, 'conv', tuple(l if isinstance(l, ConvLayer) else ConvLayer(*l)
                                               for l in self.conv))
        if isinstance(self.memory, dict):
            object.__setattr__(self, 'memory', MemorySpec(**self.memory))
        if len(self.hidden_sizes) == 0:
            raise InvalidOperation("an architecture needs at least one hidden layer")
        if min(self.hidden_sizes) < 1 or self.input_dim < 1:
            raise InvalidOperation("layer widths must be >= 1")
        if self.mem_l2 < 0:
            raise InvalidOperation("mem_l2 must be nonnegative")
        if self.is_dnc:
            if self.memory is None:
                raise InvalidOperation("%s needs a memory spec" % self.kind.value)
            if len(self.hidden_sizes) < 2:
                raise InvalidOperation("%s needs controller layers and a fusion layer" % self.kind.value)
        if self.conv:
            if not 0 < self.beam_dim <= self.input_dim:
                raise InvalidOperation("conv front-end needs 0 < beam_dim <= input_dim")
            self.conv_shapes

    @property
    def is_dnc(self):
        return self.kind in (ArchKind.DncFF, ArchKind.DncLSTM)

    @property
    def recurrent(self):
        return self.kind in (ArchKind.LSTM, ArchKind.DncLSTM)

    @property
    def feature_dim(self):
        return self.hidden_sizes[-1]

    @property
    def controller_sizes(self):
        return self.hidden_sizes[:-1] if self.is_dnc else self.hidden_sizes

    @property
    def read_dim(self):
        return self.memory.read_heads * self.memory.cols if self.is_dnc else 0

    @property
    def conv_shapes(self):
        """(channels_in, length_in, channels_out, length_out) per conv layer."""
        shapes = []
        c, length = 1, self.beam_dim
        for layer in self.conv:
            out = (length - layer.kernel) // layer.stride + 1
            if layer.kernel < 1 or layer.stride < 1 or out < 1:
                raise InvalidOperation("conv layer %s does not fit %d inputs" % (layer, length))
            shapes.append((c, length, layer.channels, out))
            c, length = layer.channels, out
        return shapes

    @property
    def trunk_dim(self):
        if not self.conv:
            return self.input_dim
        _, _, c, length = self.conv_shapes[-1]
        return c * length + self.input_dim - self.beam_dim


def param_layout(arch):
    shapes = []
    for i, (ci, _, co, _) in enumerate(arch.conv_shapes):
        shapes += [('conv%d.W' % i, (co, ci * arch.conv[i].kernel)), ('conv%d.b' % i, (co,))]
    n_in = arch.trunk_dim
    ctrl = arch.controller_sizes
    for j, h in enumerate(ctrl):
        lstm = arch.recurrent and j == len(ctrl) - 1
        rows = 4 * h if lstm else h
        shapes.append(('layer%d.W' % j, (rows, n_in)))
        if j == 0 and arch.is_dnc:
            shapes.append(('layer0.Wr', (rows, arch.read_dim)))
        if lstm:
            shapes.append(('layer%d.U' % j, (rows, h)))
        shapes.append(('layer%d.b' % j, (rows,)))
        n_in = h
    if arch.is_dnc:
        nxi = dnc.interface_size(arch.memory)
        d = arch.feature_dim
        shapes += [('iface.W', (nxi, n_in)), ('iface.b', (nxi,)),
                   ('fuse.Wv', (d, n_in)), ('fuse.Wr', (d, arch.read_dim)), ('fuse.b', (d,))]
        n_in = d
    shapes += [('readout.A', (N_ACTIONS, n_in)), ('readout.b', (N_ACTIONS,))]
    layout = OrderedDict()
    offset = 0
    for name, shape in shapes:
        layout[name] = (offset, shape)
        offset += int(np.prod(shape))
    return layout


def memory_param_names(arch):
    """The recurrent gate blocks and the DNC interface/read-head weights."""
    names = []
    if arch.recurrent:
        j = len(arch.controller_sizes) - 1
        names += ['layer%d.W' % j, 'layer%d.U' % j, 'layer%d.b' % j]
    if arch.is_dnc:
        names += ['layer0.Wr', 'iface.W', 'iface.b', 'fuse.Wr']
    return names


class Params:
    """Flat float64 theta with named views into it."""

    def __init__(self, arch, theta=None):
        self.arch = arch
        self.layout = param_layout(arch)
        offset, shape = next(reversed(self.layout.values()))
        size = offset + int(np.prod(shape))
        if theta is None:
            theta = np.zeros(size)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (size,):
            raise ShapeMismatch("theta has shape %s, the architecture needs (%d,)" % (theta.shape, size))
        self.theta = theta

    def __getitem__(self, name):
        offset, shape = self.layout[name]
        return self.theta[offset:offset + int(np.prod(shape))].reshape(shape)

    def __contains__(self, name):
        return name in self.layout

    @property
    def size(self):
        return len(self.theta)

    def names(self):
        return list(self.layout)

    def memory_mask(self):
        mask = np.zeros(self.size, dtype=bool)
        for name in memory_param_names(self.arch):
            offset, shape = self.layout[name]
            mask[offset:offset + int(np.prod(shape))] = True
        return mask

    def memory_view(self):
        return self.theta[self.memory_mask()]

    def like(self, theta=None):
        return Params(self.arch, theta)

    def copy(self):
        return Params(self.arch, self.theta.copy())


def count_params(arch):
    return Params(arch).size


def init_params(arch, rng):
    params = Params(arch)
    for name, (_, shape) in params.layout.items():
        if name.endswith('.b'):
            continue
        fan_out, fan_in = shape
        a = np.sqrt(6.0 / (fan_in + fan_out))
        params[name][...] = rng.uniform(-a, a, size=shape)
    if arch.recurrent:
        j = len(arch.controller_sizes) - 1
        h = arch.controller_sizes[-1]
        params['layer%d.b' % j][h:2 * h] = 1.0
    return params


@dataclass(frozen=True, eq=False)
class MemoryState:
    h: np.ndarray = None
    c: np.ndarray = None
    dnc: DncState = None


def fresh_state(arch):
    h = c = mem = None
    if arch.recurrent:
        h = np.zeros(arch.controller_sizes[-1])
        c = np.zeros(arch.controller_sizes[-1])
    if arch.is_dnc:
        mem = dnc.fresh_state(arch.memory)
    return MemoryState(h=h, c=c, dnc=mem)


def _check_state(arch, mem):
    if arch.recurrent:
        h = arch.controller_sizes[-1]
        if mem.h is None or mem.h.shape != (h,) or mem.c is None or mem.c.shape != (h,):
            raise ShapeMismatch("LSTM state does not have width %d" % h)
    if arch.is_dnc:
        spec = arch.memory
        if mem.dnc is None or mem.dnc.memory.shape != (spec.rows, spec.cols) \
                or mem.dnc.read_weights.shape != (spec.read_heads, spec.rows):
            raise ShapeMismatch("DNC state does not match a %dx%d memory with %d read heads"
                                % (spec.rows, spec.cols, spec.read_heads))


@dataclass(frozen=True, eq=False)
class PolicyOutput:
    logits: np.ndarray
    probs: np.ndarray
    psi: np.ndarray
    chosen: Action


@dataclass(eq=False)
class StepTrace:
    """Activations of one forward step, enough to backpropagate it."""
    mem_in: MemoryState
    conv: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    lstm: tuple = None
    prev_reads: np.ndarray = None
    dnc_cache: dict = None
    reads: np.ndarray = None
    psi: np.ndarray = None
    probs: np.ndarray = None


class ForwardTrace(list):
    """Consecutive StepTraces of one BPTT window."""

    def __init__(self, k=K_BPTT):
        super().__init__()
        self.k = k

    def append(self, step):
        if len(self) >= self.k:
            raise InvalidOperation("window is full (%d steps)" % self.k)
        super().append(step)


def softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def log_softmax(z):
    m = z.max()
    return z - (m + np.log(np.exp(z - m).sum()))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _conv_index(length, layer):
    out = (length - layer.kernel) // layer.stride + 1
    return layer.stride * np.arange(out)[:, None] + np.arange(layer.kernel)[None, :]


def forward(arch, params, x, mem, rng=None):
    """One step of the policy. With `rng` the action is sampled, otherwise argmax."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (arch.input_dim,):
        raise ShapeMismatch("input has shape %s, expected (%d,)" % (x.shape, arch.input_dim))
    _check_state(arch, mem)
    tr = StepTrace(mem_in=mem)
    z = x
    if arch.conv:
        a = x[:arch.beam_dim][None, :]
        for i, layer in enumerate(arch.conv):
            idx = _conv_index(a.shape[1], layer)
            patches = a[:, idx].transpose(1, 0, 2).reshape(idx.shape[0], -1)
            a = np.tanh(params['conv%d.W' % i] @ patches.T + params['conv%d.b' % i][:, None])
            tr.conv.append((idx, patches, a))
        z = np.concatenate([a.ravel(), x[arch.beam_dim:]])

    ctrl = arch.controller_sizes
    h_in = z
    new_h = new_c = None
    if arch.is_dnc:
        tr.prev_reads = mem.dnc.reads.ravel()
    for j, size in enumerate(ctrl):
        name = 'layer%d' % j
        pre = params[name + '.W'] @ h_in + params[name + '.b']
        if j == 0 and arch.is_dnc:
            pre = pre + params['layer0.Wr'] @ tr.prev_reads
        tr.inputs.append(h_in)
        if arch.recurrent and j == len(ctrl) - 1:
            pre = pre + params[name + '.U'] @ mem.h
            i_g = _sigmoid(pre[:size])
            f_g = _sigmoid(pre[size:2 * size])
            o_g = _sigmoid(pre[2 * size:3 * size])
            g_g = np.tanh(pre[3 * size:])
            new_c = f_g * mem.c + i_g * g_g
            tc = np.tanh(new_c)
            h_out = o_g * tc
            new_h = h_out
            tr.lstm = (i_g, f_g, o_g, g_g, tc)
        else:
            h_out = np.tanh(pre)
        tr.outputs.append(h_out)
        h_in = h_out
    v = h_in

    new_dnc = None
    if arch.is_dnc:
        xi = params['iface.W'] @ v + params['iface.b']
        new_dnc, tr.dnc_cache = dnc.memory_step(mem.dnc, xi, arch.memory)
        tr.reads = new_dnc.reads.ravel()
        psi = np.tanh(params['fuse.Wv'] @ v + params['fuse.Wr'] @ tr.reads + params['fuse.b'])
    else:
        psi = v
    logits = params['readout.A'] @ psi + params['readout.b']
    probs = softmax(logits)
    if rng is None:
        chosen = Action(int(np.argmax(probs)))
    else:
        chosen = Action(int(rng.choice(N_ACTIONS, p=probs)))
    tr.psi = psi
    tr.probs = probs

    if arch.kind is ArchKind.FF:
        new_mem = mem
    else:
        new_mem = MemoryState(h=new_h, c=new_c, dnc=new_dnc)
    return PolicyOutput(logits, probs, psi, chosen), new_mem, tr


def as_one_hot(label):
    if isinstance(label, (int, np.integer, Action)):
        e = np.zeros(N_ACTIONS)
        e[int(label)] = 1.0
        return e
    return np.asarray(label, dtype=np.float64)


def cross_entropy(logits, label):
    return float(-(as_one_hot(label) * log_softmax(logits)).sum())


def regularizer(arch, params):
    if arch.mem_l2 <= 0:
        return 0.0
    m = params.memory_view()
    return 0.5 * arch.mem_l2 * float(m @ m)


def loss(outputs, labels, arch, params):
    """Mean cross-entropy of the window plus the L2 penalty on the memory view."""
    if len(outputs) != len(labels):
        raise ShapeMismatch("%d outputs but %d labels" % (len(outputs), len(labels)))
    if len(outputs) == 0:
        raise InvalidOperation("empty window")
    ce = np.mean([cross_entropy(o.logits, l) for o, l in zip(outputs, labels)])
    return float(ce) + regularizer(arch, params)


def _conv_backward(arch, params, grad, tr, dz):
    _, _, c, length = arch.conv_shapes[-1]
    da = dz[:c * length].reshape(c, length)
    for i in reversed(range(len(arch.conv))):
        idx, patches, out = tr.conv[i]
        dpre = da * (1.0 - out ** 2)
        grad['conv%d.W' % i][...] += dpre @ patches
        grad['conv%d.b' % i][...] += dpre.sum(axis=1)
        if i == 0:
            break
        ci, li, _, lo = arch.conv_shapes[i]
        k = arch.conv[i].kernel
        dpatches = (dpre.T @ params['conv%d.W' % i]).reshape(lo, ci, k).transpose(1, 0, 2)
        da = np.zeros((ci, li))
        for kk in range(k):
            #-- for a fixed kernel tap the columns are distinct
            da[:, idx[:, kk]] += dpatches[:, :, kk]


def backward(arch, params, traces, labels):
    """Gradient of `loss` over one window.

    The LSTM state carries gradient between the steps of the window but not
    past its first step. The DNC memory state entering each step is a constant.
    """
    n = len(traces)
    if n > K_BPTT:
        raise InvalidOperation("window of %d steps exceeds the BPTT truncation %d" % (n, K_BPTT))
    if n != len(labels):
        raise ShapeMismatch("%d traces but %d labels" % (n, len(labels)))
    grad = params.like()
    ctrl = arch.controller_sizes
    last = len(ctrl) - 1
    dh_next = np.zeros(ctrl[-1])
    dc_next = np.zeros(ctrl[-1])
    for t in reversed(range(n)):
        tr = traces[t]
        dlogits = (tr.probs - as_one_hot(labels[t])) / n
        grad['readout.A'][...] += np.outer(dlogits, tr.psi)
        grad['readout.b'][...] += dlogits
        dpsi = params['readout.A'].T @ dlogits
        v = tr.outputs[-1]
        if arch.is_dnc:
            dpre = dpsi * (1.0 - tr.psi ** 2)
            grad['fuse.Wv'][...] += np.outer(dpre, v)
            grad['fuse.Wr'][...] += np.outer(dpre, tr.reads)
            grad['fuse.b'][...] += dpre
            dv = params['fuse.Wv'].T @ dpre
            dreads = (params['fuse.Wr'].T @ dpre).reshape(arch.memory.read_heads, arch.memory.cols)
            dxi = dnc.memory_backward(dreads, tr.dnc_cache)
            grad['iface.W'][...] += np.outer(dxi, v)
            grad['iface.b'][...] += dxi
            dv = dv + params['iface.W'].T @ dxi
        else:
            dv = dpsi
        dout = dv
        for j in reversed(range(len(ctrl))):
            name = 'layer%d' % j
            if arch.recurrent and j == last:
                i_g, f_g, o_g, g_g, tc = tr.lstm
                dh = dout + dh_next
                dc = dh * o_g * (1.0 - tc ** 2) + dc_next
                dpre = np.concatenate([dc * g_g * i_g * (1.0 - i_g),
                                       dc * tr.mem_in.c * f_g * (1.0 - f_g),
                                       dh * tc * o_g * (1.0 - o_g),
                                       dc * i_g * (1.0 - g_g ** 2)])
                grad[name + '.U'][...] += np.outer(dpre, tr.mem_in.h)
                dh_next = params[name + '.U'].T @ dpre
                dc_next = dc * f_g
            else:
                dpre = dout * (1.0 - tr.outputs[j] ** 2)
            grad[name + '.W'][...] += np.outer(dpre, tr.inputs[j])
            grad[name + '.b'][...] += dpre
            if j == 0 and arch.is_dnc:
                grad['layer0.Wr'][...] += np.outer(dpre, tr.prev_reads)
            dout = params[name + '.W'].T @ dpre
        if arch.conv:
            _conv_backward(arch, params, grad, tr, dout)
    if arch.mem_l2 > 0:
        mask = params.memory_mask()
        grad.theta[mask] += arch.mem_l2 * params.theta[mask]
    return grad


def run_window(arch, params, xs, mem, rng=None):
    outputs = []
    traces = ForwardTrace(max(K_BPTT, len(xs)))
    for x in xs:
        out, mem, tr = forward(arch, params, x, mem, rng)
        outputs.append(out)
        traces.append(tr)
    return outputs, traces, mem


def window_loss(arch, params, xs, labels, mem, pinned=None):
    """Loss of a window replayed from `mem`.

    `pinned` fixes the DNC state entering each step (the `mem_in.dnc` of a
    recorded trace), which makes the replay match what `backward` differentiates.
    """
    outputs = []
    for t, x in enumerate(xs):
        if pinned is not None and arch.is_dnc:
            mem = replace(mem, dnc=pinned[t])
        out, mem, _ = forward(arch, params, x, mem)
        outputs.append(out)
    return loss(outputs, labels, arch, params)


def rmsprop_update(opt_state, theta, grad, lr=LEARNING_RATE, rho=RMS_RHO, eps=RMS_EPS):
    if not (np.shape(opt_state) == np.shape(theta) == np.shape(grad)):
        raise ShapeMismatch("optimizer state, theta and gradient differ in shape")
    s = rho * opt_state + (1.0 - rho) * grad ** 2
    return theta - lr * grad / (np.sqrt(s) + eps), s


#-- checkpoints

@dataclass(eq=False)
class Checkpoint:
    arch: ArchSpec
    params: Params
    opt_state: np.ndarray = None
    J: int = 0
    seed: int = None
    preset: str = None


def arch_to_dict(arch):
    d = {'kind': arch.kind.value,
         'input_dim': arch.input_dim,
         'hidden_sizes': list(arch.hidden_sizes),
         'beam_dim': arch.beam_dim,
         'conv': [[l.kernel, l.stride, l.channels] for l in arch.conv],
         'memory': None,
         'mem_l2': arch.mem_l2}
    if arch.memory is not None:
        m = arch.memory
        d['memory'] = {'rows': m.rows, 'cols': m.cols, 'read_heads': m.read_heads,
                       'write_heads': m.write_heads, 'links': m.links}
    return d


def arch_from_dict(d):
    return ArchSpec(kind=d['kind'], input_dim=d['input_dim'], hidden_sizes=d['hidden_sizes'],
                    beam_dim=d.get('beam_dim', 0), conv=d.get('conv', ()),
                    memory=d.get('memory'), mem_l2=d.get('mem_l2', 0.0))


def _pack(a):
    a = np.ascontiguousarray(a, dtype='<f8')
    return {'dtype': 'float64', 'size': int(a.size),
            'data': base64.b64encode(a.tobytes()).decode('ascii')}


def _unpack(d):
    a = np.frombuffer(base64.b64decode(d['data']), dtype='<f8').astype(np.float64)
    if a.size != d['size']:
        raise InvalidCheckpoint("payload holds %d values, header says %d" % (a.size, d['size']))
    return a


def save_checkpoint(ckpt, f):
    j = {'format': 'memnav-checkpoint',
         'version': 1,
         'memnav_version': memnav.__version__,
         'arch': arch_to_dict(ckpt.arch),
         'theta': _pack(ckpt.params.theta),
         'opt_state': None if ckpt.opt_state is None else _pack(ckpt.opt_state),
         'J': int(ckpt.J),
         'seed': None if ckpt.seed is None else int(ckpt.seed),
         'preset': ckpt.preset}
    json.dump(j, f, indent=1)


def load_checkpoint(f):
    try:
        j = json.load(f)
    except ValueError as e:
        raise InvalidCheckpoint("not a JSON file (%s)" % e)
    isValid, es = validation.checkpoint_container(j)
    if not isValid:
        raise InvalidCheckpoint('; '.join(es))
    try:
        arch = arch_from_dict(j['arch'])
        params = Params(arch, _unpack(j['theta']))
    except (InvalidOperation, ValueError) as e:
        raise InvalidCheckpoint(str(e))
    opt_state = None
    if j['opt_state'] is not None:
        opt_state = _unpack(j['opt_state'])
        if opt_state.shape != params.theta.shape:
            raise InvalidCheckpoint("optimizer state does not match theta")
    isValid, es = validation.theta_finite(params.theta)
    if not isValid:
        raise InvalidCheckpoint('; '.join(es))
    log.debug("loaded checkpoint: %s, %d parameters, J=%d", arch.kind.value, params.size, j['J'])
    return Checkpoint(arch=arch, params=params, opt_state=opt_state, J=j['J'], seed=j['seed'],
                      preset=j.get('preset'))
