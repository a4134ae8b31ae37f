"""External memory of the differentiable neural computer.

One call of `memory_step` performs the write (usage, allocation, content
addressing, erase/add, temporal links) and then the read. `memory_backward`
differentiates that single step with the incoming memory state held constant:
gradients never travel to earlier steps through the memory.
"""
from dataclasses import dataclass

import numpy as np


EPS = 1e-6

#-- read mode columns
BACKWARD, CONTENT, FORWARD = 0, 1, 2


@dataclass(frozen=True, eq=False)
class DncState:
    memory: np.ndarray        # (N, W)
    usage: np.ndarray         # (N,)
    precedence: np.ndarray    # (N,)
    link: np.ndarray          # (N, N)
    write_weights: np.ndarray # (N,)
    read_weights: np.ndarray  # (R, N)
    reads: np.ndarray         # (R, W)


def fresh_state(spec):
    n, w, r = spec.rows, spec.cols, spec.read_heads
    return DncState(memory=np.zeros((n, w)), usage=np.zeros(n), precedence=np.zeros(n),
                    link=np.zeros((n, n)), write_weights=np.zeros(n),
                    read_weights=np.zeros((r, n)), reads=np.zeros((r, w)))


def interface_layout(spec):
    """Ordered (name, shape) of the raw interface vector xi."""
    r, w = spec.read_heads, spec.cols
    return [('read_keys', (r, w)),
            ('read_strengths', (r,)),
            ('write_key', (1, w)),
            ('write_strength', (1,)),
            ('erase', (w,)),
            ('write_vector', (w,)),
            ('free_gates', (r,)),
            ('alloc_gate', (1,)),
            ('write_gate', (1,)),
            ('read_modes', (r, 3))]


def interface_size(spec):
    return sum(int(np.prod(shape)) for _, shape in interface_layout(spec))


def split_interface(xi, spec):
    parts = {}
    i = 0
    for name, shape in interface_layout(spec):
        n = int(np.prod(shape))
        parts[name] = xi[i:i + n].reshape(shape)
        i += n
    return parts


def join_interface(parts, spec):
    return np.concatenate([np.asarray(parts[name], dtype=float).ravel()
                           for name, _ in interface_layout(spec)])


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def oneplus(x):
    return 1.0 + np.logaddexp(0.0, x)


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_backward(dy, y, axis=-1):
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def cosine(memory, keys):
    """Cosine similarity (K, N) between keys (K, W) and memory rows (N, W)."""
    nm = np.sqrt((memory ** 2).sum(axis=1) + EPS)
    nk = np.sqrt((keys ** 2).sum(axis=1) + EPS)
    sim = (keys @ memory.T) / (nk[:, None] * nm[None, :])
    return sim, nm, nk


def _cosine_backward(dsim, memory, keys, sim, nm, nk):
    scaled = dsim / (nk[:, None] * nm[None, :])
    dkeys = scaled @ memory - ((dsim * sim).sum(axis=1) / nk ** 2)[:, None] * keys
    dmemory = scaled.T @ keys - ((dsim * sim).sum(axis=0) / nm ** 2)[:, None] * memory
    return dkeys, dmemory


def content_weights(memory, keys, strengths):
    sim, nm, nk = cosine(memory, keys)
    return softmax(strengths[:, None] * sim, axis=1), (sim, nm, nk)


def allocation(usage):
    order = np.argsort(usage, kind='stable')
    s = usage[order]
    prefix = np.cumprod(np.concatenate(([1.0], s[:-1])))
    a = np.zeros_like(usage)
    a[order] = (1.0 - s) * prefix
    return a, (order, s, prefix)


def _allocation_backward(da, order, s, prefix):
    da_s = da[order]
    tail = np.zeros_like(s)
    acc = 0.0
    for k in range(len(s) - 2, -1, -1):
        acc = da_s[k + 1] * (1.0 - s[k + 1]) + s[k + 1] * acc
        tail[k] = acc
    du = np.zeros_like(s)
    du[order] = prefix * (tail - da_s)
    return du


def memory_step(state, xi, spec):
    raw = split_interface(np.asarray(xi, dtype=float), spec)
    read_keys = raw['read_keys']
    write_key = raw['write_key']
    br = oneplus(raw['read_strengths'])
    bw = oneplus(raw['write_strength'])
    erase = sigmoid(raw['erase'])
    vec = raw['write_vector']
    free = sigmoid(raw['free_gates'])
    ga = sigmoid(raw['alloc_gate'])[0]
    gw = sigmoid(raw['write_gate'])[0]
    modes = softmax(raw['read_modes'], axis=1)

    m0, wr0 = state.memory, state.read_weights
    #-- usage, retained unless freed by a read head
    factors = 1.0 - free[:, None] * wr0
    retention = np.prod(factors, axis=0)
    base = state.usage + state.write_weights - state.usage * state.write_weights
    usage = base * retention
    alloc, alloc_cache = allocation(usage)
    cw, wsim = content_weights(m0, write_key, bw)
    cw = cw[0]
    mix = ga * alloc + (1.0 - ga) * cw
    ww = gw * mix
    memory = m0 * (1.0 - np.outer(ww, erase)) + np.outer(ww, vec)
    if spec.links:
        l0, p0 = state.link, state.precedence
        link = (1.0 - ww[:, None] - ww[None, :]) * l0 + np.outer(ww, p0)
        np.fill_diagonal(link, 0.0)
        precedence = (1.0 - ww.sum()) * p0 + ww
    else:
        link, precedence = state.link, state.precedence
    cr, rsim = content_weights(memory, read_keys, br)
    if spec.links:
        fwd = wr0 @ link.T
        bwd = wr0 @ link
        wr = modes[:, BACKWARD:BACKWARD + 1] * bwd + modes[:, CONTENT:CONTENT + 1] * cr \
            + modes[:, FORWARD:FORWARD + 1] * fwd
    else:
        fwd = bwd = None
        wr = cr
    reads = wr @ memory
    new_state = DncState(memory=memory, usage=usage, precedence=precedence, link=link,
                         write_weights=ww, read_weights=wr, reads=reads)
    cache = dict(spec=spec, raw=raw, state=state, br=br, bw=bw, erase=erase, vec=vec,
                 free=free, ga=ga, gw=gw, modes=modes, factors=factors, retention=retention,
                 base=base, alloc=alloc, alloc_cache=alloc_cache, cw=cw, wsim=wsim, mix=mix,
                 ww=ww, memory=memory, link=link, cr=cr, rsim=rsim, fwd=fwd, bwd=bwd, wr=wr)
    return new_state, cache


def memory_backward(dreads, cache):
    """Gradient of the raw interface vector given the gradient of the fresh reads."""
    spec = cache['spec']
    raw = cache['raw']
    state = cache['state']
    m0, wr0 = state.memory, state.read_weights
    memory, wr, cr = cache['memory'], cache['wr'], cache['cr']
    modes = cache['modes']
    grads = {}

    dmemory = wr.T @ dreads
    dwr = dreads @ memory.T
    if spec.links:
        fwd, bwd = cache['fwd'], cache['bwd']
        dmodes = np.stack([(dwr * bwd).sum(axis=1),
                           (dwr * cr).sum(axis=1),
                           (dwr * fwd).sum(axis=1)], axis=1)
        dcr = modes[:, CONTENT:CONTENT + 1] * dwr
        dfwd = modes[:, FORWARD:FORWARD + 1] * dwr
        dbwd = modes[:, BACKWARD:BACKWARD + 1] * dwr
        dlink = dfwd.T @ wr0 + wr0.T @ dbwd
        grads['read_modes'] = _softmax_backward(dmodes, modes, axis=1)
    else:
        dcr = dwr
        dlink = None
        grads['read_modes'] = np.zeros_like(raw['read_modes'])

    #-- read content addressing on the updated memory
    sim, nm, nk = cache['rsim']
    dz = _softmax_backward(dcr, cr, axis=1)
    dbr = (dz * sim).sum(axis=1)
    dkeys, dmem = _cosine_backward(dz * cache['br'][:, None], memory, raw['read_keys'], sim, nm, nk)
    dmemory += dmem
    grads['read_keys'] = dkeys
    grads['read_strengths'] = dbr * sigmoid(raw['read_strengths'])

    ww = cache['ww']
    dww = np.zeros_like(ww)
    if dlink is not None:
        l0, p0 = state.link, state.precedence
        g = dlink.copy()
        np.fill_diagonal(g, 0.0)
        dww += (g * (p0[None, :] - l0)).sum(axis=1) - (g * l0).sum(axis=0)

    #-- erase and add
    erase, vec = cache['erase'], cache['vec']
    gm0 = dmemory * m0
    dww += -gm0 @ erase + dmemory @ vec
    derase = -gm0.T @ ww
    grads['erase'] = derase * erase * (1.0 - erase)
    grads['write_vector'] = dmemory.T @ ww

    #-- write weighting
    ga, gw = cache['ga'], cache['gw']
    alloc, cw = cache['alloc'], cache['cw']
    dgw = dww @ cache['mix']
    dga = gw * (dww @ (alloc - cw))
    dalloc = gw * ga * dww
    dcw = gw * (1.0 - ga) * dww
    grads['write_gate'] = np.array([dgw * gw * (1.0 - gw)])
    grads['alloc_gate'] = np.array([dga * ga * (1.0 - ga)])

    sim, nm, nk = cache['wsim']
    dzw = _softmax_backward(dcw[None, :], cw[None, :], axis=1)
    dbw = (dzw * sim).sum(axis=1)
    dkw, _ = _cosine_backward(dzw * cache['bw'][:, None], m0, raw['write_key'], sim, nm, nk)
    grads['write_key'] = dkw
    grads['write_strength'] = dbw * sigmoid(raw['write_strength'])

    #-- allocation and usage
    dusage = _allocation_backward(dalloc, *cache['alloc_cache'])
    dretention = dusage * cache['base']
    factors, free = cache['factors'], cache['free']
    dfree = np.zeros_like(free)
    for i in range(len(free)):
        others = np.prod(np.delete(factors, i, axis=0), axis=0)
        dfree[i] = -(dretention * wr0[i] * others).sum()
    grads['free_gates'] = dfree * free * (1.0 - free)
    return join_interface(grads, spec)
