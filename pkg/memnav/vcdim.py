"""Generalization estimate of a network's linear readout.

Features Psi(q, h) of the last upstream layer are collected along expert
trajectories. Per action class a one-vs-all linear SVM gives the margin
1/|w| and the smallest enclosing L2 ball gives the radius R; the estimate is
eta = R^2 |w|^2.
"""
import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from memnav import gridworld, nn
from memnav.errors import DegenerateData, InvalidOperation, NoPath
from memnav.expert import BeliefExpert
from memnav.gridworld import Action, Terminal


log = logging.getLogger(__name__)

SVM_TOL = 1e-6
MEB_TOL = 1e-8
MAX_SVM_ITER = 2000000
MAX_MEB_ITER = 200000
REPORT_COLUMNS = ('model', 'class', 'eta_est', 'margin', 'nSV', 'training_error', 'radius',
                  'class_radius')


@dataclass(frozen=True, eq=False)
class FeatureSet:
    psi: np.ndarray
    labels: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        psi = np.atleast_2d(np.asarray(self.psi, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=int)
        object.__setattr__(self, 'psi', psi)
        object.__setattr__(self, 'labels', labels)
        if psi.shape[0] != labels.shape[0]:
            raise DegenerateData("%d feature rows but %d labels" % (psi.shape[0], labels.shape[0]))
        if psi.shape[0] < 2:
            raise DegenerateData("a feature set needs at least two rows")
        if not np.all(np.isfinite(psi)):
            raise DegenerateData("feature rows hold non-finite values")

    @property
    def n(self):
        return self.psi.shape[0]

    @property
    def dim(self):
        return self.psi.shape[1]

    def class_counts(self):
        return [int((self.labels == a).sum()) for a in Action]

    def one_vs_all(self, positive_class):
        return np.where(self.labels == int(positive_class), 1.0, -1.0)

    def scaled(self, s):
        return FeatureSet(self.psi * s, self.labels, dict(self.provenance))


def collect_features(arch, params, maps, sensor, cap=200, prev_action=False, provenance=None):
    """Features along the expert's trajectories, the network keeping its own memory state."""
    rows = []
    labels = []
    for gmap in maps:
        expert = BeliefExpert(gmap, sensor)
        state = gmap.start_state
        heading = gridworld.initial_heading(gmap)
        mem = nn.fresh_state(arch)
        prev = None
        ep_rows, ep_labels = [], []
        try:
            for _ in range(cap):
                obs = gridworld.sense(gmap, state, heading, sensor)
                expert.observe(state, obs, heading)
                action = expert.action(state)
                x = gridworld.encode_step(obs, sensor, prev_action, prev)
                out, mem, _ = nn.forward(arch, params, x, mem)
                ep_rows.append(out.psi)
                ep_labels.append(int(action))
                outcome = gridworld.step(gmap, state, action, sensor)
                state = outcome.next_state
                heading = prev = action
                if outcome.terminal is not Terminal.Running:
                    break
        except NoPath as e:
            log.warning("skipping map %s: %s", gmap.spec.to_record() if gmap.spec else '', e)
            continue
        rows += ep_rows
        labels += ep_labels
    if len(rows) == 0:
        raise DegenerateData("no features collected")
    return FeatureSet(np.array(rows), np.array(labels), dict(provenance or {}))


#-- soft-margin linear SVM

@dataclass(frozen=True, eq=False)
class SvmModel:
    w: np.ndarray
    b: float
    alpha: np.ndarray
    support_indices: np.ndarray
    margin: float
    training_error: float
    C: float
    primal: float
    dual: float

    @property
    def gap(self):
        return self.primal - self.dual

    @property
    def n_support(self):
        return len(self.support_indices)

    def decision(self, X):
        return np.asarray(X) @ self.w + self.b


def _best_bias(s, y):
    """Bias minimizing the summed hinge loss for fixed scores s = Xw."""
    t = y - s
    order = np.argsort(t, kind='stable')
    ts, ys = t[order], y[order]
    pos = (ys > 0).astype(int)
    pos_after = pos[::-1].cumsum()[::-1] - pos
    neg_upto = (ys < 0).cumsum()
    m = int(np.argmax(neg_upto - pos_after >= 0))
    return float(ts[m])


def _primal(w, b, X, y, C):
    return 0.5 * float(w @ w) + C * float(np.maximum(0.0, 1.0 - y * (X @ w + b)).sum())


def train_svm(fs, positive_class, C=1.0, tol=SVM_TOL):
    """Soft-margin linear SVM by SMO on the dual.

    The working pair is chosen with second-order information; the variables
    a_k = y_k alpha_k live in [A_k, B_k] and sum to zero. Stops once the
    duality gap falls below tol * (1 + |primal|).
    """
    y = fs.one_vs_all(positive_class)
    return svm_dual(fs.psi, y, C, tol)


def svm_dual(X, y, C=1.0, tol=SVM_TOL):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if (y > 0).all() or (y < 0).all():
        raise DegenerateData("one-vs-all labels hold a single class")
    n = len(y)
    A = np.where(y > 0, 0.0, -C)
    B = np.where(y > 0, C, 0.0)
    a = np.zeros(n)
    w = np.zeros(X.shape[1])
    g = y.copy()
    diag = (X ** 2).sum(axis=1)
    primal = dual = None
    for it in range(MAX_SVM_ITER):
        up = a < B
        down = a > A
        i = int(np.flatnonzero(up)[np.argmax(g[up])])
        gi = g[i]
        cand = down & (g < gi)
        #-- the gap costs a pass over the data, check it now and then
        if it % 50 == 0 or not cand.any():
            b = _best_bias(X @ w, y)
            primal = _primal(w, b, X, y, C)
            dual = float(a @ y) - 0.5 * float(w @ w)
            if primal - dual <= tol * (1.0 + abs(primal)) or not cand.any():
                break
        Ki = X @ X[i]
        curv = np.maximum(diag[i] + diag - 2.0 * Ki, 1e-12)
        score = np.where(cand, (gi - g) ** 2 / curv, -np.inf)
        j = int(np.argmax(score))
        lam = min(B[i] - a[i], a[j] - A[j], (gi - g[j]) / curv[j])
        a[i] += lam
        a[j] -= lam
        d = X[i] - X[j]
        w += lam * d
        g -= lam * (Ki - X @ X[j])
    else:
        log.warning("SVM stopped after %d iterations with gap %.3g", MAX_SVM_ITER, primal - dual)
    b = _best_bias(X @ w, y)
    primal = _primal(w, b, X, y, C)
    dual = float(a @ y) - 0.5 * float(w @ w)
    alpha = np.abs(a)
    support = np.flatnonzero(alpha > 1e-12 * max(C, 1.0))
    f = X @ w + b
    norm = float(np.sqrt(w @ w))
    return SvmModel(w=w, b=b, alpha=alpha, support_indices=support,
                    margin=1.0 / norm if norm > 0 else np.inf,
                    training_error=float(np.mean(y * f <= 0)), C=C, primal=primal, dual=dual)


#-- minimum enclosing ball

@dataclass(frozen=True, eq=False)
class BallResult:
    center: np.ndarray
    radius: float
    p_star: np.ndarray
    objective: float
    iterations: int = 0


def _away_steps(X, p, tol, budget):
    """Frank-Wolfe with away steps over the rows of X, from weights p.

    Returns the new weights and the iterations used. Stops once
    max_i |x_i - c| - R <= tol * (1 + R) or the budget runs out.
    """
    p = p.copy()
    c = p @ X
    for it in range(1, budget + 1):
        d2 = ((X - c) ** 2).sum(axis=1)
        r2 = float(p @ d2)
        far = int(np.argmax(d2))
        if r2 <= 0.0:
            if d2[far] <= 0.0:
                return p, it
            r2 = 0.0
        if np.sqrt(d2[far]) - np.sqrt(r2) <= tol * (1.0 + np.sqrt(r2)):
            return p, it
        support = np.flatnonzero(p > 0)
        near = int(support[np.argmin(d2[support])])
        up = d2[far] / r2 - 1.0 if r2 > 0 else np.inf
        down = 1.0 - d2[near] / r2 if r2 > 0 else 0.0
        if up > down or p[near] >= 1.0:
            lam = 0.5 * up / (1.0 + up) if np.isfinite(up) else 0.5
            p *= (1.0 - lam)
            p[far] += lam
            c = (1.0 - lam) * c + lam * X[far]
        else:
            lam = min(0.5 * down / (1.0 - down), p[near] / (1.0 - p[near]))
            drop = lam == p[near] / (1.0 - p[near])
            p *= (1.0 + lam)
            p[near] = max(p[near] - lam, 0.0)
            if drop:
                p[near] = 0.0
            c = (1.0 + lam) * c - lam * X[near]
    return p, budget


def min_enclosing_ball(fs, tol=MEB_TOL):
    """Smallest enclosing L2 ball by Frank-Wolfe with away steps on the simplex dual.

    The dual maximizes sum p_i |x_i|^2 - |sum p_i x_i|^2; its optimum is R^2 and
    the center is sum p_i x_i. The iteration runs on a working set of points
    that grows by the farthest point whenever the ball of the working set
    misses it, and stops once max_i |x_i - c| - R <= tol * (1 + R) over all
    points.
    """
    X = fs.psi if isinstance(fs, FeatureSet) else np.atleast_2d(np.asarray(fs, dtype=np.float64))
    n = X.shape[0]
    if n == 0:
        raise DegenerateData("no points")
    p = np.zeros(n)
    if n == 1:
        p[0] = 1.0
        return BallResult(X[0].copy(), 0.0, p, 0.0)
    #-- start from the two points of a far pair
    i = int(np.argmax(((X - X[0]) ** 2).sum(axis=1)))
    j = int(np.argmax(((X - X[i]) ** 2).sum(axis=1)))
    p[i] += 0.5
    p[j] += 0.5
    work = np.flatnonzero(p > 0)
    used = 0
    while True:
        q, it = _away_steps(X[work], p[work], tol, MAX_MEB_ITER - used)
        used += it
        p[:] = 0.0
        p[work] = q
        c = p @ X
        d2 = ((X - c) ** 2).sum(axis=1)
        r = np.sqrt(max(float(p @ d2), 0.0))
        far = int(np.argmax(d2))
        if np.sqrt(d2[far]) - r <= tol * (1.0 + r):
            break
        if used >= MAX_MEB_ITER:
            log.warning("enclosing ball stopped after %d iterations", MAX_MEB_ITER)
            break
        work = np.union1d(np.flatnonzero(p > 0), [far])
    p /= p.sum()
    c = p @ X
    d2 = ((X - c) ** 2).sum(axis=1)
    objective = float(p @ (X ** 2).sum(axis=1) - c @ c)
    log.debug("enclosing ball: %d iterations, %d points on the sphere", used, int((p > 0).sum()))
    return BallResult(center=c, radius=float(np.sqrt(d2.max())), p_star=p,
                      objective=objective, iterations=used)


#-- the estimate

@dataclass(frozen=True)
class VcEntry:
    action: Action
    eta_est: float
    margin: float
    radius: float
    n_support: int
    training_error: float
    class_radius: float = float('nan')


def estimate_vc(svm, ball, positive_class=None, class_ball=None):
    w2 = float(svm.w @ svm.w)
    return VcEntry(action=Action(positive_class) if positive_class is not None else None,
                   eta_est=ball.radius ** 2 * w2,
                   margin=svm.margin,
                   radius=ball.radius,
                   n_support=svm.n_support,
                   training_error=svm.training_error,
                   class_radius=class_ball.radius if class_ball is not None else float('nan'))


def vc_report(fs, C=1.0):
    """One entry per action class, all with the radius of the ball around every feature."""
    counts = fs.class_counts()
    missing = [a.name for a, k in zip(Action, counts) if k == 0]
    if missing:
        raise DegenerateData("no examples of %s" % ', '.join(missing))
    ball = min_enclosing_ball(fs)
    entries = []
    for a in Action:
        svm = train_svm(fs, a, C)
        class_ball = min_enclosing_ball(fs.psi[fs.labels == int(a)])
        entries.append(estimate_vc(svm, ball, a, class_ball))
        log.info("%s: eta %.4g, margin %.4g, %d support vectors, error %.3f",
                 a.name, entries[-1].eta_est, svm.margin, svm.n_support, svm.training_error)
    return entries


def write_report(entries, f, model):
    w = csv.writer(f, lineterminator='\n')
    w.writerow(REPORT_COLUMNS)
    for e in entries:
        w.writerow([model, e.action.name.lower(), repr(e.eta_est), repr(e.margin), e.n_support,
                    repr(e.training_error), repr(e.radius), repr(e.class_radius)])


#-- feature dumps

def write_features(fs, f):
    f.write('# N=%d D=%d counts=%s\n' % (fs.n, fs.dim, ','.join(str(k) for k in fs.class_counts())))
    for k in sorted(fs.provenance):
        f.write('# %s=%s\n' % (k, fs.provenance[k]))
    w = csv.writer(f, lineterminator='\n')
    w.writerow(['label'] + ['psi%d' % i for i in range(fs.dim)])
    for label, row in zip(fs.labels, fs.psi):
        w.writerow([int(label)] + [repr(float(v)) for v in row])


def read_features(f):
    provenance = {}
    lines = []
    for line in f:
        if line.startswith('# N='):
            continue
        if line.startswith('#'):
            k, _, v = line[1:].strip().partition('=')
            provenance[k] = v
            continue
        lines.append(line)
    rows = list(csv.reader(lines))
    if len(rows) < 2:
        raise InvalidOperation("feature dump holds no rows")
    body = np.array([[float(v) for v in r] for r in rows[1:]])
    return FeatureSet(body[:, 1:], body[:, 0].astype(int), provenance)


#-- PCA

@dataclass(frozen=True, eq=False)
class PcaResult:
    coords: np.ndarray
    explained: np.ndarray
    components: np.ndarray
    mean: np.ndarray
    labels: np.ndarray


def pca_project(fs, k=2):
    X = fs.psi
    if X.shape[0] <= k:
        raise DegenerateData("PCA to %d dimensions needs more than %d rows" % (k, k))
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    var = s ** 2
    total = var.sum()
    explained = var[:k] / total if total > 0 else np.zeros(k)
    components = vt[:k]
    return PcaResult(Xc @ components.T, explained, components, mean, fs.labels.copy())


def write_pca_csv(pca, f):
    w = csv.writer(f, lineterminator='\n')
    w.writerow(['pc%d' % (i + 1) for i in range(pca.coords.shape[1])] + ['class'])
    for row, label in zip(pca.coords, pca.labels):
        w.writerow([repr(float(v)) for v in row] + [Action(int(label)).name.lower()])


def write_pca_svg(pca, path, radius=None, title=None):
    """Scatter of the first two components, axes spanning +-radius when given."""
    try:
        import matplotlib
        matplotlib.use('Agg')
        import matplotlib.pyplot as plt
    except ImportError:
        raise InvalidOperation("the SVG export needs matplotlib (pip install memnav[plot])")
    fig, ax = plt.subplots(figsize=(4, 4))
    for a in Action:
        sel = pca.labels == int(a)
        if sel.any():
            ax.scatter(pca.coords[sel, 0], pca.coords[sel, 1], s=4, label=a.name.lower())
    if radius is not None and radius > 0:
        ax.set_xlim(-radius, radius)
        ax.set_ylim(-radius, radius)
    ax.set_aspect('equal')
    ax.legend(loc='upper right', fontsize='small')
    if title:
        ax.set_title(title)
    fig.savefig(path, format='svg')
    plt.close(fig)
