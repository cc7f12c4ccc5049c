"""Adam, plateau scheduling and the record-once / replay-per-epoch training loop."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ConfigError, DivergenceError, HrpinnError

CLIP_NORM = 100.0


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    min_lr: float = 1e-6
    plateau_threshold: float = 1e-4
    clip_norm: float = CLIP_NORM
    seed: int = 0

    def __post_init__(self):
        p = []
        if self.epochs < 1:
            p.append("epochs must be >= 1")
        if not self.lr > 0:
            p.append("lr must be positive")
        if not 0 < self.plateau_factor < 1:
            p.append("plateau_factor must be in (0, 1)")
        if self.plateau_patience < 0:
            p.append("plateau_patience must be >= 0")
        if p:
            raise ConfigError(p)


@dataclass
class OptimState:
    m: list
    v: list
    lr: float
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, arrays, lr):
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], lr)


def adam_step(state, params, grads, mask=None):
    """One bias-corrected Adam update; returns new parameter arrays.

    ``state.lr`` may be an array with one rate per ensemble member (leading
    axis).  Members where ``mask`` is False are left untouched.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and moments must align")
    if mask is None:
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise DivergenceError("non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    lr = np.asarray(state.lr, dtype=np.float64)
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = b1 * state.m[i] + (1.0 - b1) * g
        v = b2 * state.v[i] + (1.0 - b2) * g * g
        rate = _bcast(lr, p) if lr.ndim else lr
        new = p - rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if mask is not None:
            keep = _bcast(np.asarray(mask), p)
            m = np.where(keep, m, state.m[i])
            v = np.where(keep, v, state.v[i])
            new = np.where(keep, new, p)
        state.m[i], state.v[i] = m, v
        out.append(new)
    return out


@dataclass
class PlateauState:
    lr: float
    factor: float = 0.5
    patience: int = 10
    min_lr: float = 1e-6
    threshold: float = 1e-4
    best: float = float("inf")
    num_bad: int = 0


def plateau_scheduler(history, state):
    """Feed the newest loss in ``history`` to the scheduler; returns the new rate.

    A loss counts as an improvement when it beats the best so far by the
    relative threshold.  After ``patience`` non-improving epochs in a row the
    rate is multiplied by ``factor`` (floored at ``min_lr``) and the counter
    restarts.
    """
    if not history:
        raise ValueError("plateau_scheduler needs at least one loss")
    loss = float(history[-1])
    if loss < state.best * (1.0 - state.threshold):
        state.best = loss
        state.num_bad = 0
    else:
        state.num_bad += 1
    if state.num_bad >= state.patience:
        state.lr = max(state.lr * state.factor, state.min_lr)
        state.num_bad = 0
    return state.lr


def clip_by_global_norm(grads, max_norm):
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm:
        scale = max_norm / total
        return [g * scale for g in grads], total
    return grads, total


@dataclass
class TrainResult:
    params: dict
    losses: list
    lrs: list
    wall_times: list
    diverged: bool = False
    error: str = ""
    wall_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def final_loss(self):
        return self.losses[-1] if self.losses else float("nan")

    @property
    def epochs(self):
        return len(self.losses)


def _flatten(params):
    names = sorted(params)
    arrays = []
    for name in names:
        arrays.extend(np.array(a, dtype=np.float64) for a in params[name].flat())
    return names, arrays


def _unflatten(template, names, arrays):
    out, i = {}, 0
    for name in names:
        k = len(template[name].flat())
        out[name] = nn.MlpParams.from_flat(template[name].layer_sizes, arrays[i:i + k])
        i += k
    return out


def _ensemble_size(params):
    sizes = {p.members for p in params.values()}
    if len(sizes) != 1:
        raise ConfigError("all networks must share the same ensemble size")
    return sizes.pop()


def _member_norms(grads):
    """Global gradient norm of every member, shape ``(S,)``."""
    total = 0.0
    for g in grads:
        total = total + np.sum((g * g).reshape(g.shape[0], -1), axis=1)
    return np.sqrt(total)


def _bcast(v, a):
    return v.reshape((-1,) + (1,) * (a.ndim - 1))


def train_loss_fn(loss_fn, params, config):
    """Minimize ``loss_fn(params)`` from ``params``.

    The loss is recorded on a tape once with the parameters as leaves and then
    replayed every epoch.  Divergence (non-finite values, failed projections)
    stops training and returns the last good parameters with ``diverged`` set.

    With ensemble parameters ``loss_fn`` must return one loss per member and
    the result is a list of :class:`TrainResult`, one per member.  Members
    are optimized independently (own clipping, schedule and divergence
    handling); they only share the tape.
    """
    S = _ensemble_size(params)
    if S is None:
        res = _train_members(loss_fn, params, config, single=True)
        return res[0]
    return _train_members(loss_fn, params, config, single=False)


def _record(loss_fn, params, names):
    with ad.Tape() as tape:
        bound = {n: params[n].bind(tape, n) for n in names}
        root = loss_fn(bound)
        if not ad.is_tensor(root):
            raise ValueError("loss does not depend on the parameters")
        total = ad.sum(root) if np.ndim(root.value) else root
    leaves = []
    for n in names:
        leaves.extend(bound[n].flat())
    return tape, leaves, root, total


def _train_members(loss_fn, params, config, single):
    names, arrays = _flatten(params)
    t_start = time.perf_counter()
    try:
        tape, leaves, root, total = _record(loss_fn, params, names)
    except HrpinnError as exc:
        if single:
            return [TrainResult(params, [], [], [], True, f"{type(exc).__name__}: {exc}",
                                time.perf_counter() - t_start)]
        return _train_sequential(loss_fn, params, config)
    if single:
        arrays = [a[None] for a in arrays]
    S = arrays[0].shape[0]
    scheds = [PlateauState(config.lr, config.plateau_factor, config.plateau_patience,
                           config.min_lr, config.plateau_threshold) for _ in range(S)]
    opt = OptimState.for_params(arrays, np.full(S, float(config.lr)))
    losses = [[] for _ in range(S)]
    lrs = [[] for _ in range(S)]
    walls = [[] for _ in range(S)]
    errors = [""] * S
    active = np.ones(S, dtype=bool)
    good = [a.copy() for a in arrays]

    def unwrap(arrs):
        return [a[0] for a in arrs] if single else arrs

    for epoch in range(config.epochs):
        try:
            if epoch > 0:
                with np.errstate(all="ignore"):
                    ad.forward(tape, dict(zip(leaves, unwrap(arrays))), root=total,
                               check_finite=False)
            member_loss = np.atleast_1d(np.asarray(root.value, dtype=np.float64))
            with np.errstate(all="ignore"):
                gmap = ad.backward(tape, root=total)
        except HrpinnError as exc:
            for i in np.flatnonzero(active):
                errors[i] = f"epoch {epoch}: {type(exc).__name__}: {exc}"
            active[:] = False
            break
        grads = [np.asarray(gmap[l], dtype=np.float64) for l in leaves]
        if single:
            grads = [g[None] for g in grads]
        norms = _member_norms(grads)
        bad = active & ~(np.isfinite(member_loss) & np.isfinite(norms))
        for i in np.flatnonzero(bad):
            what = "loss" if not np.isfinite(member_loss[i]) else "gradient"
            errors[i] = f"epoch {epoch}: DivergenceError: non-finite {what}"
        active &= ~bad
        if not active.any():
            break
        now = time.perf_counter() - t_start
        for i in np.flatnonzero(active):
            losses[i].append(float(member_loss[i]))
            lrs[i].append(float(opt.lr[i]))
            walls[i].append(now)
        for a, g in zip(good, arrays):
            a[active] = g[active]
        scale = np.where(norms > config.clip_norm, config.clip_norm / np.where(norms > 0, norms, 1), 1.0)
        scale = np.where(active, scale, 0.0)
        grads = [np.nan_to_num(g, nan=0.0, posinf=0.0, neginf=0.0) * _bcast(scale, g) for g in grads]
        arrays = adam_step(opt, arrays, grads, mask=active)
        for i in np.flatnonzero(active):
            opt.lr[i] = plateau_scheduler(losses[i], scheds[i])
    final = []
    for k, a in enumerate(arrays):
        # diverged members fall back to their last good parameters
        keep = np.where(_bcast(active, a), a, good[k])
        final.append(keep)
    elapsed = time.perf_counter() - t_start
    out = []
    for i in range(S):
        member_arrays = [a[i] for a in final]
        p = _unflatten(params, names, member_arrays)
        r = TrainResult(p, losses[i], lrs[i], walls[i], bool(errors[i]), errors[i],
                        elapsed if single else elapsed / S)
        if not single:
            r.extra["ensemble_size"] = S
            r.extra["ensemble_wall_seconds"] = elapsed
        out.append(r)
    return out


def _train_sequential(loss_fn, params, config):
    # recording the batched loss failed (e.g. one member hit a singular state);
    # train each member on its own tape instead
    S = _ensemble_size(params)
    out = []
    for i in range(S):
        p = {k: v.member(i) for k, v in params.items()}

        def member_loss(bound, i=i):
            return _member_scalar(loss_fn, bound, S, i)

        res = _train_members(member_loss, p, config, single=True)[0]
        res.extra["ensemble_fallback"] = True
        out.append(res)
    return out


def _member_scalar(loss_fn, bound, S, i):
    # evaluate the member's loss through an ensemble of one
    one = {k: nn.MlpParams(v.layer_sizes, [ad.reshape(w, (1,) + np.shape(ad.value_of(w)))
                                           for w in v.weights],
                           [ad.reshape(b, (1,) + np.shape(ad.value_of(b))) for b in v.biases])
           for k, v in bound.items()}
    return ad.sum(loss_fn(one))


def train(model, train_config, data, params=None, observed=None):
    """Train ``model`` (a :class:`~hrpinn.models.Model`) on one trajectory.

    ``params`` may be an ensemble, in which case a list of results comes back.
    ``observed`` restricts the data term to those grid indices.
    """
    if params is None:
        params = model.init_params(train_config.seed, data)
    c = model.config
    if abs(data.dt - c.dt) > 1e-12:
        raise ConfigError(f"data grid dt={data.dt} does not match model dt={c.dt}")
    return train_loss_fn(lambda p: model.loss(p, data, observed=observed), params, train_config)


def train_seeds(model, train_config, data, seeds, observed=None):
    """One result per seed, all members trained on a shared tape."""
    seeds = [int(s) for s in seeds]
    if len(seeds) == 1:
        r = train(model, train_config, data, model.init_params(seeds[0], data), observed)
        return [r]
    return train(model, train_config, data, model.init_ensemble(seeds, data), observed)


def write_loss_curve(path, result, record_wall_time=False):
    """``epoch,loss,eta,wall_seconds``; wall time left blank unless requested."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "eta", "wall_seconds"])
        for i, (loss, lr) in enumerate(zip(result.losses, result.lrs)):
            wall = "%.3f" % result.wall_times[i] if record_wall_time else ""
            w.writerow([i + 1, "%.17g" % loss, "%.17g" % lr, wall])
