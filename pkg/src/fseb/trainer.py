"""Training under the functional prior: objective, Adam, early stopping, HPO.

Minimised per step, for S dropout realisations of the weights::

    loss = 1/S * sum_s [ N * CE(batch; theta_s) - prior(context; theta_s) ]
           + lam * ||theta||^2

``CE`` is the mean cross-entropy over the minibatch, so ``N * CE`` is the
unbiased minibatch estimate of the full-data negative log-likelihood.  The
data batch and the context batch go through the network in one concatenated
pass, so both terms see the same dropout draw.
"""

import csv
import io
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .context.bundle import ContextBundle, sample_context_batch
from .data import split_indices
from .errors import ConfigError, DataError, DimensionError, NumericError, SearchError
from .metrics import nll, predictive
from .nn import build_network, forward, l2_norm_sq, save_checkpoint
from .prior import build_kernel, prior_node
from .rng import RngStreams, derive_seed

log = logging.getLogger(__name__)

CONTEXT_SCHEDULES = ("per_step", "fixed", "sweep")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    mc_train_samples: int = 1
    context_batch: int = 32
    max_epochs: int = 100
    patience: int = 10
    val_fraction: float = 0.1
    val_mc_samples: int = 32
    context_schedule: str = "per_step"
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "mc_train_samples", "context_batch", "max_epochs", "val_mc_samples"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not self.lr > 0 or not self.eps > 0:
            raise ConfigError("lr and eps must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not self.weight_decay >= 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.context_schedule not in CONTEXT_SCHEDULES:
            raise ConfigError(f"context_schedule must be one of {CONTEXT_SCHEDULES}")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# context sources


class BundleContext:
    """Context points from a generated bundle."""

    def __init__(self, bundle, schedule="per_step"):
        if not bundle.has_embeddings:
            raise DataError("context bundle has no embeddings yet")
        if bundle.images is None:
            raise DataError("context bundle has no images to feed through the network")
        self.bundle = bundle
        self.schedule = schedule
        self.inputs = bundle.network_inputs()
        self._fixed = None
        self._order = None
        self._pos = 0

    @property
    def input_shape(self):
        return self.inputs.shape[1:]

    def sample(self, m, rng, batch_idx=None):
        if self.schedule == "fixed":
            if self._fixed is None:
                self._fixed = sample_context_batch(self.bundle, m, rng)[0]
            idx = self._fixed
        elif self.schedule == "sweep":
            if self._order is None or self._pos + m > len(self._order):
                self._order, self._pos = rng.permutation(self.bundle.M_total), 0
            idx = self._order[self._pos:self._pos + m]
            self._pos += m
        else:
            idx = sample_context_batch(self.bundle, m, rng)[0]
        return self.inputs[idx], self.bundle.embeddings[idx].astype(np.float64)


class TrainBatchContext:
    """Context points drawn from the current training minibatch.

    ``embeddings`` holds one row per example of the full training dataset.
    """

    def __init__(self, images, embeddings):
        self.images = np.asarray(images, dtype=np.float64)
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        if self.images.shape[0] != self.embeddings.shape[0]:
            raise DataError("need one embedding per training image")

    @property
    def input_shape(self):
        return self.images.shape[1:]

    def sample(self, m, rng, batch_idx=None):
        pool = np.arange(self.images.shape[0]) if batch_idx is None else np.asarray(batch_idx)
        idx = rng.choice(pool, size=min(m, pool.size), replace=False)
        return self.images[idx], self.embeddings[idx]


def as_context(context, schedule="per_step"):
    if context is None or isinstance(context, (BundleContext, TrainBatchContext)):
        return context
    if isinstance(context, ContextBundle):
        return BundleContext(context, schedule)
    raise ConfigError(f"cannot use {type(context).__name__} as a context source")


# ---------------------------------------------------------------------------
# objective


def objective_step(net, x, y, n_data, ctx_x, ctx_h, km_cfg, cfg, rng, backprop=True):
    """Build the loss graph for one optimiser step and backpropagate it
    (unless ``backprop`` is false).

    Returns ``(loss_tensor, components)`` where components holds the data
    term ``N * CE``, the prior log-density (averaged over dropout draws),
    the weight penalty ``lam * ||theta||^2`` and the total.
    """
    x = np.asarray(x, dtype=np.float64)
    B = x.shape[0]
    km = None
    if ctx_x is not None:
        ctx_x = np.asarray(ctx_x, dtype=np.float64)
        if ctx_x.shape[1:] != x.shape[1:]:
            raise DimensionError(f"context images {ctx_x.shape[1:]} do not match data images {x.shape[1:]}")
        km = build_kernel(ctx_h, km_cfg)
        if km.M != ctx_x.shape[0]:
            raise DimensionError(f"{ctx_x.shape[0]} context images but {km.M} embedding rows")
        inputs = np.concatenate([x, ctx_x], axis=0)
    else:
        inputs = x

    S = cfg.mc_train_samples
    data_val = prior_val = 0.0
    total = None
    for _ in range(S):
        out = forward(net, inputs, mode="train", rng=rng)
        data = ad.mul(ad.softmax_cross_entropy(ad.rows(out, 0, B), y), float(n_data))
        term = data
        data_val += data.item() / S
        if km is not None:
            f_ctx = ad.rows(out, B, out.shape[0])
            if km_cfg.prior_on == "probs":
                f_ctx = ad.softmax(f_ctx)
            prior = prior_node(km, f_ctx)
            prior_val += prior.item() / S
            term = ad.add(term, ad.neg(prior))
        total = term if total is None else ad.add(total, term)
    loss = ad.mul(total, 1.0 / S)
    l2_val = 0.0
    if cfg.weight_decay > 0:
        l2 = ad.mul(l2_norm_sq(net), cfg.weight_decay)
        l2_val = l2.item()
        loss = ad.add(loss, l2)
    comps = {"data": data_val, "prior": prior_val, "l2": l2_val, "loss": loss.item()}
    if not np.isfinite(comps["loss"]):
        raise NumericError(f"non-finite loss; components {comps}")
    if backprop:
        ad.backward(loss)
    return loss, comps


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params], 0)


def adam_update(state, params, grads, cfg):
    """One bias-corrected Adam step, in place on ``params`` (Tensors)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and Adam state disagree in length")
    state.t += 1
    c1 = 1.0 - cfg.beta1 ** state.t
    c2 = 1.0 - cfg.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data = p.data - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_val_nll: float = float("inf")
    checkpoint: str = None
    n_train: int = 0
    n_val: int = 0
    wall_time: float = 0.0

    def to_dict(self, timing=False):
        d = asdict(self)
        if not timing:
            d.pop("wall_time")
        return d

    def to_json(self, timing=False):
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True) + "\n"


def train(net, dataset, context, km_cfg, cfg, checkpoint_path=None):
    """Minibatch Adam with early stopping on MC-predictive validation NLL.

    The best-validation parameters are restored into ``net`` at the end.
    """
    if len(dataset) == 0:
        raise DataError("empty training dataset")
    context = as_context(context, cfg.context_schedule)
    if context is not None and tuple(context.input_shape) != tuple(net.input_shape):
        raise DimensionError(f"context images {tuple(context.input_shape)} vs network input {net.input_shape}")
    t0 = time.perf_counter()
    rs = RngStreams(cfg.seed)
    tr_idx, va_idx = split_indices(len(dataset), cfg.val_fraction, cfg.seed)
    x_tr, y_tr = dataset.images[tr_idx], dataset.labels[tr_idx]
    x_va, y_va = dataset.images[va_idx], dataset.labels[va_idx]
    N = len(tr_idx)

    state = AdamState.for_params(net.params)
    report = TrainReport(n_train=N, n_val=len(va_idx))
    best_snap, since_best = net.snapshot(), 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rs["shuffle"].permutation(N)
        sums = {"data": 0.0, "prior": 0.0, "l2": 0.0, "loss": 0.0}
        n_steps = 0
        for step, start in enumerate(range(0, N, cfg.batch_size)):
            bidx = order[start:start + cfg.batch_size]
            ctx_x = ctx_h = None
            if context is not None:
                ctx_x, ctx_h = context.sample(cfg.context_batch, rs["context"], tr_idx[bidx])
            net.zero_grad()
            try:
                _, comps = objective_step(net, x_tr[bidx], y_tr[bidx], N, ctx_x, ctx_h, km_cfg, cfg, rs["dropout"])
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} step {step}: {exc}") from exc
            adam_update(state, net.params, net.grads(), cfg)
            for k in sums:
                sums[k] += comps[k]
            n_steps += 1
        pb = predictive(net, x_va, cfg.val_mc_samples, rs["val"], keep_samples=False)
        val_nll = nll(pb, y_va)
        row = {k: v / n_steps for k, v in sums.items()}
        row.update(epoch=epoch, val_nll=val_nll)
        report.epochs.append(row)
        log.info("epoch %d loss %.4f val_nll %.4f", epoch, row["loss"], val_nll)
        if val_nll < report.best_val_nll:
            report.best_val_nll, report.best_epoch = val_nll, epoch
            best_snap, since_best = net.snapshot(), 0
        else:
            since_best += 1
        report.stopped_epoch = epoch
        if since_best >= cfg.patience:
            break
    net.restore(best_snap)
    if checkpoint_path is not None:
        save_checkpoint(net, checkpoint_path)
        report.checkpoint = str(checkpoint_path)
    report.wall_time = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# randomised grid search


def _pow10(lo, hi):
    return tuple(float(10.0 ** k) for k in range(lo, hi + 1))


@dataclass(frozen=True)
class SearchSpace:
    weight_decay: tuple = _pow10(-6, 0)
    tau1: tuple = _pow10(-6, 2)
    tau2: tuple = _pow10(-6, 2)
    trials: int = 60

    def __post_init__(self):
        if not (self.weight_decay and self.tau1 and self.tau2):
            raise ConfigError("search grids must be non-empty")
        if not 1 <= self.trials <= self.size:
            raise ConfigError(f"trials must lie in [1, {self.size}], got {self.trials}")

    @property
    def size(self):
        return len(self.weight_decay) * len(self.tau1) * len(self.tau2)

    def grid(self):
        return list(itertools.product(self.weight_decay, self.tau1, self.tau2))

    def draw(self, seed):
        """``trials`` distinct grid points, uniformly without replacement."""
        grid = self.grid()
        picks = np.random.default_rng(derive_seed(seed, "hpo")).choice(len(grid), size=self.trials, replace=False)
        return [grid[i] for i in picks]


TRIAL_FIELDS = ("trial", "weight_decay", "tau1", "tau2", "val_nll", "best_epoch", "stopped_epoch", "status")


def _run_trial(args):
    trial, lam, tau1, tau2, net_spec, base_cfg, km_base, dataset, context = args
    cfg = replace(base_cfg, weight_decay=lam)
    km_cfg = replace(km_base, tau1=tau1, tau2=tau2)
    net = build_network(**net_spec)
    row = {"trial": trial, "weight_decay": lam, "tau1": tau1, "tau2": tau2}
    try:
        rep = train(net, dataset, context, km_cfg, cfg)
    except NumericError as exc:
        log.warning("trial %d failed: %s", trial, exc)
        row.update(val_nll=float("nan"), best_epoch=0, stopped_epoch=0, status="failed")
        return row
    row.update(val_nll=rep.best_val_nll, best_epoch=rep.best_epoch, stopped_epoch=rep.stopped_epoch, status="ok")
    return row


def random_search(space, base_cfg, km_base, dataset, context, seed, net_spec, workers=1):
    """Train one model per sampled (lambda, tau1, tau2) and pick the lowest
    validation NLL.

    ``net_spec`` holds keyword arguments for :func:`~fseb.nn.build_network`;
    every trial starts from the same initialisation.  Returns
    ``(best_row, table)`` with the table ordered by trial index.
    """
    triples = space.draw(seed)
    jobs = [(i, lam, t1, t2, net_spec, base_cfg, km_base, dataset, context) for i, (lam, t1, t2) in enumerate(triples)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            table = list(pool.map(_run_trial, jobs))
    else:
        table = [_run_trial(j) for j in jobs]
    ok = [r for r in table if r["status"] == "ok"]
    if not ok:
        raise SearchError(f"all {len(table)} trials failed")
    best = min(ok, key=lambda r: (r["val_nll"], r["trial"]))
    return best, table


def trials_csv(table):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TRIAL_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in table:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
