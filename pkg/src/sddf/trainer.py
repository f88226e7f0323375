"""Training loop: prior pretraining, joint training, then residual-only.

Losses are weighted Huber sums over ``(i, s, f)``. The prior loss weights
negative distances and negative signs more heavily; the residual loss puts
most weight on the distance.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .initialization import multi_ellipsoid_init
from .prior import (F_CLAMP, PRIOR_WEIGHTS, clamp_inf, prior_backward, prior_forward,
                    triple_loss)
from .residual import DESK_WIDTHS, PAPER_WIDTHS, SDDFModel, model_backward, model_forward
from .scene import Dataset, build_point_cloud

log = logging.getLogger(__name__)

RESIDUAL_WEIGHTS = {"i": (0.1, 0.1), "s": (0.1, 0.1), "f": (1.0, 1.1)}
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DIVERGENCE_LOSS = 1e6


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_rays: int = 4096
    lr_phase1: float = 1e-3
    lr_phase2: float = 1e-4
    epochs: int = 60
    max_iters: int = 3000
    prior_pretrain_iters: int = 200
    joint_iters: int = 100
    n_ellipsoids: int = 32
    latent_dim: int = 64
    widths: tuple[int, ...] = DESK_WIDTHS
    alpha: float = 1.0
    f_clamp: float = F_CLAMP
    joint_through_q: bool = True
    seed: int = 0
    dtype: str = "float32"
    log_every: int = 50
    desk_scale: bool = True
    init_points: int = 40_000

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        for name in ("batch_rays", "lr_phase1", "lr_phase2", "latent_dim", "n_ellipsoids", "alpha"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs", "max_iters", "prior_pretrain_iters", "joint_iters", "init_points"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def paper_scale(cls, **kw) -> "TrainConfig":
        base = dict(batch_rays=512_000, epochs=300, prior_pretrain_iters=19_000,
                    joint_iters=1_000, n_ellipsoids=128, latent_dim=256,
                    widths=PAPER_WIDTHS, desk_scale=False, max_iters=0, init_points=0)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """In-place Adam update of every tensor named in ``grads``.

    Step counts are kept per tensor so that tensors that start training late
    get a proper bias correction.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}")
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.step[name] = 0
        state.step[name] += 1
        t = state.step[name]
        m, v = state.m[name], state.v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(p.dtype)


def prior_params(model: SDDFModel) -> dict:
    out = {}
    for j, e in enumerate(model.ellipsoids):
        out[f"ellipsoid{j}.xi"] = e.xi
        out[f"ellipsoid{j}.s"] = e.s
    return out


def residual_params(model: SDDFModel) -> dict:
    out = {"latent": model.latent}
    for k, (w, b) in enumerate(zip(model.decoder.weights, model.decoder.biases)):
        out[f"decoder{k}.weight"] = w
        out[f"decoder{k}.bias"] = b
    return out


def total_loss(pred, batch: Dataset, f_clamp: float = F_CLAMP, use_prior: bool = True,
               use_residual: bool = True):
    """Prior loss plus residual loss on a batch (batch means).

    Returns ``(loss, l_prior, l_residual, prior_grads, residual_grads)``
    where each gradient triple is ``(d_i, d_s, d_f)``.
    """
    n = len(batch)
    zeros = (np.zeros(n), np.zeros(n), np.zeros(n))
    lp, gp = 0.0, zeros
    lr_, gr = 0.0, zeros
    if use_prior:
        lp, *gp = triple_loss(pred.prior.i, pred.prior.s, pred.prior.f,
                              batch.i, batch.s, batch.f, PRIOR_WEIGHTS, f_clamp)
    if use_residual:
        lr_, *gr = triple_loss(pred.i_hat, pred.s_hat, pred.f_hat,
                               batch.i, batch.s, batch.f, RESIDUAL_WEIGHTS, f_clamp)
    return lp + lr_, lp, lr_, tuple(gp), tuple(gr)


@dataclass
class EvalResult:
    mae: float
    miss_rate: float
    sign_accuracy: float
    count: int

    def as_row(self) -> dict:
        return asdict(self)


def evaluate(model, test: Dataset, f_clamp: float = F_CLAMP, chunk: int = 8192) -> EvalResult:
    """Mean absolute distance error; misses are scored at ``f* + f_clamp``.

    ``model`` is an :class:`SDDFModel` or any callable returning
    ``(f_hat, s_hat)`` for ``(p, v)``.
    """
    if len(test) == 0:
        return EvalResult(float("nan"), float("nan"), float("nan"), 0)
    err, miss, sign_ok = [], [], []
    for s in range(0, len(test), chunk):
        b = test[s:s + chunk]
        if isinstance(model, SDDFModel):
            pred = model_forward(b.p, b.v, model)
            f_hat, s_hat = pred.f_hat, pred.s_hat
        else:
            f_hat, s_hat = model(b.p, b.v)
        f_hat = np.asarray(f_hat, dtype=float)
        err.append(np.abs(clamp_inf(f_hat, b.f, f_clamp) - b.f))
        miss.append(~np.isfinite(f_hat))
        sign_ok.append(np.where(np.asarray(s_hat) >= 0, 1, -1) == b.s)
    err = np.concatenate(err)
    return EvalResult(float(err.mean()), float(np.concatenate(miss).mean()),
                      float(np.concatenate(sign_ok).mean()), len(test))


def initialize_model(data: Dataset, cfg: TrainConfig) -> SDDFModel:
    """Ellipsoids from the data point cloud plus a fresh residual network.

    Clouds larger than ``cfg.init_points`` are thinned with a fixed stride.
    """
    cloud = build_point_cloud(data)
    if cfg.init_points and cloud.shape[0] > cfg.init_points:
        cloud = cloud[::-(-cloud.shape[0] // cfg.init_points)]
    M = min(cfg.n_ellipsoids, cloud.shape[0])
    ellipsoids = multi_ellipsoid_init(cloud, M, seed=cfg.seed)
    return SDDFModel.create(ellipsoids, m=cfg.latent_dim, widths=cfg.widths, seed=cfg.seed,
                            alpha=cfg.alpha, dtype=np.dtype(cfg.dtype))


@dataclass
class TrainResult:
    model: SDDFModel
    log: list[dict]
    iterations: int


def phase_of(it: int, cfg: TrainConfig) -> str:
    if it < cfg.prior_pretrain_iters:
        return "prior"
    if it < cfg.prior_pretrain_iters + cfg.joint_iters:
        return "joint"
    return "residual"


def total_iterations(n: int, cfg: TrainConfig) -> int:
    """Iterations for ``n`` samples: ``max(1, n // batch)`` per epoch, capped by ``max_iters``."""
    total = cfg.epochs * max(1, n // cfg.batch_rays)
    return min(total, cfg.max_iters) if cfg.max_iters else total


def _batches(n: int, cfg: TrainConfig, rng: np.random.Generator):
    per_epoch = max(1, n // cfg.batch_rays)
    total = total_iterations(n, cfg)
    it = 0
    while it < total:
        perm = rng.permutation(n)
        for k in range(min(per_epoch, total - it)):
            yield it, perm[k * cfg.batch_rays:(k + 1) * cfg.batch_rays]
            it += 1


def train(data: Dataset, model: SDDFModel, cfg: TrainConfig, val: Dataset | None = None,
          callback=None) -> TrainResult:
    """Run the three-phase schedule on ``model`` (modified in place).

    The learning rate drops from ``lr_phase1`` to ``lr_phase2`` halfway
    through the run (the halfway epoch when no iteration cap applies).
    """
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    rows: list[dict] = []
    p_params = prior_params(model)
    r_params = residual_params(model)
    half = total_iterations(len(data), cfg) // 2
    it = 0
    for it, idx in _batches(len(data), cfg, rng):
        batch = data[np.sort(idx)]
        phase = phase_of(it, cfg)
        lr = cfg.lr_phase1 if it < half else cfg.lr_phase2
        if phase == "prior":
            out = prior_forward(batch.p, batch.v, model.ellipsoids, model.eps)
            lp, d_i, d_s, d_f = triple_loss(out.i, out.s, out.f, batch.i, batch.s, batch.f,
                                            PRIOR_WEIGHTS, cfg.f_clamp)
            lr_loss = 0.0
            g = prior_backward(batch.p, batch.v, out, model.ellipsoids, d_i, d_s, d_f)
            grads = _prior_grad_dict(g)
        else:
            pred = model_forward(batch.p, batch.v, model)
            joint = phase == "joint"
            _, lp, lr_loss, gp, gr = total_loss(pred, batch, cfg.f_clamp, use_prior=joint)
            g = model_backward(batch.p, batch.v, pred, model, *gr, train_prior=joint,
                               through_q=joint and cfg.joint_through_q, need_inputs=False,
                               prior_upstream=gp if joint else None)
            grads = _residual_grad_dict(g)
            if joint:
                grads.update(_prior_grad_dict(g.prior))
        total = lp + lr_loss
        if not np.isfinite(total) or total > DIVERGENCE_LOSS:
            raise DivergenceError(f"loss {total} at iteration {it} ({phase})")
        params = {**p_params, **r_params}
        adam_step(params, grads, state, lr)
        row = {"iteration": it, "phase": phase, "L_P": lp, "L_R": lr_loss, "mae_val": ""}
        if val is not None and cfg.log_every and (it % cfg.log_every == 0):
            row["mae_val"] = evaluate(model, val, cfg.f_clamp).mae
            log.info("it %d %s L_P=%.4f L_R=%.4f mae=%.4f", it, phase, lp, lr_loss, row["mae_val"])
        rows.append(row)
        if callback is not None:
            callback(it, row, model)
    if val is not None and rows:
        rows[-1]["mae_val"] = evaluate(model, val, cfg.f_clamp).mae
    return TrainResult(model, rows, len(rows))


def _prior_grad_dict(g) -> dict:
    out = {}
    for j in range(g.xi.shape[0]):
        out[f"ellipsoid{j}.xi"] = g.xi[j]
        out[f"ellipsoid{j}.s"] = g.log_radii[j]
    return out


def _residual_grad_dict(g) -> dict:
    out = {"latent": g.latent}
    for k, (w, b) in enumerate(zip(g.dec_weights, g.dec_biases)):
        out[f"decoder{k}.weight"] = w
        out[f"decoder{k}.bias"] = b
    return out


def write_loss_log(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iteration", "phase", "L_P", "L_R", "mae_val"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


def fit(data: Dataset, cfg: TrainConfig, val: Dataset | None = None) -> TrainResult:
    """Initialize from ``data`` and train."""
    return train(data, initialize_model(data, cfg), cfg, val)
