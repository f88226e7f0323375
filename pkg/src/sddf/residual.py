"""Latent feature map, residual decoder and the composed SDDF model.

Every forward pass keeps the activations needed by the hand-written reverse
pass; nothing here relies on an autodiff framework.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ellipsoid import DEFAULT_EPS, Ellipsoid
from .prior import NONE, PriorGradients, PriorOutput, prior_backward, prior_forward

PAPER_WIDTHS = (256, 256, 512, 512, 256, 128, 64)
DESK_WIDTHS = (128, 128, 256, 256, 128, 64, 32)
SKIP_LAYERS = (1, 3)
LEAKY_SLOPE = 0.01

CHECKPOINT_MAGIC = b"SDDFCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def monomial_embed(x: np.ndarray) -> np.ndarray:
    """Degree-2 monomials ``[xx, xy, xz, yy, yz, zz, x, y, z, 1]``."""
    x = np.atleast_2d(x)
    a, b, c = x[:, 0], x[:, 1], x[:, 2]
    return np.stack([a * a, a * b, a * c, b * b, b * c, c * c, a, b, c, np.ones_like(a)], axis=1)


def monomial_embed_vjp(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pull a ``(N, 10)`` gradient on the embedding back to ``(N, 3)``."""
    a, b, c = x[:, 0], x[:, 1], x[:, 2]
    ga = 2 * a * g[:, 0] + b * g[:, 1] + c * g[:, 2] + g[:, 6]
    gb = a * g[:, 1] + 2 * b * g[:, 3] + c * g[:, 4] + g[:, 7]
    gc = a * g[:, 2] + b * g[:, 4] + 2 * c * g[:, 5] + g[:, 8]
    return np.stack([ga, gb, gc], axis=1)


def monomial_features(q: np.ndarray, v_loc: np.ndarray) -> np.ndarray:
    """Column-major flattening of ``E(q) E(v')^T`` as ``(N, 100)``.

    Entry ``10 * j + k`` is ``E(q)_k * E(v')_j``.
    """
    Eq = monomial_embed(q)
    Ev = monomial_embed(v_loc)
    return (Ev[:, :, None] * Eq[:, None, :]).reshape(-1, 100)


def latent_feature(q, v_loc, j_f, latent: np.ndarray) -> np.ndarray:
    """``z = W[j_f] m`` for each ray; ``latent`` has shape ``(M, m, 100)``."""
    feats = monomial_features(np.atleast_2d(q), np.atleast_2d(v_loc)).astype(latent.dtype)
    j_f = np.atleast_1d(j_f)
    z = np.zeros((feats.shape[0], latent.shape[1]), dtype=latent.dtype)
    for j in np.unique(j_f):
        idx = j_f == j
        z[idx] = feats[idx] @ latent[j].T
    return z


def leaky(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, x, slope * x)


@dataclass
class Decoder:
    """MLP from the latent vector to ``(delta_i, delta_s, delta_f)``.

    ``weights[k]`` has shape ``(fan_in, fan_out)``. Hidden layers listed in
    ``skips`` add their input to their output when the widths agree.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    skips: tuple[int, ...] = SKIP_LAYERS
    slope: float = LEAKY_SLOPE

    @classmethod
    def init(cls, m: int, widths: Sequence[int], rng: np.random.Generator,
             dtype=np.float64, skips=SKIP_LAYERS, slope=LEAKY_SLOPE) -> "Decoder":
        dims = [m, *widths, 3]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / ((1.0 + slope**2) * fan_in))
            weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        return cls(weights, biases, tuple(skips), slope)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    def _skip(self, k: int) -> bool:
        W = self.weights[k]
        return k in self.skips and W.shape[0] == W.shape[1]

    def forward(self, z: np.ndarray):
        """Return ``(out (N, 3), cache)``."""
        acts = [z]
        pre = []
        a = z
        for k in range(len(self.weights) - 1):
            h = a @ self.weights[k] + self.biases[k]
            pre.append(h)
            out = leaky(h, self.slope)
            if self._skip(k):
                out = out + a
            acts.append(out)
            a = out
        y = a @ self.weights[-1] + self.biases[-1]
        return y, (acts, pre)

    def backward(self, cache, g_out: np.ndarray, need_params: bool = True):
        """Return ``(grad_z, grad_weights, grad_biases)``."""
        acts, pre = cache
        nl = len(self.weights)
        gW = [None] * nl
        gb = [None] * nl
        g = g_out
        if need_params:
            gW[-1] = acts[-1].T @ g
            gb[-1] = g.sum(axis=0)
        g = g @ self.weights[-1].T
        for k in range(nl - 2, -1, -1):
            gh = g * np.where(pre[k] >= 0, 1.0, self.slope).astype(g.dtype)
            if need_params:
                gW[k] = acts[k].T @ gh
                gb[k] = gh.sum(axis=0)
            g_in = gh @ self.weights[k].T
            if self._skip(k):
                g_in = g_in + g
            g = g_in
        return g, gW, gb

    def astype(self, dtype) -> "Decoder":
        return Decoder([w.astype(dtype) for w in self.weights],
                       [b.astype(dtype) for b in self.biases], self.skips, self.slope)


def decode(z: np.ndarray, decoder: Decoder) -> np.ndarray:
    return decoder.forward(np.atleast_2d(z))[0]


@dataclass
class Prediction:
    i_hat: np.ndarray
    s_hat: np.ndarray
    f_hat: np.ndarray
    prior: PriorOutput
    residuals: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


def compose(prior_i, prior_s, prior_f, residuals, alpha: float):
    """Squash the prior indicators and add residual corrections.

    Returns ``(i_hat, s_hat, f_hat)``; an infinite prior distance stays
    infinite.
    """
    residuals = np.atleast_2d(residuals)
    i_hat = np.tanh(alpha * np.asarray(prior_i)) + residuals[:, 0]
    s_hat = np.tanh(alpha * np.asarray(prior_s)) + residuals[:, 1]
    prior_f = np.asarray(prior_f, dtype=float)
    f_hat = np.where(np.isfinite(prior_f), prior_f + residuals[:, 2], np.inf)
    return i_hat, s_hat, f_hat


@dataclass
class ModelGradients:
    latent: np.ndarray
    dec_weights: list
    dec_biases: list
    prior: PriorGradients

    @property
    def p(self) -> np.ndarray:
        return self.prior.p

    @property
    def v(self) -> np.ndarray:
        return self.prior.v


@dataclass
class SDDFModel:
    """Ellipsoid prior plus per-ellipsoid latent maps and a shared decoder."""

    ellipsoids: list[Ellipsoid]
    latent: np.ndarray
    decoder: Decoder
    alpha: float = 1.0
    eps: float = DEFAULT_EPS

    @classmethod
    def create(cls, ellipsoids: Sequence[Ellipsoid], m: int = 64,
               widths: Sequence[int] = DESK_WIDTHS, seed: int = 0,
               alpha: float = 1.0, eps: float = DEFAULT_EPS,
               latent_scale: float = 0.0, dtype=np.float64) -> "SDDFModel":
        """New model; ``latent_scale = 0`` makes it reproduce the prior exactly."""
        rng = np.random.default_rng(seed)
        decoder = Decoder.init(m, widths, rng, dtype=dtype)
        M = len(ellipsoids)
        if latent_scale > 0:
            latent = rng.normal(0.0, latent_scale, (M, m, 100)).astype(dtype)
        else:
            latent = np.zeros((M, m, 100), dtype=dtype)
        return cls([e.copy() for e in ellipsoids], latent, decoder, alpha, eps)

    @property
    def M(self) -> int:
        return len(self.ellipsoids)

    @property
    def m(self) -> int:
        return self.latent.shape[1]

    @property
    def dtype(self):
        return self.latent.dtype

    def copy(self) -> "SDDFModel":
        return SDDFModel([e.copy() for e in self.ellipsoids], self.latent.copy(),
                         Decoder([w.copy() for w in self.decoder.weights],
                                 [b.copy() for b in self.decoder.biases],
                                 self.decoder.skips, self.decoder.slope),
                         self.alpha, self.eps)

    def astype(self, dtype) -> "SDDFModel":
        out = self.copy()
        out.latent = out.latent.astype(dtype)
        out.decoder = out.decoder.astype(dtype)
        return out

    def forward(self, p: np.ndarray, v: np.ndarray) -> Prediction:
        return model_forward(p, v, self)

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "SDDFModel":
        return load_checkpoint(path)


def model_forward(p, v, model: SDDFModel, prior: PriorOutput | None = None) -> Prediction:
    p = np.atleast_2d(np.asarray(p, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if prior is None:
        prior = prior_forward(p, v, model.ellipsoids, model.eps)
    n = p.shape[0]
    hit = prior.hit
    residuals = np.zeros((n, 3))
    cache: dict = {"hit": hit}
    if hit.any():
        p_loc, v_loc = prior.local_frame()
        q = p_loc[hit] + prior.f[hit, None] * v_loc[hit]
        vh = v_loc[hit]
        feats = monomial_features(q, vh).astype(model.dtype)
        j = prior.j_f[hit]
        z = np.zeros((q.shape[0], model.m), dtype=model.dtype)
        for k in np.unique(j):
            idx = j == k
            z[idx] = feats[idx] @ model.latent[k].T
        out, dec_cache = model.decoder.forward(z)
        residuals[hit] = out
        cache.update(q=q, v_loc=vh, feats=feats, j=j, dec=dec_cache)
    i_hat, s_hat, f_hat = compose(prior.i, prior.s, prior.f, residuals, model.alpha)
    return Prediction(i_hat, s_hat, f_hat, prior, residuals, cache)


def model_backward(p, v, pred: Prediction, model: SDDFModel, d_ihat, d_shat, d_fhat,
                   train_prior: bool = True, through_q: bool = True,
                   need_params: bool = True, need_inputs: bool = True,
                   prior_upstream=None) -> ModelGradients:
    """Reverse pass of :func:`model_forward`.

    With ``train_prior=False`` the ellipsoid gradients are exactly zero
    (frozen prior); if ray gradients are not needed either, the prior reverse
    pass is skipped. ``through_q`` controls whether the residual branch
    differentiates through ``q = p' + f v'`` into the prior; input gradients
    always need it. ``prior_upstream`` is an optional ``(d_i, d_s, d_f)``
    applied directly to the prior outputs (the prior's own loss).
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    n = p.shape[0]
    d_ihat = np.broadcast_to(np.asarray(d_ihat, dtype=float), (n,))
    d_shat = np.broadcast_to(np.asarray(d_shat, dtype=float), (n,))
    d_fhat = np.where(np.isfinite(pred.f_hat), np.broadcast_to(np.asarray(d_fhat, dtype=float), (n,)), 0.0)
    prior = pred.prior
    cache = pred.cache
    hit = cache["hit"]

    g_latent = np.zeros_like(model.latent) if need_params else None
    gW = [np.zeros_like(w) for w in model.decoder.weights] if need_params else []
    gb = [np.zeros_like(b) for b in model.decoder.biases] if need_params else []
    local_p = local_v = None
    d_f_prior = d_fhat.copy()

    if hit.any():
        g_res = np.stack([d_ihat[hit], d_shat[hit], d_fhat[hit]], axis=1).astype(model.dtype)
        g_z, dW, db = model.decoder.backward(cache["dec"], g_res, need_params)
        if need_params:
            gW, gb = dW, db
        feats, j = cache["feats"], cache["j"]
        g_feats = np.zeros_like(feats)
        for k in np.unique(j):
            idx = j == k
            if need_params:
                g_latent[k] = g_z[idx].T @ feats[idx]
            g_feats[idx] = g_z[idx] @ model.latent[k]
        if through_q:
            q, vh = cache["q"], cache["v_loc"]
            G = g_feats.astype(float).reshape(-1, 10, 10)   # [j, k] = dL/d(Ev_j Eq_k)
            Eq = monomial_embed(q)
            Ev = monomial_embed(vh)
            g_q = monomial_embed_vjp(q, np.einsum("njk,nj->nk", G, Ev))
            g_v_direct = monomial_embed_vjp(vh, np.einsum("njk,nk->nj", G, Eq))
            local_p = np.zeros((n, 3))
            local_v = np.zeros((n, 3))
            local_p[hit] = g_q
            local_v[hit] = g_v_direct + prior.f[hit, None] * g_q
            d_f_prior[hit] += np.einsum("nk,nk->n", g_q, vh)

    if not (train_prior or need_inputs):
        M = model.M
        pg = PriorGradients(np.zeros((M, 6)), np.zeros((M, 3)), np.zeros((n, 3)), np.zeros((n, 3)))
        return ModelGradients(g_latent, gW, gb, pg)
    d_i_prior = d_ihat * model.alpha * (1.0 - np.tanh(model.alpha * prior.i) ** 2)
    d_s_prior = d_shat * model.alpha * (1.0 - np.tanh(model.alpha * prior.s) ** 2)
    if prior_upstream is not None:
        d_i_prior = d_i_prior + prior_upstream[0]
        d_s_prior = d_s_prior + prior_upstream[1]
        d_f_prior = d_f_prior + np.where(np.isfinite(prior.f), prior_upstream[2], 0.0)
    pg = prior_backward(p, v, prior, model.ellipsoids, d_i_prior, d_s_prior,
                        d_f_prior, local_p, local_v)
    if not train_prior:
        pg.xi[:] = 0.0
        pg.log_radii[:] = 0.0
    return ModelGradients(g_latent, gW, gb, pg)


def input_gradients(p, v, model: SDDFModel, pred: Prediction | None = None):
    """``(grad_p f_hat, grad_v f_hat)`` for each ray, ``(N, 3)`` each."""
    if pred is None:
        pred = model_forward(p, v, model)
    n = pred.f_hat.shape[0]
    g = model_backward(p, v, pred, model, np.zeros(n), np.zeros(n), np.ones(n),
                       train_prior=False, through_q=True, need_params=False)
    return g.p, g.v


# --- checkpoint file -------------------------------------------------------

def _tensors(model: SDDFModel) -> list[np.ndarray]:
    out = []
    for e in model.ellipsoids:
        out += [e.R0, e.c0, e.r0, e.xi, e.s]
    out.append(model.latent)
    for w, b in zip(model.decoder.weights, model.decoder.biases):
        out += [w, b]
    return out


def save_checkpoint(model: SDDFModel, path) -> None:
    """Write ``model`` as a versioned little-endian float32 checkpoint."""
    widths = model.decoder.widths
    skips = model.decoder.skips
    header = CHECKPOINT_MAGIC + struct.pack(
        f"<IIII{len(widths)}I", CHECKPOINT_VERSION, model.M, model.m, len(widths), *widths)
    header += struct.pack(f"<fffI{len(skips)}I", model.alpha, model.eps,
                          model.decoder.slope, len(skips), *skips)
    with open(path, "wb") as fh:
        fh.write(header)
        for t in _tensors(model):
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float64) -> SDDFModel:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an SDDF checkpoint")
    off = 8
    version, M, m, nw = struct.unpack_from("<IIII", data, off)
    off += 16
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    widths = struct.unpack_from(f"<{nw}I", data, off)
    off += 4 * nw
    alpha, eps, slope, ns = struct.unpack_from("<fffI", data, off)
    off += 16
    skips = struct.unpack_from(f"<{ns}I", data, off)
    off += 4 * ns
    flat = np.frombuffer(data, dtype="<f4", offset=off).astype(dtype)

    pos = 0

    def take(*shape):
        nonlocal pos
        size = int(np.prod(shape))
        if pos + size > flat.size:
            raise CheckpointError(f"{path}: truncated checkpoint")
        arr = flat[pos:pos + size].reshape(shape).copy()
        pos += size
        return arr

    ellipsoids = []
    for _ in range(M):
        R0, c0, r0, xi, s = take(3, 3), take(3), take(3), take(6), take(3)
        # float32 storage breaks orthonormality at ~1e-7; project back onto SO(3)
        U, _, Vt = np.linalg.svd(R0)
        R0 = U @ Vt
        ellipsoids.append(Ellipsoid(R0, c0, r0, xi, s))
    latent = take(M, m, 100)
    dims = [m, *widths, 3]
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(take(a, b))
        biases.append(take(b))
    if pos != flat.size:
        raise CheckpointError(f"{path}: {flat.size - pos} trailing values")
    decoder = Decoder(weights, biases, tuple(skips), float(slope))
    return SDDFModel(ellipsoids, latent, decoder, float(alpha), float(eps))
