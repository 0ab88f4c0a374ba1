"""Multinode recurrent VAE with exact reverse-mode gradients.

Shapes use ``B`` batch items, ``T`` frames, ``D`` bins, ``H`` encoder width
per direction, ``Hd`` decoder width, ``K`` latent nodes of size ``Z`` and a
context vector of size ``C``.

Encoder: a bidirectional LSTM over the frames. Its concatenated states feed
``K`` pairs of affine heads giving a per-frame Gaussian posterior for every
node. Decoder: a unidirectional LSTM whose input at frame ``t`` is
``[phi_t, z_1t, ..., z_Kt]`` with ``phi_t`` an affine function of the previous
decoder hidden state (the learnable initial state at ``t = 0``). An affine
output head maps each decoder state to a reconstructed magnitude frame.

All arithmetic is float64. Gate order inside the stacked LSTM weights is
(input, forget, output, candidate).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 512
    enc_hidden: int = 512
    dec_hidden: int = 512
    latent_dim: int = 64
    num_nodes: int = 1
    context_dim: int = 64

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")

    def as_tuple(self):
        return (self.input_dim, self.enc_hidden, self.dec_hidden,
                self.latent_dim, self.num_nodes, self.context_dim)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in the fixed checkpoint order."""
    D, H, Hd = cfg.input_dim, cfg.enc_hidden, cfg.dec_hidden
    Z, K, C = cfg.latent_dim, cfg.num_nodes, cfg.context_dim
    return {
        "enc_fw_W": (D, 4 * H), "enc_fw_U": (H, 4 * H), "enc_fw_b": (4 * H,),
        "enc_bw_W": (D, 4 * H), "enc_bw_U": (H, 4 * H), "enc_bw_b": (4 * H,),
        "mu_W": (K, 2 * H, Z), "mu_b": (K, Z),
        "lv_W": (K, 2 * H, Z), "lv_b": (K, Z),
        "dec_W": (C + K * Z, 4 * Hd), "dec_U": (Hd, 4 * Hd), "dec_b": (4 * Hd,),
        "ctx_W": (Hd, C), "ctx_b": (C,),
        "out_W": (Hd, D), "out_b": (D,),
        "init_h": (Hd,), "init_c": (Hd,),
    }


class VaeModel:
    """Parameter container. ``params`` maps names from ``param_shapes`` to arrays."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        shapes = param_shapes(cfg)
        if set(params) != set(shapes):
            raise ValueError(f"parameter names mismatch: {sorted(set(params) ^ set(shapes))}")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.cfg = cfg
        self.params = {n: np.asarray(params[n], dtype=np.float64) for n in shapes}

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "VaeModel":
        """Uniform(+-1/sqrt(fan_in)) weights, forget-gate bias +1, zero initial state."""
        gen = np.random.Generator(np.random.PCG64(seed))
        params = {}
        for name, shape in param_shapes(cfg).items():
            if name in ("init_h", "init_c"):
                params[name] = np.zeros(shape)
                continue
            if name.endswith("_b"):
                fan_in = param_shapes(cfg)[name[:-2] + "_W"][-2]
            elif name.endswith("_U"):
                fan_in = shape[0]
            else:
                fan_in = shape[-2]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = gen.uniform(-bound, bound, size=shape)
        for prefix, width in (("enc_fw", cfg.enc_hidden), ("enc_bw", cfg.enc_hidden), ("dec", cfg.dec_hidden)):
            params[f"{prefix}_b"][width:2 * width] += 1.0
        return cls(cfg, params)

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "VaeModel":
        return cls(cfg, {n: np.zeros(s) for n, s in param_shapes(cfg).items()})

    def copy(self) -> "VaeModel":
        return VaeModel(self.cfg, {n: p.copy() for n, p in self.params.items()})

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))


@dataclass
class LatentPosterior:
    mu: np.ndarray       # [B, T, K, Z]
    logvar: np.ndarray   # [B, T, K, Z], clamped


@dataclass
class ForwardTrace:
    x: np.ndarray
    mask: np.ndarray
    noise: np.ndarray
    enc_fw: dict
    enc_bw: dict
    h_enc: np.ndarray
    post: LatentPosterior
    logvar_raw: np.ndarray
    z: np.ndarray
    dec: dict
    h_prev_dec: np.ndarray
    x_r: np.ndarray
    kl_weight: float
    param_ids: tuple


# ---------------------------------------------------------------- LSTM

def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _lstm_step(x, h, c, W, U, b):
    H = h.shape[-1]
    a = x @ W + h @ U + b
    i = _sigmoid(a[:, :H])
    f = _sigmoid(a[:, H:2 * H])
    o = _sigmoid(a[:, 2 * H:3 * H])
    g = np.tanh(a[:, 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return o * tc, c_new, (i, f, o, g, tc)


def _lstm_run(xs, W, U, b, h0, c0, reverse=False):
    """Run over ``xs`` [B, T, In]; states are stored in time order."""
    B, T, _ = xs.shape
    H = U.shape[0]
    hs = np.zeros((B, T, H))
    cs = np.zeros((B, T, H))
    gates = np.zeros((B, T, 5, H))
    h_prev = np.zeros((B, T, H))
    c_prev = np.zeros((B, T, H))
    h, c = h0, c0
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        h_prev[:, t], c_prev[:, t] = h, c
        h, c, g = _lstm_step(xs[:, t], h, c, W, U, b)
        hs[:, t], cs[:, t] = h, c
        gates[:, t] = np.stack(g, axis=1)
    return {"h": hs, "c": cs, "gates": gates, "h_prev": h_prev, "c_prev": c_prev, "reverse": reverse}


def _lstm_step_back(dh, dc, gates, c_prev):
    i, f, o, g, tc = (gates[:, k] for k in range(5))
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    da = np.concatenate([
        dc * g * i * (1.0 - i),
        dc * c_prev * f * (1.0 - f),
        do * o * (1.0 - o),
        dc * i * (1.0 - g * g),
    ], axis=1)
    return da, dc * f


def _lstm_back(run, xs, dh_ext, W, U):
    """Backpropagate through a stored run.

    ``dh_ext`` [B, T, H] is the loss gradient arriving at each hidden state from
    outside the recurrence. Returns dW, dU, db, dxs and the gradients w.r.t. the
    initial hidden and cell states.
    """
    B, T, H = dh_ext.shape
    das = np.zeros((B, T, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    order = range(T) if run["reverse"] else range(T - 1, -1, -1)
    for t in order:
        da, dc_next = _lstm_step_back(dh_ext[:, t] + dh_next, dc_next, run["gates"][:, t], run["c_prev"][:, t])
        dh_next = da @ U.T
        das[:, t] = da
    flat_da = das.reshape(B * T, 4 * H)
    dW = xs.reshape(B * T, -1).T @ flat_da
    dU = run["h_prev"].reshape(B * T, H).T @ flat_da
    db = flat_da.sum(axis=0)
    dxs = das @ W.T
    return dW, dU, db, dxs, dh_next, dc_next


# ---------------------------------------------------------------- forward

def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected [frames, bins] or [batch, frames, bins], got {x.shape}")
    return x


def encode(model: VaeModel, x) -> tuple[LatentPosterior, dict]:
    """Posterior mean and clamped log-variance for every frame and node.

    ``x`` is ``[T, D]`` or ``[B, T, D]``; outputs are always batched.
    """
    p, cfg = model.params, model.cfg
    x = _as_batch(x)
    if x.shape[-1] != cfg.input_dim or x.shape[1] < 1:
        raise ValueError(f"input has shape {x.shape}; expected (*, >=1, {cfg.input_dim})")
    B = x.shape[0]
    zeros = np.zeros((B, cfg.enc_hidden))
    fw = _lstm_run(x, p["enc_fw_W"], p["enc_fw_U"], p["enc_fw_b"], zeros, zeros)
    bw = _lstm_run(x, p["enc_bw_W"], p["enc_bw_U"], p["enc_bw_b"], zeros, zeros, reverse=True)
    h = np.concatenate([fw["h"], bw["h"]], axis=-1)
    mu = np.einsum("btj,kjz->btkz", h, p["mu_W"]) + p["mu_b"]
    lv_raw = np.einsum("btj,kjz->btkz", h, p["lv_W"]) + p["lv_b"]
    post = LatentPosterior(mu, np.clip(lv_raw, LOGVAR_MIN, LOGVAR_MAX))
    return post, {"fw": fw, "bw": bw, "h": h, "logvar_raw": lv_raw, "x": x}


def sample_latent(post: LatentPosterior, noise) -> np.ndarray:
    """Reparameterized draw ``mu + exp(logvar / 2) * noise``."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != post.mu.shape:
        raise ValueError(f"noise shape {noise.shape} != posterior shape {post.mu.shape}")
    return post.mu + np.exp(0.5 * post.logvar) * noise


def _decode_run(model: VaeModel, z):
    p, cfg = model.params, model.cfg
    B, T, K, Z = z.shape
    if K != cfg.num_nodes or Z != cfg.latent_dim:
        raise ValueError(f"latent tensor {z.shape} does not match K={cfg.num_nodes}, Z={cfg.latent_dim}")
    Hd = cfg.dec_hidden
    zf = z.reshape(B, T, K * Z)
    h = np.broadcast_to(p["init_h"], (B, Hd)).copy()
    c = np.broadcast_to(p["init_c"], (B, Hd)).copy()
    inputs = np.zeros((B, T, cfg.context_dim + K * Z))
    hs = np.zeros((B, T, Hd))
    gates = np.zeros((B, T, 5, Hd))
    h_prev = np.zeros((B, T, Hd))
    c_prev = np.zeros((B, T, Hd))
    for t in range(T):
        h_prev[:, t], c_prev[:, t] = h, c
        phi = h @ p["ctx_W"] + p["ctx_b"]
        inputs[:, t] = np.concatenate([phi, zf[:, t]], axis=1)
        h, c, g = _lstm_step(inputs[:, t], h, c, p["dec_W"], p["dec_U"], p["dec_b"])
        hs[:, t] = h
        gates[:, t] = np.stack(g, axis=1)
    x_r = hs @ p["out_W"] + p["out_b"]
    run = {"h": hs, "gates": gates, "h_prev": h_prev, "c_prev": c_prev, "reverse": False, "inputs": inputs}
    return x_r, run


def decode(model: VaeModel, z, frames: int | None = None) -> np.ndarray:
    """Reconstruct ``[B, T, D]`` magnitudes from latents ``[B, T, K, Z]`` (or unbatched)."""
    z = np.asarray(z, dtype=np.float64)
    squeeze = z.ndim == 3
    if squeeze:
        z = z[None]
    if frames is not None and z.shape[1] != frames:
        raise ValueError(f"latent tensor covers {z.shape[1]} frames, {frames} requested")
    x_r, _ = _decode_run(model, z)
    return x_r[0] if squeeze else x_r


def reconstruct(model: VaeModel, x) -> np.ndarray:
    """Deterministic reconstruction through the posterior means, ``[T, D]``."""
    post, _ = encode(model, x)
    return decode(model, post.mu)[0]


# ---------------------------------------------------------------- loss

def kl_gaussian_standard(mu, logvar) -> np.ndarray:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over the last axis."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=-1)


def _frame_mask(mask, B, T):
    if mask is None:
        return np.ones((B, T))
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 1:
        mask = mask[None]
    if mask.shape != (B, T):
        raise ValueError(f"mask shape {mask.shape} != {(B, T)}")
    return mask


def elbo_loss(x, x_r, post: LatentPosterior, kl_weight: float, mask=None):
    """Negative multinode ELBO under the reporting conventions of the loss curves.

    ``mse`` sums squared error over bins and averages over valid frames and
    batch items. ``kl`` sums the per-node KL over latent dimensions and averages
    over nodes, valid frames and batch items. ``total = mse + kl_weight * kl``.
    """
    if kl_weight < 0:
        raise ValueError(f"kl_weight must be nonnegative, got {kl_weight}")
    x, x_r = _as_batch(x), _as_batch(x_r)
    if x.shape != x_r.shape:
        raise ValueError(f"x {x.shape} and x_r {x_r.shape} differ")
    B, T, _ = x.shape
    m = _frame_mask(mask, B, T)
    n_valid = m.sum()
    if n_valid == 0:
        raise ValueError("mask excludes every frame")
    err = (x_r - x) * m[..., None]
    mse = float(np.sum(err * err) / n_valid)
    kl_node = kl_gaussian_standard(post.mu, post.logvar)      # [B, T, K]
    kl = float(np.sum(kl_node * m[..., None]) / (n_valid * kl_node.shape[-1]))
    return mse + kl_weight * kl, mse, kl


def forward(model: VaeModel, x, noise=None, kl_weight: float = 1.0, mask=None):
    """Full training forward pass. Returns ``(trace, (total, mse, kl))``.

    ``noise=None`` uses the posterior means (zero noise).
    """
    post, enc = encode(model, x)
    if noise is None:
        noise = np.zeros_like(post.mu)
    z = sample_latent(post, noise)
    x_r, dec = _decode_run(model, z)
    x = enc["x"]
    m = _frame_mask(mask, *x.shape[:2])
    losses = elbo_loss(x, x_r, post, kl_weight, m)
    trace = ForwardTrace(
        x=x, mask=m, noise=np.asarray(noise, dtype=np.float64), enc_fw=enc["fw"], enc_bw=enc["bw"],
        h_enc=enc["h"], post=post, logvar_raw=enc["logvar_raw"], z=z, dec=dec,
        h_prev_dec=dec["h_prev"], x_r=x_r, kl_weight=float(kl_weight),
        param_ids=tuple(id(v) for v in model.params.values()),
    )
    return trace, losses


# ---------------------------------------------------------------- backward

def backward(model: VaeModel, trace: ForwardTrace, x=None, kl_weight: float | None = None) -> dict[str, np.ndarray]:
    """Gradient of ``elbo_loss(...)[0]`` w.r.t. every parameter, by BPTT."""
    if trace.param_ids != tuple(id(v) for v in model.params.values()):
        raise ValueError("stale trace: model parameters were replaced since the forward pass")
    if x is not None and not np.array_equal(_as_batch(x), trace.x):
        raise ValueError("stale trace: input differs from the forward pass")
    w = trace.kl_weight if kl_weight is None else float(kl_weight)
    p, cfg = model.params, model.cfg
    K, Z, H = cfg.num_nodes, cfg.latent_dim, cfg.enc_hidden
    xb, m = trace.x, trace.mask
    B, T, _ = xb.shape
    n_valid = m.sum()
    g = {}

    # output head
    d_xr = 2.0 * (trace.x_r - xb) * (m[..., None] ** 2) / n_valid
    dec = trace.dec
    hs = dec["h"]
    g["out_W"] = hs.reshape(B * T, -1).T @ d_xr.reshape(B * T, -1)
    g["out_b"] = d_xr.sum(axis=(0, 1))
    dh_out = d_xr @ p["out_W"].T

    # decoder BPTT; phi_t couples h_{t-1} into step t's input
    Hd, C = cfg.dec_hidden, cfg.context_dim
    U, Wd = p["dec_U"], p["dec_W"]
    das = np.zeros((B, T, 4 * Hd))
    d_inputs = np.zeros((B, T, C + K * Z))
    dh_next = np.zeros((B, Hd))
    dc_next = np.zeros((B, Hd))
    g["ctx_W"] = np.zeros_like(p["ctx_W"])
    g["ctx_b"] = np.zeros_like(p["ctx_b"])
    for t in range(T - 1, -1, -1):
        da, dc_next = _lstm_step_back(dh_out[:, t] + dh_next, dc_next, dec["gates"][:, t], dec["c_prev"][:, t])
        das[:, t] = da
        d_in = da @ Wd.T
        d_inputs[:, t] = d_in
        dphi = d_in[:, :C]
        g["ctx_W"] += dec["h_prev"][:, t].T @ dphi
        g["ctx_b"] += dphi.sum(axis=0)
        dh_next = da @ U.T + dphi @ p["ctx_W"].T
    flat = das.reshape(B * T, 4 * Hd)
    g["dec_W"] = dec["inputs"].reshape(B * T, -1).T @ flat
    g["dec_U"] = dec["h_prev"].reshape(B * T, Hd).T @ flat
    g["dec_b"] = flat.sum(axis=0)
    g["init_h"] = dh_next.sum(axis=0)
    g["init_c"] = dc_next.sum(axis=0)

    # reparameterization and KL
    dz = d_inputs[:, :, C:].reshape(B, T, K, Z)
    post = trace.post
    std = np.exp(0.5 * post.logvar)
    scale = w * m[..., None, None] / (n_valid * K)
    dmu = dz + scale * post.mu
    dlv = dz * trace.noise * 0.5 * std + scale * 0.5 * (np.exp(post.logvar) - 1.0)
    dlv = dlv * ((trace.logvar_raw >= LOGVAR_MIN) & (trace.logvar_raw <= LOGVAR_MAX))

    h = trace.h_enc
    g["mu_W"] = np.einsum("btj,btkz->kjz", h, dmu)
    g["mu_b"] = dmu.sum(axis=(0, 1))
    g["lv_W"] = np.einsum("btj,btkz->kjz", h, dlv)
    g["lv_b"] = dlv.sum(axis=(0, 1))
    dh = np.einsum("btkz,kjz->btj", dmu, p["mu_W"]) + np.einsum("btkz,kjz->btj", dlv, p["lv_W"])

    # encoder, both directions start from zero state
    for name, run, dh_dir in (("enc_fw", trace.enc_fw, dh[..., :H]), ("enc_bw", trace.enc_bw, dh[..., H:])):
        dW, dU, db, _, _, _ = _lstm_back(run, xb, dh_dir, p[f"{name}_W"], p[f"{name}_U"])
        g[f"{name}_W"], g[f"{name}_U"], g[f"{name}_b"] = dW, dU, db

    return {n: g[n] for n in p}


def loss_and_grad(model: VaeModel, x, noise=None, kl_weight: float = 1.0, mask=None):
    trace, losses = forward(model, x, noise, kl_weight, mask)
    return losses, backward(model, trace)
