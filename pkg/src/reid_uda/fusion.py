"""Channel-attention fusion of local and global feature maps.

Feature maps are arrays shaped ``(..., C, H, W)``; every operation here
broadcasts over leading batch axes. Vectors are ``(..., C)``.

Each differentiable forward ``f`` has a companion ``f_vjp`` that returns the
vector-Jacobian product: gradients for the parameters (summed over the
batch, packed in the same container type as the parameters) and for the
inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .rng import Rng

BN_EPS = 1e-5


# -- shared multilayer perceptron -------------------------------------------


def smp_sizes(channels: int, reduction: int, hidden_layers: int) -> list[int]:
    """Layer widths ``[C, ..., C]``; ``hidden_layers`` affine maps in total.

    (h-1)/2 maps shrink by ``reduction`` (never below 1), (h-1)/2 maps grow
    back through the same widths, and a last map holds width C.
    """
    if hidden_layers < 1 or hidden_layers % 2 == 0:
        raise ValueError(f"hidden_layers must be odd and >= 1, got {hidden_layers}")
    if channels < 1 or reduction < 1:
        raise ValueError("channels and reduction must be >= 1")
    half = (hidden_layers - 1) // 2
    down = [channels]
    for _ in range(half):
        down.append(max(1, down[-1] // reduction))
    return down + down[-2::-1] + [channels] if half else [channels, channels]


@dataclass
class SmpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("SMP needs one bias per weight and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(f"layer {k} input {w.shape[1]} != previous output")
        if self.weights[0].shape[1] != self.weights[-1].shape[0]:
            raise ShapeError("SMP must map C channels back to C")

    @property
    def channels(self) -> int:
        return self.weights[0].shape[1]

    @classmethod
    def init(cls, channels: int, reduction: int, hidden_layers: int, rng: Rng) -> "SmpParams":
        """Glorot-uniform weights, zero biases."""
        sizes = smp_sizes(channels, reduction, hidden_layers)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, channels: int, reduction: int = 1, hidden_layers: int = 1) -> "SmpParams":
        sizes = smp_sizes(channels, reduction, hidden_layers)
        return cls(
            [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
            [np.zeros(o) for o in sizes[1:]],
        )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"layer{k}.weight"] = w
            out[f"layer{k}.bias"] = b
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "SmpParams":
        n = len(arrays) // 2
        return cls(
            [np.asarray(arrays[f"layer{k}.weight"]) for k in range(n)],
            [np.asarray(arrays[f"layer{k}.bias"]) for k in range(n)],
        )


def _check_channels(params: SmpParams, n: int) -> None:
    if n != params.channels:
        raise ShapeError(f"input has {n} channels, SMP expects {params.channels}")


def _smp_pass(params: SmpParams, v):
    v = np.asarray(v, dtype=np.float64)
    _check_channels(params, v.shape[-1])
    inputs, pre = [], []
    h = v
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = z if k == last else np.maximum(z, 0.0)
    return h, inputs, pre


def smp_forward(params: SmpParams, v) -> np.ndarray:
    """Affine maps with ReLU between them; the last map stays linear."""
    return _smp_pass(params, v)[0]


def smp_vjp(params: SmpParams, v, dout) -> tuple[SmpParams, np.ndarray]:
    _, inputs, pre = _smp_pass(params, v)
    dz = np.asarray(dout, dtype=np.float64)
    dws, dbs = [], []
    for k in range(len(params.weights) - 1, -1, -1):
        h = inputs[k].reshape(-1, inputs[k].shape[-1])
        g = dz.reshape(-1, dz.shape[-1])
        dws.append(g.T @ h)
        dbs.append(g.sum(axis=0))
        dh = dz @ params.weights[k]
        if k:
            dz = dh * (pre[k - 1] > 0)
    return SmpParams(dws[::-1], dbs[::-1]), dh


# -- pooling and attention --------------------------------------------------


def _check_map(fmap) -> np.ndarray:
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim < 3:
        raise ShapeError(f"feature map needs (..., C, H, W), got {fmap.shape}")
    return fmap


def gap(fmap) -> np.ndarray:
    """Global average pooling over the two spatial axes."""
    return _check_map(fmap).mean(axis=(-2, -1))


def channel_pool(fmap) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel spatial (max, mean)."""
    fmap = _check_map(fmap)
    return fmap.max(axis=(-2, -1)), fmap.mean(axis=(-2, -1))


def channel_pool_vjp(fmap, dmax, davg) -> np.ndarray:
    fmap = _check_map(fmap)
    h, w = fmap.shape[-2:]
    flat = fmap.reshape(fmap.shape[:-2] + (h * w,))
    # gradient of max goes to the first maximal position
    arg = flat.argmax(axis=-1)
    dflat = np.broadcast_to((np.asarray(davg) / (h * w))[..., None], flat.shape).copy()
    np.put_along_axis(
        dflat,
        arg[..., None],
        np.take_along_axis(dflat, arg[..., None], axis=-1) + np.asarray(dmax)[..., None],
        axis=-1,
    )
    return dflat.reshape(fmap.shape)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def attention_mask(params: SmpParams, fmap) -> np.ndarray:
    """``sigmoid(SMP(max-pool) + SMP(avg-pool))``, one weight per channel."""
    mx, av = channel_pool(fmap)
    _check_channels(params, mx.shape[-1])
    return sigmoid(smp_forward(params, mx) + smp_forward(params, av))


def attention_mask_vjp(params: SmpParams, fmap, dmask) -> tuple[SmpParams, np.ndarray]:
    mx, av = channel_pool(fmap)
    mask = sigmoid(smp_forward(params, mx) + smp_forward(params, av))
    da = np.asarray(dmask) * mask * (1.0 - mask)
    g_max, d_mx = smp_vjp(params, mx, da)
    g_avg, d_av = smp_vjp(params, av, da)
    grads = SmpParams(
        [a + b for a, b in zip(g_max.weights, g_avg.weights)],
        [a + b for a, b in zip(g_max.biases, g_avg.biases)],
    )
    return grads, channel_pool_vjp(fmap, d_mx, d_av)


def ecab(params: SmpParams, zeta) -> np.ndarray:
    """Attention mask times the summed max- and average-pooled features."""
    mx, av = channel_pool(zeta)
    return attention_mask(params, zeta) * (mx + av)


def ecab_vjp(params: SmpParams, zeta, dout) -> tuple[SmpParams, np.ndarray]:
    mx, av = channel_pool(zeta)
    mask = attention_mask(params, zeta)
    dout = np.asarray(dout, dtype=np.float64)
    grads, dmap = attention_mask_vjp(params, zeta, dout * (mx + av))
    dpooled = dout * mask
    return grads, dmap + channel_pool_vjp(zeta, dpooled, dpooled)


def secab(params: SmpParams, tau) -> np.ndarray:
    """The attention mask alone; reweighting happens in the caller."""
    return attention_mask(params, tau)


secab_vjp = attention_mask_vjp


def split_map(fmap) -> tuple[np.ndarray, np.ndarray]:
    """Top rows ``[0, ceil(H/2))`` and bottom rows ``[ceil(H/2), H)``."""
    fmap = _check_map(fmap)
    h = fmap.shape[-2]
    if h < 2:
        raise ShapeError(f"cannot split a map with H={h}")
    cut = (h + 1) // 2
    return fmap[..., :cut, :], fmap[..., cut:, :]


# -- batch normalisation (inference mode) -----------------------------------


@dataclass
class BnParams:
    running_mean: np.ndarray
    running_var: np.ndarray
    scale: np.ndarray
    shift: np.ndarray

    @classmethod
    def identity(cls, channels: int) -> "BnParams":
        """Statistics that make the layer the identity up to the epsilon."""
        return cls(np.zeros(channels), np.ones(channels) - BN_EPS, np.ones(channels), np.zeros(channels))

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "running_mean": self.running_mean,
            "running_var": self.running_var,
            "scale": self.scale,
            "shift": self.shift,
        }


def batchnorm_inference(bn: BnParams, x) -> np.ndarray:
    return (np.asarray(x) - bn.running_mean) / np.sqrt(bn.running_var + BN_EPS) * bn.scale + bn.shift


def batchnorm_inference_vjp(bn: BnParams, x, dout) -> tuple[BnParams, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    dout = np.asarray(dout, dtype=np.float64)
    inv = 1.0 / np.sqrt(bn.running_var + BN_EPS)
    xhat = (x - bn.running_mean) * inv
    zeros = np.zeros_like(bn.scale)
    flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
    grads = BnParams(zeros, zeros.copy(), flat(dout * xhat).sum(0), flat(dout).sum(0))
    return grads, dout * bn.scale * inv


def update_running_stats(bn: BnParams, batch, momentum: float = 0.1) -> BnParams:
    """Training-mode statistics update on a ``(N, C)`` batch."""
    batch = np.asarray(batch, dtype=np.float64)
    mean = batch.mean(axis=0)
    var = batch.var(axis=0, ddof=1) if batch.shape[0] > 1 else np.zeros_like(mean)
    return replace(
        bn,
        running_mean=(1 - momentum) * bn.running_mean + momentum * mean,
        running_var=(1 - momentum) * bn.running_var + momentum * var,
    )


# -- ensemble fusion ---------------------------------------------------------


@dataclass
class FusionParams:
    ecab_top: SmpParams
    ecab_bottom: SmpParams
    secab_global: SmpParams
    bn_top: BnParams
    bn_bottom: BnParams

    @property
    def channels(self) -> int:
        return self.secab_global.channels

    @classmethod
    def init(cls, channels: int, reduction: int, hidden_layers: int, rng: Rng) -> "FusionParams":
        return cls(
            SmpParams.init(channels, reduction, hidden_layers, rng.derive("ecab_top")),
            SmpParams.init(channels, reduction, hidden_layers, rng.derive("ecab_bottom")),
            SmpParams.init(channels, reduction, hidden_layers, rng.derive("secab_global")),
            BnParams.identity(channels),
            BnParams.identity(channels),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in ("ecab_top", "ecab_bottom", "secab_global", "bn_top", "bn_bottom"):
            for key, arr in getattr(self, name).arrays().items():
                out[f"{name}.{key}"] = arr
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "FusionParams":
        def sub(prefix):
            n = len(prefix) + 1
            return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}

        return cls(
            SmpParams.from_arrays(sub("ecab_top")),
            SmpParams.from_arrays(sub("ecab_bottom")),
            SmpParams.from_arrays(sub("secab_global")),
            BnParams(**sub("bn_top")),
            BnParams(**sub("bn_bottom")),
        )


@dataclass
class FusionOutput:
    theta_top: np.ndarray
    theta_bottom: np.ndarray
    tau_top_map: np.ndarray
    tau_bot_map: np.ndarray


def _fusion_check(fp: FusionParams, *maps):
    maps = [_check_map(m) for m in maps]
    for m in maps:
        _check_channels(fp.secab_global, m.shape[-3])
    return maps


def ensemble_fusion(fp: FusionParams, zeta_top, zeta_bottom, tau_global, use_secab: bool = True) -> FusionOutput:
    """Fuse student local halves with the (SECAB-reweighted) teacher global map.

    ``use_secab=False`` skips the global reweighting (the ablation without SECAB).
    """
    zeta_top, zeta_bottom, tau_global = _fusion_check(fp, zeta_top, zeta_bottom, tau_global)
    if use_secab:
        tau_p = tau_global * secab(fp.secab_global, tau_global)[..., None, None]
    else:
        tau_p = tau_global
    top_map = ecab(fp.ecab_top, zeta_top)[..., None, None] * tau_p
    bot_map = ecab(fp.ecab_bottom, zeta_bottom)[..., None, None] * tau_p
    return FusionOutput(
        theta_top=batchnorm_inference(fp.bn_top, gap(top_map)),
        theta_bottom=batchnorm_inference(fp.bn_bottom, gap(bot_map)),
        tau_top_map=top_map,
        tau_bot_map=bot_map,
    )


def ensemble_fusion_vjp(
    fp: FusionParams, zeta_top, zeta_bottom, tau_global, dtheta_top, dtheta_bottom, use_secab: bool = True
):
    """Returns ``(FusionParams of gradients, d_zeta_top, d_zeta_bottom, d_tau_global)``."""
    zeta_top, zeta_bottom, tau_global = _fusion_check(fp, zeta_top, zeta_bottom, tau_global)
    hw = tau_global.shape[-2] * tau_global.shape[-1]
    g = gap(tau_global)
    s = secab(fp.secab_global, tau_global) if use_secab else np.ones_like(g)
    psi_t = ecab(fp.ecab_top, zeta_top)
    psi_b = ecab(fp.ecab_bottom, zeta_bottom)

    # theta = BN(psi * s * g) because GAP commutes with channel-wise scaling
    bn_t, dpre_t = batchnorm_inference_vjp(fp.bn_top, psi_t * s * g, dtheta_top)
    bn_b, dpre_b = batchnorm_inference_vjp(fp.bn_bottom, psi_b * s * g, dtheta_bottom)

    ecab_t, dz_t = ecab_vjp(fp.ecab_top, zeta_top, dpre_t * s * g)
    ecab_b, dz_b = ecab_vjp(fp.ecab_bottom, zeta_bottom, dpre_b * s * g)
    dg = (dpre_t * psi_t + dpre_b * psi_b) * s
    dtau = np.broadcast_to((dg / hw)[..., None, None], tau_global.shape).copy()
    if use_secab:
        ds = (dpre_t * psi_t + dpre_b * psi_b) * g
        secab_g, dtau_s = secab_vjp(fp.secab_global, tau_global, ds)
        dtau += dtau_s
    else:
        secab_g = SmpParams([np.zeros_like(w) for w in fp.secab_global.weights],
                            [np.zeros_like(b) for b in fp.secab_global.biases])
    grads = FusionParams(ecab_t, ecab_b, secab_g, bn_t, bn_b)
    return grads, dz_t, dz_b, dtau


# -- normalisation and inference features -----------------------------------


def l2_normalize(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateInputError("cannot normalise a zero vector")
    return v / norm


def bmfn(f, f_flip) -> np.ndarray:
    """Mean of a feature and its flipped counterpart, scaled to unit L2 norm."""
    f = np.asarray(f, dtype=np.float64)
    f_flip = np.asarray(f_flip, dtype=np.float64)
    if f.shape != f_flip.shape:
        raise ShapeError(f"bmfn inputs differ in shape: {f.shape} vs {f_flip.shape}")
    return l2_normalize((f + f_flip) / 2.0)


def bmfn_vjp(f, f_flip, dout) -> tuple[np.ndarray, np.ndarray]:
    m = (np.asarray(f, dtype=np.float64) + np.asarray(f_flip, dtype=np.float64)) / 2.0
    norm = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateInputError("cannot normalise a zero vector")
    out = m / norm
    dout = np.asarray(dout, dtype=np.float64)
    dm = (dout - out * np.sum(out * dout, axis=-1, keepdims=True)) / norm
    return dm / 2.0, dm / 2.0


def pooled_parts(fmap) -> np.ndarray:
    """``[GAP(top) | GAP(bottom) | GAP(whole)]``, length 3C."""
    top, bottom = split_map(fmap)
    return np.concatenate([gap(top), gap(bottom), gap(fmap)], axis=-1)


def inference_feature(teacher_map, teacher_map_flipped) -> np.ndarray:
    """Retrieval descriptor: normalised pooled parts of both views, then BMFN."""
    a = _check_map(teacher_map)
    b = _check_map(teacher_map_flipped)
    if a.shape != b.shape:
        raise ShapeError(f"maps differ in shape: {a.shape} vs {b.shape}")
    return bmfn(l2_normalize(pooled_parts(a)), l2_normalize(pooled_parts(b)))
