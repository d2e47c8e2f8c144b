"""Morphological simplification network: a pooling-free 3D fully
convolutional net, its patch sampler, SSD training with Adam, and sliced
whole-volume inference.

Every layer is a 3x3x3 convolution, stride 1, zero padding 1, so spatial
size never changes. Hidden layers use a rectifier, the single-channel output
layer is linear. Skip edges ``(src, dst)`` concatenate the output of layer
``src`` (0 is the network input) onto the input of layer ``dst``, after the
output of layer ``dst - 1``.

Activations are channels-last arrays ``(batch, x, y, z, channels)``.
"""
from __future__ import annotations

import math
import struct
from functools import lru_cache
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from .errors import ConfigError, EmptyLabelError, GridMismatchError, NetworkFormatError
from .volume import BrainMask, Volume3, check_same_grid

__all__ = [
    "MsNet",
    "SamplingMap",
    "PatchPair",
    "TrainConfig",
    "AdamState",
    "Gradients",
    "conv3d",
    "sampling_map",
    "sample_centers",
    "sample_patch_pairs",
    "training_patches",
    "forward",
    "loss_ssd",
    "gradients",
    "adam_step",
    "train",
    "simplify_volume",
    "block_starts",
    "save_net",
    "load_net",
    "net_summary",
    "normalize_to_unit",
    "DEFAULT_CHANNELS",
    "DEFAULT_SKIPS",
]

DEFAULT_CHANNELS = (32, 64, 64, 64, 64, 64, 32, 32)
DEFAULT_SKIPS = ((1, 6), (2, 5))
PATCH = 16
BLOCK = 16
BLOCK_STRIDE = 8
NET_MAGIC = b"MSNET\x00\x01\x00"


# ---------------------------------------------------------------------------
# convolution kernels

_CHUNK_ELEMS = 1 << 22
RESIDUAL_FLOOR = 64 * np.finfo(np.float64).eps


def _pad(x):
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))


@lru_cache(maxsize=16)
def _phases(shape):
    """Spectrum of each of the 27 unit taps on a padded grid of ``shape``.

    Row ``f`` (a half-spectrum frequency, C order) holds
    ``exp(2 pi i sum_a f_a s_a / P_a)`` for tap offsets ``s`` in {-1, 0, 1}^3,
    so a kernel's spectrum is ``phases @ w.reshape(27, -1)``. Also returns the
    Hermitian weights that turn a half-spectrum sum into a full one.
    """
    px, py, pz = shape
    fx = np.arange(px)[:, None, None] / px
    fy = np.arange(py)[None, :, None] / py
    fz = np.arange(pz // 2 + 1)[None, None, :] / pz
    cols = []
    for a in (-1, 0, 1):
        for c in (-1, 0, 1):
            for e in (-1, 0, 1):
                cols.append(np.exp(2j * np.pi * (fx * a + fy * c + fz * e)).ravel())
    e = np.stack(cols, axis=1)
    weight = np.full(pz // 2 + 1, 2.0)
    weight[0] = 1.0
    if pz % 2 == 0:
        weight[-1] = 1.0
    weight = np.broadcast_to(weight, (px, py, pz // 2 + 1)).ravel()
    return e, weight


def _spectrum(a, shape):
    """``(B, *shape, C)`` real grid -> ``(F, B, C)`` half spectrum."""
    f = sfft.rfftn(a, axes=(1, 2, 3))
    return np.ascontiguousarray(f.reshape(f.shape[0], -1, f.shape[-1]).transpose(1, 0, 2))


def _unspectrum(f, shape):
    nb, c = f.shape[1], f.shape[2]
    half = (shape[0], shape[1], shape[2] // 2 + 1)
    g = f.transpose(1, 0, 2).reshape((nb,) + half + (c,))
    return sfft.irfftn(g, s=shape, axes=(1, 2, 3))


def _chunks(n_freq, cin, cout):
    step = max(1, _CHUNK_ELEMS // max(1, cin * cout))
    return [slice(i, min(i + step, n_freq)) for i in range(0, n_freq, step)]


def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray, keep_spectrum: bool = False):
    """Same-size 3x3x3 cross-correlation with zero padding 1.

    ``x`` is ``(B, X, Y, Z, Cin)``, ``w`` is ``(3, 3, 3, Cin, Cout)``,
    ``b`` is ``(Cout,)``.

    Evaluated in the frequency domain on the grid padded by one voxel per
    side: the circular wrap-around only reaches the padding ring, which is
    cropped, so the kept voxels equal the direct sum. With ``keep_spectrum``
    the input spectrum is returned too, for reuse by the backward pass.
    """
    xp = _pad(x)
    shape = xp.shape[1:4]
    cin, cout = w.shape[3], w.shape[4]
    e, _ = _phases(shape)
    xf = _spectrum(xp, shape)
    taps = w.reshape(27, cin * cout)
    yf = np.empty((xf.shape[0], xf.shape[1], cout), dtype=np.complex128)
    for sl in _chunks(xf.shape[0], cin, cout):
        yf[sl] = xf[sl] @ (e[sl] @ taps).reshape(-1, cin, cout)
    y = _unspectrum(yf, shape)[:, 1:-1, 1:-1, 1:-1, :] + b
    return (y, xf) if keep_spectrum else y


def _conv3d_backward(x, w, dout, xf=None):
    """Gradients of :func:`conv3d` w.r.t. input, weights and bias."""
    shape = tuple(n + 2 for n in x.shape[1:4])
    cin, cout = w.shape[3], w.shape[4]
    e, weight = _phases(shape)
    if xf is None:
        xf = _spectrum(_pad(x), shape)
    gf = _spectrum(_pad(dout), shape)
    taps = w.reshape(27, cin * cout)
    dxf = np.empty((gf.shape[0], gf.shape[1], cin), dtype=np.complex128)
    dw = np.zeros((27, cin * cout))
    for sl in _chunks(gf.shape[0], cin, cout):
        hf = (e[sl] @ taps).reshape(-1, cin, cout)
        dxf[sl] = gf[sl] @ np.conj(hf).transpose(0, 2, 1)
        dhf = (np.conj(xf[sl]).transpose(0, 2, 1) @ gf[sl]).reshape(-1, cin * cout)
        # tap s sits at lag -s of the correlation; sum the half spectrum
        dw += np.real((np.conj(e[sl]) * weight[sl, None]).T @ dhf)
    dw /= float(np.prod(shape))
    dx = _unspectrum(dxf, shape)[:, 1:-1, 1:-1, 1:-1, :]
    db = dout.reshape(-1, cout).sum(axis=0)
    return dx, dw.reshape(w.shape), db


# ---------------------------------------------------------------------------
# network

class MsNet:
    """Stack of 3x3x3 convolution layers with concatenation skips.

    Parameters
    ----------
    hidden : sequence of int
        Output channels of each hidden (rectified) layer.
    skips : sequence of (src, dst)
        Layers are numbered 1..L with L = len(hidden) + 1 the output
        layer; ``src`` may be 0 for the network input. Requires
        ``0 <= src <= dst - 2``.
    seed : int
        Seed for the fan-in scaled uniform initialisation.
    output_init : {"uniform", "identity"}
        ``"identity"`` needs a skip from the input to the output layer and
        starts the output layer as a pass-through of that channel (all its
        other weights zero), so training learns a correction to the input.
    """

    def __init__(self, hidden=DEFAULT_CHANNELS, skips=DEFAULT_SKIPS, seed: int = 0,
                 init: bool = True, output_init: str = "uniform"):
        self.hidden = tuple(int(c) for c in hidden)
        self.skips = tuple((int(s), int(d)) for s, d in skips)
        n = self.n_layers
        if any(c < 1 for c in self.hidden):
            raise ConfigError("channel counts must be positive")
        for s, d in self.skips:
            if not (0 <= s <= d - 2 and 2 <= d <= n):
                raise ConfigError(f"invalid skip ({s}, {d}) for {n} layers")
        if len(set(self.skips)) != len(self.skips):
            raise ConfigError("duplicate skip edges")
        self.weights = []
        self.biases = []
        rng = np.random.default_rng(seed)
        for layer in range(1, n + 1):
            cin, cout = self.in_channels(layer), self.out_channels(layer)
            if init:
                bound = math.sqrt(6.0 / (27 * cin))
                w = rng.uniform(-bound, bound, size=(3, 3, 3, cin, cout))
            else:
                w = np.zeros((3, 3, 3, cin, cout))
            self.weights.append(w)
            self.biases.append(np.zeros(cout))
        if output_init == "identity":
            if (0, n) not in self.skips:
                raise ConfigError("identity output init needs a skip from 0 to the output layer")
            w = self.weights[-1]
            w[...] = 0.0
            w[1, 1, 1, self.input_channel_offset(n, 0), 0] = 1.0
        elif output_init != "uniform":
            raise ConfigError(f"unknown output init {output_init!r}")

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def out_channels(self, layer: int) -> int:
        if layer == 0:
            return 1
        if layer == self.n_layers:
            return 1
        return self.hidden[layer - 1]

    def skip_sources(self, layer: int) -> list:
        return [s for s, d in self.skips if d == layer]

    def input_channel_offset(self, layer: int, source: int) -> int:
        """Position of ``source``'s first channel in ``layer``'s concatenated input."""
        if source == layer - 1:
            return 0
        off = self.out_channels(layer - 1)
        for s in self.skip_sources(layer):
            if s == source:
                return off
            off += self.out_channels(s)
        raise ValueError(f"layer {layer} does not read layer {source}")

    def in_channels(self, layer: int) -> int:
        return self.out_channels(layer - 1) + sum(self.out_channels(s) for s in self.skip_sources(layer))

    def parameters(self) -> list:
        """Flat list ``[w1, b1, w2, b2, ...]`` (shared, not copied)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def copy(self) -> "MsNet":
        net = MsNet(self.hidden, self.skips, init=False)
        net.weights = [w.copy() for w in self.weights]
        net.biases = [b.copy() for b in self.biases]
        return net

    @classmethod
    def identity(cls) -> "MsNet":
        """Single linear layer whose kernel passes the centre voxel through."""
        net = cls(hidden=(), skips=(), init=False)
        net.weights[0][1, 1, 1, 0, 0] = 1.0
        return net

    def _run(self, x, keep: bool = False):
        """Forward pass; with ``keep`` also the layer inputs and their spectra."""
        outs = [x]
        inputs = []
        spectra = []
        n = self.n_layers
        for layer in range(1, n + 1):
            parts = [outs[layer - 1]] + [outs[s] for s in self.skip_sources(layer)]
            inp = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=-1)
            if keep:
                z, xf = conv3d(inp, self.weights[layer - 1], self.biases[layer - 1], True)
                inputs.append(inp)
                spectra.append(xf)
            else:
                z = conv3d(inp, self.weights[layer - 1], self.biases[layer - 1])
            if layer < n:
                z = np.maximum(z, 0.0)
            outs.append(z)
        return outs, inputs, spectra

    def __call__(self, x):
        return forward(self, x)


def forward(net: MsNet, x) -> np.ndarray:
    """Apply the net to one grid ``(X, Y, Z)`` or a batch ``(B, X, Y, Z)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected (X, Y, Z) or (B, X, Y, Z), got shape {x.shape}")
    outs, _, _ = net._run(x[..., None])
    y = outs[-1][..., 0]
    return y[0] if single else y


def loss_ssd(pred, target) -> float:
    """Sum of squared differences over all voxels."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target
    return float(np.sum(d * d))


@dataclass
class Gradients:
    """Per-layer weight and bias gradients, plus the batch-mean loss."""

    weights: list
    biases: list
    loss: float

    def flat(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def _as_batch(batch, dtype):
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        x, y = batch
    else:
        batch = list(batch)
        if not batch:
            raise ValueError("empty batch")
        x = np.stack([p.complex for p in batch])
        y = np.stack([p.simple for p in batch])
    x = np.asarray(x, dtype=dtype)
    y = np.asarray(y, dtype=dtype)
    if x.ndim == 3:
        x, y = x[None], y[None]
    if x.shape != y.shape or x.shape[0] == 0:
        raise ValueError("input and target batches must match and be nonempty")
    return x, y


def gradients(net: MsNet, batch) -> Gradients:
    """Exact gradients of the batch-mean SSD loss.

    ``batch`` is a list of :class:`PatchPair` or a tuple ``(inputs, targets)``
    of arrays shaped ``(B, X, Y, Z)``.
    """
    x, y = _as_batch(batch, np.float64)
    nb = x.shape[0]
    outs, inputs, spectra = net._run(x[..., None], keep=True)
    pred = outs[-1][..., 0]
    diff = pred - y
    # residuals at the rounding level of the FFT convolution count as exact
    # fits; otherwise Adam rescales that noise into full-size steps
    diff[np.abs(diff) <= RESIDUAL_FLOOR * max(1.0, float(np.max(np.abs(y))))] = 0.0
    loss = float(np.sum(diff * diff)) / nb
    n = net.n_layers
    douts = [None] * (n + 1)
    douts[n] = (2.0 / nb) * diff[..., None]
    dws = [None] * n
    dbs = [None] * n
    for layer in range(n, 0, -1):
        dz = douts[layer]
        if layer < n:
            dz = dz * (outs[layer] > 0)
        dinp, dws[layer - 1], dbs[layer - 1] = _conv3d_backward(
            inputs[layer - 1], net.weights[layer - 1], dz, spectra[layer - 1])
        if layer == 1:
            break
        # split the concatenated input gradient back onto its sources
        srcs = [layer - 1] + net.skip_sources(layer)
        start = 0
        for s in srcs:
            width = net.out_channels(s)
            if s > 0:
                g = dinp[..., start:start + width]
                douts[s] = g if douts[s] is None else douts[s] + g
            start += width
    return Gradients(dws, dbs, loss)


# ---------------------------------------------------------------------------
# optimiser and training

@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    patches_per_pair: int = 20000
    patch_size: int = PATCH
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "eps", "batch_size", "epochs", "patches_per_pair", "patch_size"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_mapping(cls, values: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        kw = {f.name: getattr(base, f.name) for f in fields(cls)} if base else {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            if raw is None:
                continue
            if key not in types:
                raise ConfigError(f"unknown training key {key!r}")
            try:
                kw[key] = int(raw) if types[key] in ("int", int) else float(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kw)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, net: MsNet) -> "AdamState":
        params = net.parameters()
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(net: MsNet, grads: Gradients, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update; returns ``(new_net, new_state)``."""
    params = net.parameters()
    g = grads.flat()
    if len(g) != len(params) or len(state.m) != len(params) or any(
            a.shape != p.shape for a, p in zip(g, params)) or any(
            a.shape != p.shape for a, p in zip(state.m, params)):
        raise ValueError("gradient/state shapes do not match the network")
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_m, new_v, new_p = [], [], []
    for p, gi, m, v in zip(params, g, state.m, state.v):
        m = b1 * m + (1.0 - b1) * gi
        v = b2 * v + (1.0 - b2) * gi * gi
        new_p.append(p - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps))
        new_m.append(m)
        new_v.append(v)
    out = net.copy()
    out.weights = new_p[0::2]
    out.biases = new_p[1::2]
    return out, AdamState(new_m, new_v, t)


def train(net: MsNet, pairs, config: TrainConfig, log=None):
    """Mini-batch Adam on SSD; returns ``(trained_net, per_epoch_mean_loss)``.

    Batches are reshuffled every epoch from ``config.seed``. The reported
    loss of an epoch is the mean per-patch SSD seen during that epoch.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no training pairs")
    x = np.stack([p.complex for p in pairs]).astype(np.float64)
    y = np.stack([p.simple for p in pairs]).astype(np.float64)
    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros_like(net)
    history = []
    bs = int(config.batch_size)
    for epoch in range(int(config.epochs)):
        order = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            grads = gradients(net, (x[idx], y[idx]))
            total += grads.loss * len(idx)
            net, state = adam_step(net, grads, state, config)
        history.append(total / len(pairs))
        if log is not None:
            log(epoch, history[-1])
    return net, history


# ---------------------------------------------------------------------------
# patch sampling

@dataclass
class SamplingMap:
    """Per-voxel centre probabilities, zero outside ``mask``."""

    prob: np.ndarray
    mask: BrainMask


def sampling_map(g: Volume3, mask: BrainMask) -> SamplingMap:
    """Centre probabilities proportional to ``|dg/dx| + |dg/dy| + |dg/dz|``.

    Central differences, normalised over the mask. A (numerically) flat
    image falls back to the uniform distribution over the mask.
    """
    check_same_grid(g, mask)
    m = mask.data != 0
    if not m.any():
        raise EmptyLabelError("sampling mask is empty")
    grads = np.gradient(g.data)
    num = np.abs(grads[0]) + np.abs(grads[1]) + np.abs(grads[2])
    num = np.where(m, num, 0.0)
    total = float(num.sum())
    if total < 1e-12:
        prob = m / float(m.sum())
    else:
        prob = num / total
    return SamplingMap(prob, mask)


def _valid_centres(dims, size):
    lo = size // 2
    hi = size - size // 2
    ok = np.zeros(dims, dtype=bool)
    sl = tuple(slice(lo, n - hi + 1) for n in dims)
    ok[sl] = True
    return ok


def sample_centers(smap: SamplingMap, n: int, seed: int, size: int = PATCH) -> np.ndarray:
    """Draw ``n`` patch centres, shape ``(n, 3)``.

    Only centres whose ``size``-cube patch ``[c - size//2, c + size - size//2)``
    fits in the grid are eligible; the map is renormalised over them.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    dims = smap.prob.shape
    p = np.where(_valid_centres(dims, size), smap.prob, 0.0).ravel()
    total = p.sum()
    if not total > 0:
        raise EmptyLabelError(f"no valid {size}^3 patch centres with positive probability")
    idx = np.flatnonzero(p)
    probs = p[idx] / total
    rng = np.random.default_rng(seed)
    picks = idx[rng.choice(len(idx), size=int(n), p=probs)]
    return np.stack(np.unravel_index(picks, dims), axis=-1)


@dataclass
class PatchPair:
    complex: np.ndarray
    simple: np.ndarray
    center: tuple


def sample_patch_pairs(complex_vol: Volume3, simple_vol: Volume3, smap: SamplingMap,
                       n: int, seed: int, size: int = PATCH) -> list:
    """Co-located complex/simple patches at centres drawn from ``smap``.

    Patches are read-only views into the volumes.
    """
    check_same_grid(complex_vol, simple_vol)
    if smap.prob.shape != complex_vol.dims:
        raise GridMismatchError("sampling map and volumes differ in size")
    centres = sample_centers(smap, n, seed, size)
    lo = size // 2
    out = []
    for c in centres:
        sl = tuple(slice(int(ci) - lo, int(ci) - lo + size) for ci in c)
        out.append(PatchPair(complex_vol.data[sl], simple_vol.data[sl], tuple(int(ci) for ci in c)))
    return out


def normalize_to_unit(ref: np.ndarray):
    """Affine map sending ``ref``'s min/max to 0/1, and its inverse."""
    lo, hi = float(np.min(ref)), float(np.max(ref))
    scale = hi - lo if hi > lo else 1.0
    return (lambda a: (a - lo) / scale), (lambda a: a * scale + lo)


def training_patches(complex_vol: Volume3, simple_vol: Volume3, mask: BrainMask | None,
                     n: int, seed: int, size: int = PATCH) -> list:
    """Normalise a complex/simple pair with the complex min/max, then sample.

    Probabilities follow the gradient map of the complex image.
    """
    fwd, _ = normalize_to_unit(complex_vol.data)
    cn = complex_vol.with_data(fwd(complex_vol.data))
    sn = simple_vol.with_data(fwd(simple_vol.data))
    if mask is None:
        mask = BrainMask(np.ones(complex_vol.dims, dtype=np.int32), complex_vol.spacing)
    smap = sampling_map(cn, mask)
    return sample_patch_pairs(cn, sn, smap, n, seed, size)


# ---------------------------------------------------------------------------
# whole-volume inference

def block_starts(nz: int, block: int = BLOCK, stride: int = BLOCK_STRIDE) -> list:
    """z offsets of the overlapping slabs; the last slab is aligned to the end."""
    if nz <= block:
        return [0]
    starts = list(range(0, nz - block + 1, stride))
    if starts[-1] != nz - block:
        starts.append(nz - block)
    return starts


def simplify_volume(net: MsNet, vol: Volume3, normalize: bool = True) -> Volume3:
    """Run the net slab by slab over z and average the overlaps.

    Slabs hold 16 axial slices and start every 8 slices; volumes thinner than
    16 slices are zero-padded in z and cropped afterwards. With ``normalize``
    the input is mapped to [0, 1] by its own min/max and the output mapped
    back.
    """
    data = vol.data
    if normalize:
        fwd, inv = normalize_to_unit(data)
        data = fwd(data)
    nx, ny, nz = data.shape
    work = data
    if nz < BLOCK:
        work = np.pad(data, ((0, 0), (0, 0), (0, BLOCK - nz)))
    total = np.zeros(work.shape, dtype=np.float64)
    count = np.zeros(work.shape[2], dtype=np.float64)
    for z0 in block_starts(work.shape[2]):
        total[:, :, z0:z0 + BLOCK] += forward(net, work[:, :, z0:z0 + BLOCK])
        count[z0:z0 + BLOCK] += 1.0
    out = (total / count)[:, :, :nz]
    if normalize:
        out = inv(out)
    return vol.with_data(out)


# ---------------------------------------------------------------------------
# serialisation

def save_net(net: MsNet, path) -> None:
    """Binary layout, all little-endian:

    magic (8 bytes) | u32 n_hidden | u32 n_skips | u32 channels[n_hidden] |
    (u32 src, u32 dst)[n_skips] | f64 parameters, layer by layer, weights
    ``(3, 3, 3, cin, cout)`` in C order followed by the bias.
    """
    buf = bytearray(NET_MAGIC)
    buf += struct.pack("<II", len(net.hidden), len(net.skips))
    buf += struct.pack(f"<{len(net.hidden)}I", *net.hidden)
    for s, d in net.skips:
        buf += struct.pack("<II", s, d)
    for p in net.parameters():
        buf += np.ascontiguousarray(p, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_net(path) -> MsNet:
    blob = Path(path).read_bytes()
    if blob[:8] != NET_MAGIC:
        raise NetworkFormatError(f"{path}: not a network file")
    try:
        nh, ns = struct.unpack_from("<II", blob, 8)
        off = 16
        hidden = struct.unpack_from(f"<{nh}I", blob, off)
        off += 4 * nh
        skips = []
        for _ in range(ns):
            skips.append(struct.unpack_from("<II", blob, off))
            off += 8
    except struct.error as exc:
        raise NetworkFormatError(f"{path}: truncated header") from exc
    net = MsNet(hidden, skips, init=False)
    params = []
    for p in net.parameters():
        nbytes = p.size * 8
        if off + nbytes > len(blob):
            raise NetworkFormatError(f"{path}: truncated parameters")
        params.append(np.frombuffer(blob, dtype="<f8", count=p.size, offset=off).reshape(p.shape).copy())
        off += nbytes
    if off != len(blob):
        raise NetworkFormatError(f"{path}: {len(blob) - off} trailing bytes")
    net.weights = params[0::2]
    net.biases = params[1::2]
    return net


def net_summary(net: MsNet) -> str:
    """Human-readable layer table."""
    lines = ["layer\tin\tout\tactivation\tskip_from"]
    for layer in range(1, net.n_layers + 1):
        act = "linear" if layer == net.n_layers else "relu"
        src = ",".join(str(s) for s in net.skip_sources(layer)) or "-"
        lines.append(f"{layer}\t{net.in_channels(layer)}\t{net.out_channels(layer)}\t{act}\t{src}")
    lines.append(f"parameters\t{net.n_parameters()}")
    return "\n".join(lines) + "\n"
