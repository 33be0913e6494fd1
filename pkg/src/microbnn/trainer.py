"""Desk-scale training with binary weights in the forward pass.

Real-valued latent weights shadow every weight bit; the forward pass
always binarizes them (>= 0 becomes +1, matching the engine), so the
network being optimized is the network that ships. Gradients pass
straight through the binarization where the latent magnitude is at
most 1 and are zero outside, and latents are clamped back to [-1, 1]
after every optimizer step.

Batch norm uses batch statistics while training and exponential
running averages (momentum 0.9) in the shipped model. The final block
trains without BN or activation: its raw accumulator values are the
class scores, scaled by 1/sqrt(fan-in) before the softmax so the
cross-entropy starts in a sane range.

All arithmetic that decides shipped bits is the engine's arithmetic:
the per-epoch evaluation binarizes a snapshot and thresholds exactly
as the fused path does, which the tests cross-check sample by sample.

Everything is driven by one seeded generator: same seed, same
serialized model bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .bitops import BitTensor
from .errors import BudgetError, ModelFormatError, TrainingDivergedError
from .inference import InputTensor, network_forward
from . import dataio
from . import memory
from . import model as m

CHECKPOINT_MAGIC = b"EBNL"
CHECKPOINT_VERSION = 1
BN_MOMENTUM = 0.9
GAMMA_FLOOR = 1e-6  # keeps gamma foldable (division by gamma)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 100
    learning_rate: float = 1e-3
    seed: int = 0
    budget_bytes: int | None = None
    eval_split: float = 0.1

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.eval_split < 1.0:
            raise ValueError("eval_split must be in [0, 1)")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    net: m.Network
    history: list[EpochStats]
    latent: "LatentNetwork"


@dataclass
class EvalResult:
    accuracy: float
    per_class_correct: np.ndarray
    per_class_total: np.ndarray


def _binarize(latent: np.ndarray) -> np.ndarray:
    return np.where(latent >= 0, 1.0, -1.0)


class _Adam:
    """Adam over an ordered parameter list, state per parameter."""

    def __init__(self, lr: float, params: list[np.ndarray]):
        self.lr = lr
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]):
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, mm, vv in zip(params, grads, self.m, self.v):
            mm *= b1
            mm += (1 - b1) * g
            vv *= b2
            vv += (1 - b2) * g * g
            p -= self.lr * (mm / c1) / (np.sqrt(vv / c2) + eps)


class LatentNetwork:
    """Training-time shadow of a Network: real latents plus BN state.

    The arch argument fixes geometry only; its placeholder weight bits
    are ignored and latents start from the seeded generator.
    """

    def __init__(self, arch: m.Network, rng: np.random.Generator):
        m.ensure_valid(arch)
        self.arch = arch
        self.latents: list[np.ndarray] = []
        self.gammas: list[np.ndarray] = []
        self.betas: list[np.ndarray] = []
        self.run_mean: list[np.ndarray] = []
        self.run_var: list[np.ndarray] = []
        self.epsilon = arch.blocks[0].bn[0].epsilon if arch.blocks else m.DEFAULT_EPSILON
        for blk in arch.blocks:
            if isinstance(blk, m.FusedFC):
                shape = (blk.out_units, blk.in_length)
            else:
                shape = (blk.filters, blk.in_channels * blk.kernel * blk.kernel)
            self.latents.append(rng.uniform(-0.5, 0.5, shape))
            c = m.out_channels(blk)
            self.gammas.append(np.ones(c))
            self.betas.append(np.zeros(c))
            self.run_mean.append(np.zeros(c))
            self.run_var.append(np.ones(c))

    def trainable(self) -> list[np.ndarray]:
        """Latents for every block; gamma/beta for all but the final."""
        params = list(self.latents)
        for g, b in zip(self.gammas[:-1], self.betas[:-1]):
            params.extend((g, b))
        return params

    def clamp(self):
        for lat in self.latents:
            np.clip(lat, -1.0, 1.0, out=lat)
        for g in self.gammas[:-1]:
            sign = np.where(g >= 0, 1.0, -1.0)
            np.copyto(g, sign * np.maximum(np.abs(g), GAMMA_FLOOR))

    def snapshot(self) -> m.Network:
        """Concrete Network: binarized weights, running BN, identity BN
        on the final block (its scores are read pre-activation)."""
        blocks = []
        for i, blk in enumerate(self.arch.blocks):
            bits = _binarize(self.latents[i]).astype(np.int8)
            c = m.out_channels(blk)
            if i == len(self.arch.blocks) - 1:
                bn = [m.BnParams(1.0, 0.0, 0.0, 1.0, self.epsilon)
                      for _ in range(c)]
            else:
                bn = [m.BnParams(float(self.gammas[i][j]), float(self.betas[i][j]),
                                 float(self.run_mean[i][j]), float(self.run_var[i][j]),
                                 self.epsilon)
                      for j in range(c)]
            if isinstance(blk, m.FusedFC):
                w = BitTensor.from_planes(bits.reshape(1, blk.out_units, blk.in_length))
                blocks.append(m.FusedFC(blk.out_units, blk.in_length, w, bn))
            else:
                k2 = blk.kernel * blk.kernel
                w = BitTensor.from_planes(bits.reshape(blk.filters, blk.in_channels, k2))
                if isinstance(blk, m.FusedConvPool):
                    blocks.append(m.FusedConvPool(blk.filters, blk.in_channels,
                                                  blk.kernel, blk.stride,
                                                  blk.pool_size, blk.pool_stride,
                                                  w, bn))
                else:
                    blocks.append(m.FusedConv(blk.filters, blk.in_channels,
                                              blk.kernel, blk.stride, w, bn))
        net = m.Network(self.arch.input_spec, blocks)
        m.ensure_valid(net)
        return net


def _cols_of(x: np.ndarray, k: int, stride: int):
    """Batched im2col: (N, C, H, W) -> (N, oh*ow, C*k*k)."""
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    cols = np.empty((n, oh * ow, c * k * k), dtype=x.dtype)
    i = 0
    for y in range(oh):
        for xx in range(ow):
            cols[:, i] = x[:, :, y * stride:y * stride + k,
                           xx * stride:xx * stride + k].reshape(n, -1)
            i += 1
    return cols, oh, ow


def _cols_grad(dcols: np.ndarray, x_shape, k: int, stride: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    i = 0
    for y in range(oh):
        for xx in range(ow):
            dx[:, :, y * stride:y * stride + k, xx * stride:xx * stride + k] \
                += dcols[:, i].reshape(n, c, k, k)
            i += 1
    return dx


def _pool_forward(z: np.ndarray, size: int, stride: int):
    n, c, h, w = z.shape
    ph = (h - size) // stride + 1
    pw = (w - size) // stride + 1
    out = np.empty((n, c, ph, pw), dtype=z.dtype)
    idx = np.empty((n, c, ph, pw), dtype=np.int64)  # flat index into h*w
    for py in range(ph):
        for px in range(pw):
            y0, x0 = py * stride, px * stride
            win = z[:, :, y0:y0 + size, x0:x0 + size].reshape(n, c, -1)
            am = win.argmax(axis=-1)
            out[:, :, py, px] = np.take_along_axis(win, am[..., None], -1)[..., 0]
            idx[:, :, py, px] = (y0 + am // size) * w + (x0 + am % size)
    return out, idx


def _pool_backward(dout: np.ndarray, idx: np.ndarray, z_shape) -> np.ndarray:
    n, c, h, w = z_shape
    dz = np.zeros((n, c, h * w), dtype=dout.dtype)
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(dz, (ni, ci, idx), dout)  # overlaps accumulate
    return dz.reshape(z_shape)


def _bn_forward(z2: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    """z2 is (rows, channels); returns y2 and the backward cache."""
    mu = z2.mean(axis=0)
    var = z2.var(axis=0)  # biased, matches the running estimate
    ivs = 1.0 / np.sqrt(var + eps)
    xhat = (z2 - mu) * ivs
    y2 = gamma * xhat + beta
    return y2, (xhat, ivs, mu, var)


def _bn_backward(dy2: np.ndarray, cache, gamma: np.ndarray):
    xhat, ivs, _, _ = cache
    nt = dy2.shape[0]
    dgamma = (dy2 * xhat).sum(axis=0)
    dbeta = dy2.sum(axis=0)
    dxhat = dy2 * gamma
    dz2 = (ivs / nt) * (nt * dxhat - dxhat.sum(axis=0)
                        - xhat * (dxhat * xhat).sum(axis=0))
    return dz2, dgamma, dbeta


class _BatchGraph:
    """One forward/backward pass over a batch, f64 throughout."""

    def __init__(self, lat: LatentNetwork, update_running: bool):
        self.lat = lat
        self.update_running = update_running
        self.caches: list[dict] = []

    def forward(self, x: np.ndarray) -> np.ndarray:
        lat = self.lat
        self.caches = []
        last = len(lat.arch.blocks) - 1
        for i, blk in enumerate(lat.arch.blocks):
            cache: dict = {}
            wb = _binarize(lat.latents[i])
            if isinstance(blk, m.FusedFC):
                xf = x.reshape(x.shape[0], -1)
                z = xf @ wb.T
                cache.update(kind="fc", x=xf)
            else:
                if x.ndim == 2:  # upstream fc output is a (1, 1, U) plane
                    x = x.reshape(x.shape[0], 1, 1, -1)
                cols, oh, ow = _cols_of(x, blk.kernel, blk.stride)
                z = (cols @ wb.T).transpose(0, 2, 1).reshape(
                    x.shape[0], blk.filters, oh, ow)
                cache.update(kind="conv", cols=cols, x_shape=x.shape)
                if isinstance(blk, m.FusedConvPool):
                    cache["pre_pool_shape"] = z.shape
                    z, pidx = _pool_forward(z, blk.pool_size, blk.pool_stride)
                    cache["pool_idx"] = pidx
            cache["wb"] = wb
            cache["z_shape"] = z.shape
            if i == last:
                self.caches.append(cache)
                return z.reshape(z.shape[0], -1)  # raw scores
            if z.ndim == 4:
                # channels last so each column is one BN channel
                z2 = z.transpose(0, 2, 3, 1).reshape(-1, z.shape[1])
            else:
                z2 = z
            y2, bn_cache = _bn_forward(z2, lat.gammas[i], lat.betas[i], lat.epsilon)
            if self.update_running:
                _, _, mu, var = bn_cache
                lat.run_mean[i] *= BN_MOMENTUM
                lat.run_mean[i] += (1 - BN_MOMENTUM) * mu
                lat.run_var[i] *= BN_MOMENTUM
                lat.run_var[i] += (1 - BN_MOMENTUM) * var
            a2 = np.where(y2 >= 0, 1.0, -1.0)
            cache.update(bn=bn_cache, y2=y2)
            self.caches.append(cache)
            if z.ndim == 4:
                n, c, oh, ow = z.shape
                x = a2.reshape(n, oh, ow, c).transpose(0, 3, 1, 2)
            else:
                x = a2
        raise AssertionError("unreachable: empty network")

    def backward(self, dscores: np.ndarray) -> list[np.ndarray]:
        """dscores (N, classes) -> gradients in trainable() order."""
        lat = self.lat
        dlat: list[np.ndarray] = [None] * len(lat.latents)
        dgb: list[tuple] = [None] * len(lat.latents)
        dz = dscores
        for i in range(len(lat.arch.blocks) - 1, -1, -1):
            blk = lat.arch.blocks[i]
            cache = self.caches[i]
            if i < len(lat.arch.blocks) - 1:
                # activation STE then BN, in channels-last 2D view
                da2 = dz  # already 2D (rows, channels) from the block above
                dy2 = da2 * (np.abs(cache["y2"]) <= 1.0)
                dz2, dgamma, dbeta = _bn_backward(dy2, cache["bn"], lat.gammas[i])
                dgb[i] = (dgamma, dbeta)
                if len(cache["z_shape"]) == 4:
                    n, c, oh, ow = cache["z_shape"]
                    dz = dz2.reshape(n, oh, ow, c).transpose(0, 3, 1, 2)
                else:
                    dz = dz2
            else:
                dz = dz.reshape(cache["z_shape"])
            if cache["kind"] == "fc":
                dw = dz.T @ cache["x"]
                dx = dz @ cache["wb"]
            else:
                if "pool_idx" in cache:
                    dz = _pool_backward(dz, cache["pool_idx"],
                                        cache["pre_pool_shape"])
                n, f = dz.shape[0], dz.shape[1]
                dz_cols = dz.reshape(n, f, -1).transpose(0, 2, 1)  # (N, P, F)
                dw = np.einsum("npf,npk->fk", dz_cols, cache["cols"])
                dcols = dz_cols @ cache["wb"]
                dx = _cols_grad(dcols, cache["x_shape"], blk.kernel, blk.stride)
            dlat[i] = dw * (np.abs(lat.latents[i]) <= 1.0)  # weight STE
            if i and cache["kind"] == "fc":
                # hand the previous block a channels-last 2D view
                prev_shape = self.caches[i - 1]["z_shape"]
                if len(prev_shape) == 4:
                    pn, pc, ph, pw = prev_shape
                    dx = dx.reshape(pn, pc, ph, pw).transpose(0, 2, 3, 1)
                    dx = dx.reshape(-1, pc)
            elif i and cache["kind"] == "conv":
                pn, pc = dx.shape[0], dx.shape[1]
                dx = dx.transpose(0, 2, 3, 1).reshape(-1, pc)
            dz = dx
        grads = list(dlat)
        for i in range(len(lat.latents) - 1):
            grads.extend(dgb[i])
        return grads


def _softmax_ce(scores: np.ndarray, labels: np.ndarray, scale: float):
    """Mean cross-entropy over scaled scores; returns loss and dscores."""
    logits = scores * scale
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    p = e / e.sum(axis=1, keepdims=True)
    n = scores.shape[0]
    eps = 1e-12
    loss = -np.log(p[np.arange(n), labels] + eps).mean()
    dp = p.copy()
    dp[np.arange(n), labels] -= 1.0
    return loss, dp * (scale / n)


def predict_batch(net: m.Network, x: np.ndarray) -> np.ndarray:
    """Vectorized labels for a (N, C, H, W) f32 batch.

    Bit-for-bit the fused engine's answer: block sums are exact in f64
    (binary sums are integers; real first-layer sums stay inside the
    f64 grid), rounded once to f32, then thresholded against the same
    folded (tau, flip) pairs the engine uses.
    """
    m.ensure_valid(net)
    x = x.astype(np.float64)
    for i, blk in enumerate(net.blocks):
        wb = blk.weights.to_planes().astype(np.float64)
        if isinstance(blk, m.FusedFC):
            z = x.reshape(x.shape[0], -1) @ wb.reshape(blk.out_units, -1).T
        else:
            if x.ndim == 2:
                x = x.reshape(x.shape[0], 1, 1, -1)
            cols, oh, ow = _cols_of(x, blk.kernel, blk.stride)
            wmat = wb.reshape(blk.filters, -1)
            z = (cols @ wmat.T).transpose(0, 2, 1).reshape(
                x.shape[0], blk.filters, oh, ow)
            if isinstance(blk, m.FusedConvPool):
                z, _ = _pool_forward(z, blk.pool_size, blk.pool_stride)
        z32 = z.astype(np.float32)
        if i == len(net.blocks) - 1:
            return np.argmax(z32.reshape(z32.shape[0], -1), axis=1)
        taus = np.array([m.fold_bn(p).threshold for p in blk.bn], np.float32)
        flips = np.array([m.fold_bn(p).flip for p in blk.bn])
        if z32.ndim == 4:
            ge = z32 >= taus[None, :, None, None]
            bits = np.where(flips[None, :, None, None], ~ge, ge)
        else:
            ge = z32 >= taus[None, :]
            bits = np.where(flips[None, :], ~ge, ge)
        x = np.where(bits, 1.0, -1.0)
    raise AssertionError("unreachable: empty network")


def _dataset_matrix(data: dataio.LabeledDataset):
    return data.stacked(), data.labels


def train(arch: m.Network, data: dataio.LabeledDataset,
          cfg: TrainConfig) -> TrainResult:
    """Fit arch's weights on data; deterministic in cfg.seed."""
    m.ensure_valid(arch)
    if len(data) == 0:
        raise ValueError("dataset is empty")
    classes = arch.blocks[-1].out_units
    if data.class_count != classes:
        raise ValueError(f"dataset has {data.class_count} classes but the "
                         f"final block emits {classes}")
    if data.sample_shape != arch.input_spec.shape:
        raise ValueError(f"sample shape {data.sample_shape} does not match "
                         f"input {arch.input_spec.shape}")
    if cfg.budget_bytes is not None:
        total = memory.memory_report(arch).M
        if total > cfg.budget_bytes:
            raise BudgetError(f"model needs {total} B, budget is "
                              f"{cfg.budget_bytes} B")

    rng = np.random.default_rng(cfg.seed)
    lat = LatentNetwork(arch, rng)
    opt = _Adam(cfg.learning_rate, lat.trainable())
    scale = 1.0 / np.sqrt(arch.blocks[-1].in_length)

    train_ds, eval_ds = (data.split(cfg.eval_split, cfg.seed)
                         if cfg.eval_split > 0 else (data, data))
    if len(train_ds) == 0:
        raise ValueError("eval_split leaves no training samples")
    xs, ys = _dataset_matrix(train_ds)
    ex, ey = _dataset_matrix(eval_ds)

    history: list[EpochStats] = []
    graph = _BatchGraph(lat, update_running=True)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_ds))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            if len(sel) < 2 and len(order) > 2:
                continue  # a 1-sample tail has no batch statistics
            scores = graph.forward(xs[sel].astype(np.float64))
            loss, dscores = _softmax_ce(scores, ys[sel], scale)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, f"loss={loss!r}")
            # sign() swallows NaN activations, so watch the statistics too
            if not all(np.all(np.isfinite(rm)) and np.all(np.isfinite(rv))
                       for rm, rv in zip(lat.run_mean, lat.run_var)):
                raise TrainingDivergedError(epoch, "non-finite batch statistics")
            losses.append(loss)
            grads = graph.backward(dscores)
            opt.step(lat.trainable(), grads)
            lat.clamp()
        snap = lat.snapshot()
        acc = float(np.mean(predict_batch(snap, ex) == ey))
        history.append(EpochStats(epoch, float(np.mean(losses)), acc))
    return TrainResult(lat.snapshot(), history, lat)


def evaluate(net: m.Network, data: dataio.LabeledDataset) -> EvalResult:
    """Accuracy via the fused engine, one sample at a time."""
    m.ensure_valid(net)
    correct = np.zeros(data.class_count, dtype=np.int64)
    total = np.zeros(data.class_count, dtype=np.int64)
    spec = net.input_spec
    for sample, label in zip(data.samples, data.labels):
        if spec.kind == "binary":
            planes = np.where(sample.data >= 0, 1, -1).astype(np.int8)
            out = network_forward(net, BitTensor.from_planes(planes))
        else:
            out = network_forward(net, sample)
        total[label] += 1
        correct[label] += int(out.label == label)
    acc = float(correct.sum() / max(1, total.sum()))
    return EvalResult(acc, correct, total)


def save_checkpoint(lat: LatentNetwork, model_path, sidecar_path=None):
    """Model file plus latent sidecar; optimizer state is not kept."""
    model_path = str(model_path)
    sidecar_path = str(sidecar_path) if sidecar_path else model_path + ".latent"
    with open(model_path, "wb") as f:
        f.write(m.serialize(lat.snapshot()))
    parts = [CHECKPOINT_MAGIC, struct.pack("<HH", CHECKPOINT_VERSION,
                                           len(lat.latents))]
    for i in range(len(lat.latents)):
        flat = lat.latents[i].astype(np.float32).reshape(-1)
        parts.append(struct.pack("<I", flat.size))
        parts.append(flat.tobytes())
        c = lat.gammas[i].size
        parts.append(struct.pack("<H", c))
        for arr in (lat.gammas[i], lat.betas[i], lat.run_mean[i], lat.run_var[i]):
            parts.append(arr.astype(np.float32).tobytes())
    with open(sidecar_path, "wb") as f:
        f.write(b"".join(parts))
    return model_path, sidecar_path


def load_checkpoint(model_path, sidecar_path=None) -> LatentNetwork:
    model_path = str(model_path)
    sidecar_path = str(sidecar_path) if sidecar_path else model_path + ".latent"
    with open(model_path, "rb") as f:
        arch = m.deserialize(f.read())
    with open(sidecar_path, "rb") as f:
        blob = f.read()
    r = m._Reader(blob)
    if r.take(4, "checkpoint magic") != CHECKPOINT_MAGIC:
        raise ModelFormatError("bad checkpoint magic", offset=0)
    version, nblocks = r.unpack("HH", "checkpoint header")
    if version != CHECKPOINT_VERSION:
        raise ModelFormatError(f"unsupported checkpoint version {version}",
                               offset=4)
    if nblocks != len(arch.blocks):
        raise ModelFormatError(f"checkpoint has {nblocks} blocks, model has "
                               f"{len(arch.blocks)}")
    lat = LatentNetwork(arch, np.random.default_rng(0))
    for i in range(nblocks):
        count = r.unpack("I", "latent count")
        if count != lat.latents[i].size:
            raise ModelFormatError(f"block {i}: {count} latents, expected "
                                   f"{lat.latents[i].size}", offset=r.off - 4)
        flat = np.frombuffer(r.take(4 * count, "latent weights"), np.float32)
        lat.latents[i] = flat.astype(np.float64).reshape(lat.latents[i].shape)
        c = r.unpack("H", "channel count")
        if c != lat.gammas[i].size:
            raise ModelFormatError(f"block {i}: {c} channels, expected "
                                   f"{lat.gammas[i].size}", offset=r.off - 2)
        for dst in ("gammas", "betas", "run_mean", "run_var"):
            arr = np.frombuffer(r.take(4 * c, dst), np.float32)
            getattr(lat, dst)[i] = arr.astype(np.float64)
    if r.off != len(blob):
        raise ModelFormatError(f"{len(blob) - r.off} trailing bytes",
                               offset=r.off)
    return lat
