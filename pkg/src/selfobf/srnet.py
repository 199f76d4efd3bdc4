"""A small pre-upsampling residual super-resolution CNN in plain numpy.

The network bicubic-upsamples its input ``u = up(x)`` and adds a learned
correction::

    h_1 = act(conv_1(u)), ..., h_{L-1} = act(conv_{L-1}(h_{L-2}))
    r   = conv_L(h_{L-1})
    g   = sigmoid(v @ gate_w + gate_b),  v = vec(x) - 1/2   (K gates)
    out = u + r + sum_k g_k * canvas_k

``act`` is a leaky rectifier and every conv is zero-padded "same". The
global branch (``K`` dense gates on the flattened LR input, each switching a
learned full-resolution canvas) is a rank-``K`` image-wide residual. Without
it the output at a pixel depends only on an ``(L*(k-1)+1)``-wide input
window, so nothing confined to one corner of the input could change the rest
of the frame. The branch fixes the input size the model accepts;
``n_global=0`` gives a size-agnostic pure conv stack.

Forward and backward passes are explicit; gradients are exact (checked
against central finite differences in the test-suite).
"""

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import Stream
from .exceptions import ConfigError, DimensionError, ImageIOError, TrainingDivergedError
from .imaging import upsample
from .validation import check_image, check_positive_int, check_same_shape

LOSSES = ("l1", "l2")


@dataclass
class SRModel:
    scale: int
    slope: float
    params: dict = field(repr=False)
    residual: bool = True

    @property
    def n_layers(self):
        return sum(1 for k in self.params if k.endswith(".weight") and k.startswith("conv"))

    @property
    def channels(self):
        return self.params["conv0.weight"].shape[2]

    @property
    def has_gate(self):
        return "canvas" in self.params

    @property
    def input_shape(self):
        """LR ``(h, w)`` fixed by the global branch, or ``None``."""
        if not self.has_gate:
            return None
        hr = self.params["canvas"].shape[1:3]
        return hr[0] // self.scale, hr[1] // self.scale

    @property
    def dtype(self):
        return self.params["conv0.weight"].dtype

    def copy(self):
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype):
        return replace(self, params={k: v.astype(dtype) for k, v in self.params.items()})


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    loss: str = "l1"
    seed: int = 0
    patch_size: int = None

    def __post_init__(self):
        check_positive_int(self.epochs, "epochs")
        check_positive_int(self.batch_size, "batch_size")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.patch_size is not None:
            check_positive_int(self.patch_size, "patch_size")


def init_model(channels=3, *, scale=4, n_layers=4, hidden=16, kernel_size=3, slope=0.2,
               residual=True, input_shape=None, n_global=1, seed=0, dtype=np.float32,
               gate_bias=-2.0):
    """Seeded initialisation.

    Hidden convs use Kaiming-uniform fan-in scaling for a leaky rectifier; the
    last conv, the gate weights and the canvases start at zero so the
    untrained network reproduces bicubic upsampling exactly. The global
    branch is built only when ``input_shape`` (LR height, width) is given and
    ``n_global > 0``.
    """
    check_positive_int(n_layers, "n_layers")
    if kernel_size % 2 != 1:
        raise ConfigError("kernel_size must be odd")
    widths = [channels] + [hidden] * (n_layers - 1) + [channels]
    gain = np.sqrt(2.0 / (1.0 + slope * slope))
    params = {}
    for i in range(n_layers):
        cin, cout = widths[i], widths[i + 1]
        shape = (kernel_size, kernel_size, cin, cout)
        if i == n_layers - 1:
            w = np.zeros(shape)
        else:
            bound = gain * np.sqrt(3.0 / (kernel_size * kernel_size * cin))
            w = bound * (2.0 * Stream(seed, "init", i).uniform(shape) - 1.0)
        params[f"conv{i}.weight"] = w
        params[f"conv{i}.bias"] = np.zeros(cout)
    if input_shape is not None and n_global > 0:
        h, w = input_shape
        params["gate.weight"] = np.zeros((h * w * channels, n_global))
        params["gate.bias"] = np.full(n_global, float(gate_bias))
        params["canvas"] = np.zeros((n_global, h * scale, w * scale, channels))
    params = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
    return SRModel(scale=int(scale), slope=float(slope), params=params, residual=residual)


# -- layers ----------------------------------------------------------------

def _im2col(x, k):
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))          # n h w c kh kw
    n, h, w, c = x.shape
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def conv_forward(x, weight, bias):
    k, _, cin, cout = weight.shape
    cols = _im2col(x, k)
    out = cols @ weight.reshape(k * k * cin, cout) + bias
    return out.reshape(*x.shape[:3], cout), cols


def conv_backward(dout, cols, weight, need_dx=True):
    k, _, cin, cout = weight.shape
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(weight.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    # input gradient = "same" convolution of dout with the flipped, transposed kernel
    flipped = weight[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
    dx = _im2col(dout, k) @ flipped
    return dx.reshape(*dout.shape[:3], cin), dw, db


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# -- network ---------------------------------------------------------------

def _check_input(model, x):
    x = check_image(x, allow_batch=True)
    if x.shape[-1] != model.channels:
        raise DimensionError(f"input has {x.shape[-1]} channels, model expects {model.channels}")
    fixed = model.input_shape
    if fixed is not None and x.shape[-3:-1] != tuple(fixed):
        raise DimensionError(f"input is {x.shape[-3:-1]}, the global branch expects {fixed}")
    return x


def prepare_input(model, x):
    """Bicubic front end: ``x`` at LR resolution -> ``u`` at HR resolution."""
    return upsample(_check_input(model, x), model.scale).astype(model.dtype, copy=False)


def _canvas_view(model, hw, offset):
    canvas = model.params["canvas"]
    r, c = offset
    if r + hw[0] > canvas.shape[1] or c + hw[1] > canvas.shape[2]:
        raise DimensionError(f"output {hw} at offset {offset} exceeds canvas {canvas.shape[1:3]}")
    return canvas[:, r:r + hw[0], c:c + hw[1]]


def _gate_features(x):
    # centred, so the gate logit of a mid-grey image is its bias
    return x.reshape(len(x), -1) - 0.5


def forward_upsampled(model, u, x=None, offset=(0, 0), keep=False):
    """Network body on an already upsampled batch ``u`` of shape (N, H, W, C).

    ``x`` is the LR batch ``u`` was made from; the global branch reads it.

    Returns the unclamped output, plus the activation cache if ``keep``.
    """
    p = model.params
    L = model.n_layers
    cache = {"cols": [], "z": []}
    h = u
    for i in range(L):
        z, cols = conv_forward(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"])
        cache["cols"].append(cols)
        if i < L - 1:
            cache["z"].append(z)
            h = np.where(z > 0, z, model.slope * z)
        else:
            r = z
    out = u + r if model.residual else r
    if model.has_gate:
        flat = _gate_features(x).astype(u.dtype, copy=False)
        g = _sigmoid(flat @ p["gate.weight"] + p["gate.bias"])
        out = out + np.tensordot(g, _canvas_view(model, u.shape[1:3], offset), axes=(1, 0))
        cache.update(flat=flat, g=g)
    return (out, cache) if keep else out


def forward(model, x_lr, clamp=True):
    """G(theta, x): output at ``scale`` times the input size.

    ``clamp`` applies the [0, 1] range only at inference; training calls the
    unclamped body directly.
    """
    x = _check_input(model, x_lr)
    single = x.ndim == 3
    x = x[None] if single else x
    out = forward_upsampled(model, prepare_input(model, x), x)
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


def loss(y_hat, y, kind="l1"):
    """Mean absolute (``l1``) or mean squared (``l2``) error over all elements."""
    y_hat, y = np.asarray(y_hat), np.asarray(y)
    check_same_shape(y_hat, y, ("prediction", "target"))
    diff = y_hat.astype(np.float64) - y
    if kind == "l1":
        return float(np.mean(np.abs(diff)))
    if kind == "l2":
        return float(np.mean(diff * diff))
    raise ConfigError(f"unknown loss {kind!r}")


def _loss_grad(out, y, kind):
    diff = out - y
    m = diff.size
    if kind == "l1":
        return float(np.mean(np.abs(diff))), np.sign(diff) / m
    return float(np.mean(diff * diff)), (2.0 / m) * diff


def backward_upsampled(model, u, y, kind="l1", x=None, offset=(0, 0)):
    """Loss and per-parameter gradients for an upsampled batch ``u``."""
    p = model.params
    L = model.n_layers
    out, cache = forward_upsampled(model, u, x, offset, keep=True)
    value, dout = _loss_grad(out, y.astype(out.dtype, copy=False), kind)
    dout = dout.astype(out.dtype, copy=False)
    grads = {}
    if model.has_gate:
        g = cache["g"]
        canvas = _canvas_view(model, u.shape[1:3], offset)
        full = np.zeros_like(p["canvas"])
        full[:, offset[0]:offset[0] + canvas.shape[1], offset[1]:offset[1] + canvas.shape[2]] = \
            np.tensordot(g, dout, axes=(0, 0))
        grads["canvas"] = full
        dg = np.einsum("nhwc,khwc->nk", dout, canvas)
        dz = dg * g * (1.0 - g)
        grads["gate.weight"] = cache["flat"].T @ dz
        grads["gate.bias"] = dz.sum(axis=0)
    d = dout
    for i in reversed(range(L)):
        if i < L - 1:
            z = cache["z"][i]
            d = np.where(z > 0, d, model.slope * d)
        dx, dw, db = conv_backward(d, cache["cols"][i], p[f"conv{i}.weight"], need_dx=i > 0)
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db
        d = dx
    return value, {k: grads[k] for k in p}


def backward(model, x_lr, y, kind="l1"):
    """Gradients of ``loss(forward(model, x_lr, clamp=False), y, kind)``."""
    x = _check_input(model, x_lr)
    y = check_image(y, allow_batch=True)
    if x.ndim == 3:
        x, y = x[None], y[None]
    u = prepare_input(model, x)
    check_same_shape(u, y, ("output", "target"))
    return backward_upsampled(model, u, y, kind, x)[1]


# -- training --------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            params[k] = params[k] - step.astype(params[k].dtype)


def _batches(n, batch_size, seed, epoch):
    order = Stream(seed, "shuffle", epoch).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(model, x_lr, y_hr, cfg, callback=None):
    """Minimise the mean loss of ``model`` over the pairs ``(x_lr, y_hr)``.

    Every pair is treated alike: the data alone decides what is learned.
    Returns a trained copy of ``model`` and the per-epoch mean loss.
    """
    x = _check_input(model, x_lr)
    y = check_image(y_hr, allow_batch=True)
    if x.ndim == 3:
        x, y = x[None], y[None]
    if len(x) == 0:
        raise ConfigError("training needs at least one pair")
    model = model.copy()
    u = prepare_input(model, x)
    y = y.astype(model.dtype)
    check_same_shape(u, y, ("upsampled input", "target"))
    opt = Adam(model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    log = []
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for b, idx in enumerate(_batches(len(u), cfg.batch_size, cfg.seed, epoch)):
            ub, yb, xb, offset = u[idx], y[idx], x[idx], (0, 0)
            if cfg.patch_size is not None:
                ub, yb, offset = _crop(ub, yb, cfg.patch_size, model.scale,
                                       Stream(cfg.seed, "crop", epoch, b))
            value, grads = backward_upsampled(model, ub, yb, cfg.loss, xb, offset)
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch)
            opt.step(model.params, grads)
            if not all(np.all(np.isfinite(v)) for v in model.params.values()):
                raise TrainingDivergedError(epoch, "non-finite parameter")
            total += value * len(idx)
            count += len(idx)
        log.append(total / count)
        if callback is not None:
            callback(epoch, log[-1])
    return model, log


def _crop(u, y, size, scale, stream):
    h, w = u.shape[1:3]
    size = min(size, h, w)
    # LR-aligned corners keep the crop on the same sub-pixel phase as the full frame
    r = int(stream.raw(1)[0] % np.uint64((h - size) // scale + 1)) * scale
    c = int(stream.raw(1)[0] % np.uint64((w - size) // scale + 1)) * scale
    return u[:, r:r + size, c:c + size], y[:, r:r + size, c:c + size], (r, c)


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"SRCK"
CHECKPOINT_VERSION = 1
_HEAD = struct.Struct("<4sIIIdII")  # magic, version, scale, dtype, slope, flags, n_params
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(model, path):
    """Header (magic, version, scale, dtype, slope, flags, layer specs) then the
    parameters as one little-endian blob in header order."""
    code = _DTYPE_CODES[np.dtype(model.dtype)]
    flags = int(model.residual)
    parts = [_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.scale, code,
                        model.slope, flags, len(model.params))]
    blob = []
    little = np.dtype(model.dtype).newbyteorder("<")
    for name, arr in model.params.items():
        key = name.encode("ascii")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        blob.append(np.ascontiguousarray(arr, dtype=little).tobytes())
    try:
        Path(path).write_bytes(b"".join(parts + blob))
    except OSError as exc:
        raise ImageIOError(path, str(exc)) from exc


def load_checkpoint(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ImageIOError(path, str(exc)) from exc
    try:
        magic, version, scale, code, slope, flags, n = _HEAD.unpack_from(raw)
        if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
            raise ValueError("bad magic or version")
        dtype = {v: k for k, v in _DTYPE_CODES.items()}[code]
        pos = _HEAD.size
        specs = []
        for _ in range(n):
            (klen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + klen].decode("ascii")
            pos += klen
            (ndim,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
            pos += 4 + 4 * ndim
            specs.append((name, shape))
        params = {}
        little = dtype.newbyteorder("<")
        for name, shape in specs:
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(raw, dtype=little, count=count, offset=pos)
            params[name] = arr.reshape(shape).astype(dtype)
            pos += count * dtype.itemsize
        if pos != len(raw):
            raise ValueError("trailing bytes")
    except (struct.error, ValueError, KeyError) as exc:
        raise ImageIOError(path, f"corrupt checkpoint: {exc}") from exc
    return SRModel(scale=scale, slope=slope, params=params, residual=bool(flags & 1))


# -- estimator ---------------------------------------------------------------

class SuperResolutionNet(RegressorMixin, BaseEstimator):
    """Estimator wrapper: ``fit(X_lr, Y_hr)``, ``predict(X_lr)``, ``score`` in dB.

    ``X`` is a batch ``(N, h, w, C)`` of low-resolution images and ``Y`` the
    matching ``(N, h*scale, w*scale, C)`` targets. ``global_components`` sets
    the number of gated canvases; any value above zero ties the fitted model
    to the training input size.
    """

    def __init__(self, scale=4, n_layers=4, hidden_channels=16, kernel_size=3,
                 negative_slope=0.2, residual=True, global_components=1, loss="l1",
                 epochs=100, batch_size=16, learning_rate=1e-3, beta1=0.9, beta2=0.999,
                 epsilon=1e-8, patch_size=None, double_precision=False, random_state=0):
        self.scale = scale
        self.n_layers = n_layers
        self.hidden_channels = hidden_channels
        self.kernel_size = kernel_size
        self.negative_slope = negative_slope
        self.residual = residual
        self.global_components = global_components
        self.loss = loss
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.patch_size = patch_size
        self.double_precision = double_precision
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, beta1=self.beta1,
                           beta2=self.beta2, epsilon=self.epsilon, loss=self.loss,
                           seed=self.random_state, patch_size=self.patch_size)

    def fit(self, X, y):
        X = check_image(X, allow_batch=True)
        y = check_image(y, allow_batch=True)
        if X.ndim == 3:
            X, y = X[None], y[None]
        if len(X) != len(y):
            raise DimensionError(f"{len(X)} inputs but {len(y)} targets")
        cfg = self._train_config()
        model = init_model(
            X.shape[-1], scale=self.scale, n_layers=self.n_layers,
            hidden=self.hidden_channels, kernel_size=self.kernel_size,
            slope=self.negative_slope, residual=self.residual,
            input_shape=X.shape[1:3], n_global=self.global_components,
            seed=self.random_state,
            dtype=np.float64 if self.double_precision else np.float32)
        self.model_, self.loss_curve_ = train(model, X, y, cfg)
        self.n_features_in_ = X.shape[-1]
        return self

    @classmethod
    def from_model(cls, model, **params):
        est = cls(scale=model.scale, n_layers=model.n_layers,
                  negative_slope=model.slope, residual=model.residual,
                  global_components=model.params["canvas"].shape[0] if model.has_gate else 0,
                  double_precision=model.dtype == np.float64, **params)
        est.model_ = model
        est.loss_curve_ = []
        est.n_features_in_ = model.channels
        return est

    def predict(self, X):
        check_is_fitted(self, "model_")
        return forward(self.model_, X, clamp=True)

    def score(self, X, y, sample_weight=None):
        """Mean PSNR (dB) of the predictions against ``y``."""
        from .metrics import psnr

        pred = self.predict(X)
        y = check_image(y, allow_batch=True)
        if pred.ndim == 3:
            return psnr(pred, y)
        scores = np.array([psnr(a, b) for a, b in zip(pred, y)])
        return float(np.average(scores, weights=sample_weight))
