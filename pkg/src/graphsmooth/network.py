"""Minimal deterministic network with manual backpropagation.

Supported layers: dense, 3x3 convolution (stride 1 or 2, zero padding 1),
each with an optional ReLU and an optional convex residual merge with its own
input. Conv stacks end in global average pooling; a final linear layer
produces logits. Forward passes record the flattened representation at every
monitored ReLU so graph code can consume them, and the backward pass accepts
extra gradient contributions injected at those points.

Everything is plain numpy; training runs in float32 by default with a float64
mode for gradient checking.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Layer",
    "NetworkModel",
    "ForwardTrace",
    "Gradients",
    "dense_layer",
    "conv_layer",
    "build_model",
    "forward_with_trace",
    "predict",
    "softmax_cross_entropy",
    "backward",
    "sgd_momentum_step",
    "save_checkpoint",
    "load_checkpoint",
]

KIND_DENSE = "dense"
KIND_CONV = "conv3x3"
KIND_CONV_STRIDED = "conv3x3_strided"

_KIND_TAGS = {KIND_DENSE: 0, KIND_CONV: 1, KIND_CONV_STRIDED: 2}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}

CHECKPOINT_MAGIC = b"LSM1"

CONV_KERNEL_SIZE = 3


@dataclass
class Layer:
    kind: str
    weights: np.ndarray  # dense: (out, in); conv: (out, cin, 3, 3)
    bias: np.ndarray     # (out,)
    activation: str = "relu"   # "relu" | "none"
    residual: bool = False     # convex merge with the layer input (alpha 0.5 each)

    @property
    def stride(self) -> int:
        return 2 if self.kind == KIND_CONV_STRIDED else 1

    def copy(self) -> "Layer":
        return Layer(self.kind, self.weights.copy(), self.bias.copy(),
                     self.activation, self.residual)


@dataclass
class NetworkModel:
    layers: list[Layer]
    final: Layer                     # dense, no activation; softmax applied by the loss
    monitored_points: list[int]      # indices into layers, strictly increasing
    conv_forward_scale: bool = False  # Parseval conv renormalization in forward
    residual_alpha: float = 0.5

    def __post_init__(self):
        if not self.monitored_points:
            raise ValueError("monitored_points must be nonempty")
        pts = list(self.monitored_points)
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValueError("monitored_points must be strictly increasing")
        if any(not 0 <= p < len(self.layers) for p in pts):
            raise ValueError("monitored point out of layer range")

    @property
    def dtype(self):
        return self.final.weights.dtype

    @property
    def num_classes(self) -> int:
        return self.final.weights.shape[0]

    @property
    def has_conv(self) -> bool:
        return any(l.kind != KIND_DENSE for l in self.layers)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        out.extend((self.final.weights, self.final.bias))
        return out

    def copy(self) -> "NetworkModel":
        return NetworkModel([l.copy() for l in self.layers], self.final.copy(),
                            list(self.monitored_points), self.conv_forward_scale,
                            self.residual_alpha)

    def astype(self, dtype) -> "NetworkModel":
        m = self.copy()
        for layer in m.layers + [m.final]:
            layer.weights = layer.weights.astype(dtype)
            layer.bias = layer.bias.astype(dtype)
        return m


@dataclass
class ForwardTrace:
    """Everything a backward pass or a graph builder needs from one forward."""

    representations: list[np.ndarray]   # (b, d) per monitored point, post-ReLU
    logits: np.ndarray                  # (b, C)
    monitored_points: list[int]
    batch_size: int
    caches: list = field(repr=False, default_factory=list)
    pooled: np.ndarray | None = field(repr=False, default=None)
    pool_after: int | None = field(repr=False, default=None)
    pool_shape: tuple | None = field(repr=False, default=None)
    loss_parts: dict | None = None


@dataclass
class Gradients:
    layers: list[tuple[np.ndarray, np.ndarray]]  # (dW, db) per layer
    final: tuple[np.ndarray, np.ndarray]
    inputs: np.ndarray                            # dLoss/dbatch

    def flat(self) -> list[np.ndarray]:
        out = []
        for dw, db in self.layers:
            out.extend((dw, db))
        out.extend(self.final)
        return out


def dense_layer(rng, fan_in: int, units: int, activation: str = "relu",
                residual: bool = False, dtype=np.float32) -> Layer:
    """He-style scaled uniform init, seed-controlled."""
    limit = np.sqrt(6.0 / fan_in)
    W = rng.uniform(-limit, limit, size=(units, fan_in)).astype(dtype)
    b = np.zeros(units, dtype=dtype)
    return Layer(KIND_DENSE, W, b, activation, residual)


def conv_layer(rng, in_channels: int, filters: int, strided: bool = False,
               activation: str = "relu", residual: bool = False, dtype=np.float32) -> Layer:
    fan_in = in_channels * CONV_KERNEL_SIZE * CONV_KERNEL_SIZE
    limit = np.sqrt(6.0 / fan_in)
    W = rng.uniform(-limit, limit, size=(filters, in_channels, 3, 3)).astype(dtype)
    b = np.zeros(filters, dtype=dtype)
    kind = KIND_CONV_STRIDED if strided else KIND_CONV
    return Layer(kind, W, b, activation, residual)


def build_model(layer_specs, input_shape, num_classes: int, rng,
                monitored_points=None, conv_forward_scale: bool = False,
                dtype=np.float32) -> NetworkModel:
    """Assemble a model from a list of layer specs.

    Each spec is a dict: {"kind": "conv3x3"|"conv3x3_strided"|"dense",
    "units": n, "residual": bool}. Conv layers must precede dense layers; a
    dense layer after a conv stack acts on globally averaged channel features,
    while a dense-only model on image input sees the flattened pixels.
    input_shape is (C, H, W) for images or (D,) for flat vectors.
    """
    layers = []
    seen_dense = False
    seen_conv = False
    if len(input_shape) == 3:
        channels = input_shape[0]
        feat = int(np.prod(input_shape))  # flattened, for dense-first models
    else:
        channels = None
        feat = input_shape[0]
    for spec in layer_specs:
        kind = spec["kind"]
        units = int(spec["units"])
        residual = bool(spec.get("residual", False))
        if kind in (KIND_CONV, KIND_CONV_STRIDED):
            if seen_dense:
                raise ValueError("conv layers cannot follow dense layers")
            if channels is None:
                raise ValueError("conv layer on a non-image input")
            layers.append(conv_layer(rng, channels, units,
                                     strided=(kind == KIND_CONV_STRIDED),
                                     residual=residual, dtype=dtype))
            channels = units
            seen_conv = True
        elif kind == KIND_DENSE:
            if seen_conv and not seen_dense:
                feat = channels  # global average pooling bridges conv -> dense
            seen_dense = True
            layers.append(dense_layer(rng, feat, units, residual=residual, dtype=dtype))
            feat = units
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    final_in = channels if (seen_conv and not seen_dense) else feat
    limit = np.sqrt(6.0 / final_in)
    Wf = rng.uniform(-limit, limit, size=(num_classes, final_in)).astype(dtype)
    bf = np.zeros(num_classes, dtype=dtype)
    final = Layer(KIND_DENSE, Wf, bf, activation="none")
    if monitored_points is None:
        monitored_points = [i for i, l in enumerate(layers) if l.activation == "relu"]
    return NetworkModel(layers, final, monitored_points,
                        conv_forward_scale=conv_forward_scale)


def _conv_out_hw(h: int, w: int, stride: int) -> tuple[int, int]:
    return (h + 2 - 3) // stride + 1, (w + 2 - 3) // stride + 1


def _im2col(x: np.ndarray, stride: int) -> tuple[np.ndarray, tuple[int, int]]:
    """(b, c, h, w) -> (b, c*9, hout*wout) patch matrix for a padded 3x3 conv."""
    b, c, h, w = x.shape
    hout, wout = _conv_out_hw(h, w, stride)
    xp = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((b, c, 9, hout, wout), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, :, di * 3 + dj] = xp[:, :, di:di + stride * hout:stride,
                                         dj:dj + stride * wout:stride]
    return cols.reshape(b, c * 9, hout * wout), (hout, wout)


def _col2im(dcols: np.ndarray, x_shape, stride: int) -> np.ndarray:
    b, c, h, w = x_shape
    hout, wout = _conv_out_hw(h, w, stride)
    d = dcols.reshape(b, c, 9, hout, wout)
    dxp = np.zeros((b, c, h + 2, w + 2), dtype=dcols.dtype)
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di:di + stride * hout:stride, dj:dj + stride * wout:stride] += d[:, :, di * 3 + dj]
    return dxp[:, :, 1:-1, 1:-1]


def _conv_weight_2d(model: NetworkModel, layer: Layer) -> np.ndarray:
    W2 = layer.weights.reshape(layer.weights.shape[0], -1)
    if model.conv_forward_scale:
        W2 = W2 * layer.weights.dtype.type(1.0 / np.sqrt(2.0 * CONV_KERNEL_SIZE + 1.0))
    return W2


def _layer_forward(model, layer, x):
    if layer.kind == KIND_DENSE:
        pre = x @ layer.weights.T + layer.bias
        cache = {"x": x}
    else:
        W2 = _conv_weight_2d(model, layer)
        cols, (hout, wout) = _im2col(x, layer.stride)
        pre = np.einsum("of,bfp->bop", W2, cols, optimize=True)
        pre = pre.reshape(x.shape[0], W2.shape[0], hout, wout) + layer.bias[None, :, None, None]
        cache = {"x": x, "cols": cols}
    out = np.maximum(pre, 0) if layer.activation == "relu" else pre
    cache["pre"] = pre
    if layer.residual:
        if out.shape != x.shape:
            raise ValueError("residual merge requires matching input/output shapes")
        alpha = model.residual_alpha
        out = alpha * out + alpha * x
    return out, cache


def forward_with_trace(model: NetworkModel, batch, tamper=None) -> ForwardTrace:
    """Run the network, recording flattened representations at monitored points.

    tamper, if given, is called as tamper(position, out) at every monitored
    point and its return value replaces the activation (used by the fault
    dropout evaluation); the recorded representation is the tampered one.
    """
    x = np.asarray(batch, dtype=model.dtype)
    if x.shape[0] < 1:
        raise ValueError("empty batch")
    if not np.all(np.isfinite(x)):
        raise ValueError("batch contains non-finite values")
    first = model.layers[0] if model.layers else model.final
    if first.kind == KIND_DENSE:
        if x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        if x.shape[1] != first.weights.shape[1]:
            raise ValueError(f"input dim {x.shape[1]} does not match layer fan-in "
                             f"{first.weights.shape[1]}")
    else:
        if x.ndim != 4 or x.shape[1] != first.weights.shape[1]:
            raise ValueError("conv input must be (b, c, h, w) with matching channels")

    b = x.shape[0]
    monitored = set(model.monitored_points)
    reps = []
    caches = []
    pool_after = None
    pool_shape = None
    for i, layer in enumerate(model.layers):
        if layer.kind == KIND_DENSE and x.ndim == 4:
            pool_after = i - 1
            pool_shape = x.shape
            x = x.mean(axis=(2, 3))
        out, cache = _layer_forward(model, layer, x)
        if i in monitored and tamper is not None:
            out = tamper(i, out)
        caches.append(cache)
        if i in monitored:
            reps.append(out.reshape(b, -1).copy())
        x = out
    if x.ndim == 4:
        pool_after = len(model.layers) - 1
        pool_shape = x.shape
        x = x.mean(axis=(2, 3))
    pooled = x
    logits = pooled @ model.final.weights.T + model.final.bias
    return ForwardTrace(representations=reps, logits=logits,
                        monitored_points=list(model.monitored_points),
                        batch_size=b, caches=caches, pooled=pooled,
                        pool_after=pool_after, pool_shape=pool_shape)


def predict(model: NetworkModel, batch, tamper=None) -> np.ndarray:
    """Class predictions (argmax of logits)."""
    return np.argmax(forward_with_trace(model, batch, tamper=tamper).logits, axis=1)


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy with log-sum-exp stabilization and its logits gradient."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    b = logits.shape[0]
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(b), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return loss, grad.astype(logits.dtype)


def _layer_backward(model, layer, cache, dout):
    x = cache["x"]
    if layer.residual:
        alpha = layer.weights.dtype.type(model.residual_alpha)
        dskip = alpha * dout
        dout = alpha * dout
    else:
        dskip = None
    if layer.activation == "relu":
        dpre = dout * (cache["pre"] > 0)
    else:
        dpre = dout
    if layer.kind == KIND_DENSE:
        dW = dpre.T @ x
        db = dpre.sum(axis=0)
        dx = dpre @ layer.weights
    else:
        bsz, cout, hout, wout = dpre.shape
        dpre2 = dpre.reshape(bsz, cout, hout * wout)
        cols = cache["cols"]
        W2 = _conv_weight_2d(model, layer)
        dW2 = np.einsum("bop,bfp->of", dpre2, cols, optimize=True)
        if model.conv_forward_scale:
            dW2 = dW2 * layer.weights.dtype.type(1.0 / np.sqrt(2.0 * CONV_KERNEL_SIZE + 1.0))
        dW = dW2.reshape(layer.weights.shape)
        db = dpre.sum(axis=(0, 2, 3))
        dcols = np.einsum("of,bop->bfp", W2, dpre2, optimize=True)
        dx = _col2im(dcols, x.shape, layer.stride)
    if dskip is not None:
        dx = dx + dskip
    return dW, db, dx


def backward(model: NetworkModel, trace: ForwardTrace, dlogits,
             monitored_grads=None) -> Gradients:
    """Exact gradients of the traced forward pass.

    dlogits is the upstream gradient at the logits; monitored_grads, if
    given, maps monitored-point position -> (b, d) extra gradient on the
    flattened representation there (the regularizer's contribution), routed
    through all remaining layers. Weight decay is not included here; the
    optimizer adds it.
    """
    if len(trace.caches) != len(model.layers):
        raise ValueError("trace does not match model")
    dlogits = np.asarray(dlogits, dtype=model.dtype)
    dWf = dlogits.T @ trace.pooled
    dbf = dlogits.sum(axis=0)
    dx = dlogits @ model.final.weights

    monitored = set(model.monitored_points)
    injections = {}
    if monitored_grads:
        for pos, g in monitored_grads.items():
            if pos not in monitored:
                raise ValueError(f"injection at non-monitored point {pos}")
            injections[pos] = g

    layer_grads: list = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        if trace.pool_after == i:
            b, c, h, w = trace.pool_shape
            dx = (np.broadcast_to(dx[:, :, None, None], (b, c, h, w)) /
                  model.dtype.type(h * w)).astype(model.dtype)
        if i in injections:
            dx = dx + np.asarray(injections[i], dtype=model.dtype).reshape(dx.shape)
        dW, db, dx = _layer_backward(model, model.layers[i], trace.caches[i], dx)
        layer_grads[i] = (dW, db)
    return Gradients(layers=layer_grads, final=(dWf, dbf), inputs=dx)


def sgd_momentum_step(params, grads, state, lr: float, momentum: float,
                      weight_decay: float) -> list[np.ndarray]:
    """One SGD step with momentum and coupled L2 weight decay, in place.

    v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
    state is the list of velocity buffers (created zeroed when None).
    """
    if state is None:
        state = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, state):
        dtype = p.dtype
        v *= dtype.type(momentum)
        v += g.astype(dtype, copy=False)
        if weight_decay:
            v += dtype.type(weight_decay) * p
        p -= dtype.type(lr) * v
    return state


# --- checkpoint format -------------------------------------------------------
#
# magic "LSM1" | u8 model flags (bit0: conv forward renormalization)
# | u32 layer count (including the final linear layer)
# per layer:
#   u8 kind tag (0 dense, 1 conv3x3, 2 conv3x3 strided)
#   u8 layer flags (bit0: relu activation, bit1: residual merge)
#   weight shape dims, u32 each (dense: out,in; conv: out,cin,3,3)
#   weights then bias as little-endian 32-bit floats, row-major

def save_checkpoint(model: NetworkModel, path) -> None:
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<B", 1 if model.conv_forward_scale else 0)
    all_layers = model.layers + [model.final]
    blob += struct.pack("<I", len(all_layers))
    for layer in all_layers:
        flags = (1 if layer.activation == "relu" else 0) | (2 if layer.residual else 0)
        blob += struct.pack("<BB", _KIND_TAGS[layer.kind], flags)
        for dim in layer.weights.shape:
            blob += struct.pack("<I", dim)
        blob += layer.weights.astype("<f4").tobytes(order="C")
        blob += layer.bias.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path, dtype=np.float32) -> NetworkModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {blob[:4]!r}")
    off = 4
    (model_flags,) = struct.unpack_from("<B", blob, off); off += 1
    (count,) = struct.unpack_from("<I", blob, off); off += 4
    layers = []
    for _ in range(count):
        tag, flags = struct.unpack_from("<BB", blob, off); off += 2
        kind = _TAG_KINDS[tag]
        ndim = 2 if kind == KIND_DENSE else 4
        dims = struct.unpack_from(f"<{ndim}I", blob, off); off += 4 * ndim
        n = int(np.prod(dims))
        W = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims); off += 4 * n
        bvec = np.frombuffer(blob, dtype="<f4", count=dims[0], offset=off); off += 4 * dims[0]
        layers.append(Layer(kind, W.astype(dtype), bvec.astype(dtype),
                            activation="relu" if flags & 1 else "none",
                            residual=bool(flags & 2)))
    if off != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    final = layers.pop()
    monitored = [i for i, l in enumerate(layers) if l.activation == "relu"]
    return NetworkModel(layers, final, monitored,
                        conv_forward_scale=bool(model_flags & 1))
