"""Deformation generators and evaluation procedures for the robustness harness.

Covers isotropic Gaussian noise at a target SNR, one-shot gradient-sign
attacks (before or after input normalization), a minimal-perturbation line
search along the gradient-sign direction, fault dropout at inference, and
post-training uniform weight quantization. Evaluations parallelize over
images in principle; every per-image random stream is keyed by
(seed, image index) so results never depend on batch splits.
"""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import network
from .rng import per_item_rng

__all__ = [
    "AttackReport",
    "gaussian_noise_at_snr",
    "input_gradients",
    "fgsm",
    "epsilon_for_snr",
    "minimal_l2_search",
    "fault_dropout_eval",
    "quantize_weights",
    "accuracy",
]

log = logging.getLogger(__name__)

# Label used in reports for the DeepFool stand-in so its numbers are never
# conflated with the real algorithm's.
MINIMAL_L2_ATTACK_NAME = "minimal-l2-fgsm-search"


@dataclass
class AttackReport:
    """Flat result rows, one per (attack, parameter, seed, metric)."""

    entries: list[dict] = field(default_factory=list)

    def add(self, attack: str, param, seed, metric: str, value: float) -> None:
        if metric == "accuracy" and not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        if metric.endswith("distance") and value < 0.0:
            raise ValueError("distances must be nonnegative")
        self.entries.append({"attack": attack, "param": param, "seed": seed,
                             "metric": metric, "value": value})

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.entries, fh, indent=2, sort_keys=True)
            fh.write("\n")


def gaussian_noise_at_snr(images, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add white Gaussian noise scaled per image to hit the target SNR in dB.

    Signal power is the mean squared pixel value of each image; the drawn
    unit-normal noise is rescaled so the measured ratio matches snr_db
    exactly. An infinite snr_db is the no-noise sentinel; all-zero images are
    returned unchanged (logged, nothing sensible to scale against).
    """
    x = np.asarray(images, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("images contain non-finite values")
    if math.isinf(snr_db):
        return x.copy()
    flat = x.reshape(x.shape[0], -1)
    noise = rng.standard_normal(flat.shape)
    signal_power = (flat * flat).mean(axis=1)
    noise_power = (noise * noise).mean(axis=1)
    target = signal_power / (10.0 ** (snr_db / 10.0))
    degenerate = signal_power == 0.0
    if degenerate.any():
        log.warning("gaussian_noise_at_snr: %d all-zero image(s) left unchanged",
                    int(degenerate.sum()))
    scale = np.where(degenerate, 0.0, np.sqrt(target / np.where(noise_power == 0, 1.0, noise_power)))
    return (flat + scale[:, None] * noise).reshape(x.shape)


def input_gradients(model, images, labels) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the input batch."""
    trace = network.forward_with_trace(model, images)
    _, dlogits = network.softmax_cross_entropy(trace.logits, labels)
    return network.backward(model, trace, dlogits).inputs


def fgsm(model, images, labels, epsilon: float, before_normalization: bool = False,
         channel_std=None) -> np.ndarray:
    """One-shot gradient-sign attack x' = x + eps * sign(dLoss/dx).

    With before_normalization the step is taken in raw pixel space and the
    result re-normalized, which on standardized inputs means a per-channel
    step of eps / std_c; channel_std must then be given. sign(0) is 0, so
    pixels the loss ignores stay untouched.
    """
    x = np.asarray(images, dtype=np.float64)
    g = np.asarray(input_gradients(model, x.astype(model.dtype), labels), dtype=np.float64)
    g = g.reshape(x.shape)
    step = epsilon * np.sign(g)
    if before_normalization:
        if channel_std is None:
            raise ValueError("before-normalization attack needs the channel stds")
        std = np.asarray(channel_std, dtype=np.float64)
        if x.ndim == 4:
            std = std.reshape(1, -1, 1, 1)
        step = step / std
    return x + step


def epsilon_for_snr(images, snr_db: float) -> float:
    """Gradient-sign step size hitting a target SNR: sign noise has power eps^2."""
    x = np.asarray(images, dtype=np.float64)
    signal_power = float((x * x).mean())
    return math.sqrt(signal_power / (10.0 ** (snr_db / 10.0)))


def _pixel_l2_distance(perturbation: np.ndarray) -> float:
    """Mean over pixel positions of the per-pixel (channel-vector) L2 norm."""
    r = np.asarray(perturbation, dtype=np.float64)
    if r.ndim == 3:  # (c, h, w)
        r = r[None]
    per_pixel = np.sqrt((r * r).sum(axis=1))
    return float(per_pixel.mean())


def minimal_l2_search(model, image, label, max_steps: int = 30,
                      eps_init: float = 1e-3):
    """Smallest misclassifying gradient-sign perturbation found by line search.

    Doubles the step size (refreshing the gradient direction at each doubling)
    until the prediction flips, then binary-searches the bracket along the
    last direction. Returns (adversarial image, mean L2 pixel distance,
    censored) where censored marks a search that never flipped the prediction
    within max_steps; the distance is then the tested upper bound.
    """
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.shape[0] != 1:
        raise ValueError("minimal_l2_search works on a single image")
    label_arr = np.asarray([label]).reshape(1)

    def predicted(batch):
        return int(network.predict(model, batch.astype(model.dtype))[0])

    if predicted(xb) != int(label):
        return (x if single else xb), 0.0, False

    def direction(at):
        g = input_gradients(model, at.astype(model.dtype), label_arr)
        return np.sign(np.asarray(g, dtype=np.float64).reshape(xb.shape))

    d = direction(xb)
    eps = float(eps_init)
    fooled_eps = None
    for _ in range(max_steps):
        if predicted(xb + eps * d) != int(label):
            fooled_eps = eps
            break
        d = direction(xb + eps * d)
        eps *= 2.0
    if fooled_eps is None:
        adv = xb + eps * d
        log.warning("minimal_l2_search: censored at eps=%.3g after %d doublings",
                    eps, max_steps)
        return (adv[0] if single else adv), _pixel_l2_distance(eps * d), True

    lo, hi = 0.0, fooled_eps
    for _ in range(60):
        if hi - lo <= 1e-4 * hi:
            break
        mid = 0.5 * (lo + hi)
        if predicted(xb + mid * d) != int(label):
            hi = mid
        else:
            lo = mid
    adv = xb + hi * d
    return (adv[0] if single else adv), _pixel_l2_distance(hi * d), False


def fault_dropout_eval(model, images, p: float, rng_seed: int) -> np.ndarray:
    """Predictions under inference-time fault dropout.

    After each monitored ReLU every activation is independently zeroed with
    probability p, with no rescaling: this models memory erasure faults, not
    training-style dropout. Each image's masks come from a stream keyed by
    (rng_seed, image index), so predictions are reproducible and independent
    of how the batch is split.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1]")
    x = np.asarray(images, dtype=model.dtype)
    b = x.shape[0]
    rngs = [per_item_rng(rng_seed, "dropout", i) for i in range(b)]

    def tamper(_pos, out):
        mask = np.empty(out.shape, dtype=bool)
        for i in range(b):
            mask[i] = rngs[i].random(out.shape[1:]) >= p
        return out * mask.astype(out.dtype)

    return network.predict(model, x, tamper=tamper)


def quantize_weights(model, bits: int):
    """Copy of the model with per-layer uniform min-max quantized weights.

    Levels are min + i * (max - min) / (2^bits - 1); each weight maps to the
    nearest level with ties going to the lower one. Biases stay untouched; a
    constant-weight layer stays constant. Idempotent, and per-layer min and
    max are preserved exactly.
    """
    if bits < 1:
        raise ValueError("bits must be >= 1")
    q = model.copy()
    n_levels = 2 ** bits
    for layer in q.layers + [q.final]:
        W = layer.weights.astype(np.float64)
        wmin, wmax = float(W.min()), float(W.max())
        if wmax == wmin:
            continue
        step = (wmax - wmin) / (n_levels - 1)
        idx = np.ceil((W - wmin) / step - 0.5).astype(np.int64)
        idx = np.clip(idx, 0, n_levels - 1)
        Wq = wmin + idx * step
        Wq[idx == n_levels - 1] = wmax
        Wq[idx == 0] = wmin
        layer.weights = Wq.astype(layer.weights.dtype)
    return q


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    return float((predictions == labels).mean())
