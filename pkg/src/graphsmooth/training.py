"""Training loop, metrics logging, and loss composition.

The loss is cross-entropy + weight-decay + gamma^m * Delta, where Delta is
the mean absolute smoothness gap across consecutive monitored points. Weight
decay is applied by the optimizer (coupled L2), the regularizer's gradients
are injected at the monitored representations, and the Parseval retraction,
when enabled, runs after each gradient step.

Runs are deterministic: one master seed feeds named substreams for weight
init, batch shuffling, and data synthesis, training is plain float32 numpy,
and two runs with the same config produce byte-identical checkpoints.
"""

import json
import time
from pathlib import Path

import numpy as np

from . import datasets as ds
from . import network
from .config import TrainConfig
from .errors import ConfigError
from .regularize import (RegularizerConfig, parseval_retraction,
                         smoothness_regularizer, smoothness_sums)
from .rng import substream
from .signals import make_label_signals
from .trace_tools import probe_profile  # noqa: F401  (re-exported for callers)

__all__ = [
    "load_datasets",
    "make_model",
    "loss_parts",
    "train",
    "evaluate_accuracy",
    "mean_consecutive_gap",
]


def load_datasets(cfg: TrainConfig) -> tuple[ds.Dataset, ds.Dataset]:
    """Normalized train/test splits per the config's dataset spec."""
    spec = dict(cfg.dataset)
    kind = spec.pop("kind")
    if kind == "synthetic":
        spec.setdefault("seed", cfg.seed)
        train, test = ds.make_synthetic(**spec)
    elif kind == "idx":
        train = ds.load_idx(spec["train_images"], spec["train_labels"])
        test = ds.load_idx(spec["test_images"], spec["test_labels"])
    elif kind == "cifar10":
        train = ds.load_cifar_bin(spec["train_paths"])
        test = ds.load_cifar_bin(spec["test_paths"])
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    if "subset_train" in spec or "subset_test" in spec:
        train = ds.subset(train, spec.get("subset_train", len(train)))
        test = ds.subset(test, spec.get("subset_test", len(test)))
    train, (test,) = ds.normalize(train, [test])
    return train, test


def make_model(cfg: TrainConfig, input_shape, num_classes: int) -> network.NetworkModel:
    rng = substream(cfg.seed, "init")
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    return network.build_model(cfg.model, input_shape, num_classes, rng,
                               monitored_points=cfg.monitored_points,
                               conv_forward_scale=cfg.parseval, dtype=dtype)


def _weight_decay_value(model, weight_decay: float) -> float:
    if weight_decay == 0.0:
        return 0.0
    total = sum(float((p.astype(np.float64) ** 2).sum()) for p in model.parameters())
    return 0.5 * weight_decay * total


def loss_parts(model, batch, labels, reg_cfg: RegularizerConfig,
               weight_decay: float, frozen_list=None):
    """Value of the composed loss, by component.

    Returns (parts dict, frozens) where frozens are the per-point graph
    constants actually used; passing them back in replays the identical
    smoothness function, which is what finite-difference checks need.
    """
    trace = network.forward_with_trace(model, batch)
    cce, _ = network.softmax_cross_entropy(trace.logits, labels)
    wd = _weight_decay_value(model, weight_decay)
    reg = 0.0
    frozens = None
    if reg_cfg.gamma > 0 and len(trace.representations) >= 2:
        signals = make_label_signals(labels, model.num_classes)
        reg, _, frozens = smoothness_regularizer(trace, signals, reg_cfg,
                                                 frozen_list=frozen_list,
                                                 want_grads=False)
    parts = {"cce": cce, "weight_decay": wd, "regularizer": reg,
             "total": cce + wd + reg}
    return parts, frozens


def _train_step(model, batch, labels, cfg: TrainConfig, reg_cfg: RegularizerConfig,
                opt_state, lr: float):
    trace = network.forward_with_trace(model, batch)
    cce, dlogits = network.softmax_cross_entropy(trace.logits, labels)
    reg_value = 0.0
    monitored_grads = None
    if reg_cfg.gamma > 0 and len(trace.representations) >= 2 and batch.shape[0] >= 2:
        signals = make_label_signals(labels, model.num_classes)
        reg_value, monitored_grads, _ = smoothness_regularizer(trace, signals, reg_cfg)
    grads = network.backward(model, trace, dlogits, monitored_grads)
    opt_state = network.sgd_momentum_step(model.parameters(), grads.flat(), opt_state,
                                          lr=lr, momentum=cfg.momentum,
                                          weight_decay=cfg.weight_decay)
    if cfg.parseval:
        for layer in model.layers + [model.final]:
            parseval_retraction(layer.weights, reg_cfg.beta)
    return cce, reg_value, opt_state


def evaluate_accuracy(model, dataset: ds.Dataset, batch_size: int = 200) -> float:
    hits = 0
    for start in range(0, len(dataset), batch_size):
        xb = dataset.images[start:start + batch_size]
        yb = dataset.labels[start:start + batch_size]
        hits += int((network.predict(model, xb) == yb).sum())
    return hits / len(dataset)


def train(cfg: TrainConfig, out_dir=None, quiet: bool = True):
    """Train per config; optionally write checkpoint.lsm and metrics.json.

    Returns (model, metrics dict). Vanilla training is requested with
    gamma = 0 and follows the exact same code path minus the regularizer,
    so the two are bit-identical when gamma is zero.
    """
    cfg.validate()
    reg_cfg = cfg.regularizer
    train_set, test_set = load_datasets(cfg)
    input_shape = train_set.image_shape if cfg.model[0]["kind"] != "dense" \
        else (int(np.prod(train_set.image_shape)),)
    model = make_model(cfg, input_shape, train_set.num_classes)

    shuffle_rng = substream(cfg.seed, "shuffle")
    n = len(train_set)
    probe_x = train_set.images[:cfg.batch_size]
    probe_y = train_set.labels[:cfg.batch_size]
    probe_signals = make_label_signals(probe_y, train_set.num_classes)

    metrics = {"config": json.loads(cfg.to_json()),
               "classes_present": probe_signals.classes_present,
               "epochs": [], "smoothness": []}
    opt_state = None
    t0 = time.time()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(n)
        cce_sum = reg_sum = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2:
                continue
            xb = train_set.images[idx]
            yb = train_set.labels[idx]
            cce, reg_value, opt_state = _train_step(model, xb, yb, cfg, reg_cfg,
                                                    opt_state, lr)
            cce_sum += cce
            reg_sum += reg_value
            batches += 1
        wd_value = _weight_decay_value(model, cfg.weight_decay)
        test_acc = evaluate_accuracy(model, test_set)
        row = {"epoch": epoch, "lr": lr,
               "loss_cce": cce_sum / batches,
               "loss_weight_decay": wd_value,
               "loss_regularizer": reg_sum / batches,
               "loss_total": cce_sum / batches + wd_value + reg_sum / batches,
               "test_accuracy": test_acc}
        metrics["epochs"].append(row)
        profile = probe_profile(model, probe_x, probe_signals, reg_cfg)
        for layer_index, per_class, _total in profile.per_layer:
            for class_id, value in per_class.items():
                metrics["smoothness"].append({"epoch": epoch, "layer_index": layer_index,
                                              "power_m": profile.power,
                                              "class_id": class_id, "smoothness": value})
        if not quiet:
            print(f"epoch {epoch}: cce {row['loss_cce']:.4f} "
                  f"reg {row['loss_regularizer']:.3e} acc {test_acc:.4f}")
    metrics["wall_seconds"] = time.time() - t0

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        network.save_checkpoint(model, out / "checkpoint.lsm")
        with open(out / "metrics.json", "w") as fh:
            json.dump(metrics, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return model, metrics


def mean_consecutive_gap(model, dataset: ds.Dataset, reg_cfg: RegularizerConfig,
                         batch_size: int, num_batches: int = 5) -> float:
    """Mean absolute consecutive-layer smoothness gap over probe batches.

    This is the quantity the regularizer penalizes, measured on held-out
    batches with the same graph construction (normalized m-th power).
    """
    gaps = []
    for start in range(0, min(len(dataset), num_batches * batch_size), batch_size):
        xb = dataset.images[start:start + batch_size]
        yb = dataset.labels[start:start + batch_size]
        if xb.shape[0] < 2:
            continue
        trace = network.forward_with_trace(model, xb)
        signals = make_label_signals(yb, dataset.num_classes)
        sums, _, _ = smoothness_sums(trace.representations, signals, reg_cfg)
        gaps.append(float(np.mean(np.abs(np.diff(sums)))))
    return float(np.mean(gaps))
