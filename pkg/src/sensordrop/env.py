"""Sensors, masked fusion and the cloud classifier: the environment the agent acts in."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import N_CLASSES


class DegenerateActionError(ValueError):
    """A mask with no active sensor reached the fusion step."""


@dataclass(frozen=True)
class EnvConfig:
    feature_channels: int = 8
    cloud_channels: int = 16
    kernel_size: int = 3
    shared_sensors: bool = True


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    learning_rate: float = 0.001
    batch_size: int = 50
    patience: int = 5


class ActionMask:
    """Which sensors transmit. Integer index is ``sum(bits[i] << i)``."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        self.bits = np.asarray(bits, dtype=bool).copy()

    @property
    def d_active(self):
        return int(self.bits.sum())

    @property
    def index(self):
        return mask_index(self.bits)

    @classmethod
    def from_index(cls, index, n):
        return cls([(index >> i) & 1 for i in range(n)])

    @classmethod
    def all_on(cls, n):
        return cls(np.ones(n, dtype=bool))

    def __len__(self):
        return len(self.bits)

    def __eq__(self, other):
        return isinstance(other, ActionMask) and np.array_equal(self.bits, other.bits)

    def __repr__(self):
        return "ActionMask(" + "".join("1" if b else "0" for b in self.bits) + ")"


def mask_index(bits):
    bits = np.asarray(bits, dtype=np.int64)
    return bits @ (1 << np.arange(bits.shape[-1], dtype=np.int64))


def all_masks(n):
    """(2**n, n) bool array; row k is the mask with index k."""
    idx = np.arange(2 ** n)[:, None]
    return ((idx >> np.arange(n)) & 1).astype(bool)


@dataclass
class SensorOutput:
    feature: np.ndarray  # (C, h, w)
    summary: np.ndarray  # (h, w)


class SensorModel:
    """Per-camera feature extractor, one ConvP block with ReLU (shared weights by default)."""

    def __init__(self, n_sensors, image_size, config=EnvConfig(), rng=None):
        self.n_sensors = n_sensors
        self.image_size = image_size
        self.config = config
        count = 1 if config.shared_sensors else n_sensors
        self.nets = [self._build(rng) for _ in range(count)]

    def _build(self, rng):
        c = self.config
        layers = nn.conv_p(1, c.feature_channels, c.kernel_size, rng=rng) + [nn.ReLU()]
        return nn.Network(layers, (1, self.image_size, self.image_size))

    @property
    def shared(self):
        return len(self.nets) == 1

    @property
    def feature_shape(self):
        return self.nets[0].output_shape

    def parameters(self):
        return [p for net in self.nets for p in net.parameters()]

    def features(self, views):
        """(B, N, H, W) images -> (B, N, C, h, w) features, caching for :meth:`backward`."""
        b, n, h, w = views.shape
        if n != self.n_sensors:
            raise ValueError(f"expected {self.n_sensors} views, got {n}")
        if self.shared:
            out = self.nets[0].forward(views.reshape(b * n, 1, h, w))
            return out.reshape((b, n) + self.feature_shape)
        outs = [net.forward(views[:, i, None]) for i, net in enumerate(self.nets)]
        return np.stack(outs, axis=1)

    def backward(self, feature_grad):
        b, n = feature_grad.shape[:2]
        if self.shared:
            grads, _ = self.nets[0].backward(
                feature_grad.reshape((b * n,) + self.feature_shape), input_grad=False)
            return grads
        grads = []
        for i, net in enumerate(self.nets):
            g, _ = net.backward(feature_grad[:, i], input_grad=False)
            grads.extend(g)
        return grads


def summarize(features):
    """Channel average of feature maps: (..., C, h, w) -> (..., h, w)."""
    return features.mean(axis=-3)


def sense(scene, sensors):
    feats = sensors.features(scene.views[None])[0]
    return [SensorOutput(feature=f.copy(), summary=summarize(f)) for f in feats]


def assemble_state(outputs):
    return np.stack([o.summary for o in outputs])


def fuse(outputs, mask):
    """Masked mean of the selected sensors' features."""
    bits = mask.bits if isinstance(mask, ActionMask) else np.asarray(mask, dtype=bool)
    if not bits.any():
        raise DegenerateActionError("no sensor selected")
    feats = np.stack([o.feature if isinstance(o, SensorOutput) else o for o in outputs])
    return fuse_batch(feats[None], bits[None])[0]


def fuse_batch(features, masks):
    """Batched masked mean: features (B, N, ...) with masks (B, N) -> (B, ...).

    Sums in sensor order and divides once by d_active. Rows with an empty
    mask come out as zeros; callers must not classify them.
    """
    masks = np.asarray(masks, dtype=np.float64)
    d = np.maximum(masks.sum(axis=1), 1.0)
    extra = (1,) * (features.ndim - 2)
    total = (features * masks.reshape(masks.shape + extra)).sum(axis=1)
    return total / d.reshape(d.shape + extra)


class CloudModel:
    """Two convolutions, a max pool and a dense layer with a softmax over four classes."""

    def __init__(self, feature_shape, config=EnvConfig(), rng=None):
        c, h, w = feature_shape
        k = config.kernel_size
        width = config.cloud_channels
        layers = [
            nn.Conv2D(c, width, k, rng=rng), nn.ReLU(),
            nn.Conv2D(width, width, k, rng=rng), nn.ReLU(),
            nn.MaxPool2D(2),
            nn.Dense(width * (h // 2) * (w // 2), N_CLASSES, rng=rng),
            nn.Softmax(),
        ]
        self.net = nn.Network(layers, feature_shape)

    def parameters(self):
        return self.net.parameters()

    def probabilities(self, fused):
        return self.net.forward(fused)


def classify(cloud, fused):
    """Single fused map -> ``(label, probabilities)``; ties go to the lowest class."""
    probs = cloud.probabilities(np.asarray(fused)[None])[0]
    return int(np.argmax(probs)), probs


class Environment:
    """Sensor nets plus cloud classifier, created together so shapes line up."""

    def __init__(self, n_sensors, image_size, config=EnvConfig(), rng=None):
        self.config = config
        self.sensors = SensorModel(n_sensors, image_size, config, rng=rng)
        self.cloud = CloudModel(self.sensors.feature_shape, config, rng=rng)

    @property
    def n_sensors(self):
        return self.sensors.n_sensors

    def parameters(self):
        return self.sensors.parameters() + self.cloud.parameters()

    def networks(self):
        return list(self.sensors.nets) + [self.cloud.net]

    def observe(self, views, batch_size=256):
        """Features and agent states for a stack of scenes: (B,N,C,h,w), (B,N,h,w)."""
        feats = []
        for start in range(0, len(views), batch_size):
            feats.append(self.sensors.features(views[start:start + batch_size]))
        features = np.concatenate(feats)
        return features, summarize(features)

    def predict(self, features, masks, batch_size=512):
        """Labels for (features, masks) pairs; -1 where the mask is empty."""
        masks = np.asarray(masks, dtype=bool)
        labels = np.full(len(features), -1, dtype=np.int64)
        live = np.flatnonzero(masks.any(axis=1))
        for start in range(0, len(live), batch_size):
            rows = live[start:start + batch_size]
            fused = fuse_batch(features[rows], masks[rows])
            labels[rows] = np.argmax(self.cloud.probabilities(fused), axis=1)
        return labels

    def accuracy(self, views, labels, masks=None):
        features, _ = self.observe(views)
        if masks is None:
            masks = np.ones((len(views), self.n_sensors), dtype=bool)
        return float(np.mean(self.predict(features, masks) == labels))

    def outcome_table(self, features, labels, batch_size=512):
        """Correctness of the frozen classifier for every scene under every mask.

        Returns a (B, 2**N) bool array; column 0 (nothing sent) is all False.
        """
        n = self.n_sensors
        masks = all_masks(n)[1:]
        table = np.zeros((len(features), 2 ** n), dtype=bool)
        pairs_scene = np.repeat(np.arange(len(features)), len(masks))
        pairs_mask = np.tile(np.arange(len(masks)), len(features))
        for start in range(0, len(pairs_scene), batch_size):
            s = pairs_scene[start:start + batch_size]
            m = pairs_mask[start:start + batch_size]
            fused = fuse_batch(features[s], masks[m])
            pred = np.argmax(self.cloud.probabilities(fused), axis=1)
            table[s, m + 1] = pred == labels[s]
        return table

    def train_step(self, views, labels, masks, optimizer):
        """One supervised cross-entropy step through cloud and sensors; returns (loss, n_correct)."""
        b = len(views)
        feats = self.sensors.features(views)
        masks = np.asarray(masks, dtype=np.float64)
        d = np.maximum(masks.sum(axis=1), 1.0)
        fused = fuse_batch(feats, masks)
        probs = self.cloud.net.forward(fused)
        picked = probs[np.arange(b), labels]
        loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
        onehot = np.zeros_like(probs)
        onehot[np.arange(b), labels] = 1.0
        # gradient w.r.t. the logits under the softmax head
        cloud_grads, fused_grad = self.cloud.net.backward((probs - onehot) / b, skip_last=1)
        weights = masks / d[:, None]
        feat_grad = fused_grad[:, None] * weights[:, :, None, None, None]
        sensor_grads = self.sensors.backward(feat_grad)
        grads = sensor_grads + cloud_grads
        if not math.isfinite(loss):
            raise nn.DivergenceError("non-finite pretraining loss")
        optimizer.step(self.parameters(), grads)
        return loss, int(np.sum(np.argmax(probs, axis=1) == labels))


def pretrain(env, split, config=PretrainConfig(), rng=None, log=None, on_step=None):
    """Supervised end-to-end training with every sensor transmitting.

    Returns a list of per-epoch dicts with ``epoch, train_loss, train_acc,
    test_acc, steps``. Stops early when test accuracy has not improved for
    ``config.patience`` epochs.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    train_x, train_y = split.arrays("train")
    test_x, test_y = split.arrays("test")
    n = env.n_sensors
    opt = nn.Optimizer("adam", config.learning_rate)
    history = []
    best, stale = -1.0, 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_x))
        total_loss, correct, steps = 0.0, 0, 0
        for start in range(0, len(order), config.batch_size):
            rows = order[start:start + config.batch_size]
            masks = np.ones((len(rows), n), dtype=bool)
            try:
                loss, hits = env.train_step(train_x[rows], train_y[rows], masks, opt)
            except nn.DivergenceError as err:
                raise nn.DivergenceError("pretraining diverged", epoch=epoch,
                                         step=steps, **err.diagnostics) from err
            if on_step is not None:
                on_step(loss)
            total_loss += loss * len(rows)
            correct += hits
            steps += 1
        record = {
            "epoch": epoch,
            "train_loss": total_loss / len(train_x),
            "train_acc": correct / len(train_x),
            "test_acc": env.accuracy(test_x, test_y),
            "steps": steps,
        }
        history.append(record)
        if log is not None:
            log(record)
        if record["test_acc"] > best:
            best, stale = record["test_acc"], 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return history
