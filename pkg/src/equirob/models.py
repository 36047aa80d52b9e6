"""Toy classifier and dense-segmentation networks, training, and splitting
into a feature extractor plus prediction head."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .rng import child_rng


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelDescriptor:
    arch: str  # toy_cls | toy_seg
    channels: int = 8
    num_classes: int = 4
    feature_layer: int = 3  # index into the conv stack; output defines the representation

    def __post_init__(self):
        if self.arch not in ("toy_cls", "toy_seg"):
            raise ValueError(f"unknown architecture tag: {self.arch}")

    def to_json(self):
        return {"arch": self.arch, "channels": self.channels,
                "num_classes": self.num_classes, "feature_layer": self.feature_layer}

    @staticmethod
    def from_json(d):
        return ModelDescriptor(**d)


def descriptor_for(task, channels=8):
    if task == "segmentation":
        return ModelDescriptor("toy_seg", channels=channels, num_classes=4, feature_layer=3)
    return ModelDescriptor("toy_cls", channels=channels, num_classes=10, feature_layer=2)


@dataclass
class ConvLayer:
    name: str
    w: ad.Tensor
    b: ad.Tensor
    stride: int = 1
    padding: int = 1
    relu: bool = True

    def __call__(self, x):
        out = ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)
        return ad.relu(out) if self.relu else out


@dataclass
class LinearLayer:
    name: str
    w: ad.Tensor
    b: ad.Tensor

    def __call__(self, x):
        return ad.linear(x, self.w, self.b)


class Model:
    """Conv stack split at ``feature_layer`` into F (features) and C (head)."""

    def __init__(self, descriptor, convs, head):
        self.descriptor = descriptor
        self.convs = convs
        self.head = head  # list of callables applied after the feature layer

    def parameters(self):
        params = []
        for layer in self.convs + self.head:
            if isinstance(layer, (ConvLayer, LinearLayer)):
                params.append((layer.name + ".w", layer.w))
                params.append((layer.name + ".b", layer.b))
        return params

    def features(self, x):
        x = ad.as_tensor(x)
        for layer in self.convs[: self.descriptor.feature_layer + 1]:
            x = layer(x)
        return x

    def head_forward(self, feat):
        out = feat
        for layer in self.convs[self.descriptor.feature_layer + 1:]:
            out = layer(out)
        for layer in self.head:
            out = layer(out)
        return out

    def forward(self, x):
        return self.head_forward(self.features(x))

    def logits(self, x):
        """Plain forward without recording gradients."""
        return self.forward(ad.Tensor(np.asarray(x))).data

    def predict(self, x):
        return np.argmax(self.logits(x), axis=1)


def _gap_layer(x):
    return ad.avg_pool_global(x)


def _flatten_layer(x):
    n = x.shape[0]
    # (N,C,1,1) -> (N,C); plain reshape keeps the graph via a concat-free path
    out = ad.Tensor(x.data.reshape(n, -1))
    if x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)
        out._backward = lambda g: (g.reshape(x.shape),)
    return out


def _he_init(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def build_model(descriptor, seed):
    """Deterministic He-initialized model for the given descriptor."""
    c = descriptor.channels
    k = descriptor.num_classes
    convs = []
    head = []

    def conv(name, cin, cout, ksize, stride=1, relu=True):
        rng = child_rng(seed, "init/" + name)
        w = ad.Tensor(_he_init(rng, (cout, cin, ksize, ksize), cin * ksize * ksize),
                      requires_grad=True)
        b = ad.Tensor(np.zeros(cout), requires_grad=True)
        pad = ksize // 2
        return ConvLayer(name, w, b, stride=stride, padding=pad, relu=relu)

    if descriptor.arch == "toy_seg":
        # enc3 is linear: the representation layer keeps signed activations,
        # so per-position cosine similarity spans its full range instead of
        # being floored near 1 as it would be for nonnegative ReLU vectors.
        convs = [conv("enc0", 3, c, 3), conv("enc1", c, c, 3),
                 conv("enc2", c, c, 3), conv("enc3", c, c, 3, relu=False),
                 conv("head", c, k, 1, relu=False)]
    else:  # toy_cls
        convs = [conv("enc0", 3, c, 3, stride=2), conv("enc1", c, c, 3, stride=2),
                 conv("enc2", c, c, 3)]
        rng = child_rng(seed, "init/fc")
        wfc = ad.Tensor(_he_init(rng, (c, k), c), requires_grad=True)
        bfc = ad.Tensor(np.zeros(k), requires_grad=True)
        head = [_gap_layer, _flatten_layer, LinearLayer("fc", wfc, bfc)]
    return Model(descriptor, convs, head)


def split_forward(model, x):
    """(features, logits) with the composition equal to the full forward."""
    feat = model.features(ad.as_tensor(x))
    return feat, model.head_forward(feat)


# Background pixels dominate the dense task; downweighting them keeps the
# optimizer from settling into the all-background solution.
SEG_CLASS_WEIGHTS = np.array([0.25, 1.0, 1.0, 1.0])


def task_loss(model, x, y):
    """Scalar cross-entropy for the model's task; differentiable w.r.t. x."""
    logits = model.forward(ad.as_tensor(x))
    weights = SEG_CLASS_WEIGHTS if model.descriptor.arch == "toy_seg" else None
    return ad.cross_entropy_logits(logits, y, class_weights=weights)


def quantize_to_f32(model):
    """Round parameters to float32 precision so checkpoint IO is lossless."""
    for _, p in model.parameters():
        p.data = p.data.astype(np.float32).astype(np.float64)


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    adversarial_eps: float = 0.0
    adversarial_steps: int = 5
    noise_sigma: float = 0.0  # Gaussian input augmentation (tolerance to
    # unstructured noise, without conferring adversarial robustness)
    lr_decay: float = 1.0  # multiplicative per-epoch decay
    clip_norm: float = 1.0  # global gradient-norm cap; 0 disables


def train(model, images, labels, cfg: TrainConfig):
    """SGD with momentum; optional adversarial mode perturbs each batch with
    PGD before the update. Returns per-epoch mean losses."""
    if len(images) == 0:
        raise ValueError("empty training set")
    params = model.parameters()
    velocity = {name: np.zeros_like(p.data) for name, p in params}
    order_rng = child_rng(cfg.seed, "train/shuffle")
    noise_rng = child_rng(cfg.seed, "train/noise-aug")
    history = []
    lr = cfg.lr
    for epoch in range(cfg.epochs):
        idx = order_rng.permutation(len(images))
        losses = []
        for start in range(0, len(images), cfg.batch_size):
            sel = idx[start:start + cfg.batch_size]
            xb, yb = images[sel], labels[sel]
            if cfg.noise_sigma > 0:
                xb = np.clip(xb + cfg.noise_sigma
                             * noise_rng.standard_normal(xb.shape), 0.0, 1.0)
            if cfg.adversarial_eps > 0:
                from .attacks import AttackConfig, attack
                acfg = AttackConfig(method="pgd", epsilon=cfg.adversarial_eps,
                                    steps=cfg.adversarial_steps,
                                    step_size=cfg.adversarial_eps / 2,
                                    seed=cfg.seed * 1000 + epoch)
                xb = attack(model, xb, yb, acfg)
            loss = task_loss(model, xb, yb)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"training loss diverged at epoch {epoch}")
            losses.append(loss.item())
            ad.backward(loss)
            if cfg.clip_norm > 0:
                gnorm = np.sqrt(sum(float((p.grad ** 2).sum()) for _, p in params))
                if gnorm > cfg.clip_norm:
                    scale = cfg.clip_norm / gnorm
                    for _, p in params:
                        p.grad = p.grad * scale
            for name, p in params:
                v = velocity[name] * cfg.momentum - lr * p.grad
                velocity[name] = v
                p.data = p.data + v
                p.zero_grad()
        history.append(float(np.mean(losses)))
        lr *= cfg.lr_decay
    quantize_to_f32(model)
    return history
