"""Encoder-decoder patch localizer with per-block Bayesian placement, and the victim classifier.

The localizer is a scaled-down DeepLab-style network:

* four encoder blocks B1-B4 of two 3x3 convs each (B2-B4 enter with stride 2),
* a pyramid block of three dilated 3x3 convs (dilation 1/2/4) whose outputs
  are concatenated with the B4 features,
* a decoder conv at 1/8 resolution, nearest upsampling back to full
  resolution, concatenation with the B1 features and a 1x1 conv head
  followed by a sigmoid.

Blocks flagged in the :class:`PlacementMask` carry Gaussian posteriors over
all of their weights and biases; the rest are point estimates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import derive_seed
from .tensor import Graph, Node, evaluate, gradients, load_dtf, save_dtf
from .variational import (
    GaussianPosterior,
    IsoGaussian,
    Prior,
    inverse_softplus,
    kl_node,
    prior_from_string,
    prior_to_string,
    weight_node,
)

log = logging.getLogger(__name__)

RHO_INIT = inverse_softplus(0.01)
DEFAULT_CHANNELS = (16, 32, 64, 64)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class PlacementMask:
    b1: bool = False
    b2: bool = False
    b3: bool = False
    b4: bool = False
    decoder: bool = False

    @classmethod
    def parse(cls, text: str) -> "PlacementMask":
        """``"1110"`` (encoder blocks) or ``"11101"`` (fifth digit = decoder)."""
        text = text.strip()
        if len(text) not in (4, 5) or set(text) - {"0", "1"}:
            raise ValueError(f"placement mask must be 4 or 5 binary digits, got {text!r}")
        return cls(*(c == "1" for c in text))

    @property
    def encoder(self) -> tuple[bool, bool, bool, bool]:
        return (self.b1, self.b2, self.b3, self.b4)

    @property
    def pyramid(self) -> bool:
        # the pyramid block only turns Bayesian when the whole encoder is
        return all(self.encoder)

    @property
    def all_bayes(self) -> bool:
        return all(self.encoder) and self.decoder

    @property
    def any_bayes(self) -> bool:
        return any(self.encoder) or self.decoder

    def __str__(self) -> str:
        s = "".join("1" if b else "0" for b in self.encoder)
        return s + ("1" if self.decoder else "")


@dataclass(frozen=True)
class ConvSpec:
    name: str
    block: str
    c_in: int
    c_out: int
    k: int = 3
    stride: int = 1
    dilation: int = 1
    bayesian: bool = False

    @property
    def padding(self) -> int:
        return self.dilation * (self.k // 2)


def _init_params(specs, seed: int) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    for spec in specs:
        rng = np.random.default_rng(derive_seed(seed, "init", spec.name))
        fan_in = spec.c_in * spec.k * spec.k
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(spec.c_out, spec.c_in, spec.k, spec.k))
        b = np.zeros((spec.c_out, 1, 1, 1))
        if spec.bayesian:
            params[f"{spec.name}.w.mu"] = w
            params[f"{spec.name}.w.rho"] = np.full_like(w, RHO_INIT)
            params[f"{spec.name}.b.mu"] = b
            params[f"{spec.name}.b.rho"] = np.full_like(b, RHO_INIT)
        else:
            params[f"{spec.name}.w"] = w
            params[f"{spec.name}.b"] = b
    return params


class _ConvNet:
    """Shared graph plumbing: parameter leaves, noise leaves, sampling."""

    specs: list[ConvSpec]
    params: dict[str, np.ndarray]

    def _declare(self, g: Graph) -> None:
        self._param_leaves = {k: g.leaf(k) for k in self.params}
        self._eps_leaves: dict[str, Node] = {}
        self._weights: dict[str, Node] = {}
        for spec in self.specs:
            for part in ("w", "b"):
                key = f"{spec.name}.{part}"
                if spec.bayesian:
                    eps = g.leaf(f"{key}.eps")
                    self._eps_leaves[key] = eps
                    self._weights[key] = weight_node(g, self._param_leaves[f"{key}.mu"], self._param_leaves[f"{key}.rho"], eps)
                else:
                    self._weights[key] = self._param_leaves[key]

    def _conv(self, g: Graph, x: Node, spec: ConvSpec, relu: bool = True) -> Node:
        y = g.conv2d(x, self._weights[f"{spec.name}.w"], stride=spec.stride, padding=spec.padding,
                     dilation=spec.dilation, name=spec.name) + self._weights[f"{spec.name}.b"]
        return g.relu(y) if relu else y

    @property
    def variational_keys(self) -> list[str]:
        return [f"{s.name}.{p}" for s in self.specs if s.bayesian for p in ("w", "b")]

    def posteriors(self) -> dict[str, GaussianPosterior]:
        return {k: GaussianPosterior(self.params[f"{k}.mu"], self.params[f"{k}.rho"]) for k in self.variational_keys}

    def sample_noise(self, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        return {k: rng.standard_normal(self.params[f"{k}.mu"].shape) for k in self.variational_keys}

    def _bindings(self, seed: int | None, noise: dict[str, np.ndarray] | None = None) -> dict[Node, np.ndarray]:
        bind = {self._param_leaves[k]: v for k, v in self.params.items()}
        if self._eps_leaves:
            if noise is None:
                if seed is None:
                    raise ValueError("a seed is required to sample Bayesian layers")
                noise = self.sample_noise(seed)
            for k, leaf in self._eps_leaves.items():
                bind[leaf] = noise[k]
        return bind

    @property
    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    @property
    def num_variational_parameters(self) -> int:
        return int(sum(self.params[f"{k}.{p}"].size for k in self.variational_keys for p in ("mu", "rho")))


class LocalizerModel(_ConvNet):
    def __init__(self, mask: PlacementMask, prior: Prior, m: int, channels=DEFAULT_CHANNELS, seed: int = 0):
        if m < 8 or m % 8:
            raise ValueError(f"image side must be a positive multiple of 8, got {m}")
        if len(channels) != 4:
            raise ValueError("channel schedule needs four entries (B1..B4)")
        self.mask, self.prior, self.m, self.seed = mask, prior, m, seed
        self.channels = tuple(int(c) for c in channels)
        c1, c2, c3, c4 = self.channels
        cp = max(c4 // 2, 1)
        cd = max(c2, 1)
        enc = mask.encoder
        self.specs = [
            ConvSpec("b1.conv1", "b1", 3, c1, bayesian=enc[0]),
            ConvSpec("b1.conv2", "b1", c1, c1, bayesian=enc[0]),
            ConvSpec("b2.conv1", "b2", c1, c2, stride=2, bayesian=enc[1]),
            ConvSpec("b2.conv2", "b2", c2, c2, bayesian=enc[1]),
            ConvSpec("b3.conv1", "b3", c2, c3, stride=2, bayesian=enc[2]),
            ConvSpec("b3.conv2", "b3", c3, c3, bayesian=enc[2]),
            ConvSpec("b4.conv1", "b4", c3, c4, stride=2, bayesian=enc[3]),
            ConvSpec("b4.conv2", "b4", c4, c4, bayesian=enc[3]),
            ConvSpec("pyr.d1", "pyramid", c4, cp, dilation=1, bayesian=mask.pyramid),
            ConvSpec("pyr.d2", "pyramid", c4, cp, dilation=2, bayesian=mask.pyramid),
            ConvSpec("pyr.d4", "pyramid", c4, cp, dilation=4, bayesian=mask.pyramid),
            ConvSpec("dec.conv1", "decoder", c4 + 3 * cp, cd, bayesian=mask.decoder),
            ConvSpec("dec.conv2", "decoder", cd + c1, 1, k=1, bayesian=mask.decoder),
        ]
        self.params = _init_params(self.specs, seed)
        self._build_graph()

    def _build_graph(self) -> None:
        g = self.graph = Graph()
        self._declare(g)
        self.x = g.leaf("image")
        s = {spec.name: spec for spec in self.specs}
        h = g.transpose(self.x, (3, 0, 1, 2))
        f1 = self._conv(g, self._conv(g, h, s["b1.conv1"]), s["b1.conv2"])
        f2 = self._conv(g, self._conv(g, f1, s["b2.conv1"]), s["b2.conv2"])
        f3 = self._conv(g, self._conv(g, f2, s["b3.conv1"]), s["b3.conv2"])
        f4 = self._conv(g, self._conv(g, f3, s["b4.conv1"]), s["b4.conv2"])
        pyr = [self._conv(g, f4, s[k]) for k in ("pyr.d1", "pyr.d2", "pyr.d4")]
        d = self._conv(g, g.concat([f4] + pyr, axis=0), s["dec.conv1"])
        for _ in range(3):
            d = g.upsample2x(d)
        z = self._conv(g, g.concat([d, f1], axis=0), s["dec.conv2"], relu=False)
        self.logits = g.reshape(z, (-1, self.m, self.m), name="logits")
        self.prob = g.sigmoid(self.logits, name="prob")
        self.y = g.leaf("mask")
        self.kl_weight = g.leaf("kl_weight")
        # mean per-pixel BCE on logits: softplus(z) - y z
        self.bce = g.mean(g.softplus(self.logits) - self.y * self.logits, name="bce")
        kls = []
        for spec in self.specs:
            if not spec.bayesian:
                continue
            for part in ("w", "b"):
                key = f"{spec.name}.{part}"
                kls.append(kl_node(g, self._param_leaves[f"{key}.mu"], self._param_leaves[f"{key}.rho"],
                                   self._eps_leaves[key], self.prior, self._weights[key]))
        kl = kls[0] if kls else g.constant(0.0)
        for extra in kls[1:]:
            kl = kl + extra
        self.kl = kl
        self.loss = self.kl * self.kl_weight + self.bce

    @property
    def is_bayesian(self) -> bool:
        return bool(self.variational_keys)

    def config_dict(self) -> dict[str, str]:
        return {
            "mask": str(self.mask),
            "prior": prior_to_string(self.prior),
            "m": str(self.m),
            "channels": ",".join(map(str, self.channels)),
            "seed": str(self.seed),
        }

    def predict_proba(self, images: np.ndarray, seed: int | None = None, noise=None) -> np.ndarray:
        """Probability maps (B, M, M) for a batch (B, M, M, 3) under one weight draw."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != (self.m, self.m, 3):
            raise ValueError(f"expected images of shape (B, {self.m}, {self.m}, 3), got {images.shape}")
        bind = self._bindings(seed, noise)
        bind[self.x] = images
        (p,) = evaluate(self.graph, bind, [self.prob])
        return p

    def loss_and_grads(self, images, masks, kl_weight: float, seed: int | None):
        bind = self._bindings(seed)
        bind[self.x] = images
        bind[self.y] = masks
        bind[self.kl_weight] = np.float64(kl_weight)
        leaves = [self._param_leaves[k] for k in self.params]
        grads, values = gradients(self.graph, self.loss, leaves, bind, return_values=True)
        named = {k: grads[self._param_leaves[k]] for k in self.params}
        return (float(values[self.kl.index]), float(values[self.bce.index]), float(values[self.loss.index])), named

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = [f"{k}={v}" for k, v in self.config_dict().items()]
        (directory / "config.txt").write_text("\n".join(lines) + "\n")
        for key, value in self.params.items():
            save_dtf(directory / f"{key}.dtf", value)

    @classmethod
    def load(cls, directory: str | Path) -> "LocalizerModel":
        directory = Path(directory)
        cfg = dict(line.split("=", 1) for line in (directory / "config.txt").read_text().splitlines() if "=" in line)
        model = cls(
            PlacementMask.parse(cfg["mask"]),
            prior_from_string(cfg["prior"]),
            int(cfg["m"]),
            tuple(int(c) for c in cfg["channels"].split(",")),
            int(cfg["seed"]),
        )
        for key in model.params:
            path = directory / f"{key}.dtf"
            if not path.exists():
                raise FileNotFoundError(f"checkpoint is missing {path.name}")
            value = load_dtf(path)
            if value.shape != model.params[key].shape:
                raise ValueError(f"{path.name}: shape {value.shape} != expected {model.params[key].shape}")
            model.params[key] = value
        return model


def build_localizer(mask: PlacementMask | str, prior: Prior | None = None, m: int = 64,
                    channels=DEFAULT_CHANNELS, seed: int = 0) -> LocalizerModel:
    if isinstance(mask, str):
        mask = PlacementMask.parse(mask)
    return LocalizerModel(mask, prior or IsoGaussian(), m, channels, seed)


def localizer_forward(model: LocalizerModel, image: np.ndarray, seed: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (model.m, model.m, 3):
        raise ValueError(f"expected an image of shape ({model.m}, {model.m}, 3), got {image.shape}")
    return model.predict_proba(image[None], seed)[0]


def mc_sample_seed(base_seed: int, index: int) -> int:
    return derive_seed(base_seed, "mc", index)


def mc_predict(model: LocalizerModel, images: np.ndarray, n_samples: int = 30, seed: int = 0) -> np.ndarray:
    """``n_samples`` probability maps per image.

    A single image (M, M, 3) gives an array (N, M, M); a batch (B, M, M, 3)
    gives (N, B, M, M).  Draw ``i`` uses weights sampled with
    ``mc_sample_seed(seed, i)`` for every image in the batch.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    batch = images[None] if single else images
    if not model.is_bayesian:
        p = model.predict_proba(batch)
        out = np.broadcast_to(p, (n_samples,) + p.shape).copy()
    else:
        out = np.stack([model.predict_proba(batch, mc_sample_seed(seed, i)) for i in range(n_samples)])
    return out[:, 0] if single else out


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class LossTrace:
    epochs: list[tuple[int, float, float, float]] = field(default_factory=list)
    steps: list[tuple[float, float, float, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        rows = ["epoch,kl,bce,total"] + [f"{e},{float(kl)!r},{float(bce)!r},{float(tot)!r}" for e, kl, bce, tot in self.epochs]
        return "\n".join(rows) + "\n"


def default_kl_weight(n_train: int, m: int) -> float:
    """KL scale matching a mean-per-pixel likelihood: 1 / (images * pixels)."""
    return 1.0 / (n_train * m * m)


def train_localizer(model: LocalizerModel, images: np.ndarray, masks: np.ndarray, epochs: int = 30,
                    batch_size: int = 8, lr: float = 1e-3, kl_weight: float | None = None, seed: int = 0,
                    progress: bool = False) -> LossTrace:
    """Minibatch ADAM on ``kl_weight * KL + mean BCE``; updates ``model.params`` in place.

    Each minibatch draws fresh weight noise.  ``kl_weight=None`` uses
    :func:`default_kl_weight`.  Raises :class:`TrainingDiverged` on a
    non-finite loss.
    """
    images = np.asarray(images, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    n = len(images)
    if n == 0:
        raise ValueError("training set is empty")
    if not np.isin(masks, (0.0, 1.0)).all():
        raise ValueError("masks must be binary")
    if kl_weight is None:
        kl_weight = default_kl_weight(n, model.m)
    opt = Adam(model.params, lr=lr)
    trace = LossTrace()
    for epoch in range(epochs):
        order = np.random.default_rng(derive_seed(seed, "shuffle", epoch)).permutation(n)
        sums = np.zeros(3)
        batches = 0
        for bi, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            (kl, bce, total), grads = model.loss_and_grads(images[idx], masks[idx], kl_weight,
                                                           derive_seed(seed, "noise", epoch, bi))
            if not np.isfinite(total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi} (kl={kl}, bce={bce})")
            opt.step(model.params, grads)
            trace.steps.append((kl_weight, kl, bce, total))
            sums += (kl, bce, total)
            batches += 1
        kl, bce, total = (float(v) for v in sums / batches)
        trace.epochs.append((epoch, kl, bce, total))
        if progress:
            log.info("epoch %d kl=%.4g bce=%.5f total=%.5f", epoch, kl, bce, total)
    return trace


# ---------------------------------------------------------------------------
# victim classifier


class VictimClassifier(_ConvNet):
    """Three conv blocks, global average pooling and a linear head."""

    def __init__(self, num_classes: int, channels=(8, 16, 32), seed: int = 0):
        if num_classes < 2:
            raise ValueError("need at least two classes")
        self.num_classes, self.seed = num_classes, seed
        self.channels = tuple(channels)
        c1, c2, c3 = self.channels
        self.specs = [
            ConvSpec("v1", "v1", 3, c1),
            ConvSpec("v2", "v2", c1, c2, stride=2),
            ConvSpec("v3", "v3", c2, c3, stride=2),
        ]
        self.params = _init_params(self.specs, seed)
        rng = np.random.default_rng(derive_seed(seed, "init", "head"))
        self.params["head.w"] = rng.normal(0.0, math.sqrt(1.0 / c3), size=(c3, num_classes))
        self.params["head.b"] = np.zeros((1, num_classes))
        self._build_graph()

    def _build_graph(self) -> None:
        g = self.graph = Graph()
        self._declare(g)
        self.x = g.leaf("image")
        h = g.transpose(self.x, (3, 0, 1, 2))
        for spec in self.specs:
            h = self._conv(g, h, spec)
        pooled = g.transpose(g.mean(h, axis=(2, 3)), (1, 0))
        self.logits = pooled @ self._param_leaves["head.w"] + self._param_leaves["head.b"]
        self.onehot = g.leaf("onehot")
        # per-image cross-entropy: logsumexp(z) - z[y]
        self.per_image = g.logsumexp(self.logits, axis=1) - g.sum(self.logits * self.onehot, axis=1)
        self.loss_sum = g.sum(self.per_image)
        self.loss = g.mean(self.per_image)

    def _onehot(self, labels) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        return np.eye(self.num_classes)[labels]

    def logits_of(self, images: np.ndarray) -> np.ndarray:
        bind = self._bindings(None)
        bind[self.x] = np.asarray(images, dtype=np.float64)
        (z,) = evaluate(self.graph, bind, [self.logits])
        return z

    def softmax(self, images: np.ndarray) -> np.ndarray:
        z = self.logits_of(images)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits_of(images), axis=1)

    def losses(self, images, labels) -> np.ndarray:
        bind = self._bindings(None)
        bind[self.x] = np.asarray(images, dtype=np.float64)
        bind[self.onehot] = self._onehot(labels)
        (per,) = evaluate(self.graph, bind, [self.per_image])
        return per

    def loss_and_input_grad(self, images, labels):
        """Per-image cross-entropy and its gradient with respect to the images."""
        bind = self._bindings(None)
        bind[self.x] = np.asarray(images, dtype=np.float64)
        bind[self.onehot] = self._onehot(labels)
        grads, values = gradients(self.graph, self.loss_sum, [self.x], bind, return_values=True)
        return values[self.per_image.index], grads[self.x]

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.txt").write_text(
            f"num_classes={self.num_classes}\nchannels={','.join(map(str, self.channels))}\nseed={self.seed}\n")
        for key, value in self.params.items():
            save_dtf(directory / f"{key}.dtf", value)

    @classmethod
    def load(cls, directory: str | Path) -> "VictimClassifier":
        directory = Path(directory)
        cfg = dict(line.split("=", 1) for line in (directory / "config.txt").read_text().splitlines() if "=" in line)
        model = cls(int(cfg["num_classes"]), tuple(int(c) for c in cfg["channels"].split(",")), int(cfg["seed"]))
        for key in model.params:
            model.params[key] = load_dtf(directory / f"{key}.dtf")
        return model


def train_victim(images: np.ndarray, labels: np.ndarray, num_classes: int, epochs: int = 10, lr: float = 1e-2,
                 batch_size: int = 16, seed: int = 0, channels=(8, 16, 32)) -> VictimClassifier:
    victim = VictimClassifier(num_classes, channels, seed)
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    opt = Adam(victim.params, lr=lr)
    leaves = [victim._param_leaves[k] for k in victim.params]
    n = len(images)
    for epoch in range(epochs):
        order = np.random.default_rng(derive_seed(seed, "victim-shuffle", epoch)).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            bind = victim._bindings(None)
            bind[victim.x] = images[idx]
            bind[victim.onehot] = victim._onehot(labels[idx])
            grads, values = gradients(victim.graph, victim.loss, leaves, bind, return_values=True)
            if not np.isfinite(values[victim.loss.index]):
                raise TrainingDiverged(f"victim loss is not finite at epoch {epoch}")
            opt.step(victim.params, {k: grads[victim._param_leaves[k]] for k in victim.params})
    return victim


def accuracy(victim: VictimClassifier, images, labels, batch_size: int = 64) -> float:
    preds = np.concatenate([victim.predict(images[i : i + batch_size]) for i in range(0, len(images), batch_size)])
    return float(np.mean(preds == np.asarray(labels)))
