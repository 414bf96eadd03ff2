"""Comparison methods that share the Episode -> binary mask interface.

Base classifiers (1-NN, logistic regression) and fine-tuning reuse one encoder
trained for multi-class pixel labelling on the training classes; the Siamese
matcher learns its own encoder together with a weighted L1 pixel similarity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import Episode, FoldSpec, SegDataset, sample_episode, to_float_image
from .model import THRESHOLD, TwoBranchModel, _conv_params, dense_encoder, predict_kshot
from .optim import SgdState, sgd_step
from .tensor import Tensor
from .training import downsample_mask

logger = logging.getLogger(__name__)

PREDICTOR_NAMES = ("nn1", "logreg", "finetune", "siamese", "ours")


class ConvergenceError(RuntimeError):
    pass


@dataclass
class BaselineTrainConfig:
    iterations: int = 4000
    learning_rate: float = 1e-4
    momentum: float = 0.9
    seed: int = 7


def _init_encoder(rng: np.random.Generator, prefix: str, channels: Sequence[int]) -> dict[str, Tensor]:
    params, cin = {}, 3
    for i, c in enumerate(channels):
        params[f"{prefix}.conv{i}.weight"], params[f"{prefix}.conv{i}.bias"] = _conv_params(rng, cin, c, f"{prefix}.conv{i}")
        cin = c
    return params


def _upsample_labels(labels: np.ndarray, size: int) -> np.ndarray:
    """Bilinear upsampling of a {0,1} (or probability) map, thresholded at 0.5."""
    up = T.bilinear_upsample(Tensor(labels.astype(np.float64)[None]), size, size).data[0]
    return (up >= THRESHOLD).astype(np.uint8)


# ---------------------------------------------------------------------------
# base feature network


@dataclass
class BaseFeatureNet:
    channels: tuple[int, ...]
    train_labels: tuple[int, ...]
    params: dict[str, Tensor]
    image_size: int = 64

    @classmethod
    def init(cls, train_labels, channels=(32, 64, 64), seed: int = 7, image_size: int = 64) -> "BaseFeatureNet":
        rng = np.random.default_rng(seed)
        params = _init_encoder(rng, "enc", channels)
        n_out = len(train_labels) + 1
        params["head.weight"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / channels[-1]), size=(n_out, channels[-1], 1, 1)),
                                       requires_grad=True, name="head.weight")
        params["head.bias"] = Tensor(np.zeros(n_out), requires_grad=True, name="head.bias")
        return cls(tuple(channels), tuple(sorted(train_labels)), params, image_size)

    @property
    def stride(self) -> int:
        return 2 ** (len(self.channels) - 1)

    @property
    def num_outputs(self) -> int:
        return self.params["head.bias"].shape[0]

    def features(self, image: np.ndarray) -> Tensor:
        return dense_encoder(self.params, "enc", len(self.channels), Tensor(image))

    def logits(self, image: np.ndarray) -> Tensor:
        return T.conv2d(self.features(image), self.params["head.weight"], self.params["head.bias"])

    def class_index(self, raster: np.ndarray) -> np.ndarray:
        lut = np.zeros(256, dtype=np.int64)
        for i, c in enumerate(self.train_labels, 1):
            lut[c] = i
        return lut[raster]

    def save(self, path) -> None:
        save_checkpoint(path, {k: p.data for k, p in self.params.items()}, 0,
                        {"kind": "basenet", "channels": list(self.channels),
                         "train_labels": list(self.train_labels), "image_size": self.image_size})

    @classmethod
    def load(cls, path) -> "BaseFeatureNet":
        tensors, _, hdr = load_checkpoint(path)
        if hdr.get("kind") != "basenet":
            raise CheckpointError(f"{path}: not a base network checkpoint")
        net = cls.init(hdr["train_labels"], tuple(hdr["channels"]), image_size=hdr["image_size"])
        _fill(net.params, tensors, path)
        return net

    def clone(self) -> "BaseFeatureNet":
        params = {k: Tensor(p.data.copy(), requires_grad=True, name=p.name) for k, p in self.params.items()}
        return BaseFeatureNet(self.channels, self.train_labels, params, self.image_size)


def _fill(params: dict[str, Tensor], tensors: dict[str, np.ndarray], path) -> None:
    for k, p in params.items():
        if k not in tensors or tensors[k].shape != p.shape:
            raise CheckpointError(f"{path}: missing or misshapen tensor {k}")
        p.data[...] = tensors[k]


def plurality_downsample(labels: np.ndarray, stride: int, n_classes: int) -> np.ndarray:
    """Most frequent label per stride x stride cell; ties go to the lower index."""
    H, W = labels.shape
    cells = labels.reshape(H // stride, stride, W // stride, stride).transpose(0, 2, 1, 3).reshape(H // stride, W // stride, -1)
    counts = (cells[..., None] == np.arange(n_classes)).sum(axis=2)
    return counts.argmax(axis=-1)


def train_base_classifier(dataset: SegDataset, fold: FoldSpec, config: BaselineTrainConfig,
                          channels=(32, 64, 64)) -> BaseFeatureNet:
    """Softmax cross-entropy over train classes + background, one image per step."""
    net = BaseFeatureNet.init(sorted(fold.train_labels), channels, config.seed, dataset.images[0].shape[0])
    stray = {c for cls in dataset.present for c in cls} - fold.train_labels
    if stray:
        raise ValueError(f"train_base_classifier: dataset contains non-train classes {sorted(stray)}")
    rng = np.random.default_rng(config.seed)
    params = list(net.params.values())
    state = SgdState(config.learning_rate, config.momentum)
    for it in range(config.iterations):
        i = int(rng.integers(len(dataset)))
        target = plurality_downsample(net.class_index(dataset.labels[i]), net.stride, net.num_outputs)
        with T.Tape() as tape:
            loss = T.softmax_cross_entropy_sum(net.logits(to_float_image(dataset.images[i])), target)
        T.backward(tape, loss)
        sgd_step(params, state)
        if (it + 1) % 1000 == 0:
            logger.info("base classifier iter %d loss %.3f", it + 1, loss.item())
    return net


def _support_pixels(feature_fn: Callable[[np.ndarray], np.ndarray], support_set, stride: int):
    """Pool feature vectors and binary labels of all support pixels, support by support."""
    feats, labels = [], []
    for image, mask in support_set:
        F = feature_fn(image)
        feats.append(F.reshape(F.shape[0], -1).T)
        labels.append(downsample_mask(mask, stride).ravel())
    if not feats:
        raise ValueError("empty support set")
    return np.concatenate(feats), np.concatenate(labels)


def _query_pixels(F: np.ndarray) -> np.ndarray:
    return F.reshape(F.shape[0], -1).T


def nearest_support(query: np.ndarray, support: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Index of the Euclidean-nearest support row for each query row (lowest index on ties)."""
    if len(support) == 0:
        raise ValueError("no support features")
    out = np.empty(len(query), dtype=np.int64)
    for s in range(0, len(query), chunk):
        d = ((query[s : s + chunk, None, :] - support[None, :, :]) ** 2).sum(axis=-1)
        out[s : s + chunk] = d.argmin(axis=1)
    return out


def nn1_predict(net: BaseFeatureNet, query: np.ndarray, support_set) -> np.ndarray:
    with T.no_tape():
        feat = lambda img: net.features(img).data
        sup_f, sup_y = _support_pixels(feat, support_set, net.stride)
        F = feat(query)
        labels = sup_y[nearest_support(_query_pixels(F), sup_f)].reshape(F.shape[1:])
    return _upsample_labels(labels, query.shape[1])


# ---------------------------------------------------------------------------
# logistic regression on support pixels


def fit_logreg(X: np.ndarray, y: np.ndarray, reg: float = 1e-3, max_iter: int = 500,
               tol: float = 1e-10) -> tuple[np.ndarray, float]:
    """Minimise mean BCE + reg/2 * |w|^2 (bias unpenalised) by damped Newton steps."""
    n, d = X.shape
    Xb = np.hstack([X, np.ones((n, 1))])
    coef = np.zeros(d + 1)
    penalty = np.full(d + 1, reg)
    penalty[-1] = 0.0

    def objective(th):
        z = Xb @ th
        return (np.logaddexp(0.0, z) - y * z).mean() + 0.5 * reg * th[:-1] @ th[:-1]

    f = objective(coef)
    for _ in range(max_iter):
        p = T._sigmoid(Xb @ coef)
        grad = Xb.T @ (p - y) / n + penalty * coef
        if np.abs(grad).max() < tol:
            return coef[:-1], float(coef[-1])
        H = (Xb * (p * (1 - p))[:, None]).T @ Xb / n + np.diag(penalty) + 1e-12 * np.eye(d + 1)
        step = np.linalg.solve(H, grad)
        t = 1.0
        while t > 1e-10:
            cand = coef - t * step
            fc = objective(cand)
            if fc <= f - 1e-4 * t * grad @ step:
                break
            t *= 0.5
        coef, f = cand, fc
    raise ConvergenceError(f"logistic regression did not converge in {max_iter} iterations")


def logreg_predict(net: BaseFeatureNet, query: np.ndarray, support_set, reg: float = 1e-3,
                   max_iter: int = 500) -> np.ndarray:
    with T.no_tape():
        feat = lambda img: net.features(img).data
        X, y = _support_pixels(feat, support_set, net.stride)
        F = feat(query)
    if y.min() == y.max():
        return np.full(query.shape[1:], int(y[0]), dtype=np.uint8)
    w, b = fit_logreg(X, y.astype(np.float64), reg, max_iter)
    prob = T._sigmoid(np.tensordot(w, F, axes=1) + b)
    return _upsample_labels(prob, query.shape[1])


# ---------------------------------------------------------------------------
# fine-tuning


def finetune_predict(net: BaseFeatureNet, query: np.ndarray, support_set, steps: int = 30,
                     lr: float = 0.1, return_prob: bool = False):
    """Adapt a private copy of the last two encoder layers plus a fresh binary head.

    Features feeding the head are standardised per channel with statistics of
    the current support pixels (treated as constants).
    """
    work = net.clone()
    n = len(work.channels)
    start = max(n - 2, 0)
    trainable = [work.params[f"enc.conv{i}.{kind}"] for i in range(start, n) for kind in ("weight", "bias")]
    D = work.channels[-1]
    w = Tensor(np.zeros(D), requires_grad=True, name="ft.w")
    b = Tensor(np.zeros(1), requires_grad=True, name="ft.b")
    trainable += [w, b]

    def frozen_input(image):
        x = Tensor(image)
        with T.no_tape():
            for i in range(start):
                x = T.maxpool2(T.relu(T.conv2d(x, work.params[f"enc.conv{i}.weight"],
                                              work.params[f"enc.conv{i}.bias"], 1, 1)))
        return Tensor(x.data)

    def head_features(xs):
        return [dense_encoder(work.params, "enc", n, x, start=start) for x in xs]

    sup_in = [frozen_input(img) for img, _ in support_set]
    targets = [downsample_mask(m, work.stride) for _, m in support_set]
    n_pix = sum(t.size for t in targets)
    state = SgdState(lr, 0.0)
    losses = []

    def stats(feats):
        flat = np.concatenate([f.data.reshape(D, -1) for f in feats], axis=1)
        return flat.mean(axis=1), flat.std(axis=1) + 1e-5

    for _ in range(steps):
        with T.Tape() as tape:
            feats = head_features(sup_in)
            mu, sd = stats(feats)
            total = None
            for f, tgt in zip(feats, targets):
                z = T.pixel_logits(T.normalize_channels(f, mu, sd), w, b)
                term = T.bce_with_logits_sum(z, tgt)
                total = term if total is None else T.add(total, term)
            loss = T.mul(total, Tensor(1.0 / n_pix))
        T.backward(tape, loss)
        losses.append(loss.item())
        sgd_step(trainable, state)
    with T.no_tape():
        mu, sd = stats(head_features(sup_in))
        Fq = dense_encoder(work.params, "enc", n, frozen_input(query), start=start)
        prob = T._sigmoid(T.pixel_logits(T.normalize_channels(Fq, mu, sd), w, b).data)
    up = T.bilinear_upsample(Tensor(prob[None]), query.shape[1], query.shape[2]).data[0]
    mask = (up >= THRESHOLD).astype(np.uint8)
    if return_prob:
        return mask, up, losses
    return mask


# ---------------------------------------------------------------------------
# Siamese dense matching


@dataclass
class SiameseMatcher:
    channels: tuple[int, ...]
    params: dict[str, Tensor]
    image_size: int = 64

    @classmethod
    def init(cls, channels=(32, 64, 64), seed: int = 7, image_size: int = 64) -> "SiameseMatcher":
        rng = np.random.default_rng(seed)
        params = _init_encoder(rng, "enc", channels)
        D = channels[-1]
        params["metric.weight"] = Tensor(np.full(D, -1.0 / D), requires_grad=True, name="metric.weight")
        params["metric.bias"] = Tensor(np.zeros(1), requires_grad=True, name="metric.bias")
        return cls(tuple(channels), params, image_size)

    @property
    def stride(self) -> int:
        return 2 ** (len(self.channels) - 1)

    def features(self, image: np.ndarray) -> Tensor:
        return dense_encoder(self.params, "enc", len(self.channels), Tensor(image))

    def similarity_logits(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Pairwise logits between rows of ``a`` [N,D] and ``b`` [M,D]."""
        weight, bias = self.params["metric.weight"].data, self.params["metric.bias"].data[0]
        return np.abs(a[:, None, :] - b[None, :, :]) @ weight + bias

    def similarity(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return T._sigmoid(self.similarity_logits(a, b))

    def save(self, path) -> None:
        save_checkpoint(path, {k: p.data for k, p in self.params.items()}, 0,
                        {"kind": "siamese", "channels": list(self.channels), "image_size": self.image_size})

    @classmethod
    def load(cls, path) -> "SiameseMatcher":
        tensors, _, hdr = load_checkpoint(path)
        if hdr.get("kind") != "siamese":
            raise CheckpointError(f"{path}: not a Siamese matcher checkpoint")
        m = cls.init(tuple(hdr["channels"]), image_size=hdr["image_size"])
        _fill(m.params, tensors, path)
        return m


@dataclass
class SiameseTrainConfig(BaselineTrainConfig):
    pixel_fraction: float = 0.5


def _pair_batch(matcher: SiameseMatcher, ep: Episode, rng: np.random.Generator, fraction: float):
    fq, fs = matcher.features(ep.query_image), matcher.features(ep.support[0][0])
    n = fq.shape[1] * fq.shape[2]
    k = max(1, int(round(fraction * n)))
    iq = np.sort(rng.choice(n, size=k, replace=False))
    is_ = np.sort(rng.choice(n, size=k, replace=False))
    yq = downsample_mask(ep.query_mask, matcher.stride).ravel()[iq]
    ys = downsample_mask(ep.support[0][1], matcher.stride).ravel()[is_]
    target = (yq[:, None] == ys[None, :]).astype(np.float64)
    logits = T.weighted_l1_logits(T.pixels(fq, iq), T.pixels(fs, is_), matcher.params["metric.weight"], matcher.params["metric.bias"])
    return logits, target


def siamese_train(dataset: SegDataset, fold: FoldSpec, config: SiameseTrainConfig,
                  channels=(32, 64, 64)) -> SiameseMatcher:
    """Pixel verification: same/different binary label for sampled pixel pairs."""
    matcher = SiameseMatcher.init(channels, config.seed, dataset.images[0].shape[0])
    rng = np.random.default_rng(config.seed)
    params = list(matcher.params.values())
    state = SgdState(config.learning_rate, config.momentum)
    for it in range(config.iterations):
        ep = sample_episode(dataset, 1, rng)
        with T.Tape() as tape:
            logits, target = _pair_batch(matcher, ep, rng, config.pixel_fraction)
            loss = T.mul(T.bce_with_logits_sum(logits, target), Tensor(1.0 / target.size))
        T.backward(tape, loss)
        sgd_step(params, state)
        if (it + 1) % 1000 == 0:
            logger.info("siamese iter %d loss %.4f", it + 1, loss.item())
    return matcher


def verification_accuracy(matcher: SiameseMatcher, episodes: Sequence[Episode], seed: int = 0,
                          fraction: float = 0.5) -> float:
    rng = np.random.default_rng(seed)
    hits = total = 0
    with T.no_tape():
        for ep in episodes:
            logits, target = _pair_batch(matcher, ep, rng, fraction)
            hits += int(((logits.data >= 0) == (target == 1)).sum())
            total += target.size
    return hits / total


def most_similar_support(matcher: SiameseMatcher, query: np.ndarray, support: np.ndarray,
                         chunk: int = 32) -> np.ndarray:
    """argmax over support rows of the learned similarity (lowest index on ties)."""
    if len(support) == 0:
        raise ValueError("no support features")
    out = np.empty(len(query), dtype=np.int64)
    for s in range(0, len(query), chunk):
        out[s : s + chunk] = matcher.similarity_logits(query[s : s + chunk], support).argmax(axis=1)
    return out


def siamese_predict(matcher: SiameseMatcher, query: np.ndarray, support_set) -> np.ndarray:
    with T.no_tape():
        feat = lambda img: matcher.features(img).data
        sup_f, sup_y = _support_pixels(feat, support_set, matcher.stride)
        F = feat(query)
        labels = sup_y[most_similar_support(matcher, _query_pixels(F), sup_f)].reshape(F.shape[1:])
    return _upsample_labels(labels, query.shape[1])


# ---------------------------------------------------------------------------
# uniform predictor interface


def kshot_wrap(predict: Callable, net, episode: Episode, **kwargs) -> np.ndarray:
    """Run a baseline on the whole (pooled) support set of an episode."""
    if episode.k < 1:
        raise ValueError("episode has no support")
    return predict(net, episode.query_image, list(episode.support), **kwargs)


@dataclass
class PredictorSet:
    model: TwoBranchModel | None = None
    base_net: BaseFeatureNet | None = None
    matcher: SiameseMatcher | None = None
    options: dict = field(default_factory=dict)

    def make(self, name: str) -> Callable[[Episode], np.ndarray]:
        if name not in PREDICTOR_NAMES:
            raise KeyError(f"unknown predictor {name!r}; valid names: {', '.join(PREDICTOR_NAMES)}")
        if name == "ours":
            if self.model is None:
                raise ValueError("predictor 'ours' needs a trained model checkpoint")
            model = self.model
            return lambda ep: predict_kshot(model, ep.query_image, ep.support)
        if name == "siamese":
            if self.matcher is None:
                raise ValueError("predictor 'siamese' needs a trained Siamese matcher")
            return lambda ep: kshot_wrap(siamese_predict, self.matcher, ep)
        if self.base_net is None:
            raise ValueError(f"predictor {name!r} needs a trained base network")
        fn = {"nn1": nn1_predict, "logreg": logreg_predict, "finetune": finetune_predict}[name]
        opts = self.options.get(name, {})
        return lambda ep: kshot_wrap(fn, self.base_net, ep, **opts)

    def available(self) -> list[str]:
        have = {"ours": self.model is not None, "siamese": self.matcher is not None}
        return [n for n in PREDICTOR_NAMES if have.get(n, self.base_net is not None)]
