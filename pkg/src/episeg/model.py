"""Two-branch one-shot segmenter.

The conditioning branch turns a masked support image into the weights and bias
of a pixel-level logistic classifier; the segmentation branch turns the query
into a dense feature volume that the classifier scores pixel by pixel.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .hashing import HashingSpec, build_hashing, hash_forward
from .tensor import ShapeError, Tensor

THRESHOLD = 0.5


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    cond_channels: tuple[int, ...] = (8, 16, 32, 32)
    cond_first_stride: int = 2
    seg_channels: tuple[int, ...] = (32, 64, 64)
    head_dim: int = 64
    hash_seed: int = 1234
    seed: int = 7

    @property
    def feature_dim(self) -> int:
        return self.seg_channels[-1]

    @property
    def stride(self) -> int:
        return 2 ** (len(self.seg_channels) - 1)

    @property
    def feature_size(self) -> int:
        return self.image_size // self.stride

    def validate(self) -> None:
        if self.image_size % self.stride:
            raise ValueError(f"image size {self.image_size} not divisible by stride {self.stride}")
        if self.image_size // (self.cond_first_stride * 2 ** len(self.cond_channels)) < 1:
            raise ValueError("conditioning branch downsamples below 1 pixel")
        if self.head_dim < 1 or len(self.seg_channels) < 1 or len(self.cond_channels) < 1:
            raise ValueError("empty branch")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("cond_channels", "seg_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ClassifierParams:
    weight: Tensor
    bias: Tensor


def _conv_params(rng, cin, cout, name):
    std = np.sqrt(2.0 / (cin * 9))
    return (Tensor(rng.normal(0.0, std, size=(cout, cin, 3, 3)), requires_grad=True, name=f"{name}.weight"),
            Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias"))


@dataclass
class TwoBranchModel:
    config: ModelConfig
    params: dict[str, Tensor]
    hashing: HashingSpec
    seg_forward_count: int = field(default=0, compare=False)

    @classmethod
    def init(cls, config: ModelConfig | None = None) -> "TwoBranchModel":
        config = config or ModelConfig()
        config.validate()
        rng = np.random.default_rng(config.seed)
        params: dict[str, Tensor] = {}
        cin = 3
        for i, c in enumerate(config.cond_channels):
            params[f"cond.conv{i}.weight"], params[f"cond.conv{i}.bias"] = _conv_params(rng, cin, c, f"cond.conv{i}")
            cin = c
        m = config.head_dim
        params["cond.head.weight"] = Tensor(rng.normal(0.0, 0.1 / np.sqrt(cin), size=(m, cin)),
                                            requires_grad=True, name="cond.head.weight")
        params["cond.head.bias"] = Tensor(np.zeros(m), requires_grad=True, name="cond.head.bias")
        cin = 3
        for i, c in enumerate(config.seg_channels):
            params[f"seg.conv{i}.weight"], params[f"seg.conv{i}.bias"] = _conv_params(rng, cin, c, f"seg.conv{i}")
            cin = c
        return cls(config, params, build_hashing(config.hash_seed, m, config.feature_dim + 1))

    def cond_params(self) -> list[Tensor]:
        return [p for k, p in self.params.items() if k.startswith("cond.")]

    def seg_params(self) -> list[Tensor]:
        return [p for k, p in self.params.items() if k.startswith("seg.")]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def save(self, path) -> None:
        save_checkpoint(path, {k: p.data for k, p in self.params.items()}, self.config.seed,
                        {"kind": "twobranch", "model": self.config.to_dict()})

    @classmethod
    def load(cls, path) -> "TwoBranchModel":
        tensors, _, header = load_checkpoint(path)
        if header.get("kind") != "twobranch":
            raise CheckpointError(f"{path}: not a two-branch model checkpoint")
        model = cls.init(ModelConfig.from_dict(header["model"]))
        for k, p in model.params.items():
            if k not in tensors or tensors[k].shape != p.shape:
                raise CheckpointError(f"{path}: missing or misshapen tensor {k}")
            p.data[...] = tensors[k]
        return model


def _check_image(model: TwoBranchModel, image: np.ndarray, what: str) -> None:
    S = model.config.image_size
    if image.shape != (3, S, S):
        raise ShapeError(f"{what}: expected shape (3, {S}, {S}), got {image.shape}")


def mask_support(image, mask: np.ndarray):
    """Zero every background pixel of the support image."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask)
    if data.ndim != 3 or mask.shape != data.shape[1:]:
        raise ShapeError(f"mask_support: image {data.shape} vs mask {mask.shape}")
    if ((mask != 0) & (mask != 1)).any():
        raise ValueError("mask_support: mask must be binary")
    m = mask.astype(np.float64)[None]
    if isinstance(image, Tensor):
        return T.mul(image, Tensor(m))
    return data * m


def conditioning_head(model: TwoBranchModel, masked: np.ndarray) -> Tensor:
    """Conditioning encoder up to the m-dimensional head vector."""
    p, cfg = model.params, model.config
    x = Tensor(masked)
    for i in range(len(cfg.cond_channels)):
        stride = cfg.cond_first_stride if i == 0 else 1
        x = T.relu(T.conv2d(x, p[f"cond.conv{i}.weight"], p[f"cond.conv{i}.bias"], stride=stride, pad=1))
        x = T.maxpool2(x)
    return T.linear(T.global_avg_pool(x), p["cond.head.weight"], p["cond.head.bias"])


def condition(model: TwoBranchModel, support_pair) -> ClassifierParams:
    image, mask = support_pair
    _check_image(model, image, "condition")
    flat = hash_forward(conditioning_head(model, mask_support(image, mask)), model.hashing)
    D = model.config.feature_dim
    return ClassifierParams(T.getitem(flat, slice(0, D)), T.getitem(flat, slice(D, D + 1)))


def dense_encoder(params: dict[str, Tensor], prefix: str, n_layers: int, x: Tensor, start: int = 0) -> Tensor:
    """conv3x3+relu stack with a 2x2 max pool after every layer but the last.

    ``x`` is the input of layer ``start``, so frozen leading layers can be skipped.
    """
    for i in range(start, n_layers):
        x = T.relu(T.conv2d(x, params[f"{prefix}.conv{i}.weight"], params[f"{prefix}.conv{i}.bias"], stride=1, pad=1))
        if i < n_layers - 1:
            x = T.maxpool2(x)
    return x


def extract_features(model: TwoBranchModel, query: np.ndarray) -> Tensor:
    _check_image(model, query, "extract_features")
    model.seg_forward_count += 1
    return dense_encoder(model.params, "seg", len(model.config.seg_channels), Tensor(query))


def classify_pixels(features: Tensor, params: ClassifierParams) -> Tensor:
    if params.weight.shape != (features.shape[0],):
        raise ShapeError(f"classify_pixels: weight {params.weight.shape} vs features {features.shape}")
    return T.sigmoid(T.pixel_logits(features, params.weight, params.bias))


def _upsample_threshold(prob: Tensor, size: int) -> tuple[np.ndarray, np.ndarray]:
    up = T.bilinear_upsample(T.reshape(prob, (1,) + prob.shape), size, size).data[0]
    return (up >= THRESHOLD).astype(np.uint8), up


def predict_mask(model: TwoBranchModel, query: np.ndarray, support_pair) -> tuple[np.ndarray, np.ndarray]:
    """Binary mask (prob >= 0.5 is foreground) and the upsampled probability map."""
    with T.no_tape():
        params = condition(model, support_pair)
        prob = classify_pixels(extract_features(model, query), params)
        return _upsample_threshold(prob, model.config.image_size)


def predict_kshot(model: TwoBranchModel, query: np.ndarray, support_set: Sequence) -> np.ndarray:
    """Union of the k one-shot masks; the query is encoded once."""
    if len(support_set) == 0:
        raise ValueError("predict_kshot: empty support set")
    with T.no_tape():
        feats = extract_features(model, query)
        out = np.zeros((model.config.image_size,) * 2, dtype=np.uint8)
        for pair in support_set:
            mask, _ = _upsample_threshold(classify_pixels(feats, condition(model, pair)), model.config.image_size)
            out |= mask
    return out
