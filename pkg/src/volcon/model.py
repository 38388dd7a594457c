"""Encoder, projection head, Deep Set head and the NT-Xent objective.

Image batches arrive as (N, D, D, C) arrays; set batches as (B, K, D, D, C).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import tensor_engine as te
from .errors import ContractError
from .tensor_engine import ParamStore, Tensor


class Variant(str, Enum):
    BASELINE = "baseline"
    PER_SCAN = "ps"
    DEEP_SET = "ds"


class DsHead(str, Enum):
    IDENTITY = "identity"
    MLP = "mlp"


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.BASELINE
    image_size: int = 32
    in_channels: int = 1
    channels: tuple = (8, 16, 32, 32)
    feature_dim: int = 64
    proj_dim: int = 32
    ds_head: DsHead = DsHead.IDENTITY
    temperature: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "ds_head", DsHead(self.ds_head))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.temperature <= 0:
            raise ContractError(f"temperature must be > 0, got {self.temperature}")
        if len(self.channels) < 1 or min(self.channels) < 1:
            raise ContractError(f"channels must be a nonempty list of positive widths, got {self.channels}")
        for name in ("image_size", "in_channels", "feature_dim", "proj_dim"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["ds_head"] = self.ds_head.value
        d["channels"] = list(self.channels)
        return d


@dataclass
class ModelBundle:
    config: ModelConfig
    params: ParamStore = field(repr=False)

    def save(self, checkpoint_path, manifest_path=None) -> None:
        self.params.save(checkpoint_path)
        if manifest_path is not None:
            Path(manifest_path).write_text(json.dumps({"model": self.config.to_dict()}, indent=2))

    @classmethod
    def load(cls, checkpoint_path, config: ModelConfig) -> "ModelBundle":
        params = ParamStore.load(checkpoint_path)
        expected = init_params(config, np.random.default_rng(0))
        if params.names() != expected.names() or any(
                params[k].shape != expected[k].shape for k in expected):
            raise ContractError(f"checkpoint {checkpoint_path} does not match the model configuration")
        return cls(config, params)


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ParamStore:
    """Kaiming-uniform (fan-in) weights and zero biases.

    The Deep Set head is drawn last so that the shared layers are identical
    across variants built from the same seed.
    """
    p = ParamStore()
    c_in = config.in_channels
    for i, c_out in enumerate(config.channels):
        p.add(f"enc.conv{i}.w", _kaiming_uniform(rng, (c_out, c_in, 3, 3), c_in * 9))
        p.add(f"enc.conv{i}.b", np.zeros(c_out))
        c_in = c_out
    f = config.feature_dim
    p.add("enc.fc.w", _kaiming_uniform(rng, (c_in, f), c_in))
    p.add("enc.fc.b", np.zeros(f))
    p.add("proj.fc1.w", _kaiming_uniform(rng, (f, f), f))
    p.add("proj.fc1.b", np.zeros(f))
    p.add("proj.fc2.w", _kaiming_uniform(rng, (f, config.proj_dim), f))
    p.add("proj.fc2.b", np.zeros(config.proj_dim))
    if config.variant is Variant.DEEP_SET and config.ds_head is DsHead.MLP:
        p.add("ds.fc.w", _kaiming_uniform(rng, (f, f), f))
        p.add("ds.fc.b", np.zeros(f))
    return p


def init_bundle(config: ModelConfig, seed: int) -> ModelBundle:
    return ModelBundle(config, init_params(config, np.random.default_rng([int(seed), 0x1417])))


def _linear(params, prefix, x):
    return te.add(te.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def _check_images(config: ModelConfig, images: np.ndarray):
    d, c = config.image_size, config.in_channels
    if images.ndim != 4 or images.shape[1:] != (d, d, c):
        raise ContractError(f"expected images of shape (N, {d}, {d}, {c}), got {images.shape}")


def encode_batch(bundle: ModelBundle, images) -> Tensor:
    """Encoder f on an (N, D, D, C) batch -> (N, feature_dim)."""
    images = np.asarray(images, dtype=np.float64)
    _check_images(bundle.config, images)
    p = bundle.params
    x = Tensor(images.transpose(0, 3, 1, 2))
    for i in range(len(bundle.config.channels)):
        x = te.relu(te.add_channel_bias(te.conv2d(x, p[f"enc.conv{i}.w"], pad=1), p[f"enc.conv{i}.b"]))
        if min(x.shape[2:]) >= 2:
            x = te.mean_pool(x, 2)
    return _linear(p, "enc.fc", te.global_mean_pool(x))


def encode(bundle: ModelBundle, image) -> np.ndarray:
    """Feature vector h for a single D x D x C image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ContractError(f"expected a D x D x C image, got shape {image.shape}")
    return encode_batch(bundle, image[None]).data[0].copy()


def project(bundle: ModelBundle, h: Tensor) -> Tensor:
    """Projection head g: affine -> ReLU -> affine."""
    return _linear(bundle.params, "proj.fc2", te.relu(_linear(bundle.params, "proj.fc1", h)))


def deepset_aggregate(bundle: ModelBundle, features) -> Tensor:
    """g_DS applied to the sum over the set axis.

    ``features`` is (B, K, F), or (K, F) for a single set.
    """
    features = te.as_tensor(features)
    single = features.data.ndim == 2
    if single:
        features = te.reshape(features, (1,) + features.shape)
    if features.shape[1] < 1:
        raise ContractError("a set needs at least one element")
    pooled = te.sum_over_set(features)
    if bundle.config.ds_head is DsHead.MLP:
        pooled = te.relu(_linear(bundle.params, "ds.fc", pooled))
    return te.reshape(pooled, (pooled.shape[1],)) if single else pooled


def nt_xent(z1: Tensor, z2: Tensor, temperature: float) -> Tensor:
    """NT-Xent over the 2B embeddings; rows of z1 and z2 must be unit norm.

    Anchor i's positive is its partner in the other view; every other
    non-self row is a negative.
    """
    z1, z2 = te.as_tensor(z1), te.as_tensor(z2)
    if z1.shape != z2.shape or z1.data.ndim != 2:
        raise ContractError(f"nt_xent: view shapes differ or are not matrices: {z1.shape} vs {z2.shape}")
    b = z1.shape[0]
    if b < 2:
        raise ContractError(f"nt_xent needs a batch of at least 2 pairs, got {b}")
    if temperature <= 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    z = te.concat([z1, z2], axis=0)
    sims = te.scale(te.matmul(z, te.transpose(z)), 1.0 / temperature)
    targets = np.concatenate([np.arange(b, 2 * b), np.arange(b)])
    return te.softmax_cross_entropy_rows(sims, targets, exclude=np.eye(2 * b, dtype=bool))


def _embed_pairs(bundle: ModelBundle, x1, x2) -> tuple:
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ContractError(f"view batches differ in shape: {x1.shape} vs {x2.shape}")
    b = x1.shape[0]
    h = encode_batch(bundle, np.concatenate([x1, x2], axis=0))
    z = te.l2_normalize(project(bundle, h))
    return z, b


def _split_views(z: Tensor, b: int) -> tuple:
    return te.slice_rows(z, 0, b), te.slice_rows(z, b, 2 * b)


def forward_loss_baseline(bundle: ModelBundle, x1, x2) -> Tensor:
    """NT-Xent of normalize(g(f(x1))) against normalize(g(f(x2)))."""
    z, b = _embed_pairs(bundle, x1, x2)
    z1, z2 = _split_views(z, b)
    return nt_xent(z1, z2, bundle.config.temperature)


def forward_loss_ps(bundle: ModelBundle, x1, x2) -> Tensor:
    # per-scan pairs differ only in where the slices come from
    return forward_loss_baseline(bundle, x1, x2)


def forward_loss_ds(bundle: ModelBundle, x1_sets, x2_sets) -> Tensor:
    """Set views: encode every slice, sum per set, g_DS, project, NT-Xent."""
    x1_sets = np.asarray(x1_sets, dtype=np.float64)
    x2_sets = np.asarray(x2_sets, dtype=np.float64)
    if x1_sets.shape != x2_sets.shape or x1_sets.ndim != 5:
        raise ContractError(f"set batches must both be (B, K, D, D, C), got {x1_sets.shape} and {x2_sets.shape}")
    b, k = x1_sets.shape[:2]
    flat = np.concatenate([x1_sets.reshape((b * k,) + x1_sets.shape[2:]),
                           x2_sets.reshape((b * k,) + x2_sets.shape[2:])], axis=0)
    h = encode_batch(bundle, flat)
    h_sets = te.reshape(h, (2 * b, k, h.shape[1]))
    pooled = deepset_aggregate(bundle, h_sets)
    z = te.l2_normalize(project(bundle, pooled))
    z1, z2 = _split_views(z, b)
    return nt_xent(z1, z2, bundle.config.temperature)


def forward_loss(bundle: ModelBundle, x1, x2) -> Tensor:
    if bundle.config.variant is Variant.DEEP_SET:
        return forward_loss_ds(bundle, x1, x2)
    return forward_loss_baseline(bundle, x1, x2)
