"""
Experiment configuration.

A config is a tree of dataclasses with documented defaults. Files are JSON,
unknown keys are rejected and `--set dotted.key=value` overrides are applied on
top of the file before validation. The config hash identifies a run.
"""
import copy
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional

from mindcine.defs import ConfigError, NUM_BLOCKS, NUM_CONCEPTS, TEST_BLOCK

logger = logging.getLogger(__name__)


@dataclass
class SyntheticConfig:
    channels: int = 62
    samples: int = 400
    sample_rate_hz: float = 200.0
    frames: int = 6
    window: int = 150
    concepts: int = NUM_CONCEPTS
    blocks: int = NUM_BLOCKS
    clips_per_block: int = 200
    test_blocks: List[int] = field(default_factory=lambda: [TEST_BLOCK])
    # training blocks held out for best-epoch selection, None for the last training block
    val_blocks: Optional[List[int]] = None
    subjects: int = 1
    noise_sigma: float = 0.0
    embed_noise: float = 0.05
    trajectory_jitter: float = 0.3
    latent_dim: int = 16
    joint_dim: int = 32
    prototype_dim: int = 24
    text_groups: int = 8
    text_detail: float = 0.3
    cond_tokens: int = 8
    cond_dim: int = 64
    kernel_len: int = 9
    image_size: int = 16


@dataclass
class EncoderConfig:
    kind: str = "mlp"
    hidden: List[int] = field(default_factory=lambda: [256, 128])
    # adapter only: table path, or None to derive a frozen-feature table
    adapter_table: Optional[str] = None
    adapter_dim: int = 64


@dataclass
class SemanticConfig:
    alpha: List[float] = field(default_factory=lambda: [1.0 / 3, 1.0 / 3, 1.0 / 3])
    lam: float = 0.01
    mu: float = 0.5
    tau_init: float = 0.07
    learn_tau: bool = True
    shared_tau: bool = True
    bidirectional: bool = True
    reduction: str = "mean"


@dataclass
class EmbedNetConfig:
    temporal_filters: int = 8
    temporal_kernel: int = 25
    depth_multiplier: int = 2
    pool_out: int = 8
    embed_dim: int = 64


@dataclass
class PerceptualConfig:
    model_dim: int = 64
    heads: int = 4
    layers: int = 2
    ffn_dim: int = 128
    pe: str = "sinusoidal"
    autoregressive: bool = True
    qk_norm: bool = True
    qk_norm_eps: float = 1e-6
    embednet: EmbedNetConfig = field(default_factory=EmbedNetConfig)


@dataclass
class DiffusionConfig:
    steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.3
    hidden: int = 256
    cond_hidden: int = 64
    time_dim: int = 16
    p_drop_semantic: float = 0.1
    p_drop_perceptual: float = 0.1
    perceptual_noise: float = 0.1
    # scales the initial and every per-step sampling noise, 0 gives a deterministic sampler
    noise_scale: float = 1.0


@dataclass
class GuidanceConfig:
    scale: float = 7.5
    # path to a raw float32 array of shape (cond_tokens, cond_dim); None is the zero condition
    negative_condition: Optional[str] = None


@dataclass
class MetricsConfig:
    n_ways: List[int] = field(default_factory=lambda: [2, 40])
    top_k: int = 1
    repeats: int = 100
    classifier: str = "trainable"
    ssim_channels: str = "luma"
    hue_mode: str = "pixel"
    hue_mask_threshold: float = 0.05
    hue_bins: int = 32


@dataclass
class OptimConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0


@dataclass
class AblationConfig:
    use_semantic: bool = True
    use_perception: bool = True


@dataclass
class TrainConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    semantic: SemanticConfig = field(default_factory=SemanticConfig)
    perceptual: PerceptualConfig = field(default_factory=PerceptualConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    semantic_optim: OptimConfig = field(default_factory=OptimConfig)
    perceptual_optim: OptimConfig = field(default_factory=lambda: OptimConfig(epochs=40))
    diffusion_optim: OptimConfig = field(default_factory=lambda: OptimConfig(epochs=60, lr=2e-3))
    classifier_optim: OptimConfig = field(default_factory=lambda: OptimConfig(epochs=40, lr=5e-3))
    seed: int = 0
    deterministic: bool = True


def _build(obj, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError("'{}' must be an object".format(prefix or "<root>"))

    names = {f.name for f in dataclasses.fields(obj)}
    for k, v in data.items():
        path = "{}.{}".format(prefix, k) if prefix else k
        if k not in names:
            raise ConfigError("unknown config key '{}'".format(path))
        cur = getattr(obj, k)
        if dataclasses.is_dataclass(cur):
            _build(cur, v, path)
        else:
            setattr(obj, k, v)
    return obj


def from_dict(data):
    return _build(TrainConfig(), copy.deepcopy(data), "")


def to_dict(cfg):
    return dataclasses.asdict(cfg)


def _parse_value(s):
    try:
        return json.loads(s)
    except ValueError:
        return s


def apply_overrides(data, overrides):
    """ apply "a.b.c=value" strings to a plain config dict, in order """
    data = copy.deepcopy(data)
    for ov in overrides or ():
        if "=" not in ov:
            raise ConfigError("override '{}' is not key=value".format(ov))
        key, raw = ov.split("=", 1)
        toks = key.strip().split(".")
        node = data
        for t in toks[:-1]:
            node = node.setdefault(t, {})
            if not isinstance(node, dict):
                raise ConfigError("override '{}' descends into a value".format(key))
        node[toks[-1]] = _parse_value(raw)
    return data


def load_config(path=None, overrides=None):
    data = {}
    if path:
        try:
            with open(path) as f:
                data = json.load(f)
        except ValueError as e:
            raise ConfigError("{}: {}".format(path, e))
    data = apply_overrides(data, overrides)
    cfg = from_dict(data)
    validate(cfg)
    logger.debug("config loaded from %s, hash %s", path, config_hash(cfg))
    return cfg


def save_config(cfg, path):
    with open(path, "w") as f:
        json.dump(to_dict(cfg), f, sort_keys=True, indent=2)


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg, sections=None):
    """ sha256 of the canonical json, optionally restricted to some top-level sections """
    d = to_dict(cfg)
    if sections is not None:
        d = {k: d[k] for k in sections}
    return hashlib.sha256(_canonical(d).encode("utf-8")).hexdigest()[:16]


def diff_configs(a, b):
    """ dotted keys whose values differ between two configs """
    out = {}

    def walk(x, y, prefix):
        for k in sorted(set(x) | set(y)):
            path = "{}.{}".format(prefix, k) if prefix else k
            vx, vy = x.get(k), y.get(k)
            if isinstance(vx, dict) and isinstance(vy, dict):
                walk(vx, vy, path)
            elif vx != vy:
                out[path] = (vx, vy)

    walk(to_dict(a), to_dict(b), "")
    return out


def closest_valid_window(samples, frames, window):
    if frames <= 1:
        return samples
    valid = [w for w in range(1, samples + 1) if (samples - w) % (frames - 1) == 0]
    return min(valid, key=lambda w: (abs(w - window), w))


def window_tiles(samples, frames, window):
    """ t windows of length w, first at 0 and last ending at T, evenly spaced """
    if frames <= 1:
        return window == samples
    return (samples - window) % (frames - 1) == 0


def _check(cond, msg):
    if not cond:
        raise ConfigError(msg)


def validate_synthetic(d):
    _check(d.channels >= 1, "data.channels must be >= 1")
    _check(d.samples >= 2, "data.samples must be >= 2")
    _check(d.sample_rate_hz > 0, "data.sample_rate_hz must be positive")
    _check(d.frames >= 1, "data.frames must be >= 1")
    _check(1 <= d.window <= d.samples, "data.window must be in [1, data.samples]")
    if not window_tiles(d.samples, d.frames, d.window):
        raise ConfigError(
            "data.window={} does not tile {} samples into {} frames, closest valid window is {}".format(
                d.window, d.samples, d.frames, closest_valid_window(d.samples, d.frames, d.window)
            )
        )
    _check(d.concepts >= 2, "data.concepts must be >= 2")
    _check(d.blocks >= 1, "data.blocks must be >= 1")
    _check(d.clips_per_block % d.concepts == 0, "data.clips_per_block must be divisible by data.concepts")
    _check(all(1 <= b <= d.blocks for b in d.test_blocks), "data.test_blocks out of range")
    if d.val_blocks is not None:
        _check(all(1 <= b <= d.blocks for b in d.val_blocks), "data.val_blocks out of range")
        _check(not set(d.val_blocks) & set(d.test_blocks), "data.val_blocks must not overlap data.test_blocks")
        _check(
            len(set(range(1, d.blocks + 1)) - set(d.test_blocks) - set(d.val_blocks)) >= 1,
            "data.val_blocks leave no block to train on",
        )
    _check(d.subjects >= 1, "data.subjects must be >= 1")
    _check(d.noise_sigma >= 0, "data.noise_sigma must be >= 0")
    _check(d.embed_noise >= 0, "data.embed_noise must be >= 0")
    _check(d.prototype_dim >= 3, "data.prototype_dim must be >= 3")
    _check(1 <= d.text_groups <= d.concepts, "data.text_groups must be in [1, data.concepts]")
    _check(0 <= d.text_detail <= 1, "data.text_detail must be in [0, 1]")
    _check(d.image_size >= 11, "data.image_size must be >= 11 (ssim window)")
    return d


def validate(cfg):
    """ raise ConfigError on the first violated constraint, before any compute """
    d = validate_synthetic(cfg.data)

    _check(cfg.encoder.kind in ("mlp", "adapter"), "encoder.kind must be mlp or adapter")

    s = cfg.semantic
    _check(len(s.alpha) == 3, "semantic.alpha needs 3 weights (image, text, depth)")
    _check(all(a >= 0 for a in s.alpha), "semantic.alpha must be non-negative")
    _check(s.lam >= 0, "semantic.lam must be >= 0")
    _check(s.mu >= 0, "semantic.mu must be >= 0")
    _check(s.tau_init > 0, "semantic.tau_init must be positive")
    _check(s.reduction in ("mean", "sum"), "semantic.reduction must be mean or sum")

    p = cfg.perceptual
    _check(p.model_dim % p.heads == 0, "perceptual.model_dim must be divisible by perceptual.heads")
    _check(p.pe in ("sinusoidal", "learned", "none"), "perceptual.pe must be sinusoidal, learned or none")

    df = cfg.diffusion
    _check(1 <= df.steps <= 50, "diffusion.steps must be in [1, 50]")
    _check(0 < df.beta_start <= df.beta_end < 1, "diffusion betas must satisfy 0 < start <= end < 1")
    _check(0 <= df.p_drop_semantic <= 1 and 0 <= df.p_drop_perceptual <= 1, "drop probabilities in [0, 1]")
    _check(df.noise_scale >= 0, "diffusion.noise_scale must be >= 0")

    m = cfg.metrics
    _check(m.top_k >= 1, "metrics.top_k must be >= 1")
    _check(all(m.top_k < n <= d.concepts for n in m.n_ways), "metrics.n_ways must satisfy top_k < N <= concepts")
    _check(m.repeats >= 1, "metrics.repeats must be >= 1")
    _check(m.classifier in ("oracle", "random", "trainable"), "metrics.classifier must be oracle, random or trainable")
    _check(m.ssim_channels in ("luma", "mean"), "metrics.ssim_channels must be luma or mean")
    _check(m.hue_mode in ("pixel", "histogram"), "metrics.hue_mode must be pixel or histogram")

    for name in ("semantic_optim", "perceptual_optim", "diffusion_optim", "classifier_optim"):
        o = getattr(cfg, name)
        _check(o.epochs >= 0, "{}.epochs must be >= 0".format(name))
        _check(o.batch_size >= 1, "{}.batch_size must be >= 1".format(name))
        _check(o.lr >= 0, "{}.lr must be >= 0".format(name))
    return cfg


def with_delta(cfg, delta):
    """ new validated config with {dotted.key: value} applied """
    overrides = ["{}={}".format(k, json.dumps(v)) for k, v in sorted(delta.items())]
    new = from_dict(apply_overrides(to_dict(cfg), overrides))
    return validate(new)
