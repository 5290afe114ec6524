"""
Paired EEG / video-latent / modality-embedding clips.

Synthetic data follows the 7 block x 40 concept layout of the recordings it
mirrors. Each concept owns a semantic prototype. A clip's frame latents are
the concept's frame trajectory plus a clip-specific random walk, and its EEG
is a fixed linear-convolutional mixture of those latents plus Gaussian noise,
so decodable structure is known to exist.
"""
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List

import numpy as np
from scipy import signal

from mindcine import container
from mindcine.config import closest_valid_window, validate_synthetic, window_tiles
from mindcine.defs import (
    CLIP_DURATION_S,
    ConfigError,
    IngestionError,
    ShapeError,
    Split,
    ValidationError,
    consume_seed,
    derive_seed,
)

logger = logging.getLogger(__name__)


class EmbeddingSpace(Enum):
    EEG_SEMANTIC = "eeg-semantic"
    IMAGE = "image"
    TEXT = "text"
    DEPTH = "depth"
    TEXT_CONDITION = "text-condition"
    PERCEPTUAL = "perceptual"


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    space: EmbeddingSpace

    @property
    def dim(self):
        return int(self.vector.size)


@dataclass(frozen=True)
class EegSegment:
    data: np.ndarray
    sample_rate_hz: float
    clip_id: str = ""

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ShapeError("EEG segment must be channels x samples, got shape {}".format(self.data.shape))
        if self.data.shape[0] < 1 or self.data.shape[1] < 2:
            raise ShapeError("EEG segment needs C >= 1 and T >= 2, got {}".format(self.data.shape))
        if self.sample_rate_hz <= 0:
            raise ValidationError("sample rate must be positive")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("EEG segment '{}' has non-finite values".format(self.clip_id))

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def samples(self):
        return self.data.shape[1]

    @property
    def duration_s(self):
        return self.samples / self.sample_rate_hz


@dataclass(frozen=True)
class WindowedSegment:
    windows: np.ndarray  # t x C x w
    window_len: int
    stride: int

    def __len__(self):
        return self.windows.shape[0]

    @property
    def offsets(self):
        return [i * self.stride for i in range(len(self))]


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    eeg: EegSegment
    gt_latents: np.ndarray  # frames x latent_dim
    image_emb: Embedding
    text_emb: Embedding
    depth_emb: Embedding
    text_cond: np.ndarray  # cond_tokens x cond_dim
    concept_label: int
    block_id: int
    subject: int = 0


@dataclass
class Dims:
    channels: int
    samples: int
    frames: int
    window: int
    joint_dim: int
    latent_dim: int
    cond_tokens: int
    cond_dim: int
    sample_rate_hz: float
    clip_duration_s: float
    concepts: int
    blocks: int
    image_size: int


@dataclass
class DatasetManifest:
    records: List[ClipRecord]
    split: Dict[int, Split]
    seed: int
    dims: Dims
    meta: dict = field(default_factory=dict)

    def records_for(self, split):
        split = Split(split)
        return [r for r in self.records if self.split[r.block_id] is split]

    @property
    def train(self):
        return self.records_for(Split.TRAIN)

    @property
    def test(self):
        return self.records_for(Split.TEST)

    def fit_val_split(self, val_blocks=None):
        """
        training records split into (fit, validation) for best-epoch selection.
        val_blocks None holds out the last training block when there are two or
        more, otherwise validation is empty. Test blocks never appear in either.
        """
        train_blocks = sorted(b for b, s in self.split.items() if s is Split.TRAIN)
        if val_blocks is None:
            val_blocks = train_blocks[-1:] if len(train_blocks) > 1 else []
        outside = set(val_blocks) - set(train_blocks)
        if outside:
            raise ConfigError("validation blocks {} are not training blocks".format(sorted(outside)))
        held = set(val_blocks)
        train = self.train
        return [r for r in train if r.block_id not in held], [r for r in train if r.block_id in held]

    def by_id(self):
        return {r.clip_id: r for r in self.records}

    def validate(self):
        validate_manifest(self)
        return self


def default_split(blocks, test_blocks):
    return {b: (Split.TEST if b in test_blocks else Split.TRAIN) for b in range(1, blocks + 1)}


def clip_name(subject, block, concept, rep):
    return "s{:02d}-b{}-c{:02d}-r{:02d}".format(subject, block, concept, rep)


# ---- windowing --------------------------------------------------------------

def window_stride(samples, frames, window):
    if window < 1 or window > samples:
        raise ShapeError("window length {} outside [1, {}]".format(window, samples))
    if frames < 1:
        raise ConfigError("frame count must be >= 1")
    if not window_tiles(samples, frames, window):
        raise ConfigError(
            "window {} does not tile {} samples into {} frames, closest valid window is {}".format(
                window, samples, frames, closest_valid_window(samples, frames, window)
            )
        )
    if frames == 1:
        return 0
    return (samples - window) // (frames - 1)


def slice_windows(segment, t, w):
    """ t overlapping windows of length w, first at sample 0, last ending at sample T """
    data = segment.data if isinstance(segment, EegSegment) else np.asarray(segment)
    samples = data.shape[-1]
    stride = window_stride(samples, t, w)
    if t == 1:
        windows = data[np.newaxis]
    else:
        view = np.lib.stride_tricks.sliding_window_view(data, w, axis=-1)  # C x (T-w+1) x w
        windows = view[:, ::stride, :].transpose(1, 0, 2)
    return WindowedSegment(windows=np.ascontiguousarray(windows), window_len=w, stride=stride)


# ---- synthetic generation ---------------------------------------------------

class _ForwardModel:
    """ per-subject EEG forward model: spatial mixing, frame interpolation, FIR """

    def __init__(self, rng, cfg):
        c, l = cfg.channels, cfg.latent_dim
        self.mixing = rng.standard_normal((c, l)) / np.sqrt(l)
        k = max(1, cfg.kernel_len)
        tail = 0.5 * rng.standard_normal(k - 1) / np.sqrt(k)
        self.fir = np.concatenate([[1.0], tail])

        stride = window_stride(cfg.samples, cfg.frames, cfg.window)
        self.centers = np.array([i * stride + cfg.window / 2.0 for i in range(cfg.frames)])
        self.taxis = np.arange(cfg.samples, dtype=np.float64)

    def __call__(self, latents):
        if len(self.centers) == 1:
            source = np.repeat(latents.T, len(self.taxis), axis=1)
        else:
            source = np.stack([np.interp(self.taxis, self.centers, latents[:, j]) for j in range(latents.shape[1])])
        mixed = self.mixing @ source
        return signal.lfilter(self.fir, [1.0], mixed, axis=1)


class _ConceptBank:
    """ semantic prototypes, their frame trajectories and the modality projections """

    def __init__(self, rng, cfg):
        p = cfg.prototype_dim
        self.group_dim = max(1, p // 3)
        r = self.group_dim
        groups = rng.standard_normal((cfg.text_groups, r))
        specific = rng.standard_normal((cfg.concepts, p - r))
        proto = np.concatenate([groups[np.arange(cfg.concepts) % cfg.text_groups], specific], axis=1)
        self.prototypes = proto / np.linalg.norm(proto, axis=1, keepdims=True)

        traj = rng.standard_normal((cfg.frames * cfg.latent_dim, p))
        self.trajectories = (self.prototypes @ traj.T).reshape(cfg.concepts, cfg.frames, cfg.latent_dim)

        j = cfg.joint_dim
        self.proj = {
            "image": rng.standard_normal((j, p)),
            "text": rng.standard_normal((j, p)),
            "depth": rng.standard_normal((j, p - r)),
        }
        self.cond_proj = rng.standard_normal((cfg.cond_tokens * cfg.cond_dim, p))
        self.text_detail = cfg.text_detail

    def view(self, modality, k):
        """ image sees the whole prototype, text mostly its coarse group, depth only the concept-specific part """
        u = self.prototypes[k]
        r = self.group_dim
        if modality == "image":
            return u
        if modality == "text":
            return np.concatenate([u[:r], self.text_detail * u[r:]])
        return u[r:]


def _unit(x):
    n = np.linalg.norm(x)
    return x / n if n > 0 else x


def _generate_clip(bank, fwd, cfg, seed, subject, block, concept, rep):
    clip_id = clip_name(subject, block, concept, rep)
    rng = np.random.default_rng(derive_seed(seed, clip_id))

    steps = rng.standard_normal((cfg.frames, cfg.latent_dim))
    walk = np.cumsum(steps, axis=0) / np.sqrt(np.arange(1, cfg.frames + 1))[:, None]
    latents = bank.trajectories[concept] + cfg.trajectory_jitter * walk

    eeg = fwd(latents)
    if cfg.noise_sigma > 0:
        eeg = eeg + cfg.noise_sigma * rng.standard_normal(eeg.shape)

    embs = {}
    for name, space in (("image", EmbeddingSpace.IMAGE), ("text", EmbeddingSpace.TEXT), ("depth", EmbeddingSpace.DEPTH)):
        v = bank.proj[name] @ bank.view(name, concept)
        v = v / np.sqrt(v.size)
        if cfg.embed_noise > 0:
            v = v + cfg.embed_noise * rng.standard_normal(v.shape)
        embs[name] = Embedding(_unit(v).astype(np.float32), space)

    cond = _unit(bank.cond_proj @ bank.view("text", concept)).reshape(cfg.cond_tokens, cfg.cond_dim)

    return ClipRecord(
        clip_id=clip_id,
        eeg=EegSegment(eeg.astype(np.float32), cfg.sample_rate_hz, clip_id),
        gt_latents=latents.astype(np.float32),
        image_emb=embs["image"],
        text_emb=embs["text"],
        depth_emb=embs["depth"],
        text_cond=cond.astype(np.float32),
        concept_label=int(concept),
        block_id=int(block),
        subject=int(subject),
    )


def dims_from_config(cfg):
    return Dims(
        channels=cfg.channels,
        samples=cfg.samples,
        frames=cfg.frames,
        window=cfg.window,
        joint_dim=cfg.joint_dim,
        latent_dim=cfg.latent_dim,
        cond_tokens=cfg.cond_tokens,
        cond_dim=cfg.cond_dim,
        sample_rate_hz=float(cfg.sample_rate_hz),
        clip_duration_s=cfg.samples / float(cfg.sample_rate_hz),
        concepts=cfg.concepts,
        blocks=cfg.blocks,
        image_size=cfg.image_size,
    )


def generate_synthetic(cfg, seed):
    """
    deterministic in (cfg, seed). Concept and subject parameters come from the
    global seed, every clip from a seed derived from its clip_id, so clips can
    be generated in any order or partition and merged.
    """
    validate_synthetic(cfg)
    seed = consume_seed("gen", seed)
    rng = np.random.default_rng(seed)

    bank = _ConceptBank(rng, cfg)
    models = [_ForwardModel(rng, cfg) for _ in range(cfg.subjects)]
    per_concept = cfg.clips_per_block // cfg.concepts

    records = []
    for subject, fwd in enumerate(models):
        for block in range(1, cfg.blocks + 1):
            for concept in range(cfg.concepts):
                for rep in range(per_concept):
                    records.append(_generate_clip(bank, fwd, cfg, seed, subject, block, concept, rep))
    records.sort(key=lambda r: r.clip_id)

    if abs(cfg.samples / cfg.sample_rate_hz - CLIP_DURATION_S) > 1e-9:
        logger.info("clip duration %.3f s differs from the %.1f s recordings", cfg.samples / cfg.sample_rate_hz, CLIP_DURATION_S)

    manifest = DatasetManifest(
        records=records,
        split=default_split(cfg.blocks, cfg.test_blocks),
        seed=seed,
        dims=dims_from_config(cfg),
        meta={
            "source": "synthetic",
            "image_frame": "synthetic prototype view",
            "subjects": cfg.subjects,
            "noise_sigma": cfg.noise_sigma,
            "render_seed": derive_seed(seed, "render"),
        },
    )
    logger.info(
        "generated %d clips (%d train / %d test)", len(records), len(manifest.train), len(manifest.test)
    )
    return manifest.validate()


# ---- validation and container io -------------------------------------------

def validate_manifest(m):
    d = m.dims
    seen = set()
    for r in m.records:
        if r.clip_id in seen:
            raise ValidationError("duplicate clip_id '{}'".format(r.clip_id))
        seen.add(r.clip_id)
        if not 1 <= r.block_id <= d.blocks:
            raise ValidationError("record '{}': block_id {} outside [1, {}]".format(r.clip_id, r.block_id, d.blocks))
        if r.block_id not in m.split:
            raise ValidationError("record '{}': block {} has no split".format(r.clip_id, r.block_id))
        if not 0 <= r.concept_label < d.concepts:
            raise ValidationError("record '{}': concept {} outside [0, {})".format(r.clip_id, r.concept_label, d.concepts))
        if r.eeg.data.shape != (d.channels, d.samples):
            raise ShapeError("record '{}': eeg shape {} != dims".format(r.clip_id, r.eeg.data.shape))
        if abs(r.eeg.duration_s - d.clip_duration_s) > 1e-9:
            raise ValidationError("record '{}': duration {} s != {} s".format(r.clip_id, r.eeg.duration_s, d.clip_duration_s))
        if r.gt_latents.shape != (d.frames, d.latent_dim):
            raise ShapeError("record '{}': latents shape {} != dims".format(r.clip_id, r.gt_latents.shape))
        for e in (r.image_emb, r.text_emb, r.depth_emb):
            if e.dim != d.joint_dim:
                raise ShapeError("record '{}': {} embedding dim {} != {}".format(r.clip_id, e.space.value, e.dim, d.joint_dim))
        if r.text_cond.shape != (d.cond_tokens, d.cond_dim):
            raise ShapeError("record '{}': text condition shape {} != dims".format(r.clip_id, r.text_cond.shape))

    # per-concept balance within every (split, subject)
    counts = {}
    for r in m.records:
        key = (m.split[r.block_id], r.subject)
        counts.setdefault(key, np.zeros(d.concepts, dtype=int))[r.concept_label] += 1
    for (split, subject), c in counts.items():
        if c.min() != c.max():
            raise ValidationError("unbalanced concepts in {} split of subject {}".format(split.value, subject))
    return m


_ARRAYS = ("eeg", "latents", "image", "text", "depth", "cond")


def _record_arrays(r):
    return {
        "eeg": r.eeg.data,
        "latents": r.gt_latents,
        "image": r.image_emb.vector,
        "text": r.text_emb.vector,
        "depth": r.depth_emb.vector,
        "cond": r.text_cond,
    }


def _dims_shapes(d):
    return {
        "eeg": (d.channels, d.samples),
        "latents": (d.frames, d.latent_dim),
        "image": (d.joint_dim,),
        "text": (d.joint_dim,),
        "depth": (d.joint_dim,),
        "cond": (d.cond_tokens, d.cond_dim),
    }


def save_manifest(m, path):
    entries = []
    for r in m.records:
        arrays = {}
        for name, arr in _record_arrays(r).items():
            rel = os.path.join("arrays", r.clip_id, name + ".f32")
            arrays[name] = container.write_array(path, rel, arr)
        entries.append({
            "clip_id": r.clip_id,
            "concept": r.concept_label,
            "block": r.block_id,
            "subject": r.subject,
            "arrays": arrays,
        })

    header = {
        "kind": "manifest",
        "seed": m.seed,
        "dims": vars(m.dims),
        "split": {str(b): s.value for b, s in sorted(m.split.items())},
        "meta": m.meta,
        "records": entries,
    }
    container.write_header(path, header)
    logger.info("saved manifest with %d records to %s", len(entries), path)
    return path


def load_manifest(path):
    header = container.read_header(path, kind="manifest")
    try:
        dims = Dims(**header["dims"])
        split = {int(b): Split(s) for b, s in header["split"].items()}
    except (KeyError, TypeError, ValueError) as e:
        raise IngestionError("{}: bad header: {}".format(path, e))

    shapes = _dims_shapes(dims)
    records = []
    for e in header.get("records", []):
        clip_id = e.get("clip_id")
        missing = [n for n in _ARRAYS if n not in e.get("arrays", {})]
        if missing:
            raise IngestionError("missing arrays {}".format(missing), clip_id)
        a = {n: container.read_array(path, e["arrays"][n], shapes[n], clip_id) for n in _ARRAYS}
        records.append(ClipRecord(
            clip_id=clip_id,
            eeg=EegSegment(a["eeg"], dims.sample_rate_hz, clip_id),
            gt_latents=a["latents"],
            image_emb=Embedding(a["image"], EmbeddingSpace.IMAGE),
            text_emb=Embedding(a["text"], EmbeddingSpace.TEXT),
            depth_emb=Embedding(a["depth"], EmbeddingSpace.DEPTH),
            text_cond=a["cond"],
            concept_label=int(e["concept"]),
            block_id=int(e["block"]),
            subject=int(e.get("subject", 0)),
        ))

    m = DatasetManifest(records=records, split=split, seed=int(header["seed"]), dims=dims, meta=header.get("meta", {}))
    return m.validate()


# ---- batching and readout ---------------------------------------------------

def as_arrays(records):
    """ stack records into dense arrays, in the given order """
    return {
        "clip_ids": [r.clip_id for r in records],
        "eeg": np.stack([r.eeg.data for r in records]) if records else np.zeros((0,)),
        "latents": np.stack([r.gt_latents for r in records]) if records else np.zeros((0,)),
        "image": np.stack([r.image_emb.vector for r in records]) if records else np.zeros((0,)),
        "text": np.stack([r.text_emb.vector for r in records]) if records else np.zeros((0,)),
        "depth": np.stack([r.depth_emb.vector for r in records]) if records else np.zeros((0,)),
        "cond": np.stack([r.text_cond for r in records]) if records else np.zeros((0,)),
        "labels": np.array([r.concept_label for r in records], dtype=np.int64),
        "subjects": np.array([r.subject for r in records], dtype=np.int64),
    }


def least_squares_readout(records, concepts):
    """ train accuracy of a least-squares linear map from flattened EEG (+ bias) to concept one-hot """
    a = as_arrays(records)
    x = a["eeg"].reshape(len(records), -1).astype(np.float64)
    x = np.concatenate([x, np.ones((len(records), 1))], axis=1)
    y = np.eye(concepts)[a["labels"]]
    w, *_ = np.linalg.lstsq(x, y, rcond=None)
    pred = np.argmax(x @ w, axis=1)
    return float(np.mean(pred == a["labels"]))
