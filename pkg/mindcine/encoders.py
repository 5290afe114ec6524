"""
EEG encoders.

Semantic encoders map one C x T segment to a joint_dim vector. Two
implementations share the SemanticEncoder interface so loss and training code
never depends on which one is used: an MLP trained from scratch, and an adapter
that puts a trainable linear head on precomputed per-clip vectors from a large
pretrained EEG model (the model itself is not part of this package).

EmbedNet is the perceptual feature extractor: temporal convolution, then a
full-height spatial convolution, applied to every window with shared weights.
"""
import logging
import os
from abc import ABC, abstractmethod

import numpy as np
import torch
import torch.nn as nn

from mindcine import container
from mindcine.dataset import Embedding, EmbeddingSpace, EegSegment, WindowedSegment
from mindcine.defs import ShapeError, UnknownClipError, ValidationError, consume_seed

logger = logging.getLogger(__name__)


def count_trainable(module):
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


class SemanticEncoder(nn.Module, ABC):
    space = EmbeddingSpace.EEG_SEMANTIC

    def __init__(self, joint_dim):
        super().__init__()
        self.joint_dim = joint_dim

    @abstractmethod
    def forward(self, eeg, clip_ids=None):
        """ batch of B segments (B x C x T tensor, and/or clip ids) -> B x joint_dim """

    @property
    def param_count(self):
        return count_trainable(self)

    def encode(self, segment):
        """ one segment -> Embedding, in eval mode """
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                x = torch.as_tensor(segment.data, dtype=self._dtype()).unsqueeze(0)
                out = self(x, [segment.clip_id])
        finally:
            self.train(was_training)
        return Embedding(out[0].cpu().numpy(), self.space)

    def _dtype(self):
        return next(self.parameters()).dtype


class MlpEncoder(SemanticEncoder):
    def __init__(self, channels, samples, joint_dim, hidden=(256, 128)):
        super().__init__(joint_dim)
        self.channels = channels
        self.samples = samples

        layers = [nn.Flatten(start_dim=1)]
        width = channels * samples
        for h in hidden:
            layers += [nn.Linear(width, h), nn.GELU()]
            width = h
        layers.append(nn.Linear(width, joint_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, eeg, clip_ids=None):
        if eeg is None or tuple(eeg.shape[-2:]) != (self.channels, self.samples):
            got = None if eeg is None else tuple(eeg.shape)
            raise ShapeError("MLP encoder built for {}x{} segments, got {}".format(self.channels, self.samples, got))
        return self.net(eeg)


class PretrainedAdapter(SemanticEncoder):
    """
    head-tuning boundary for large pretrained EEG models: the frozen model's
    per-clip output vectors are looked up by clip id, only the head trains.
    """

    def __init__(self, table, joint_dim):
        super().__init__(joint_dim)
        if not table:
            raise ValidationError("empty adapter table")
        ids = sorted(table)
        self._index = {cid: i for i, cid in enumerate(ids)}
        feats = np.stack([np.asarray(table[cid], dtype=np.float32) for cid in ids])
        self.register_buffer("features", torch.from_numpy(feats))
        self.head = nn.Linear(feats.shape[1], joint_dim)

    @property
    def source_dim(self):
        return self.features.shape[1]

    def rows(self, clip_ids):
        try:
            return [self._index[cid] for cid in clip_ids]
        except KeyError as e:
            raise UnknownClipError("clip {} not in adapter table".format(e))

    def forward(self, eeg=None, clip_ids=None):
        if clip_ids is None:
            raise ValidationError("pretrained adapter needs clip ids")
        idx = torch.as_tensor(self.rows(clip_ids), dtype=torch.long)
        feats = self.features.index_select(0, idx).to(self.head.weight.dtype)
        return self.head(feats)

    def encode_clip(self, clip_id):
        with torch.no_grad():
            return Embedding(self([None], [clip_id])[0].cpu().numpy(), self.space)


class EmbedNet(nn.Module):
    def __init__(self, channels, window, cfg):
        super().__init__()
        self.channels = channels
        self.window = window
        self.embed_dim = cfg.embed_dim

        f, d, k = cfg.temporal_filters, cfg.depth_multiplier, cfg.temporal_kernel
        self.temporal = nn.Conv2d(1, f, (1, k), padding=(0, k // 2), bias=False)
        self.spatial = nn.Conv2d(f, f * d, (channels, 1), groups=f, bias=False)
        self.act = nn.GELU()
        self.pool = nn.AdaptiveAvgPool2d((1, cfg.pool_out))
        self.proj = nn.Linear(f * d * cfg.pool_out, cfg.embed_dim)

    @property
    def param_count(self):
        return count_trainable(self)

    def forward(self, windows):
        """ ... x C x w -> ... x embed_dim, every window independently """
        if tuple(windows.shape[-2:]) != (self.channels, self.window):
            raise ShapeError("EmbedNet built for {}x{} windows, got {}".format(self.channels, self.window, tuple(windows.shape)))
        lead = windows.shape[:-2]
        x = windows.reshape(-1, 1, self.channels, self.window)
        x = self.act(self.spatial(self.temporal(x)))
        x = self.pool(x).flatten(start_dim=1)
        return self.proj(x).reshape(*lead, self.embed_dim)

    def extract(self, windows):
        """ WindowedSegment (or t x C x w array) -> list of t perceptual Embeddings """
        data = windows.windows if isinstance(windows, WindowedSegment) else windows
        if len(data) == 0:
            raise ValidationError("no windows to extract")
        x = torch.as_tensor(np.asarray(data), dtype=self.proj.weight.dtype)
        with torch.no_grad():
            out = self(x)
        return [Embedding(v.cpu().numpy(), EmbeddingSpace.PERCEPTUAL) for v in out]


def make_adapter_table(records, dim, seed):
    """
    stand-in for a frozen pretrained model: a fixed random projection of the
    flattened segment, one vector per clip.
    """
    rng = np.random.default_rng(consume_seed("adapter-table", seed))
    if not records:
        return {}
    c, t = records[0].eeg.data.shape
    proj = rng.standard_normal((dim, c * t)) / np.sqrt(c * t)
    return {r.clip_id: np.tanh(proj @ r.eeg.data.reshape(-1)).astype(np.float32) for r in records}


def save_adapter_table(table, path):
    entries = {}
    for cid in sorted(table):
        entries[cid] = container.write_array(path, os.path.join("table", cid + ".f32"), table[cid])
    container.write_header(path, {"kind": "adapter-table", "entries": entries})
    return path


def load_adapter_table(path):
    header = container.read_header(path, kind="adapter-table")
    return {cid: container.read_array(path, e, clip_id=cid) for cid, e in header["entries"].items()}


def build_encoder(cfg, dims, table=None):
    if cfg.encoder.kind == "mlp":
        return MlpEncoder(dims.channels, dims.samples, dims.joint_dim, cfg.encoder.hidden)
    if table is None:
        raise ValidationError("adapter encoder needs an embedding table")
    return PretrainedAdapter(table, dims.joint_dim)
