"""
Perceptual decoding: per-window EmbedNet features go through an
encoder-decoder transformer whose decoder self-attention is causal, producing
one video latent per frame.

Training uses teacher forcing: decoder position i sees a learned start token
(i = 0) or the projected ground-truth latent of frame i-1. Inference feeds the
model's own predictions back one frame at a time. With autoregressive=False
the decoder queries are the positional embeddings alone.
"""
import copy
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset

from mindcine import container
from mindcine.config import config_hash, from_dict, to_dict
from mindcine.dataset import Dims, Embedding, as_arrays, window_stride
from mindcine.defs import DivergenceError, ShapeError, ValidationError, derive_seed
from mindcine.encoders import EmbedNet, count_trainable
from mindcine.runtime import generator, seeded

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "perceptual"


@dataclass(frozen=True)
class LatentSequence:
    latents: np.ndarray  # t x latent_dim
    frame_rate_hz: Optional[float] = None

    def __post_init__(self):
        if self.latents.ndim != 2:
            raise ShapeError("latent sequence must be frames x latent_dim, got {}".format(self.latents.shape))
        if not np.all(np.isfinite(self.latents)):
            raise ValidationError("latent sequence has non-finite values")

    def __len__(self):
        return self.latents.shape[0]


def causal_mask(t):
    """ t x t, True where attention is allowed (key j <= query i) """
    if t < 1:
        raise ValidationError("causal mask needs t >= 1, got {}".format(t))
    return torch.ones(t, t, dtype=torch.bool).tril()


def attention(q, k, v, mask=None, qk_norm=False, q_norm=None, k_norm=None, eps=1e-6):
    """
    scaled dot-product attention over the last two dims.
    q: ... x Lq x d, k and v: ... x Lk x d, mask: Lq x Lk bool (True = allowed).
    With qk_norm, q and k are layer normalised per vector first, through
    q_norm / k_norm if given (learnable gain) or a plain layer norm.
    Returns (output, weights).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention shapes q {} k {} v {}".format(tuple(q.shape), tuple(k.shape), tuple(v.shape)))
    if qk_norm:
        q = q_norm(q) if q_norm is not None else F.layer_norm(q, q.shape[-1:], eps=eps)
        k = k_norm(k) if k_norm is not None else F.layer_norm(k, k.shape[-1:], eps=eps)

    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is not None:
        if not bool(mask.any(dim=-1).all()):
            raise ValidationError("attention mask leaves a query row with no allowed key")
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


class QKLayerNorm(nn.Module):
    """ per-head layer norm with a learnable gain, no shift """

    def __init__(self, dim, eps=1e-6):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, x.shape[-1:], weight=self.gain, eps=self.eps)


class MultiHeadAttention(nn.Module):
    def __init__(self, model_dim, heads, qk_norm=True, eps=1e-6):
        super().__init__()
        if model_dim % heads:
            raise ShapeError("model_dim {} not divisible by {} heads".format(model_dim, heads))
        self.heads = heads
        self.head_dim = model_dim // heads
        self.q = nn.Linear(model_dim, model_dim)
        self.k = nn.Linear(model_dim, model_dim)
        self.v = nn.Linear(model_dim, model_dim)
        self.o = nn.Linear(model_dim, model_dim)
        self.qk_norm = qk_norm
        self.q_norm = QKLayerNorm(self.head_dim, eps) if qk_norm else None
        self.k_norm = QKLayerNorm(self.head_dim, eps) if qk_norm else None
        self.last_weights = None

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, memory=None, mask=None):
        kv = x if memory is None else memory
        q, k, v = self._split(self.q(x)), self._split(self.k(kv)), self._split(self.v(kv))
        out, w = attention(q, k, v, mask, self.qk_norm, self.q_norm, self.k_norm)
        self.last_weights = w.detach()
        b, _, n, _ = out.shape
        return self.o(out.transpose(1, 2).reshape(b, n, self.heads * self.head_dim))


def _ffn(model_dim, ffn_dim):
    return nn.Sequential(nn.Linear(model_dim, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, model_dim))


class EncoderLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        d = cfg.model_dim
        self.norm1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.heads, cfg.qk_norm, cfg.qk_norm_eps)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = _ffn(d, cfg.ffn_dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        d = cfg.model_dim
        self.norm1 = nn.LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, cfg.heads, cfg.qk_norm, cfg.qk_norm_eps)
        self.norm2 = nn.LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, cfg.heads, cfg.qk_norm, cfg.qk_norm_eps)
        self.norm3 = nn.LayerNorm(d)
        self.ffn = _ffn(d, cfg.ffn_dim)

    def forward(self, x, memory, mask):
        x = x + self.self_attn(self.norm1(x), mask=mask)
        x = x + self.cross_attn(self.norm2(x), memory=memory)
        return x + self.ffn(self.norm3(x))


def sinusoidal_table(t, d):
    pos = torch.arange(t, dtype=torch.float64).unsqueeze(1)
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(t, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(torch.get_default_dtype())


class CausalSeqModel(nn.Module):
    def __init__(self, input_dim, latent_dim, frames, cfg):
        super().__init__()
        d = cfg.model_dim
        self.frames = frames
        self.latent_dim = latent_dim
        self.autoregressive = cfg.autoregressive
        self.pe_kind = cfg.pe

        self.in_proj = nn.Linear(input_dim, d)
        if cfg.pe == "sinusoidal":
            self.register_buffer("pe", sinusoidal_table(frames, d))
        elif cfg.pe == "learned":
            self.pe = nn.Parameter(0.02 * torch.randn(frames, d))
        else:
            self.pe = None

        self.encoder = nn.ModuleList([EncoderLayer(cfg) for _ in range(cfg.layers)])
        self.decoder = nn.ModuleList([DecoderLayer(cfg) for _ in range(cfg.layers)])
        self.enc_norm = nn.LayerNorm(d)
        self.dec_norm = nn.LayerNorm(d)
        self.start = nn.Parameter(0.02 * torch.randn(d))
        self.target_proj = nn.Linear(latent_dim, d)
        self.out = nn.Linear(d, latent_dim)
        self.register_buffer("mask", causal_mask(frames), persistent=False)

    @property
    def param_count(self):
        return count_trainable(self)

    def _add_pe(self, x):
        return x if self.pe is None else x + self.pe[: x.shape[1]]

    def _check(self, e_p):
        if e_p.dim() != 3 or e_p.shape[1] != self.frames:
            raise ShapeError("CausalSeq expects B x {} x E inputs, got {}".format(self.frames, tuple(e_p.shape)))

    def encode(self, e_p):
        self._check(e_p)
        x = self._add_pe(self.in_proj(e_p))
        for layer in self.encoder:
            x = layer(x)
        return self.enc_norm(x)

    def decoder_inputs(self, targets=None, batch=None):
        """ start token + shifted projected targets, or positional queries when not autoregressive """
        if not self.autoregressive:
            b = batch if batch is not None else targets.shape[0]
            x = self.start.expand(b, self.frames, -1)
        else:
            b = targets.shape[0]
            head = self.start.expand(b, 1, -1)
            x = torch.cat([head, self.target_proj(targets[:, :-1])], dim=1)
        return self._add_pe(x)

    def decode(self, dec_in, memory):
        t = dec_in.shape[1]
        mask = self.mask[:t, :t]
        x = dec_in
        for layer in self.decoder:
            x = layer(x, memory, mask)
        return self.out(self.dec_norm(x))

    def forward(self, e_p, targets=None):
        memory = self.encode(e_p)
        if not self.autoregressive:
            return self.decode(self.decoder_inputs(batch=e_p.shape[0]), memory)
        if targets is None:
            return self._generate(memory)
        if targets.shape[1:] != (self.frames, self.latent_dim):
            raise ShapeError("targets must be B x {} x {}, got {}".format(self.frames, self.latent_dim, tuple(targets.shape)))
        return self.decode(self.decoder_inputs(targets), memory)

    def _generate(self, memory):
        b = memory.shape[0]
        outs = []
        for i in range(self.frames):
            pad = memory.new_zeros(b, self.frames - len(outs), self.latent_dim)
            sofar = torch.cat([torch.stack(outs, dim=1), pad], dim=1) if outs else pad
            outs.append(self.decode(self.decoder_inputs(sofar)[:, : i + 1], memory)[:, i])
        return torch.stack(outs, dim=1)

    def generate(self, e_p):
        """ inference: autoregressive self-feeding, or one pass when not autoregressive """
        return self(e_p)


def _as_sequence(e_p, dtype):
    if isinstance(e_p, (list, tuple)):
        e_p = np.stack([e.vector if isinstance(e, Embedding) else e for e in e_p]) if len(e_p) else np.zeros((0, 0))
    x = torch.as_tensor(np.asarray(e_p) if not torch.is_tensor(e_p) else e_p, dtype=dtype)
    return x.unsqueeze(0) if x.dim() == 2 else x


def causalseq_forward(model, e_p, frame_rate_hz=None):
    """ one clip's perceptual embeddings (t of them) -> predicted LatentSequence """
    x = _as_sequence(e_p, model.out.weight.dtype)
    if x.shape[0] != 1 or x.shape[1] != model.frames:
        raise ShapeError("expected {} perceptual embeddings, got {}".format(model.frames, tuple(x.shape)))
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            z = model.generate(x)[0]
    finally:
        model.train(was)
    return LatentSequence(z.cpu().numpy(), frame_rate_hz)


def perception_loss(pred, gt, reduction="mean"):
    """ squared L2 over frames and latent dims per sample, reduced over the batch """
    if isinstance(pred, LatentSequence):
        pred = torch.as_tensor(pred.latents).unsqueeze(0)
    if isinstance(gt, LatentSequence):
        gt = torch.as_tensor(gt.latents).unsqueeze(0)
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ShapeError("perception loss {} vs {}".format(tuple(pred.shape), tuple(gt.shape)))
    if pred.dim() < 2 or pred.shape[0] == 0:
        raise ValidationError("perception loss needs a non-empty batch of sequences")
    per_sample = ((pred - gt) ** 2).flatten(start_dim=1).sum(dim=-1)
    if reduction == "sum":
        return per_sample.sum()
    return per_sample.mean()


def window_batch(eeg, frames, window):
    """ B x C x T -> B x t x C x w, the tensor form of dataset.slice_windows """
    stride = window_stride(eeg.shape[-1], frames, window)
    if frames == 1:
        return eeg.unsqueeze(1)
    return eeg.unfold(-1, window, stride).permute(0, 2, 1, 3)


class PerceptualDecoder(nn.Module):
    """ EmbedNet over every window, then CausalSeq """

    def __init__(self, embednet, model, window):
        super().__init__()
        self.embednet = embednet
        self.model = model
        self.window = window

    def forward(self, eeg, targets=None):
        e_p = self.embednet(window_batch(eeg, self.model.frames, self.window))
        return self.model(e_p, targets)


# ---- training ---------------------------------------------------------------

@dataclass
class TrainedPerceptualState:
    embednet: EmbedNet
    model: CausalSeqModel
    dims: Dims
    history: List[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_state: Optional[dict] = None
    initial_loss: Optional[float] = None
    config: Optional[dict] = None

    def modules(self):
        return {"embednet": self.embednet, "model": self.model}

    def decoder(self):
        return PerceptualDecoder(self.embednet, self.model, self.dims.window)

    def use_best(self):
        if self.best_state is not None:
            for name, module in self.modules().items():
                module.load_state_dict(self.best_state[name])
        return self


def build_perceptual(cfg, dims):
    p = cfg.perceptual
    with seeded("perceptual-init", derive_seed(cfg.seed, "perceptual-init")):
        embednet = EmbedNet(dims.channels, dims.window, p.embednet)
        model = CausalSeqModel(p.embednet.embed_dim, dims.latent_dim, dims.frames, p)
    logger.info("perceptual model: EmbedNet %d + CausalSeq %d trainable parameters", embednet.param_count, model.param_count)
    return embednet, model


def _split_tensors(records, dtype):
    a = as_arrays(records)
    return torch.as_tensor(a["eeg"], dtype=dtype), torch.as_tensor(a["latents"], dtype=dtype)


def _evaluate(net, eeg, latents, batch_size):
    """ mean perception loss of free-running (inference mode) predictions """
    if len(eeg) == 0:
        return None
    was = net.training
    net.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(eeg), batch_size):
            sl = slice(start, start + batch_size)
            pred = net(eeg[sl])
            total += float(perception_loss(pred, latents[sl], "sum"))
    net.train(was)
    return total / len(eeg)


def train_perceptual(manifest, embednet, model, cfg):
    o = cfg.perceptual_optim
    dims = manifest.dims
    dtype = model.out.weight.dtype
    net = PerceptualDecoder(embednet, model, dims.window)
    fit, held = manifest.fit_val_split(cfg.data.val_blocks)
    eeg, latents = _split_tensors(fit, dtype)
    val_eeg, val_latents = _split_tensors(held, dtype)
    if len(eeg) == 0:
        raise ValidationError("no training clips")

    opt = torch.optim.Adam([p for p in net.parameters() if p.requires_grad], lr=o.lr, weight_decay=o.weight_decay)
    loader = DataLoader(
        TensorDataset(torch.arange(len(eeg))),
        batch_size=o.batch_size,
        shuffle=True,
        generator=generator("perceptual-shuffle", derive_seed(cfg.seed, "perceptual-shuffle")),
    )
    modules = {"embednet": embednet, "model": model}

    def snapshot():
        return {k: copy.deepcopy(m.state_dict()) for k, m in modules.items()}

    has_val = len(val_eeg) > 0
    initial = _evaluate(net, eeg, latents, o.batch_size)
    best_loss = _evaluate(net, val_eeg, val_latents, o.batch_size) if has_val else initial
    best_epoch, best_state = 0, snapshot()
    history = []

    for epoch in range(1, o.epochs + 1):
        net.train()
        total, seen = 0.0, 0
        for bi, (idx,) in enumerate(loader):
            pred = net(eeg[idx], latents[idx])
            loss = perception_loss(pred, latents[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, bi, float(loss))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss) * len(idx)
            seen += len(idx)
            logger.debug("perceptual epoch %d batch %d loss %.6f", epoch, bi, float(loss))

        row = {"epoch": epoch, "loss": total / seen}
        row["val_loss"] = _evaluate(net, val_eeg, val_latents, o.batch_size) if has_val else row["loss"]
        history.append(row)
        logger.info("perceptual epoch %d: loss %.5f val %.5f", epoch, row["loss"], row["val_loss"])
        if row["val_loss"] < best_loss:
            best_loss, best_epoch, best_state = row["val_loss"], epoch, snapshot()

    return TrainedPerceptualState(
        embednet=embednet,
        model=model,
        dims=dims,
        history=history,
        best_epoch=best_epoch,
        best_state=best_state,
        initial_loss=initial,
        config=to_dict(cfg),
    )


def predict_latents(state, records, batch_size=256):
    """ free-running predicted latents, N x t x latent_dim """
    net = state.decoder()
    eeg, _ = _split_tensors(records, state.model.out.weight.dtype)
    d = state.dims
    if len(eeg) == 0:
        return np.zeros((0, d.frames, d.latent_dim), np.float32)
    net.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(eeg), batch_size):
            out.append(net(eeg[start : start + batch_size]).cpu().numpy())
    return np.concatenate(out)


# ---- checkpoints ------------------------------------------------------------

def save_perceptual_checkpoint(state, path, best=True):
    final = None
    if best and state.best_state is not None:
        final = {k: copy.deepcopy(m.state_dict()) for k, m in state.modules().items()}
        state.use_best()
    header = {
        "config": state.config,
        "config_hash": config_hash(from_dict(state.config)) if state.config else None,
        "dims": vars(state.dims),
        "epoch": state.best_epoch if best else len(state.history),
        "metrics": state.history[state.best_epoch - 1] if best and state.best_epoch else None,
        "history": state.history,
        "initial_loss": state.initial_loss,
    }
    try:
        return container.save_state(path, CHECKPOINT_KIND, state.modules(), header)
    finally:
        if final is not None:
            for k, m in state.modules().items():
                m.load_state_dict(final[k])


def load_perceptual_checkpoint(path):
    header = container.read_header(path, kind=CHECKPOINT_KIND)
    cfg = from_dict(header["config"])
    dims = Dims(**header["dims"])
    embednet, model = build_perceptual(cfg, dims)
    state = TrainedPerceptualState(
        embednet, model, dims, header.get("history", []), header.get("epoch", 0), None,
        header.get("initial_loss"), header["config"],
    )
    container.load_state(path, CHECKPOINT_KIND, state.modules())
    return state
