"""
Semantic decoding: contrastive joint alignment of the EEG embedding with the
image, text and depth spaces, a projection onto the text space, and a
predictor mapping the EEG embedding into the generator's text-condition space.

Batch losses take a `reduction`: "mean" divides by the batch size (default, so
the loss weights carry over between batch sizes), "sum" is the literal sum.
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
from mindcine.dataset import Dims, Embedding, as_arrays
from mindcine.defs import (
    DivergenceError,
    Modality,
    NumericError,
    ShapeError,
    ValidationError,
    derive_seed,
)
from mindcine.encoders import PretrainedAdapter, build_encoder
from mindcine.runtime import generator, seeded

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "semantic"


@dataclass
class JointLossWeights:
    alpha1: float = 1.0 / 3
    alpha2: float = 1.0 / 3
    alpha3: float = 1.0 / 3

    def __post_init__(self):
        if min(self.as_tuple()) < 0:
            raise ValidationError("joint loss weights must be non-negative")

    def as_tuple(self):
        """ (image, text, depth) """
        return (self.alpha1, self.alpha2, self.alpha3)


@dataclass
class SemanticLossWeights:
    lam: float = 0.01
    mu: float = 0.5

    def __post_init__(self):
        if self.lam < 0 or self.mu < 0:
            raise ValidationError("lambda and mu must be non-negative")


class SoftClipParams(nn.Module):
    """
    temperature, stored as log(tau) so it stays positive under any update.
    shared=False keeps one temperature per modality pair.
    """

    def __init__(self, tau_init=0.07, learn_tau=True, shared=True, bidirectional=True):
        super().__init__()
        if tau_init <= 0:
            raise ValidationError("tau must be positive")
        n = 1 if shared else len(Modality)
        self.log_tau = nn.Parameter(torch.full((n,), math.log(tau_init)), requires_grad=learn_tau)
        self.shared = shared
        self.bidirectional = bidirectional

    def tau(self, pair=0):
        return self.log_tau[0 if self.shared else pair].exp()

    @classmethod
    def from_config(cls, s):
        return cls(s.tau_init, s.learn_tau, s.shared_tau, s.bidirectional)


class SemanticPredictor(nn.Module):
    """ joint_dim -> tokens x cond_dim, a single linear map """

    def __init__(self, joint_dim, tokens, cond_dim):
        super().__init__()
        self.tokens = tokens
        self.cond_dim = cond_dim
        self.linear = nn.Linear(joint_dim, tokens * cond_dim)

    @property
    def cond_shape(self):
        return (self.tokens, self.cond_dim)

    def forward(self, e_s):
        return self.linear(e_s).reshape(*e_s.shape[:-1], self.tokens, self.cond_dim)


def _as_batch(x, like=None):
    if isinstance(x, (list, tuple)):
        x = np.stack([e.vector if isinstance(e, Embedding) else e for e in x]) if len(x) else np.zeros((0, 0))
    if not torch.is_tensor(x):
        dtype = like.dtype if like is not None else torch.get_default_dtype()
        x = torch.as_tensor(np.asarray(x), dtype=dtype)
    return x


def _reduce(per_sample, reduction):
    if reduction == "sum":
        return per_sample.sum()
    if reduction == "mean":
        return per_sample.mean()
    raise ValidationError("unknown reduction '{}'".format(reduction))


def soft_cross_entropy(p, logits):
    """ per-row cross entropy of target distributions p against softmax(logits) """
    return -(p * torch.log_softmax(logits, dim=-1)).sum(dim=-1)


def softclip_loss(pred, target, params=None, tau=None, bidirectional=None, reduction="mean", pair=0):
    """
    soft-target contrastive loss. Row k of the target distribution is the
    softmax of target_k's similarities to all targets, row k of the predicted
    distribution the softmax of pred_k's similarities to all targets.

    Either `params` (SoftClipParams) or a plain `tau` gives the temperature,
    `bidirectional` defaults to params.bidirectional, else True.
    """
    pred = _as_batch(pred)
    target = _as_batch(target, like=pred)
    if pred.shape[0] == 0:
        raise ValidationError("softclip loss of an empty batch")
    if pred.shape != target.shape:
        raise ShapeError("softclip pred {} vs target {}".format(tuple(pred.shape), tuple(target.shape)))

    if params is not None:
        tau = params.tau(pair)
        if bidirectional is None:
            bidirectional = params.bidirectional
    if tau is None:
        raise ValidationError("softclip loss needs a temperature")
    if bidirectional is None:
        bidirectional = True

    pred = F.normalize(pred, dim=-1)
    target = F.normalize(target, dim=-1)

    p = torch.softmax(target @ target.T / tau, dim=-1)
    logits = pred @ target.T / tau
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite similarity in softclip loss")

    rows = soft_cross_entropy(p, logits)
    if bidirectional:
        rows_t = soft_cross_entropy(p, logits.T)
        rows = 0.5 * (rows + rows_t)
    return _reduce(rows, reduction)


def joint_loss(e_s, v, t, d, weights=None, params=None, tau=None, bidirectional=None, reduction="mean"):
    """ alpha-weighted softclip of e_s against image (v), text (t) and depth (d) """
    weights = weights or JointLossWeights()
    e_s = _as_batch(e_s)
    targets = [_as_batch(x, like=e_s) for x in (v, t, d)]
    for x in targets:
        if x.shape[0] != e_s.shape[0]:
            raise ShapeError("joint loss batches misaligned: {} vs {}".format(e_s.shape[0], x.shape[0]))

    total = e_s.new_zeros(())
    for pair, (alpha, target) in enumerate(zip(weights.as_tuple(), targets)):
        if alpha == 0:
            continue
        total = total + alpha * softclip_loss(e_s, target, params, tau, bidirectional, reduction, pair=pair)
    return total


def projection_loss(e_s, t, reduction="mean"):
    e_s = _as_batch(e_s)
    t = _as_batch(t, like=e_s)
    if e_s.shape != t.shape:
        raise ShapeError("projection loss {} vs {}".format(tuple(e_s.shape), tuple(t.shape)))
    return _reduce(((e_s - t) ** 2).sum(dim=-1), reduction)


def alignment_loss(predictor, e_s, e_t, reduction="mean"):
    e_s = _as_batch(e_s)
    e_t = _as_batch(e_t, like=e_s)
    out = predictor(e_s)
    if out.shape != e_t.shape:
        raise ShapeError("predictor output {} vs text condition {}".format(tuple(out.shape), tuple(e_t.shape)))
    return _reduce(((out - e_t) ** 2).flatten(start_dim=1).sum(dim=-1), reduction)


def semantic_total_loss(parts, weights=None):
    """ parts: {"projection", "joint", "alignment"} -> projection + lam*joint + mu*alignment """
    weights = weights or SemanticLossWeights()
    total = parts["projection"] + weights.lam * parts["joint"] + weights.mu * parts["alignment"]
    if not bool(torch.isfinite(torch.as_tensor(total)).all()):
        raise NumericError("non-finite semantic loss parts {}".format(parts))
    return total


# ---- training ---------------------------------------------------------------

@dataclass
class TrainedSemanticState:
    encoder: nn.Module
    predictor: SemanticPredictor
    params: SoftClipParams
    dims: Dims
    history: List[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_state: Optional[dict] = None
    config: Optional[dict] = None

    def modules(self):
        return {"encoder": self.encoder, "predictor": self.predictor, "softclip": self.params}

    def use_best(self):
        """ load the lowest-validation-loss parameters into the modules """
        if self.best_state is not None:
            for name, module in self.modules().items():
                module.load_state_dict(self.best_state[name])
        return self


def build_semantic(cfg, dims, table=None):
    """ encoder, predictor and temperature, initialised from the config seed """
    with seeded("semantic-init", derive_seed(cfg.seed, "semantic-init")):
        encoder = build_encoder(cfg, dims, table)
        predictor = SemanticPredictor(dims.joint_dim, dims.cond_tokens, dims.cond_dim)
        params = SoftClipParams.from_config(cfg.semantic)
    logger.info("semantic encoder %s with %d trainable parameters", type(encoder).__name__, encoder.param_count)
    return encoder, predictor, params


class _Batches:
    """ the arrays of one split as tensors, indexable by a batch of row indices """

    def __init__(self, records, dtype):
        a = as_arrays(records)
        self.clip_ids = a["clip_ids"]
        self.n = len(records)
        self.t = {k: torch.as_tensor(a[k], dtype=dtype) for k in ("eeg", "image", "text", "depth", "cond", "latents")}

    def __call__(self, idx):
        return {k: v[idx] for k, v in self.t.items()}, [self.clip_ids[i] for i in idx.tolist()]


def _loss_parts(encoder, predictor, params, batch, ids, s):
    e_s = encoder(batch["eeg"], ids)
    weights = JointLossWeights(*s.alpha)
    return {
        "projection": projection_loss(e_s, batch["text"], s.reduction),
        "joint": joint_loss(e_s, batch["image"], batch["text"], batch["depth"], weights, params, reduction=s.reduction),
        "alignment": alignment_loss(predictor, e_s, batch["cond"], s.reduction),
    }


def _evaluate(encoder, predictor, params, data, s, batch_size):
    """ batch-size weighted mean of the loss parts over a split """
    if data.n == 0:
        return None
    was = encoder.training
    encoder.eval()
    sums = {}
    with torch.no_grad():
        for start in range(0, data.n, batch_size):
            idx = torch.arange(start, min(start + batch_size, data.n))
            parts = _loss_parts(encoder, predictor, params, *data(idx), s)
            parts["total"] = semantic_total_loss(parts, SemanticLossWeights(s.lam, s.mu))
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(v) * len(idx)
    encoder.train(was)
    return {k: v / data.n for k, v in sums.items()}


def train_semantic(manifest, encoder, predictor, cfg, params=None):
    s = cfg.semantic
    o = cfg.semantic_optim
    params = params if params is not None else SoftClipParams.from_config(s)
    dtype = predictor.linear.weight.dtype
    fit, held = manifest.fit_val_split(cfg.data.val_blocks)
    train = _Batches(fit, dtype)
    val = _Batches(held, dtype)
    if train.n == 0:
        raise ValidationError("no training clips")

    modules = {"encoder": encoder, "predictor": predictor, "softclip": params}
    trainable = [p for m in modules.values() for p in m.parameters() if p.requires_grad]
    opt = torch.optim.Adam(trainable, lr=o.lr, weight_decay=o.weight_decay)
    loader = DataLoader(
        TensorDataset(torch.arange(train.n)),
        batch_size=o.batch_size,
        shuffle=True,
        generator=generator("semantic-shuffle", derive_seed(cfg.seed, "semantic-shuffle")),
    )

    def snapshot():
        return {k: copy.deepcopy(m.state_dict()) for k, m in modules.items()}

    init = _evaluate(encoder, predictor, params, val if val.n else train, s, o.batch_size)
    best_total, best_epoch, best_state = init["total"], 0, snapshot()
    history = []

    for epoch in range(1, o.epochs + 1):
        encoder.train()
        sums, seen = {}, 0
        for bi, (idx,) in enumerate(loader):
            parts = _loss_parts(encoder, predictor, params, *train(idx), s)
            total = parts["projection"] + s.lam * parts["joint"] + s.mu * parts["alignment"]
            if not torch.isfinite(total):
                raise DivergenceError(epoch, bi, float(total))
            opt.zero_grad()
            total.backward()
            opt.step()

            parts["total"] = total
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(v) * len(idx)
            seen += len(idx)
            logger.debug("semantic epoch %d batch %d total %.6f", epoch, bi, float(total))

        row = {k: v / seen for k, v in sums.items()}
        row["epoch"] = epoch
        row["tau"] = float(params.tau())
        v = _evaluate(encoder, predictor, params, val, s, o.batch_size)
        row["val_total"] = v["total"] if v else row["total"]
        history.append(row)
        logger.info(
            "semantic epoch %d: total %.5f (proj %.5f, joint %.5f, align %.5f) val %.5f",
            epoch, row["total"], row["projection"], row["joint"], row["alignment"], row["val_total"],
        )
        if row["val_total"] < best_total:
            best_total, best_epoch, best_state = row["val_total"], epoch, snapshot()

    return TrainedSemanticState(
        encoder=encoder,
        predictor=predictor,
        params=params,
        dims=manifest.dims,
        history=history,
        best_epoch=best_epoch,
        best_state=best_state,
        config=to_dict(cfg),
    )


def predict_semantic(state, records, batch_size=256):
    """ e_s and predicted text conditions for a list of records, as numpy arrays """
    data = _Batches(records, state.predictor.linear.weight.dtype)
    state.encoder.eval()
    e_s, cond = [], []
    with torch.no_grad():
        for start in range(0, data.n, batch_size):
            idx = torch.arange(start, min(start + batch_size, data.n))
            batch, ids = data(idx)
            e = state.encoder(batch["eeg"], ids)
            e_s.append(e.cpu().numpy())
            cond.append(state.predictor(e).cpu().numpy())
    if not e_s:
        d = state.dims
        return np.zeros((0, d.joint_dim), np.float32), np.zeros((0, d.cond_tokens, d.cond_dim), np.float32)
    return np.concatenate(e_s), np.concatenate(cond)


# ---- checkpoints ------------------------------------------------------------

def save_semantic_checkpoint(state, path, best=True):
    """ best=True writes the lowest-validation-loss parameters, the modules keep their final ones """
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
    }
    if isinstance(state.encoder, PretrainedAdapter):
        header["adapter"] = {
            "ids": sorted(state.encoder._index, key=state.encoder._index.get),
            "source_dim": state.encoder.source_dim,
        }
    try:
        return container.save_state(path, CHECKPOINT_KIND, state.modules(), header)
    finally:
        if final is not None:
            for k, m in state.modules().items():
                m.load_state_dict(final[k])


def load_semantic_checkpoint(path):
    header = container.read_header(path, kind=CHECKPOINT_KIND)
    cfg = from_dict(header["config"])
    dims = Dims(**header["dims"])

    table = None
    if "adapter" in header:
        a = header["adapter"]
        table = {cid: np.zeros(a["source_dim"], dtype=np.float32) for cid in a["ids"]}
    encoder, predictor, params = build_semantic(cfg, dims, table)
    state = TrainedSemanticState(encoder, predictor, params, dims, header.get("history", []), header.get("epoch", 0), None, header["config"])
    container.load_state(path, CHECKPOINT_KIND, state.modules())
    return state
