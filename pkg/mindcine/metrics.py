"""
Reconstruction metrics.

Semantic level: N-way-top-K success over classifier logits, video-based (one
logit vector per clip) and frame-based (per-frame logits averaged).
Pixel level: SSIM, PSNR and hue Pearson correlation on rendered RGB frames in
[0, 1], plus cosine similarity of the latents themselves.
"""
import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn as nn
from matplotlib.colors import rgb_to_hsv
from scipy import signal, stats
from torch.utils.data import DataLoader, TensorDataset

from mindcine.defs import (
    PSNR_CAP_DB,
    REPORT_SCHEMA_VERSION,
    SchemaVersionError,
    ShapeError,
    UndefinedMetricError,
    UnknownClipError,
    ValidationError,
    derive_seed,
    nway_key,
    report_columns,
)
from mindcine.inference import render_frames
from mindcine.runtime import generator, seeded

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

AGGREGATION = "clip-then-subject"


# ---- N-way-top-K ------------------------------------------------------------

@dataclass
class NwayConfig:
    n: int
    k: int = 1
    repeats: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n < 2 or self.k < 1 or self.k >= self.n:
            raise ValidationError("N-way-top-K needs 1 <= K < N, got N={} K={}".format(self.n, self.k))
        if self.repeats < 1:
            raise ValidationError("repeats must be >= 1")


def _check_logits(logits, gt_class, n):
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if n > logits.size:
        raise ValidationError("{}-way over {} classes".format(n, logits.size))
    if not 0 <= gt_class < logits.size:
        raise ValidationError("ground-truth class {} outside [0, {})".format(gt_class, logits.size))
    return logits


def nway_topk(logits, gt_class, cfg):
    """
    mean success over cfg.repeats trials. Each trial draws N-1 distinct
    distractor classes, the trial succeeds when fewer than K of them score
    at least as high as the ground truth. Ties count against it, so a
    classifier with constant logits scores 0.
    """
    logits = _check_logits(logits, gt_class, cfg.n)
    others = np.delete(np.arange(logits.size), gt_class)
    rng = np.random.default_rng(cfg.seed)
    # argsort of iid keys gives a uniform random subset per row
    picks = np.argsort(rng.random((cfg.repeats, others.size)), axis=1)[:, : cfg.n - 1]
    higher = (logits[others[picks]] >= logits[gt_class]).sum(axis=1)
    return float(np.mean(higher < cfg.k))


def nway_topk_exact(logits, gt_class, n, k=1):
    """ expectation of nway_topk over all distractor subsets, hypergeometric in closed form """
    logits = _check_logits(logits, gt_class, n)
    others = logits.size - 1
    higher = int(np.sum(np.delete(logits, gt_class) >= logits[gt_class]))
    return float(stats.hypergeom.cdf(k - 1, others, higher, n - 1))


# ---- pixel metrics ----------------------------------------------------------

def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("image shapes differ: {} vs {}".format(a.shape, b.shape))
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValidationError("non-finite pixel values")
    return a, b


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_gray(a, b, win):
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2

    def filt(x):
        return signal.convolve2d(x, win, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def luma(img):
    return np.asarray(img, dtype=np.float64) @ LUMA_WEIGHTS


def ssim(a, b, channels="luma"):
    """
    SSIM of two H x W x 3 images in [0, 1] (H x W grayscale also accepted).
    channels="luma" compares BT.601 luma, "mean" averages the per-channel SSIM.
    """
    a, b = _pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ShapeError("image {} smaller than the {}x{} SSIM window".format(a.shape[:2], SSIM_WINDOW, SSIM_WINDOW))
    win = gaussian_window()
    if a.ndim == 2:
        return _ssim_gray(a, b, win)
    if channels == "luma":
        return _ssim_gray(luma(a), luma(b), win)
    if channels == "mean":
        return float(np.mean([_ssim_gray(a[..., c], b[..., c], win) for c in range(a.shape[-1])]))
    raise ValidationError("unknown ssim channel mode '{}'".format(channels))


def psnr(a, b):
    """ 10 log10(1 / MSE), inf for identical inputs """
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return float("inf")
    return float(10 * np.log10(1.0 / mse))


def _pearson(x, y):
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = np.sum(dx * dx), np.sum(dy * dy)
    if sxx == 0 or syy == 0:
        raise UndefinedMetricError("hue correlation undefined: zero variance")
    return float(np.clip(np.sum(dx * dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def hue_pcc(a, b, threshold=0.05, mode="pixel", bins=32):
    """
    Pearson correlation of hue. Pixels with saturation * value below the
    threshold have no meaningful hue and are masked. mode="pixel" correlates
    hue pixel by pixel over pixels chromatic in both images, "histogram"
    correlates the two hue histograms.
    """
    a, b = _pair(a, b)
    hsv_a, hsv_b = rgb_to_hsv(np.clip(a, 0, 1)), rgb_to_hsv(np.clip(b, 0, 1))
    chroma_a = hsv_a[..., 1] * hsv_a[..., 2] >= threshold
    chroma_b = hsv_b[..., 1] * hsv_b[..., 2] >= threshold

    if mode == "pixel":
        mask = chroma_a & chroma_b
        if mask.sum() < 2:
            raise UndefinedMetricError("fewer than 2 chromatic pixels")
        return _pearson(hsv_a[..., 0][mask], hsv_b[..., 0][mask])

    if mode == "histogram":
        if chroma_a.sum() < 2 or chroma_b.sum() < 2:
            raise UndefinedMetricError("fewer than 2 chromatic pixels")
        ha, _ = np.histogram(hsv_a[..., 0][chroma_a], bins=bins, range=(0.0, 1.0))
        hb, _ = np.histogram(hsv_b[..., 0][chroma_b], bins=bins, range=(0.0, 1.0))
        return _pearson(ha / ha.sum(), hb / hb.sum())

    raise ValidationError("unknown hue mode '{}'".format(mode))


def frame_cosine(pred, gt):
    """ mean over frames of the cosine between predicted and true latents """
    pred, gt = _pair(pred, gt)
    num = np.sum(pred * gt, axis=-1)
    den = np.linalg.norm(pred, axis=-1) * np.linalg.norm(gt, axis=-1)
    return float(np.mean(np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)))


def clip_hue_pcc(rec, gt, cfg):
    """ mean over frames with a defined hue correlation, None when no frame has one """
    vals = []
    for fr, fg in zip(rec, gt):
        try:
            vals.append(hue_pcc(fr, fg, cfg.hue_mask_threshold, cfg.hue_mode, cfg.hue_bins))
        except UndefinedMetricError:
            continue
    return float(np.mean(vals)) if vals else None


# ---- classifiers ------------------------------------------------------------

class Classifier(ABC):
    """ frames (t x H x W x 3) of one clip -> logits over concepts """

    concepts = 0

    @abstractmethod
    def predict_logits(self, frames, clip_id=None):
        pass


class OracleClassifier(Classifier):
    """ reads the true label, ignores the frames """

    def __init__(self, labels, concepts):
        self.labels = dict(labels)
        self.concepts = concepts

    def predict_logits(self, frames, clip_id=None):
        if clip_id not in self.labels:
            raise UnknownClipError("oracle has no label for clip {}".format(clip_id))
        out = np.zeros(self.concepts)
        out[self.labels[clip_id]] = 1.0
        return out


class RandomClassifier(Classifier):
    """ iid normal logits per clip, so the true class has a uniformly random rank """

    def __init__(self, concepts, seed):
        self.concepts = concepts
        self.seed = seed

    def predict_logits(self, frames, clip_id=None):
        return np.random.default_rng(derive_seed(self.seed, "random-classifier:{}".format(clip_id))).standard_normal(self.concepts)


class LinearClassifier(Classifier, nn.Module):
    """
    linear softmax classifier on pixels. video=True sees the concatenated
    frames of a clip, otherwise every frame is classified and the logits are
    averaged.
    """

    def __init__(self, frames, image_size, concepts, video):
        nn.Module.__init__(self)
        self.video = video
        self.frames = frames
        self.concepts = concepts
        pixels = image_size * image_size * 3
        self.linear = nn.Linear(pixels * frames if video else pixels, concepts)

    def forward(self, x):
        return self.linear(x)

    def inputs(self, frames):
        """ N x t x H x W x 3 -> training rows """
        x = torch.as_tensor(np.asarray(frames), dtype=self.linear.weight.dtype)
        return x.reshape(x.shape[0], -1) if self.video else x.reshape(x.shape[0] * x.shape[1], -1)

    def predict_logits(self, frames, clip_id=None):
        with torch.no_grad():
            logits = self(self.inputs(np.asarray(frames)[np.newaxis]))
        return logits.mean(dim=0).cpu().numpy().astype(np.float64)


def train_classifier(clf, frames, labels, optim, seed):
    """ cross-entropy on GT frames (N x t x H x W x 3) with labels (N,) """
    labels = torch.as_tensor(labels, dtype=torch.long)
    x = clf.inputs(frames)
    y = labels if clf.video else labels.repeat_interleave(frames.shape[1])
    loader = DataLoader(TensorDataset(x, y), batch_size=optim.batch_size, shuffle=True, generator=generator("classifier", seed))
    opt = torch.optim.Adam(clf.parameters(), lr=optim.lr, weight_decay=optim.weight_decay)
    loss_fn = nn.CrossEntropyLoss()
    for epoch in range(optim.epochs):
        total = 0.0
        for xb, yb in loader:
            loss = loss_fn(clf(xb), yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss) * len(yb)
        logger.debug("%s classifier epoch %d loss %.5f", "video" if clf.video else "frame", epoch + 1, total / len(y))
    acc = float((clf(x).argmax(dim=1) == y).double().mean())
    logger.info("%s classifier train accuracy %.3f", "video" if clf.video else "frame", acc)
    return clf


def build_classifiers(kind, train_records, eval_records, dims, render_seed, cfg):
    """ {"video": Classifier, "frame": Classifier} of the configured kind """
    if kind == "oracle":
        labels = {r.clip_id: r.concept_label for r in eval_records}
        return {"video": OracleClassifier(labels, dims.concepts), "frame": OracleClassifier(labels, dims.concepts)}
    if kind == "random":
        return {
            "video": RandomClassifier(dims.concepts, derive_seed(cfg.seed, "classifier-video")),
            "frame": RandomClassifier(dims.concepts, derive_seed(cfg.seed, "classifier-frame")),
        }
    if kind != "trainable":
        raise ValidationError("unknown classifier '{}'".format(kind))

    frames = np.stack([render_frames(r.gt_latents, dims.image_size, render_seed) for r in train_records])
    labels = np.array([r.concept_label for r in train_records])
    out = {}
    for name, video in (("video", True), ("frame", False)):
        seed = derive_seed(cfg.seed, "classifier-{}".format(name))
        with seeded("classifier-init", seed):
            clf = LinearClassifier(dims.frames, dims.image_size, dims.concepts, video)
        out[name] = train_classifier(clf, frames, labels, cfg.classifier_optim, seed).eval()
    return out


# ---- report -----------------------------------------------------------------

def _encode(v):
    if isinstance(v, float) and np.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, dict):
        return {k: _encode(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_encode(x) for x in v]
    return v


def _decode(v):
    if v in ("inf", "-inf"):
        return float(v)
    if isinstance(v, dict):
        return {k: _decode(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_decode(x) for x in v]
    return v


def _summarize(rows, keys):
    """ mean and population std per key over rows, psnr capped, None values skipped """
    out = {}
    for k in keys:
        vals = [r[k] for r in rows if r.get(k) is not None]
        if k == "psnr":
            vals = [min(v, PSNR_CAP_DB) for v in vals]
        if vals:
            out[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
        else:
            out[k] = {"mean": None, "std": None, "n": 0}
    return out


@dataclass
class MetricsReport:
    n_ways: List[int]
    rows: List[Dict] = field(default_factory=list)
    summary: Dict = field(default_factory=dict)
    subjects: Dict = field(default_factory=dict)
    missing: List[str] = field(default_factory=list)
    flagged: List[Dict] = field(default_factory=list)
    config_hash: Optional[str] = None
    meta: Dict = field(default_factory=dict)
    aggregation: str = AGGREGATION
    schema: int = REPORT_SCHEMA_VERSION

    @property
    def columns(self):
        return report_columns(self.n_ways)

    def to_dict(self):
        return _encode({
            "schema": self.schema,
            "config_hash": self.config_hash,
            "aggregation": self.aggregation,
            "n_ways": list(self.n_ways),
            "rows": self.rows,
            "summary": self.summary,
            "subjects": self.subjects,
            "missing": self.missing,
            "flagged": self.flagged,
            "meta": self.meta,
        })

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != REPORT_SCHEMA_VERSION:
            raise SchemaVersionError(d.get("schema"), REPORT_SCHEMA_VERSION)
        d = _decode(d)
        return cls(
            n_ways=d["n_ways"],
            rows=d.get("rows", []),
            summary=d.get("summary", {}),
            subjects=d.get("subjects", {}),
            missing=d.get("missing", []),
            flagged=d.get("flagged", []),
            config_hash=d.get("config_hash"),
            meta=d.get("meta", {}),
            aggregation=d.get("aggregation", AGGREGATION),
            schema=d["schema"],
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=2)
        return path

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def aggregate(rows, keys):
    """
    summary over clips, then over subjects: with one subject the mean/std are
    across clips, with several they are across the per-subject means.
    """
    by_subject = {}
    for r in rows:
        by_subject.setdefault(r["subject"], []).append(r)
    subjects = {str(s): _summarize(rs, keys) for s, rs in sorted(by_subject.items())}
    if len(by_subject) <= 1:
        return _summarize(rows, keys), subjects
    means = [{k: v[k]["mean"] for k in keys} for v in subjects.values()]
    return _summarize(means, keys), subjects


def evaluate_split(recon, records, classifiers, cfg, render_seed, image_size, seed=0, config_hash=None):
    """
    recon: ReconstructionSet, records: the ground-truth ClipRecords of the split,
    classifiers: {"video": Classifier, "frame": Classifier}, cfg: MetricsConfig.
    """
    rec = recon.by_id()
    gt = {r.clip_id: r for r in records}
    missing = sorted(set(gt) ^ set(rec))
    for cid in missing:
        logger.warning("clip %s has no %s, excluded", cid, "reconstruction" if cid in gt else "ground truth")

    rows, flagged = [], []
    for cid in sorted(set(gt) & set(rec)):
        g, r = gt[cid], rec[cid]
        gt_frames = render_frames(g.gt_latents, image_size, render_seed)
        row = {"clip_id": cid, "subject": g.subject, "concept": g.concept_label}
        for name, video in (("video", True), ("frame", False)):
            logits = classifiers[name].predict_logits(r.frames, cid)
            for n in cfg.n_ways:
                ncfg = NwayConfig(n, cfg.top_k, cfg.repeats, derive_seed(seed, "{}:{}:{}".format(cid, n, name)))
                row[nway_key(n, video)] = nway_topk(logits, g.concept_label, ncfg)
        row["ssim"] = float(np.mean([ssim(a, b, cfg.ssim_channels) for a, b in zip(r.frames, gt_frames)]))
        row["psnr"] = psnr(r.frames, gt_frames)
        row["hue_pcc"] = clip_hue_pcc(r.frames, gt_frames, cfg)
        if row["hue_pcc"] is None:
            flagged.append({"clip_id": cid, "reason": "hue undefined on every frame"})
        row["latent_cos"] = frame_cosine(r.latents, g.gt_latents)
        rows.append(row)

    keys = [c.key for c in report_columns(cfg.n_ways)]
    summary, subjects = aggregate(rows, keys)
    for f in recon.failures:
        flagged.append({"clip_id": f["clip_id"], "reason": "reconstruction failed: {}".format(f["error"])})
    return MetricsReport(
        n_ways=list(cfg.n_ways),
        rows=rows,
        summary=summary,
        subjects=subjects,
        missing=missing,
        flagged=flagged,
        config_hash=config_hash,
        meta={"top_k": cfg.top_k, "repeats": cfg.repeats, "psnr_cap_db": PSNR_CAP_DB, "seed": seed},
    )
