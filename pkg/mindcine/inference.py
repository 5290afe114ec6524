"""
Guided reconstruction.

The generator is a small DDPM over frame latents standing in for a
text-to-video backbone. Its denoiser sees the noisy latents, a semantic
condition (predicted text condition) and per-frame perceptual latents, and is
trained with both conditions randomly dropped so the same network also gives
the unconditional estimate that guidance pushes away from.
"""
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn as nn
from scipy.special import expit
from torch.utils.data import DataLoader, TensorDataset

from mindcine import container
from mindcine.config import config_hash, from_dict, to_dict
from mindcine.dataset import Dims, as_arrays
from mindcine.defs import (
    ConfigError,
    DivergenceError,
    MindCineError,
    ShapeError,
    ValidationError,
    consume_seed,
    derive_seed,
    seed_scope,
)
from mindcine.perceptual import LatentSequence
from mindcine.runtime import generator, revision, seeded

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "diffusion"
RECON_KIND = "reconstructions"


@dataclass
class Condition:
    """ semantic: B x tokens x cond_dim, perceptual: B x t x latent_dim, None is the null condition """

    semantic: Optional[torch.Tensor] = None
    perceptual: Optional[torch.Tensor] = None


def guided_score(est, z_t, c, c_bar, s):
    """
    eps(z_t, c_bar) + s * (eps(z_t, c) - eps(z_t, c_bar)).
    est is any callable (z_t, condition) -> noise estimate shaped like z_t.
    """
    z_t = torch.as_tensor(z_t)
    eps_c = torch.as_tensor(est(z_t, c))
    eps_bar = torch.as_tensor(est(z_t, c_bar))
    if eps_c.shape != z_t.shape or eps_bar.shape != z_t.shape:
        raise ShapeError("score estimate {} / {} for z_t {}".format(tuple(eps_c.shape), tuple(eps_bar.shape), tuple(z_t.shape)))
    return torch.lerp(eps_bar, eps_c, float(s))


def timestep_embedding(steps, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = steps.to(torch.float64).unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class Denoiser(nn.Module):
    """ 2-layer MLP per frame over [z_t, perceptual, semantic projection, step, frame position] """

    def __init__(self, dims, cfg):
        super().__init__()
        self.latent_dim = dims.latent_dim
        self.frames = dims.frames
        self.cond_shape = (dims.cond_tokens, dims.cond_dim)
        self.time_dim = cfg.time_dim

        self.cond_proj = nn.Linear(dims.cond_tokens * dims.cond_dim, cfg.cond_hidden)
        self.frame_emb = nn.Embedding(dims.frames, cfg.time_dim)
        width = 2 * dims.latent_dim + cfg.cond_hidden + 2 * cfg.time_dim
        self.net = nn.Sequential(nn.Linear(width, cfg.hidden), nn.GELU(), nn.Linear(cfg.hidden, dims.latent_dim))

    def forward(self, z_t, steps, cond):
        b, t, _ = z_t.shape
        sem = cond.semantic
        if sem is None:
            sem = z_t.new_zeros((b,) + self.cond_shape)
        per = cond.perceptual
        if per is None:
            per = torch.zeros_like(z_t)
        if tuple(sem.shape[1:]) != self.cond_shape or per.shape != z_t.shape:
            raise ShapeError("condition shapes {} / {} do not fit z_t {}".format(tuple(sem.shape), tuple(per.shape), tuple(z_t.shape)))

        c = self.cond_proj(sem.reshape(b, -1).to(z_t.dtype)).unsqueeze(1).expand(b, t, -1)
        temb = timestep_embedding(steps, self.time_dim).to(z_t.dtype).unsqueeze(1).expand(b, t, -1)
        femb = self.frame_emb.weight[:t].unsqueeze(0).expand(b, t, -1)
        return self.net(torch.cat([z_t, per.to(z_t.dtype), c, temb, femb], dim=-1))


class ToyDiffusion(nn.Module):
    def __init__(self, dims, cfg):
        super().__init__()
        if not 1 <= cfg.steps <= 50:
            raise ConfigError("diffusion steps must be in [1, 50]")
        self.dims = dims
        self.steps = cfg.steps
        betas = torch.linspace(cfg.beta_start, cfg.beta_end, cfg.steps, dtype=torch.float64)
        alphas = 1.0 - betas
        alpha_bar = torch.cumprod(alphas, dim=0)
        alpha_bar_prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])
        dtype = torch.get_default_dtype()
        self.register_buffer("betas", betas.to(dtype))
        self.register_buffer("alphas", alphas.to(dtype))
        self.register_buffer("alpha_bar", alpha_bar.to(dtype))
        self.register_buffer("posterior_var", (betas * (1 - alpha_bar_prev) / (1 - alpha_bar)).to(dtype))
        self.denoiser = Denoiser(dims, cfg)

    @property
    def latent_shape(self):
        return (self.dims.frames, self.dims.latent_dim)

    def estimator(self, step, batch):
        steps = torch.full((batch,), step, dtype=torch.long)
        return lambda z, c: self.denoiser(z, steps, c)

    def add_noise(self, z0, steps, noise):
        ab = self.alpha_bar[steps].view(-1, 1, 1)
        return ab.sqrt() * z0 + (1 - ab).sqrt() * noise

    def sample(self, cond, c_bar, scale, gen=None, noise_scale=1.0, batch=1):
        """
        ancestral sampling from step T-1 down to 0. With noise_scale=0 and one
        step this is one denoiser application on z = 0.
        """
        dtype = self.betas.dtype

        def noise():
            return noise_scale * torch.randn((batch,) + self.latent_shape, generator=gen, dtype=dtype)

        z = noise()
        for i in reversed(range(self.steps)):
            est = self.estimator(i, batch)
            eps = est(z, cond) if scale == 1 else guided_score(est, z, cond, c_bar, scale)
            coef = self.betas[i] / (1 - self.alpha_bar[i]).sqrt()
            z = (z - coef * eps) / self.alphas[i].sqrt()
            if i > 0:
                z = z + self.posterior_var[i].sqrt() * noise()
        return z


def build_diffusion(cfg, dims):
    with seeded("diffusion-init", derive_seed(cfg.seed, "diffusion-init")):
        return ToyDiffusion(dims, cfg.diffusion)


def train_diffusion(manifest, diffusion, cfg):
    """
    epsilon-prediction training on ground-truth latents. The semantic condition
    is the stored text condition, the perceptual one the latents plus noise
    (a stand-in for the perceptual decoder's error). Each condition is zeroed
    independently with its drop probability.
    """
    d = cfg.diffusion
    o = cfg.diffusion_optim
    dtype = diffusion.betas.dtype
    a = as_arrays(manifest.train)
    if not a["clip_ids"]:
        raise ValidationError("no training clips")
    z0 = torch.as_tensor(a["latents"], dtype=dtype)
    sem = torch.as_tensor(a["cond"], dtype=dtype)

    g = generator("diffusion-train", derive_seed(cfg.seed, "diffusion-train"))
    loader = DataLoader(TensorDataset(torch.arange(len(z0))), batch_size=o.batch_size, shuffle=True, generator=g)
    opt = torch.optim.Adam(diffusion.denoiser.parameters(), lr=o.lr, weight_decay=o.weight_decay)

    history = []
    for epoch in range(1, o.epochs + 1):
        total, seen = 0.0, 0
        for bi, (idx,) in enumerate(loader):
            b = len(idx)
            x0 = z0[idx]
            steps = torch.randint(0, diffusion.steps, (b,), generator=g)
            eps = torch.randn(x0.shape, generator=g, dtype=dtype)
            per = x0 + d.perceptual_noise * torch.randn(x0.shape, generator=g, dtype=dtype)
            keep_sem = (torch.rand(b, generator=g) >= d.p_drop_semantic).to(dtype).view(b, 1, 1)
            keep_per = (torch.rand(b, generator=g) >= d.p_drop_perceptual).to(dtype).view(b, 1, 1)
            cond = Condition(sem[idx] * keep_sem, per * keep_per)

            pred = diffusion.denoiser(diffusion.add_noise(x0, steps, eps), steps, cond)
            loss = ((pred - eps) ** 2).mean()
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, bi, float(loss))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss) * b
            seen += b
        history.append({"epoch": epoch, "loss": total / seen})
        logger.info("diffusion epoch %d: loss %.5f", epoch, total / seen)
    return history


def save_diffusion_checkpoint(diffusion, path, cfg, history=None):
    header = {
        "config": to_dict(cfg),
        "config_hash": config_hash(cfg),
        "dims": vars(diffusion.dims),
        "history": history or [],
    }
    return container.save_state(path, CHECKPOINT_KIND, {"diffusion": diffusion}, header)


def load_diffusion_checkpoint(path):
    header = container.read_header(path, kind=CHECKPOINT_KIND)
    cfg = from_dict(header["config"])
    diffusion = build_diffusion(cfg, Dims(**header["dims"]))
    container.load_state(path, CHECKPOINT_KIND, {"diffusion": diffusion})
    return diffusion


def render_frames(latents, image_size, seed):
    """
    fixed untrained latent -> RGB map standing in for a learned decoder:
    t x latent_dim -> t x H x W x 3 in [0, 1]. The map depends only on the seed.
    """
    latents = np.asarray(latents, dtype=np.float64)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((image_size * image_size * 3, latents.shape[-1])) / np.sqrt(latents.shape[-1])
    return expit(latents @ w.T).reshape(latents.shape[0], image_size, image_size, 3)


# ---- pipeline ---------------------------------------------------------------

def check_compatible(dims, semantic, perceptual, diffusion):
    """ raise ConfigError when checkpoint dims disagree with the data or with each other """
    problems = []
    if semantic is not None:
        sd = semantic.dims
        if (sd.channels, sd.samples) != (dims.channels, dims.samples):
            problems.append("semantic checkpoint expects {}x{} EEG".format(sd.channels, sd.samples))
        if semantic.predictor.cond_shape != diffusion.denoiser.cond_shape:
            problems.append("predictor condition {} vs diffusion {}".format(semantic.predictor.cond_shape, diffusion.denoiser.cond_shape))
    if perceptual is not None:
        pd = perceptual.dims
        if (pd.channels, pd.samples, pd.window) != (dims.channels, dims.samples, dims.window):
            problems.append("perceptual checkpoint expects {}x{} EEG, window {}".format(pd.channels, pd.samples, pd.window))
        if (perceptual.model.frames, perceptual.model.latent_dim) != diffusion.latent_shape:
            problems.append("perceptual latents {}x{} vs diffusion {}".format(perceptual.model.frames, perceptual.model.latent_dim, diffusion.latent_shape))
    if diffusion.latent_shape != (dims.frames, dims.latent_dim):
        problems.append("diffusion latents {} vs data {}x{}".format(diffusion.latent_shape, dims.frames, dims.latent_dim))
    if problems:
        raise ConfigError("incompatible checkpoints: " + "; ".join(problems))


def load_negative_condition(path, dims):
    if path is None:
        return None
    arr = np.fromfile(path, dtype=container.ARRAY_DTYPE)
    if arr.size != dims.cond_tokens * dims.cond_dim:
        raise ConfigError("negative condition {} has {} values, needs {}x{}".format(path, arr.size, dims.cond_tokens, dims.cond_dim))
    return arr.reshape(dims.cond_tokens, dims.cond_dim)


def reconstruct(eeg, semantic, perceptual, diffusion, guidance, seed, negative=None, noise_scale=1.0,
                use_semantic=True, use_perception=True):
    """
    one clip: encoder -> predictor gives the semantic condition, windows ->
    EmbedNet -> CausalSeq the perceptual latents, then guided sampling.
    The negative condition replaces only the semantic part, zeros by default.
    Returns (reconstructed LatentSequence, perceptual LatentSequence or None).
    """
    dtype = diffusion.betas.dtype
    x = torch.as_tensor(eeg.data, dtype=dtype).unsqueeze(0)
    with torch.no_grad():
        sem = None
        if use_semantic:
            if semantic is None:
                raise ConfigError("semantic checkpoint required unless the semantic module is bypassed")
            semantic.encoder.eval()
            sem = semantic.predictor(semantic.encoder(x, [eeg.clip_id])).to(dtype)
        per = None
        if use_perception:
            if perceptual is None:
                raise ConfigError("perceptual checkpoint required unless the perceptual module is bypassed")
            net = perceptual.decoder()
            net.eval()
            per = net(x).to(dtype)

        bar = None if negative is None else torch.as_tensor(negative, dtype=dtype).unsqueeze(0)
        gen = torch.Generator()
        gen.manual_seed(consume_seed("reconstruct:{}".format(eeg.clip_id), seed))
        z = diffusion.sample(Condition(sem, per), Condition(bar, per), guidance.scale, gen, noise_scale)

    perc = LatentSequence(per[0].cpu().numpy()) if per is not None else None
    return LatentSequence(z[0].cpu().numpy()), perc


@dataclass
class Reconstruction:
    clip_id: str
    latents: np.ndarray  # t x latent_dim
    frames: np.ndarray  # t x H x W x 3
    perceptual: Optional[np.ndarray] = None
    seed: Optional[int] = None


@dataclass
class ReconstructionSet:
    items: List[Reconstruction] = field(default_factory=list)
    provenance: Dict = field(default_factory=dict)
    failures: List[Dict] = field(default_factory=list)

    def by_id(self):
        return {r.clip_id: r for r in self.items}


def batch_reconstruct(records, dims, semantic, perceptual, diffusion, cfg, seed, render_seed, negative=None):
    """
    reconstruct every record with a seed derived from (seed, clip_id), in
    clip_id order. Failing clips are collected, not raised.
    """
    use_sem = cfg.ablation.use_semantic
    use_per = cfg.ablation.use_perception
    check_compatible(dims, semantic if use_sem else None, perceptual if use_per else None, diffusion)

    out = ReconstructionSet()
    clip_seeds = {}
    with seed_scope() as seeds:
        for r in sorted(records, key=lambda r: r.clip_id):
            clip_seed = derive_seed(seed, r.clip_id)
            clip_seeds[r.clip_id] = clip_seed
            try:
                z, per = reconstruct(
                    r.eeg, semantic, perceptual, diffusion, cfg.guidance, clip_seed, negative,
                    cfg.diffusion.noise_scale, use_sem, use_per,
                )
                frames = render_frames(z.latents, dims.image_size, render_seed)
            except (MindCineError, RuntimeError, ValueError) as e:
                logger.error("reconstruction of %s failed: %s", r.clip_id, e)
                out.failures.append({"clip_id": r.clip_id, "error": str(e)})
                continue
            out.items.append(Reconstruction(
                r.clip_id, z.latents, frames, per.latents if per is not None else None, clip_seed
            ))

    def stage_hash(state):
        return config_hash(from_dict(state.config)) if state is not None and state.config else None

    out.provenance = {
        "config_hash": config_hash(cfg),
        "semantic_config_hash": stage_hash(semantic) if use_sem else None,
        "perceptual_config_hash": stage_hash(perceptual) if use_per else None,
        "guidance_scale": cfg.guidance.scale,
        "negative_condition": cfg.guidance.negative_condition,
        "use_semantic": use_sem,
        "use_perception": use_per,
        "seed": seed,
        "render_seed": render_seed,
        "clip_seeds": clip_seeds,
        "seeds": seeds,
        "revision": revision(),
    }
    logger.info("reconstructed %d clips, %d failed", len(out.items), len(out.failures))
    return out


def save_reconstructions(rset, path):
    entries = []
    for r in rset.items:
        base = os.path.join("clips", r.clip_id)
        e = {
            "clip_id": r.clip_id,
            "seed": r.seed,
            "latents": container.write_array(path, os.path.join(base, "latents.f32"), r.latents),
            "frames": container.write_array(path, os.path.join(base, "frames.f32"), r.frames),
        }
        if r.perceptual is not None:
            e["perceptual"] = container.write_array(path, os.path.join(base, "perceptual.f32"), r.perceptual)
        entries.append(e)
    header = {
        "kind": RECON_KIND,
        "provenance": rset.provenance,
        "failures": rset.failures,
        "clips": entries,
    }
    container.write_header(path, header)
    return path


def load_reconstructions(path):
    header = container.read_header(path, kind=RECON_KIND)
    items = []
    for e in header.get("clips", []):
        cid = e["clip_id"]
        items.append(Reconstruction(
            clip_id=cid,
            latents=container.read_array(path, e["latents"], clip_id=cid),
            frames=container.read_array(path, e["frames"], clip_id=cid),
            perceptual=container.read_array(path, e["perceptual"], clip_id=cid) if "perceptual" in e else None,
            seed=e.get("seed"),
        ))
    return ReconstructionSet(items, header.get("provenance", {}), header.get("failures", []))
