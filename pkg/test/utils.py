import copy
import json
import os
import sys

THIS_DIR = os.path.dirname(os.path.realpath(__file__))
REPO_DIR = os.path.realpath(os.path.join(THIS_DIR, ".."))

MINDCINE_CMD = ["mindcine"]


def use_repo_sources(yes=True):
    """ import mindcine from this checkout rather than an installed copy """
    global MINDCINE_CMD
    if yes:
        if REPO_DIR not in sys.path:
            sys.path.insert(0, REPO_DIR)
        MINDCINE_CMD = [sys.executable, "-m", "mindcine.cli"]
    else:
        MINDCINE_CMD = ["mindcine"]


def mk_mindcine_cmd(subarg, *flags, **kwargs):
    cmd = list(MINDCINE_CMD)
    cmd.append(subarg)
    cmd.extend(flags)
    for k, v in kwargs.items():
        cmd.append("--{}".format(k.replace("_", "-")))
        cmd.append(str(v))
    return cmd


def dump_run_res(r):
    def pline(*args):
        print(*args, file=sys.stdout)

    pline(" ", "---- COMMAND: ----")
    pline("   ", " ".join(r.args))
    pline(" ", "---- STDERR: ----")
    for x in r.stderr.split("\n"):
        pline("   ", x)
    pline(" ", "---- STDOUT: ----")
    for x in r.stdout.split("\n"):
        pline("   ", x)


# small enough that a full pipeline run takes seconds
TINY = {
    "data": {
        "channels": 4,
        "samples": 40,
        "sample_rate_hz": 20.0,
        "frames": 3,
        "window": 20,
        "concepts": 5,
        "blocks": 3,
        "clips_per_block": 10,
        "test_blocks": [3],
        "latent_dim": 4,
        "joint_dim": 8,
        "prototype_dim": 6,
        "text_groups": 2,
        "cond_tokens": 2,
        "cond_dim": 4,
        "kernel_len": 5,
        "image_size": 11,
    },
    "encoder": {"hidden": [16]},
    "perceptual": {
        "model_dim": 8,
        "heads": 2,
        "layers": 1,
        "ffn_dim": 16,
        "embednet": {"temporal_filters": 2, "temporal_kernel": 5, "depth_multiplier": 2, "pool_out": 4, "embed_dim": 8},
    },
    "diffusion": {"steps": 5, "hidden": 16, "cond_hidden": 8, "time_dim": 4},
    "metrics": {"n_ways": [2, 5], "repeats": 20},
    "semantic_optim": {"epochs": 2, "batch_size": 8},
    "perceptual_optim": {"epochs": 2, "batch_size": 8},
    "diffusion_optim": {"epochs": 2, "batch_size": 8},
    "classifier_optim": {"epochs": 2, "batch_size": 8},
}


def tiny_dict(**sections):
    """ TINY with some sections (top level keys) merged in """
    d = copy.deepcopy(TINY)
    for k, v in sections.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k].update(v)
        else:
            d[k] = v
    return d


def write_config(path, d=None):
    with open(path, "w") as f:
        json.dump(TINY if d is None else d, f, indent=2)
    return str(path)


def param_gradcheck(module, loss_fn, **kwargs):
    """
    gradcheck loss_fn(forward) with respect to every trainable parameter of
    module, forward being the module call (module should already be float64)
    """
    import torch
    from torch.func import functional_call

    names, values = [], []
    for n, p in module.named_parameters():
        if p.requires_grad:
            names.append(n)
            values.append(p.detach().clone().requires_grad_(True))

    def call(*params):
        def fwd(*args, **kw):
            return functional_call(module, dict(zip(names, params)), args, kw)
        return loss_fn(fwd)

    return torch.autograd.gradcheck(call, tuple(values), **kwargs)
