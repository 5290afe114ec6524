import contextlib
import logging
import os
import subprocess

import torch

from mindcine.defs import consume_seed

logger = logging.getLogger(__name__)


def set_deterministic(on=True):
    """ deterministic kernels, single intra-op thread so reductions keep their order """
    torch.use_deterministic_algorithms(bool(on))
    if on:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.set_num_threads(1)
    logger.debug("deterministic mode %s", "on" if on else "off")


@contextlib.contextmanager
def seeded(tag, seed):
    """ run a block with the global torch rng seeded, restore it afterwards """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(consume_seed(tag, seed))
        yield


def generator(tag, seed):
    g = torch.Generator()
    g.manual_seed(consume_seed(tag, seed))
    return g


def revision():
    """ git revision of the source tree, or the package version outside a checkout """
    from mindcine.__version__ import __version__

    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.check_output(
            ["git", "describe", "--always", "--dirty"], cwd=here, stderr=subprocess.DEVNULL
        )
        return "{}+{}".format(__version__, out.decode().strip())
    except (OSError, subprocess.CalledProcessError):
        return __version__
