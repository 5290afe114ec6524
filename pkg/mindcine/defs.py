import hashlib
import logging
from contextlib import contextmanager
from enum import Enum, IntEnum

logger = logging.getLogger(__name__)

# dataset layout of the paired EEG-video recordings the generator mirrors
NUM_CONCEPTS = 40
NUM_BLOCKS = 7
TEST_BLOCK = 7
CLIP_DURATION_S = 2.0

SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1

# psnr of identical images is reported as inf, averaged with this cap
PSNR_CAP_DB = 100.0

CACHE_ENV = "MINDCINE_CACHE"
DEFAULT_CACHE_DIR = "mindcine-cache"


class ExitCode(IntEnum):
    """ cli exit status """

    # fmt: off
    SUCCESS         = 0
    VALIDATION      = 1
    RUNTIME         = 2
    PARTIAL_FAILURE = 3
    # fmt: on


class Split(Enum):
    TRAIN = "train"
    TEST = "test"


class Modality(Enum):
    """ target embedding spaces of the joint loss, in alpha order """

    IMAGE = "image"
    TEXT = "text"
    DEPTH = "depth"


class Stage(Enum):
    """ pipeline stages, in execution order """

    GEN = "gen"
    TRAIN_SEMANTIC = "train-semantic"
    TRAIN_PERCEPTUAL = "train-perceptual"
    TRAIN_DIFFUSION = "train-diffusion"
    RECONSTRUCT = "reconstruct"
    EVAL = "eval"


# ---- errors -----------------------------------------------------------------

class MindCineError(Exception):
    pass


class ValidationError(MindCineError):
    pass


class ConfigError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class IngestionError(ValidationError):
    def __init__(self, msg, clip_id=None):
        if clip_id is not None:
            msg = "record '{}': {}".format(clip_id, msg)
        super().__init__(msg)
        self.clip_id = clip_id


class PlanError(ValidationError):
    pass


class SchemaVersionError(ValidationError):
    """ needs migration, not just a reload """

    def __init__(self, found, expected):
        super().__init__(
            "schema version {} found, {} expected. Migrate the report before use".format(found, expected)
        )
        self.found = found
        self.expected = expected


class UnknownClipError(MindCineError, LookupError):
    pass


class NumericError(MindCineError):
    pass


class DivergenceError(NumericError):
    def __init__(self, epoch, batch, value):
        super().__init__(
            "non-finite loss {} at epoch {}, batch {}".format(value, epoch, batch)
        )
        self.epoch = epoch
        self.batch = batch


class UndefinedMetricError(NumericError):
    pass


class StageError(MindCineError):
    def __init__(self, stage, cause):
        super().__init__("stage '{}' failed: {}".format(stage, cause))
        self.stage = stage
        self.cause = cause


class PartialFailure(MindCineError):
    def __init__(self, failures):
        super().__init__("{} item(s) failed".format(len(failures)))
        self.failures = failures


def exit_code_for(exc):
    if isinstance(exc, PartialFailure):
        return ExitCode.PARTIAL_FAILURE
    if isinstance(exc, ValidationError):
        return ExitCode.VALIDATION
    return ExitCode.RUNTIME


# ---- seeds ------------------------------------------------------------------

# ledgers of the active seed_scope blocks, innermost last
_ledgers = []


def consume_seed(tag, seed):
    """ log a seed that is about to seed a generator, recorded in every active scope """
    seed = int(seed)
    for entries in _ledgers:
        entries.append({"tag": tag, "seed": seed})
    logger.info("seed consumed: %s=%d", tag, seed)
    return seed


@contextmanager
def seed_scope():
    """ the seeds consumed inside the block, enclosing scopes record them too """
    entries = []
    _ledgers.append(entries)
    try:
        yield entries
    finally:
        _ledgers.pop()


def derive_seed(global_seed, key):
    """ stable 31-bit seed from (global seed, key), independent of call order """
    h = hashlib.sha256("{}:{}".format(int(global_seed), key).encode("utf-8"))
    return int.from_bytes(h.digest()[:4], byteorder="little") & 0x7FFFFFFF


# ---- report columns ---------------------------------------------------------

class _MetricColumn:
    def __init__(self, key, label, level, txtfmt="5.3f"):
        """
        Args:
            key: field name in per-clip report rows
            label: column header as printed in tables
            level: "semantic" or "pixel"
        """
        self.key = key
        self.label = label
        self.level = level
        self.txtfmt = "{{0:{}}}".format(txtfmt)


class ReportColumns(Enum):
    """ pixel and latent columns, printed after the N-way ones """

    SSIM = _MetricColumn("ssim", "SSIM", "pixel")
    PSNR = _MetricColumn("psnr", "PSNR", "pixel", txtfmt="6.3f")
    HUE_PCC = _MetricColumn("hue_pcc", "Hue-pcc", "pixel")
    LATENT_COS = _MetricColumn("latent_cos", "z-cos", "pixel")


def nway_key(n, video):
    return "way{}_{}".format(n, "v" if video else "i")


def report_columns(n_ways):
    """ video-based then frame-based N-way columns, then the pixel columns """
    cols = []
    for video in (True, False):
        for n in n_ways:
            cols.append(_MetricColumn(nway_key(n, video), "{}-way-{}".format(n, "V" if video else "I"), "semantic"))
    return cols + [x.value for x in ReportColumns]


PIXEL_COLUMNS = {x.value.key: x.value for x in ReportColumns}
