"""
Pipeline orchestration.

A run executes gen -> train-semantic -> train-perceptual -> train-diffusion ->
reconstruct -> eval. Every stage writes into its own directory
<cache>/stages/<stage>-<key>, where key hashes only the config sections the
stage (and its upstream stages) depend on, so ablation variants share whatever
they have in common. A stage directory holds a stamp.json once complete.
"""
import json
import logging
import os
import shutil
import tempfile
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from mindcine.config import config_hash, diff_configs, from_dict, to_dict, validate, with_delta
from mindcine.dataset import generate_synthetic, load_manifest, save_manifest
from mindcine.defs import (
    CACHE_ENV,
    DEFAULT_CACHE_DIR,
    REPORT_SCHEMA_VERSION,
    PlanError,
    SchemaVersionError,
    Stage,
    StageError,
    ValidationError,
    derive_seed,
    nway_key,
    report_columns,
    seed_scope,
)
from mindcine.encoders import load_adapter_table, make_adapter_table, save_adapter_table
from mindcine.inference import (
    batch_reconstruct,
    build_diffusion,
    load_diffusion_checkpoint,
    load_negative_condition,
    load_reconstructions,
    save_diffusion_checkpoint,
    save_reconstructions,
    train_diffusion,
)
from mindcine.metrics import MetricsReport, build_classifiers, evaluate_split
from mindcine.outputwriter import mk_OutputWriter
from mindcine.perceptual import build_perceptual, load_perceptual_checkpoint, save_perceptual_checkpoint, train_perceptual
from mindcine.runtime import revision, set_deterministic
from mindcine.semantic import build_semantic, load_semantic_checkpoint, save_semantic_checkpoint, train_semantic

logger = logging.getLogger(__name__)

STAMP = "stamp.json"

# top-level config sections each stage depends on, upstream included
_GEN = ["data", "seed"]
STAGE_SECTIONS = OrderedDict([
    (Stage.GEN, _GEN),
    (Stage.TRAIN_SEMANTIC, _GEN + ["encoder", "semantic", "semantic_optim", "deterministic"]),
    (Stage.TRAIN_PERCEPTUAL, _GEN + ["perceptual", "perceptual_optim", "deterministic"]),
    (Stage.TRAIN_DIFFUSION, _GEN + ["diffusion", "diffusion_optim", "deterministic"]),
    (Stage.RECONSTRUCT, _GEN + [
        "encoder", "semantic", "semantic_optim", "perceptual", "perceptual_optim",
        "diffusion", "diffusion_optim", "guidance", "ablation", "deterministic",
    ]),
    (Stage.EVAL, None),
])


def cache_root(root=None):
    return os.path.abspath(root or os.environ.get(CACHE_ENV) or DEFAULT_CACHE_DIR)


def stage_key(cfg, stage):
    return config_hash(cfg, STAGE_SECTIONS[stage])


def stage_dir(root, cfg, stage):
    return os.path.join(root, "stages", "{}-{}".format(stage.value, stage_key(cfg, stage)))


def is_complete(path):
    return os.path.exists(os.path.join(path, STAMP))


@dataclass
class ExperimentResult:
    config_hash: str
    run_dir: str
    stages: Dict[str, str] = field(default_factory=dict)
    cached: List[str] = field(default_factory=list)
    failures: List[Dict] = field(default_factory=list)
    report: MetricsReport = None


class _Run:
    """ stage outputs of one config, produced or loaded from the cache on demand """

    def __init__(self, cfg, root):
        self.cfg = cfg
        self.root = root
        self._cache = {}

    def dir(self, stage):
        return stage_dir(self.root, self.cfg, stage)

    @property
    def manifest(self):
        if "manifest" not in self._cache:
            self._cache["manifest"] = load_manifest(os.path.join(self.dir(Stage.GEN), "manifest"))
        return self._cache["manifest"]

    def adapter_table(self):
        e = self.cfg.encoder
        if e.kind != "adapter":
            return None
        if e.adapter_table:
            return load_adapter_table(e.adapter_table)
        return make_adapter_table(self.manifest.records, e.adapter_dim, derive_seed(self.cfg.seed, "adapter-table"))

    @property
    def semantic(self):
        if "semantic" not in self._cache:
            self._cache["semantic"] = load_semantic_checkpoint(os.path.join(self.dir(Stage.TRAIN_SEMANTIC), "checkpoint"))
        return self._cache["semantic"]

    @property
    def perceptual(self):
        if "perceptual" not in self._cache:
            self._cache["perceptual"] = load_perceptual_checkpoint(os.path.join(self.dir(Stage.TRAIN_PERCEPTUAL), "checkpoint"))
        return self._cache["perceptual"]

    @property
    def diffusion(self):
        if "diffusion" not in self._cache:
            self._cache["diffusion"] = load_diffusion_checkpoint(os.path.join(self.dir(Stage.TRAIN_DIFFUSION), "checkpoint"))
        return self._cache["diffusion"]

    @property
    def recon(self):
        if "recon" not in self._cache:
            self._cache["recon"] = load_reconstructions(os.path.join(self.dir(Stage.RECONSTRUCT), "recon"))
        return self._cache["recon"]

    # ---- stage bodies, each writes into `out` --------------------------------

    def gen(self, out):
        m = generate_synthetic(self.cfg.data, self.cfg.seed)
        save_manifest(m, os.path.join(out, "manifest"))
        self._cache["manifest"] = m
        return {"clips": len(m.records), "train": len(m.train), "test": len(m.test)}

    def train_semantic(self, out):
        table = self.adapter_table()
        if table is not None and not self.cfg.encoder.adapter_table:
            save_adapter_table(table, os.path.join(out, "adapter-table"))
        encoder, predictor, params = build_semantic(self.cfg, self.manifest.dims, table)
        state = train_semantic(self.manifest, encoder, predictor, self.cfg, params)
        save_semantic_checkpoint(state, os.path.join(out, "checkpoint"))
        self._cache["semantic"] = state.use_best()
        return {"best_epoch": state.best_epoch, "history": state.history}

    def train_perceptual(self, out):
        embednet, model = build_perceptual(self.cfg, self.manifest.dims)
        state = train_perceptual(self.manifest, embednet, model, self.cfg)
        save_perceptual_checkpoint(state, os.path.join(out, "checkpoint"))
        self._cache["perceptual"] = state.use_best()
        return {"best_epoch": state.best_epoch, "initial_loss": state.initial_loss, "history": state.history}

    def train_diffusion(self, out):
        diffusion = build_diffusion(self.cfg, self.manifest.dims)
        history = train_diffusion(self.manifest, diffusion, self.cfg)
        save_diffusion_checkpoint(diffusion, os.path.join(out, "checkpoint"), self.cfg, history)
        self._cache["diffusion"] = diffusion
        return {"history": history}

    def reconstruct(self, out):
        m = self.manifest
        a = self.cfg.ablation
        negative = load_negative_condition(self.cfg.guidance.negative_condition, m.dims)
        rset = batch_reconstruct(
            m.test, m.dims,
            self.semantic if a.use_semantic else None,
            self.perceptual if a.use_perception else None,
            self.diffusion, self.cfg, self.cfg.seed, m.meta["render_seed"], negative,
        )
        save_reconstructions(rset, os.path.join(out, "recon"))
        self._cache["recon"] = rset
        return {"reconstructed": len(rset.items), "failures": rset.failures}

    def eval(self, out):
        m = self.manifest
        render_seed = m.meta["render_seed"]
        classifiers = build_classifiers(self.cfg.metrics.classifier, m.train, m.test, m.dims, render_seed, self.cfg)
        report = evaluate_split(
            self.recon, m.test, classifiers, self.cfg.metrics, render_seed, m.dims.image_size,
            seed=derive_seed(self.cfg.seed, "eval"), config_hash=config_hash(self.cfg),
        )
        report.meta["revision"] = revision()
        report.save(os.path.join(out, "report.json"))
        self._cache["report"] = report
        return {"rows": len(report.rows), "missing": report.missing}

    def report(self):
        if "report" not in self._cache:
            self._cache["report"] = MetricsReport.load(os.path.join(self.dir(Stage.EVAL), "report.json"))
        return self._cache["report"]


_BODIES = {
    Stage.GEN: "gen",
    Stage.TRAIN_SEMANTIC: "train_semantic",
    Stage.TRAIN_PERCEPTUAL: "train_perceptual",
    Stage.TRAIN_DIFFUSION: "train_diffusion",
    Stage.RECONSTRUCT: "reconstruct",
    Stage.EVAL: "eval",
}


def _run_stage(run, stage):
    """ run one stage into a temporary directory and publish it with a rename """
    final = run.dir(stage)
    parent = os.path.dirname(final)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".{}-".format(stage.value), dir=parent)
    try:
        with seed_scope() as seeds:
            info = getattr(run, _BODIES[stage])(tmp)
    except ValidationError:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    except Exception as e:
        shutil.rmtree(tmp, ignore_errors=True)
        logger.error("stage %s failed: %s", stage.value, e)
        raise StageError(stage.value, e)

    stamp = {
        "stage": stage.value,
        "key": stage_key(run.cfg, stage),
        "config_hash": config_hash(run.cfg),
        "revision": revision(),
        "seeds": seeds,
        "info": info,
    }
    with open(os.path.join(tmp, STAMP), "w") as f:
        json.dump(stamp, f, sort_keys=True, indent=2)
    try:
        os.rename(tmp, final)
    except OSError:
        # another process published the same stage first
        if not is_complete(final):
            raise
        shutil.rmtree(tmp, ignore_errors=True)
    return info


def run_experiment(cfg, root=None, stages=None, force=False):
    """
    run (or resume) the pipeline for a validated config. Completed stages are
    reused unless force is set. stages limits the run to a prefix of stages.
    """
    validate(cfg)
    root = cache_root(root)
    set_deterministic(cfg.deterministic)
    run = _Run(cfg, root)
    h = config_hash(cfg)
    run_dir = os.path.join(root, "runs", h)
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as f:
        json.dump(to_dict(cfg), f, sort_keys=True, indent=2)

    result = ExperimentResult(config_hash=h, run_dir=run_dir)
    wanted = list(STAGE_SECTIONS) if stages is None else [Stage(s) for s in stages]
    for stage in wanted:
        path = run.dir(stage)
        result.stages[stage.value] = path
        if is_complete(path) and not force:
            logger.info("stage %s cached at %s", stage.value, path)
            result.cached.append(stage.value)
            continue
        if force and os.path.exists(path):
            shutil.rmtree(path)
        logger.info("stage %s -> %s", stage.value, path)
        _run_stage(run, stage)

    if Stage.RECONSTRUCT in wanted:
        result.failures = list(run.recon.failures)
    if Stage.EVAL in wanted:
        result.report = run.report()
        shutil.copyfile(os.path.join(result.stages[Stage.EVAL.value], "report.json"), os.path.join(run_dir, "report.json"))
    with open(os.path.join(run_dir, "run.json"), "w") as f:
        json.dump({"config_hash": h, "stages": result.stages, "revision": revision()}, f, sort_keys=True, indent=2)
    return result


# ---- ablations --------------------------------------------------------------

ABLATION_VARIANTS = OrderedDict([
    ("full", {}),
    ("w/o-semantic", {"ablation.use_semantic": False}),
    ("w/o-perception", {"ablation.use_perception": False}),
    ("text", {"semantic.alpha": [0.0, 1.0, 0.0]}),
    ("text+depth", {"semantic.alpha": [0.0, 0.5, 0.5]}),
    ("text+image", {"semantic.alpha": [0.5, 0.5, 0.0]}),
])

# (better, worse, metric level) pairs whose ordering an ablation checks
ORDERING_CLAIMS = [
    ("full", "w/o-semantic", "semantic"),
    ("full", "w/o-perception", "pixel"),
    ("text+image", "text", "semantic"),
    ("text+depth", "text", "semantic"),
]


@dataclass
class AblationPlan:
    variants: Dict[str, Dict] = field(default_factory=lambda: OrderedDict(ABLATION_VARIANTS))

    def resolve(self, base):
        """
        [(name, config)] with every variant checked to differ from the base by
        exactly its declared delta, and no two variants identical.
        """
        validate(base)
        out, seen = [], {}
        for name, delta in self.variants.items():
            cfg = with_delta(base, delta)
            changed = set(diff_configs(base, cfg))
            undeclared = changed - set(delta)
            if undeclared:
                raise PlanError("variant '{}' changes undeclared keys {}".format(name, sorted(undeclared)))
            h = config_hash(cfg)
            if h in seen:
                raise PlanError("variant '{}' is identical to '{}' (config hash {})".format(name, seen[h], h))
            seen[h] = name
            out.append((name, cfg))
        return out


def _variant_worker(args):
    name, cfg_dict, root = args
    logging.getLogger(__name__).info("variant %s", name)
    res = run_experiment(from_dict(cfg_dict), root)
    return name, res.report.to_dict(), res.failures


def headline_metric(n_ways, level):
    """ the largest video-based N-way for semantic claims, SSIM for pixel claims """
    return nway_key(max(n_ways), True) if level == "semantic" else "ssim"


@dataclass
class AblationResult:
    seeds: List[int]
    reports: Dict[int, Dict[str, MetricsReport]] = field(default_factory=dict)
    checks: List[Dict] = field(default_factory=list)
    failures: List[Dict] = field(default_factory=list)

    def summary(self):
        """ variant -> {metric: {"mean", "std", "n"}}, over seeds when several were run """
        names = list(next(iter(self.reports.values())).keys()) if self.reports else []
        out = OrderedDict()
        for name in names:
            reps = [self.reports[s][name] for s in self.seeds]
            if len(reps) == 1:
                out[name] = reps[0].summary
                continue
            keys = [c.key for c in reps[0].columns]
            out[name] = {}
            for k in keys:
                vals = [r.summary[k]["mean"] for r in reps if r.summary.get(k, {}).get("mean") is not None]
                out[name][k] = {
                    "mean": float(np.mean(vals)) if vals else None,
                    "std": float(np.std(vals)) if vals else None,
                    "n": len(vals),
                }
        return out


def check_orderings(reports, seeds, n_ways):
    checks = []
    for better, worse, level in ORDERING_CLAIMS:
        key = headline_metric(n_ways, level)
        votes = []
        for s in seeds:
            rs = reports[s]
            if better not in rs or worse not in rs:
                continue
            a, b = rs[better].summary[key]["mean"], rs[worse].summary[key]["mean"]
            votes.append(a is not None and b is not None and a > b)
        if not votes:
            continue
        checks.append({
            "better": better,
            "worse": worse,
            "metric": key,
            "votes": votes,
            "holds": sum(votes) * 2 > len(votes),
        })
    return checks


def run_ablation(plan, base, seeds=None, root=None, jobs=1):
    """
    run every variant for every seed (variants of a seed share stages through
    the cache) and check the expected orderings by majority over seeds.
    """
    seeds = list(seeds) if seeds else [base.seed]
    root = cache_root(root)
    result = AblationResult(seeds=seeds)

    tasks = []
    for s in seeds:
        for name, cfg in plan.resolve(with_delta(base, {"seed": s})):
            tasks.append((s, name, cfg))

    if jobs > 1:
        # dataset once per seed before fanning out
        for s in seeds:
            run_experiment(with_delta(base, {"seed": s}), root, stages=[Stage.GEN])
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(_variant_worker, [(n, to_dict(c), root) for _, n, c in tasks]))
        for (s, _, _), (name, rep, failures) in zip(tasks, outs):
            result.reports.setdefault(s, OrderedDict())[name] = MetricsReport.from_dict(rep)
            result.failures += failures
    else:
        for s, name, cfg in tasks:
            logger.info("ablation seed %d variant %s", s, name)
            res = run_experiment(cfg, root)
            result.reports.setdefault(s, OrderedDict())[name] = res.report
            result.failures += res.failures

    result.checks = check_orderings(result.reports, seeds, base.metrics.n_ways)
    for c in result.checks:
        logger.info("%s > %s on %s: %s (%s)", c["better"], c["worse"], c["metric"], c["holds"], c["votes"])
    return result


# ---- rendering --------------------------------------------------------------

def _cell(stat, col):
    if not stat or stat.get("mean") is None:
        return "-"
    return "{} ± {}".format(col.txtfmt.format(stat["mean"]), col.txtfmt.format(stat["std"]).strip())


def _num(v):
    return "" if v is None else repr(v)


def _as_report(report):
    if isinstance(report, MetricsReport):
        if report.schema != REPORT_SCHEMA_VERSION:
            raise SchemaVersionError(report.schema, REPORT_SCHEMA_VERSION)
        return report
    return MetricsReport.from_dict(report)


def render_report(report, outfile, fmt="txt", name="full"):
    """
    Table of mean ± std per metric. `report` is a MetricsReport (one row
    named `name`) or {row name: summary} as from AblationResult.summary().
    csv adds a _std column per metric for plotting. The report is not modified.
    """
    if isinstance(report, dict) and "schema" not in report:
        rows = report
        n_ways = None
        for summ in rows.values():
            n_ways = sorted({int(k[3:].split("_")[0]) for k in summ if k.startswith("way")})
            break
        columns = report_columns(n_ways or [])
    else:
        report = _as_report(report)
        columns = report.columns
        rows = OrderedDict([(name, report.summary)]) if report.rows else OrderedDict()

    if fmt == "csv":
        keys = ["method"]
        for c in columns:
            keys += [c.key, c.key + "_std"]
    else:
        keys = ["method"] + [c.key for c in columns]
    labels = dict((c.key, c.label) for c in columns)
    labels["method"] = "Method"

    colwidths = [16] + [15] * len(columns)
    w = mk_OutputWriter(outfile, fmt, colwidths=colwidths, labels=labels)
    w.write_header(keys)
    for rname, summ in rows.items():
        vals = [rname]
        for c in columns:
            stat = summ.get(c.key) or {}
            if fmt == "csv":
                vals += [_num(stat.get("mean")), _num(stat.get("std"))]
            elif fmt == "json":
                vals.append(stat or None)
            else:
                vals.append(_cell(stat, c))
        w.write_record(keys, vals)
    w.close()
