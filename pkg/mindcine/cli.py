#!/usr/bin/env python3
# command line tool for EEG-to-video decoding experiments
#
import argparse
import json
import logging
import sys
from collections import OrderedDict
from os.path import abspath, basename, expanduser, splitext

import mindcine as mc
from mindcine.defs import ExitCode, MindCineError, PartialFailure, Stage, ValidationError, exit_code_for

logger = logging.getLogger(__name__)


def _config(args):
    cfg = mc.load_config(args.get("config"), args.get("set"))
    if args.get("seed") is not None:
        cfg = mc.with_delta(cfg, {"seed": args["seed"]})
    return cfg


def _outfile(args):
    """ one handle per invocation, opened by main, several tables may go to it """
    return args.get("_fh") or sys.stdout


def _writer(args):
    return mc.mk_OutputWriter(_outfile(args), args.get("fmt", "txt"))


def _adapter_table(cfg, manifest):
    if cfg.encoder.kind != "adapter":
        return None
    if cfg.encoder.adapter_table:
        return mc.load_adapter_table(cfg.encoder.adapter_table)
    return mc.make_adapter_table(manifest.records, cfg.encoder.adapter_dim, mc.derive_seed(cfg.seed, "adapter-table"))


def do_gen(**kwargs):
    cfg = _config(kwargs)
    m = mc.generate_synthetic(cfg.data, cfg.seed)
    mc.save_manifest(m, kwargs["out"])
    _writer(kwargs).write_kv(OrderedDict([
        ("manifest", kwargs["out"]),
        ("clips", len(m.records)),
        ("train", len(m.train)),
        ("test", len(m.test)),
        ("readout_accuracy", mc.least_squares_readout(m.train, m.dims.concepts)),
    ]))


def do_train_semantic(**kwargs):
    cfg = _config(kwargs)
    mc.set_deterministic(cfg.deterministic)
    m = mc.load_manifest(kwargs["manifest"])
    encoder, predictor, params = mc.build_semantic(cfg, m.dims, _adapter_table(cfg, m))
    state = mc.train_semantic(m, encoder, predictor, cfg, params)
    mc.save_semantic_checkpoint(state, kwargs["out"])
    w = _writer(kwargs)
    for row in state.history:
        w.write_record(list(row.keys()), list(row.values()))
    logger.info("best epoch %d", state.best_epoch)


def do_train_perceptual(**kwargs):
    cfg = _config(kwargs)
    mc.set_deterministic(cfg.deterministic)
    m = mc.load_manifest(kwargs["manifest"])
    embednet, model = mc.build_perceptual(cfg, m.dims)
    state = mc.train_perceptual(m, embednet, model, cfg)
    mc.save_perceptual_checkpoint(state, kwargs["out"])
    w = _writer(kwargs)
    for row in state.history:
        w.write_record(list(row.keys()), list(row.values()))
    logger.info("best epoch %d", state.best_epoch)


def do_train_diffusion(**kwargs):
    cfg = _config(kwargs)
    mc.set_deterministic(cfg.deterministic)
    m = mc.load_manifest(kwargs["manifest"])
    diffusion = mc.build_diffusion(cfg, m.dims)
    history = mc.train_diffusion(m, diffusion, cfg)
    mc.save_diffusion_checkpoint(diffusion, kwargs["out"], cfg, history)
    w = _writer(kwargs)
    for row in history:
        w.write_record(list(row.keys()), list(row.values()))


def do_reconstruct(**kwargs):
    cfg = _config(kwargs)
    if kwargs.get("scale") is not None:
        cfg = mc.with_delta(cfg, {"guidance.scale": kwargs["scale"]})
    mc.set_deterministic(cfg.deterministic)
    for name, on in (("semantic", cfg.ablation.use_semantic), ("perceptual", cfg.ablation.use_perception)):
        if on and not kwargs.get(name):
            raise ValidationError("--{} checkpoint required, or disable it in the ablation config".format(name))
    m = mc.load_manifest(kwargs["manifest"])
    semantic = mc.load_semantic_checkpoint(kwargs["semantic"]) if cfg.ablation.use_semantic else None
    perceptual = mc.load_perceptual_checkpoint(kwargs["perceptual"]) if cfg.ablation.use_perception else None
    diffusion = mc.load_diffusion_checkpoint(kwargs["diffusion"])
    negative = mc.load_negative_condition(cfg.guidance.negative_condition, m.dims)

    rset = mc.batch_reconstruct(
        m.records_for(kwargs["split"]), m.dims, semantic, perceptual, diffusion, cfg, cfg.seed,
        m.meta["render_seed"], negative,
    )
    mc.save_reconstructions(rset, kwargs["out"])
    _writer(kwargs).write_kv(OrderedDict([
        ("out", kwargs["out"]),
        ("reconstructed", len(rset.items)),
        ("failed", len(rset.failures)),
        ("config_hash", rset.provenance["config_hash"]),
    ]))
    if rset.failures:
        raise PartialFailure(rset.failures)


def do_eval(**kwargs):
    cfg = _config(kwargs)
    mc.set_deterministic(cfg.deterministic)
    m = mc.load_manifest(kwargs["manifest"])
    rset = mc.load_reconstructions(kwargs["recon"])
    render_seed = m.meta["render_seed"]
    records = m.records_for(kwargs["split"])
    classifiers = mc.build_classifiers(cfg.metrics.classifier, m.train, records, m.dims, render_seed, cfg)
    report = mc.evaluate_split(
        rset, records, classifiers, cfg.metrics, render_seed, m.dims.image_size,
        seed=mc.derive_seed(cfg.seed, "eval"), config_hash=mc.config_hash(cfg),
    )
    report.save(kwargs["out"])
    if kwargs.get("table"):
        mc.render_report(report, _outfile(kwargs), kwargs.get("fmt", "txt"))


def do_ablate(**kwargs):
    cfg = _config(kwargs)
    res = mc.run_ablation(mc.AblationPlan(), cfg, kwargs.get("seeds"), kwargs.get("cache"), kwargs.get("jobs", 1))
    summary = res.summary()
    if kwargs.get("out"):
        with open(kwargs["out"], "w") as f:
            json.dump(
                {"seeds": res.seeds, "summary": summary, "checks": res.checks, "failures": res.failures},
                f, sort_keys=True, indent=2,
            )
    mc.render_report(summary, _outfile(kwargs), kwargs.get("fmt", "txt"))
    for c in res.checks:
        logger.warning("%s > %s on %s: %s", c["better"], c["worse"], c["metric"], "holds" if c["holds"] else "violated")
    if res.failures:
        raise PartialFailure(res.failures)


def do_report(**kwargs):
    paths = kwargs["reports"]
    out = _outfile(kwargs)
    if len(paths) == 1:
        mc.render_report(mc.MetricsReport.load(paths[0]), out, kwargs.get("fmt", "txt"))
        return
    rows = OrderedDict()
    for p in paths:
        rows[splitext(basename(p))[0]] = mc.MetricsReport.load(p).summary
    mc.render_report(rows, out, kwargs.get("fmt", "txt"))


def do_run(**kwargs):
    cfg = _config(kwargs)
    stages = None
    if kwargs.get("until"):
        names = [s.value for s in Stage]
        stages = names[: names.index(kwargs["until"]) + 1]
    res = mc.run_experiment(cfg, kwargs.get("cache"), stages, kwargs.get("force", False))
    w = _writer(kwargs)
    w.write_kv(OrderedDict([
        ("config_hash", res.config_hash),
        ("run_dir", res.run_dir),
        ("cached", ",".join(res.cached) or "-"),
    ]))
    if res.report is not None:
        mc.render_report(res.report, _outfile(kwargs), kwargs.get("fmt", "txt"))
    if res.failures:
        raise PartialFailure(res.failures)


class _ArgumentParser(argparse.ArgumentParser):
    """ usage errors exit with the validation code instead of argparse's 2 """

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ExitCode.VALIDATION, "{}: error: {}\n".format(self.prog, message))


def parse_args(argv=None):
    def type_uint(s):
        """ parse to unsigned (positive) int """
        i = int(s)
        if i < 0:
            raise argparse.ArgumentTypeError("%s is an not a positive int value" % s)
        return i

    def type_fullpath(s):
        """ expand "~" and relative paths """
        return abspath(expanduser(s))

    common = _ArgumentParser(add_help=False)
    common.add_argument(
        "--verbose",
        "-v",
        default=0,
        action="count",
        help="Verbose output",
    )
    common.add_argument(
        "--config",
        "-c",
        type=type_fullpath,
        default=None,
        help="JSON config file. Defaults are used for keys not given",
    )
    common.add_argument(
        "--set",
        metavar="KEY=VALUE",
        action="append",
        default=[],
        help="Override a config value, e.g. --set semantic.lam=0.02. Repeatable, applied in order",
    )
    common.add_argument(
        "--seed",
        type=type_uint,
        default=None,
        help="Global seed, overrides the config",
    )
    common.add_argument(
        "--outfile",
        type=type_fullpath,
        default=None,
        help="Write tables and summaries to file instead of stdout",
    )
    common.add_argument(
        "--fmt",
        default="txt",
        choices=["csv", "json", "txt"],
        help="Output format of tables and summaries",
    )

    parser = _ArgumentParser(prog="mindcine", description="", add_help=False)
    subparsers = parser.add_subparsers()
    sps = []

    parser.add_argument(
        "--help", "-h",
        action="store_true",
        help="Show this help message and exit"
    )

    parser.add_argument(
        "--version",
        action="store_true",
        help="Show version info and exit"
    )

    # ---- GEN ---------------------------------------------------------------
    sp = subparsers.add_parser(
        "gen",
        parents=[common],
        description="Generate a synthetic paired EEG / video-latent dataset",
    )
    sp.set_defaults(_actionfunc=do_gen)
    sp.add_argument("--out", "-o", type=type_fullpath, required=True, help="Manifest directory")
    sps.append(sp)

    # ---- TRAIN-* -----------------------------------------------------------
    for name, func, what in (
        ("train-semantic", do_train_semantic, "semantic encoder and predictor"),
        ("train-perceptual", do_train_perceptual, "EmbedNet and CausalSeq model"),
        ("train-diffusion", do_train_diffusion, "conditional toy diffusion denoiser"),
    ):
        sp = subparsers.add_parser(name, parents=[common], description="Train the {}".format(what))
        sp.set_defaults(_actionfunc=func)
        sp.add_argument("--manifest", "-m", type=type_fullpath, required=True, help="Manifest directory")
        sp.add_argument("--out", "-o", type=type_fullpath, required=True, help="Checkpoint directory")
        sps.append(sp)

    # ---- RECONSTRUCT -------------------------------------------------------
    sp = subparsers.add_parser(
        "reconstruct",
        parents=[common],
        description="Reconstruct video latents and frames from EEG",
    )
    sp.set_defaults(_actionfunc=do_reconstruct)
    sp.add_argument("--manifest", "-m", type=type_fullpath, required=True)
    sp.add_argument("--semantic", type=type_fullpath, help="Semantic checkpoint")
    sp.add_argument("--perceptual", type=type_fullpath, help="Perceptual checkpoint")
    sp.add_argument("--diffusion", type=type_fullpath, required=True, help="Diffusion checkpoint")
    sp.add_argument("--scale", type=float, default=None, help="Guidance scale, overrides the config")
    sp.add_argument("--split", default="test", choices=["train", "test"])
    sp.add_argument("--out", "-o", type=type_fullpath, required=True, help="Reconstruction directory")
    sps.append(sp)

    # ---- EVAL --------------------------------------------------------------
    sp = subparsers.add_parser(
        "eval",
        parents=[common],
        description="Evaluate reconstructions against ground truth",
    )
    sp.set_defaults(_actionfunc=do_eval)
    sp.add_argument("--recon", "-r", type=type_fullpath, required=True, help="Reconstruction directory")
    sp.add_argument("--manifest", "-m", type=type_fullpath, required=True)
    sp.add_argument("--split", default="test", choices=["train", "test"])
    sp.add_argument("--out", "-o", type=type_fullpath, required=True, help="Report file (json)")
    sp.add_argument("--table", action="store_true", help="Also print the summary table")
    sps.append(sp)

    # ---- ABLATE ------------------------------------------------------------
    sp = subparsers.add_parser(
        "ablate",
        parents=[common],
        description="Run the module and modality ablation variants and compare",
    )
    sp.set_defaults(_actionfunc=do_ablate)
    sp.add_argument("--seeds", type=type_uint, nargs="+", help="Seeds to repeat the plan with")
    sp.add_argument("--jobs", "-j", type=type_uint, default=1, help="Parallel variant processes")
    sp.add_argument("--cache", type=type_fullpath, default=None, help="Artifact root, default $MINDCINE_CACHE")
    sp.add_argument("--out", "-o", type=type_fullpath, default=None, help="Comparative report (json)")
    sps.append(sp)

    # ---- REPORT ------------------------------------------------------------
    sp = subparsers.add_parser(
        "report",
        parents=[common],
        description="Format one or more metric reports as a table",
    )
    sp.set_defaults(_actionfunc=do_report)
    sp.add_argument("reports", nargs="+", type=type_fullpath, help="Report files")
    sps.append(sp)

    # ---- RUN ---------------------------------------------------------------
    sp = subparsers.add_parser(
        "run",
        parents=[common],
        description="Run the whole pipeline with stage caching",
    )
    sp.set_defaults(_actionfunc=do_run)
    sp.add_argument("--cache", type=type_fullpath, default=None, help="Artifact root, default $MINDCINE_CACHE")
    sp.add_argument("--until", choices=[s.value for s in Stage], help="Last stage to run")
    sp.add_argument("--force", action="store_true", help="Rerun stages even when cached")
    sps.append(sp)

    args = parser.parse_args(argv)

    if args.help:
        for sp in sps:
            print(sp.format_help())
            print()  # extra linebreak

        parser.exit()

    if "verbose" not in args:
        args.verbose = 0

    return vars(args)


def print_versions():
    import platform

    import matplotlib
    import numpy
    import scipy
    import torch

    print("mindcine:", mc.__version__)
    print("numpy:", numpy.__version__)
    print("scipy:", scipy.__version__)
    print("torch:", torch.__version__)
    print("matplotlib:", matplotlib.__version__)
    print("os:", platform.platform())
    print("python:", platform.python_version())


def set_verbose(verbose_level):
    loggers = [logging.getLogger("mindcine"), logger]

    if verbose_level <= 1:
        level = logging.WARNING
    if verbose_level == 2:
        level = logging.INFO
    elif verbose_level >= 3:
        level = logging.DEBUG

    if verbose_level >= 4:
        loggers.append(logging.getLogger("torch"))

    handler = logging.StreamHandler(sys.stderr)
    handler.setLevel(level)

    formatter = logging.Formatter("%(levelname)s:%(name)s:%(lineno)d: %(message)s")
    handler.setFormatter(formatter)

    for l in loggers:
        l.setLevel(level)
        if handler not in l.handlers:
            l.addHandler(handler)


def main(argv=None):
    args = parse_args(argv)

    verbose_level = args["verbose"]
    set_verbose(verbose_level)
    logger.debug("args={}".format(args))

    if args.get("version"):
        print_versions()
        return ExitCode.SUCCESS

    actionfunc = args.get("_actionfunc")
    if not actionfunc:
        return ExitCode.SUCCESS

    args["_fh"] = open(args["outfile"], "w") if args.get("outfile") else None
    try:
        actionfunc(**args)
    except PartialFailure as e:
        for f in e.failures:
            logger.error("failed: %s", f)
        print("error: {}".format(e), file=sys.stderr)
        return exit_code_for(e)
    except MindCineError as e:
        print("error: {}".format(e), file=sys.stderr)
        return exit_code_for(e)
    except Exception as e:
        logger.debug("unhandled", exc_info=True)
        print("error: {}".format(e), file=sys.stderr)
        return ExitCode.RUNTIME
    finally:
        if args["_fh"] is not None:
            args["_fh"].close()
    return ExitCode.SUCCESS


if __name__ == "__main__":
    sys.exit(main())
