"""Command-line entry point: ``python -m strokecomp <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness as H
from .model import save_model
from .preprocess import PreprocessError
from .skeleton import DatasetError, save_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

log = logging.getLogger("strokecomp")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML run file; flags override its keys")
    common.add_argument("--seed", type=int, help="global seed (split, initialization, baselines, generator)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--format", choices=("text", "csv", "json"), default="text",
                        help="report format printed to stdout")
    common.add_argument("--data", metavar="PATH", help="JSONL dataset; generated on the fly when omitted")
    common.add_argument("--split-by", choices=("sequence", "subject"), help="stratify per sequence or per subject")
    common.add_argument("--n-seeds", type=int, help="replicate seeds averaged by compare/ablate")
    common.add_argument("--epochs", type=int, help="training epochs for the deep model")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="strokecomp", description="Compensatory movement classification experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate-data", parents=[common], help="write a synthetic dataset and its provenance sidecar")
    sub.add_parser("preprocess", parents=[common], help="split and preprocess a dataset")
    t = sub.add_parser("train", parents=[common], help="train one model variant and save it")
    t.add_argument("--variant", choices=[v.value for v in H.Variant])
    e = sub.add_parser("evaluate", parents=[common], help="score a saved model")
    e.add_argument("--model", required=True, metavar="DIR", help="directory written by 'train'")
    e.add_argument("--subset", choices=("test", "train", "all"), default="test")
    c = sub.add_parser("compare", parents=[common], help="baselines vs the full model")
    c.add_argument("--models", help="comma-separated subset of svm,knn,rf,gcn-lstm-att")
    a = sub.add_parser("ablate", parents=[common], help="GCN vs GCN-LSTM vs GCN-LSTM-ATT")
    for q in (c, a):
        q.add_argument("--jobs", type=int, default=1, help="replicate seeds run in this many processes")
    sub.add_parser("gradient-check", parents=[common], help="finite-difference check of every gradient")
    return p


def _overrides(args) -> dict:
    o = {"seed": args.seed, "out": args.out, "data": args.data, "split_by": args.split_by,
         "n_seeds": args.n_seeds, "train.epochs": args.epochs}
    if getattr(args, "models", None):
        o["models"] = args.models
    if getattr(args, "variant", None):
        o["model.variant"] = args.variant
    if args.seed is not None:
        # the flag wins over seeds pinned inside sections too
        for key in ("gen.seed", "train.seed", "baselines.svm.seed", "baselines.rf.seed"):
            o[key] = args.seed
    return o


def _emit(exp: H.Experiment, out: Path, fmt: str):
    paths = H.write_report(exp, out)
    sys.stdout.write(paths[fmt].read_text())


def _run(args) -> int:
    cfg = H.load_config(args.config, _overrides(args))
    out = Path(cfg.out)
    cmd = args.command
    if cmd == "generate-data":
        out.mkdir(parents=True, exist_ok=True)
        with H.stage("generate"):
            data, sidecar = H.write_generated(cfg.gen, out / "dataset.jsonl")
        print(data)
        print(sidecar)
        return EXIT_OK
    if cmd == "gradient-check":
        errors = H.run_gradient_check(cfg)
        worst = max(errors.values())
        out.mkdir(parents=True, exist_ok=True)
        payload = {"max_relative_error": worst, "per_variant": errors, "tolerance": H.GRADIENT_TOLERANCE}
        (out / "gradient_check.json").write_text(json.dumps(payload, indent=2) + "\n")
        if args.format == "json":
            print(json.dumps(payload, indent=2))
        else:
            for name, err in errors.items():
                print(f"{name} {err:.3e}")
            print(f"max relative error {worst:.3e}")
        if not worst < H.GRADIENT_TOLERANCE:
            log.error("gradient check failed: %.3e >= %.0e", worst, H.GRADIENT_TOLERANCE)
            return EXIT_NUMERIC
        return EXIT_OK
    if cmd == "preprocess":
        pds = H.run_preprocess(cfg)
        out.mkdir(parents=True, exist_ok=True)
        save_dataset(pds, out / "preprocessed.jsonl")
        pds.stats.save(out / "stats.json")
        H.write_split(pds, out / "split.json")
        H.write_config(cfg, out / "config.json")
        print(out / "preprocessed.jsonl")
        return EXIT_OK
    if cmd == "train":
        model, exp, sds = H.run_train(cfg)
        save_model(model, out / "model")
        H.write_split(sds, out / "split.json")
        H.write_config(cfg, out / "config.json")
        _emit(exp, out, args.format)
        return EXIT_OK
    if cmd == "evaluate":
        exp = H.run_evaluate(cfg, args.model, subset=args.subset)
        _emit(exp, out, args.format)
        return EXIT_OK
    if cmd in ("compare", "ablate"):
        runner = H.run_compare if cmd == "compare" else H.run_ablate
        exp = runner(cfg, jobs=args.jobs)
        _emit(exp, out, args.format)
        H.write_config(cfg, out / "config.json")
        return EXIT_OK
    raise AssertionError(cmd)


INPUT_STAGES = ("data", "load model")


def _classify(exc: BaseException) -> int:
    reading = False
    if isinstance(exc, H.StageError):
        reading = exc.stage in INPUT_STAGES
        exc = exc.cause
    if isinstance(exc, H.ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, H.NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (DatasetError, PreprocessError)) or (reading and isinstance(exc, OSError)):
        return EXIT_DATA
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, ValueError):
        return EXIT_DATA
    return 1


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _run(args)
    except (H.StageError, H.ConfigError, H.NumericError, DatasetError, OSError, ValueError) as exc:
        msg = str(exc)
        if isinstance(exc, OSError) and exc.filename and str(exc.filename) not in msg:
            msg = f"{exc.filename}: {msg}"
        print(f"error: {msg}", file=sys.stderr)
        return _classify(exc)


if __name__ == "__main__":
    sys.exit(main())
