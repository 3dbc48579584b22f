"""``mpcs`` command line: synth, pretrain, finetune, lineval, eval, sweep, xmag, report.

Exit codes: 0 success, 2 configuration error, 1 runtime failure. Every run
writes into its own directory (``--out`` or ``$MPCS_RUN_ROOT/<command>-seed<seed>[-n]``)
holding ``manifest.json``, logs and artifacts.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

from . import __version__
from . import config as cfglib
from .dataset import (
    MAGNIFICATIONS,
    MagnificationFactor,
    SplitPlan,
    build_folds,
    generate_synthetic,
    ingest_layout,
)
from .errors import ConfigError, MPCSError
from .evaluate import (
    EvalReport,
    aggregate,
    build_report,
    cross_magnification,
    label_efficiency_sweep,
    write_predictions,
)

log = logging.getLogger("mpcs")

DEFAULT_RUN_ROOT = "runs"


# ----------------------------------------------------------------------------
# run directory + manifest
# ----------------------------------------------------------------------------


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _write_json_atomic(path: Path, doc) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    tmp.replace(path)


def data_hash(root) -> str | None:
    """Content hash over every file below ``root`` (sorted relative paths + bytes)."""
    if root is None:
        return None
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """A locked run directory with a manifest written at start and finalised at end."""

    def __init__(self, command: str, out, seed: int, config: dict, inputs: dict):
        self.command = command
        self.dir = Path(out) if out else self._default_dir(command, seed)
        self.manifest = {
            "command": command,
            "config": config,
            "seeds": {"global": seed, "streams": "SeedSequence([seed, epoch, worker])"},
            "code_version": __version__,
            "inputs": inputs,
            "start": None,
            "end": None,
            "status": "running",
            "artifacts": {},
        }

    @staticmethod
    def _default_dir(command, seed) -> Path:
        root = Path(os.environ.get("MPCS_RUN_ROOT", DEFAULT_RUN_ROOT))
        base = root / f"{command}-seed{seed}"
        candidate, n = base, 1
        while candidate.exists():
            candidate = Path(f"{base}-{n}")
            n += 1
        return candidate

    def path(self, name: str) -> Path:
        return self.dir / name

    def artifact(self, key: str, path) -> Path:
        self.manifest["artifacts"][key] = str(Path(path).relative_to(self.dir)) if Path(path).is_relative_to(self.dir) else str(path)
        return Path(path)

    @contextmanager
    def active(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        lock = self.dir / ".lock"
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"run directory {self.dir} is locked by another invocation") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        handler = logging.FileHandler(self.dir / "run.log")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger("mpcs").addHandler(handler)
        self.manifest["start"] = _now()
        _write_json_atomic(self.dir / "manifest.json", self.manifest)
        try:
            yield self
            self.manifest["status"] = "completed"
        except BaseException as exc:
            self.manifest["status"] = f"failed: {exc}"
            raise
        finally:
            self.manifest["end"] = _now()
            _write_json_atomic(self.dir / "manifest.json", self.manifest)
            logging.getLogger("mpcs").removeHandler(handler)
            handler.close()
            lock.unlink(missing_ok=True)


# ----------------------------------------------------------------------------
# shared helpers
# ----------------------------------------------------------------------------


def _resolve(args, extra: dict | None = None) -> dict:
    overrides = cfglib.parse_set(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides = cfglib.deep_merge(overrides, {"seed": args.seed})
    overrides = cfglib.deep_merge(overrides, extra or {})
    return cfglib.resolve(args.preset, args.config, overrides)


def _load_data(root):
    if root is None:
        raise ConfigError("--data is required")
    if not Path(root).is_dir():
        raise ConfigError(f"data directory {root} not found")
    return ingest_layout(root)


def _plan(cfg, data, args, run: Run | None = None) -> SplitPlan:
    if getattr(args, "split", None):
        plan = SplitPlan.load(args.split)
    else:
        plan = build_folds(data, k=int(cfg["split"]["k"]), seed=int(cfg["seed"]))
    if run is not None:
        plan.save(run.artifact("split", run.path("split.json")))
    return plan


def _ssl_samples(plan: SplitPlan, fold: int, data, portion: str):
    if portion == "all":
        return list(data)
    folds = plan.train_folds(fold, with_validation=(portion == "train+val"))
    if portion not in ("train", "train+val"):
        raise ConfigError(f"split.ssl_portion must be train, train+val or all, got {portion!r}")
    ids = set(plan.specimens_in(folds))
    return [s for s in data if s.specimen_id in ids]


def _load_ckpt(path):
    from .train import Checkpoint

    if path is None:
        return None
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint {path} not found")
    return Checkpoint.load(path)


def _mf_list(text):
    if text is None:
        return None
    return [int(MagnificationFactor.parse(t)) for t in str(text).split(",") if t.strip()]


def _write_report(run: Run, report: EvalReport, preds, stem="test"):
    report.save(run.artifact(f"{stem}_report", run.path(f"{stem}_report.json")))
    write_predictions(run.artifact(f"{stem}_predictions", run.path(f"{stem}_predictions.csv")), preds)


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.patients is None:
        args.patients = max(2, args.specimens // 4)
    config = {"n_specimens": args.specimens, "n_patients": args.patients, "class_balance": args.balance,
              "base_size": args.base_size, "output_size": args.output_size, "seed": args.seed}
    out = Path(args.out)
    samples = generate_synthetic(args.specimens, args.patients, args.balance, args.base_size, args.seed,
                                 out_dir=out, output_size=args.output_size)
    manifest = {"command": "synth", "config": config, "code_version": __version__, "end": _now(),
                "n_specimens": len(samples), "index": "index.json"}
    _write_json_atomic(out / "synth_manifest.json", manifest)
    print(f"wrote {len(samples)} specimens x {len(MAGNIFICATIONS)} magnifications to {out}")
    return 0


def cmd_pretrain(args) -> int:
    from .train import pretrain

    extra = {}
    if args.strategy:
        extra["sampler"] = {"kind": args.strategy}
    if args.epochs is not None:
        extra["pretrain"] = {"epochs": args.epochs}
    cfg = _resolve(args, extra)
    pcfg = cfglib.pretrain_config(cfg)
    data = _load_data(args.data)
    run = Run("pretrain", args.out, pcfg.seed, cfg, {"data": str(args.data), "data_hash": data_hash(args.data)})
    with run.active():
        plan = _plan(cfg, data, args, run)
        ssl = _ssl_samples(plan, args.fold, data, cfg["split"]["ssl_portion"])
        log.info("pre-training on %d of %d specimens (%s)", len(ssl), len(data), cfg["split"]["ssl_portion"])
        ckpt = pretrain(pcfg, ssl, run_dir=run.dir)
        ckpt.manifest["split"] = {"fold": args.fold, "ssl_portion": cfg["split"]["ssl_portion"]}
        ckpt.save(run.artifact("checkpoint", run.path("pretrain.pt")))
        run.artifact("metrics", run.path("metrics.jsonl"))
    print(run.path("pretrain.pt"))
    return 0


def _finetune_like(args, mode: str, command: str) -> int:
    from .train import evaluate_checkpoint, finetune, fold_samples

    extra = {"finetune": {}}
    if args.fraction is not None:
        extra["finetune"]["label_fraction"] = args.fraction
    if args.epochs is not None:
        extra["finetune"]["epochs"] = args.epochs
    if args.magnifications:
        extra["finetune"]["magnifications"] = _mf_list(args.magnifications)
    cfg = _resolve(args, extra)
    fcfg = cfglib.finetune_config(cfg, mode)
    init = _load_ckpt(args.ckpt)
    data = _load_data(args.data)
    inputs = {"data": str(args.data), "data_hash": data_hash(args.data),
              "ckpt": str(args.ckpt) if args.ckpt else None,
              "ckpt_hash": file_hash(args.ckpt) if args.ckpt else None}
    run = Run(command, args.out, fcfg.seed, cfg, inputs)
    with run.active():
        plan = _plan(cfg, data, args, run)
        if not 0 <= args.fold < plan.k:
            raise ConfigError(f"--fold must lie in [0, {plan.k})")
        ckpt = finetune(fcfg, init, plan, args.fold, data, run_dir=run.dir)
        run.artifact("checkpoint", run.path(f"finetune_fold{args.fold}.pt"))
        report, preds = evaluate_checkpoint(ckpt, fold_samples(plan, args.fold, data), fcfg.eval_mfs(),
                                            fcfg.input_size, args.fold)
        report.meta.update({"method": args.method or _method_name(init), "mode": mode,
                            "label_fraction": fcfg.label_fraction})
        _write_report(run, report, preds)
        run.artifact("metrics", run.path("metrics.jsonl"))
    print(f"fold {args.fold}: ILA {report.ila:.4f}  PLA {report.pla:.4f}")
    return 0


def _method_name(ckpt) -> str:
    if ckpt is None:
        return "random-init"
    kind = ckpt.manifest.get("config", {}).get("strategy", {}).get("kind")
    return f"MPCS-{kind}" if kind else ckpt.manifest.get("kind", "checkpoint")


def cmd_finetune(args) -> int:
    return _finetune_like(args, "full", "finetune")


def cmd_lineval(args) -> int:
    return _finetune_like(args, "linear", "lineval")


def cmd_eval(args) -> int:
    from .train import predict, predict_patches, fold_samples

    cfg = _resolve(args)
    ckpt = _load_ckpt(args.ckpt)
    if ckpt is None:
        raise ConfigError("--ckpt is required")
    data = _load_data(args.data)
    input_size = int(cfg["finetune"]["input_size"])
    mfs = _mf_list(args.magnifications) or [int(m) for m in MAGNIFICATIONS]
    run = Run("eval", args.out, int(cfg["seed"]), cfg,
              {"data": str(args.data), "data_hash": data_hash(args.data), "ckpt_hash": file_hash(args.ckpt)})
    with run.active():
        plan = _plan(cfg, data, args, run)
        samples = fold_samples(plan, args.fold, data) if args.fold is not None else data
        model = ckpt.build_classifier()
        if args.patch_size:
            preds = predict_patches(model, samples, mfs, args.patch_size, args.stride or args.patch_size, input_size)
        else:
            preds = predict(model, samples, mfs, input_size)
        report = build_report(preds, fold=args.fold, meta={"method": args.method or "model"})
        _write_report(run, report, preds, stem="eval")
    print(json.dumps(report.metrics(), sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    from .train import evaluate_checkpoint, finetune, fold_samples

    cfg = _resolve(args)
    fractions = [float(f) for f in args.fractions.split(",")]
    init = _load_ckpt(args.ckpt)
    data = _load_data(args.data)
    run = Run("sweep", args.out, int(cfg["seed"]), cfg,
              {"data": str(args.data), "data_hash": data_hash(args.data),
               "ckpt_hash": file_hash(args.ckpt) if args.ckpt else None})
    with run.active():
        plan = _plan(cfg, data, args, run)
        mode = args.mode or cfg["finetune"]["mode"]

        def runner(fraction):
            fcfg = cfglib.finetune_config(cfglib.deep_merge(cfg, {"finetune": {"label_fraction": fraction}}), mode)
            ckpt = finetune(fcfg, init, plan, args.fold, data)
            report, preds = evaluate_checkpoint(ckpt, fold_samples(plan, args.fold, data), fcfg.eval_mfs(),
                                                fcfg.input_size, args.fold)
            report.meta.update({"method": _method_name(init), "label_fraction": fraction, "mode": mode})
            _write_report(run, report, preds, stem=f"fraction{fraction:.2f}")
            return report

        table = label_efficiency_sweep(fractions, runner, run.artifact("table", run.path("label_efficiency.csv")),
                                       available=plan.label_fractions)
    for f, r in table:
        print(f"{f:.2f}\tILA {r.ila:.4f}\tPLA {r.pla:.4f}")
    return 0


def _xmag_matrix_from_ckpts(ckpt_dir, data, plan, fold, input_size):
    from .train import Checkpoint, evaluate_checkpoint, fold_samples

    matrix = {}
    samples = fold_samples(plan, fold, data)
    for path in sorted(Path(ckpt_dir).glob("*.pt")):
        ckpt = Checkpoint.load(path)
        train_mfs = ckpt.manifest.get("config", {}).get("magnifications")
        if ckpt.head_kind != "classifier" or not train_mfs or len(train_mfs) != 1:
            log.info("skipping %s: not a single-magnification classifier", path.name)
            continue
        for mf in MAGNIFICATIONS:
            report, _ = evaluate_checkpoint(ckpt, samples, [mf], input_size, fold)
            matrix[(int(train_mfs[0]), int(mf))] = report
    return matrix


def cmd_xmag(args) -> int:
    from .train import finetune

    cfg = _resolve(args)
    input_size = int(cfg["finetune"]["input_size"])
    run = Run("xmag", args.out, int(cfg["seed"]), cfg,
              {"data": str(args.data), "ckpts": str(args.ckpts) if args.ckpts else None,
               "matrix": str(args.matrix) if args.matrix else None})
    with run.active():
        if args.matrix:
            doc = json.loads(Path(args.matrix).read_text())
            matrix = {tuple(int(x) for x in key.split(",")): value for key, value in doc.items()}
        else:
            data = _load_data(args.data)
            plan = _plan(cfg, data, args, run)
            ckpt_dir = Path(args.ckpts) if args.ckpts else run.path("models")
            if args.train:
                init = _load_ckpt(args.ckpt)
                ckpt_dir.mkdir(parents=True, exist_ok=True)
                for mf in MAGNIFICATIONS:
                    fcfg = cfglib.finetune_config(
                        cfglib.deep_merge(cfg, {"finetune": {"magnifications": [int(mf)]}}), args.mode)
                    finetune(fcfg, init, plan, args.fold, data).save(ckpt_dir / f"train{int(mf)}.pt")
            if not ckpt_dir.is_dir():
                raise ConfigError(f"checkpoint directory {ckpt_dir} not found")
            matrix = _xmag_matrix_from_ckpts(ckpt_dir, data, plan, args.fold, input_size)
        _write_json_atomic(run.artifact("matrix", run.path("xmag_matrix.json")),
                           {f"{a},{b}": (r.metrics() if isinstance(r, EvalReport) else r)
                            for (a, b), r in sorted(matrix.items())})
        for mode in ("type1", "type2"):
            table = cross_magnification(matrix, mode)
            path = run.artifact(mode, run.path(f"xmag_{mode}.csv"))
            metrics = sorted({k for row in table.values() for k in row})
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["magnification"] + metrics)
                for mf, row in table.items():
                    w.writerow([f"{int(mf)}X"] + [f"{row[m]:.6f}" for m in metrics])
            print(f"{mode}: " + ", ".join(f"{int(mf)}X={row.get('ila', next(iter(row.values()))):.4f}"
                                          for mf, row in table.items()))
    return 0


def cmd_report(args) -> int:
    from .report import export_features, grad_cam, plot_projection, render_tables
    from .train import fold_samples

    cfg = _resolve(args)
    run = Run("report", args.out, int(cfg["seed"]), cfg,
              {"reports": [str(r) for r in args.reports or []], "ckpt": str(args.ckpt) if args.ckpt else None})
    with run.active():
        if args.reports:
            paths = []
            for r in args.reports:
                r = Path(r)
                paths += sorted(r.rglob("*_report.json")) if r.is_dir() else [r]
            if not paths:
                raise ConfigError("no *_report.json files found")
            reports = [EvalReport.load(p) for p in paths]
            csv_text, text, _ = render_tables(reports, args.layout, args.metric)
            run.artifact("table_csv", run.path("table.csv")).write_text(csv_text)
            run.artifact("table_txt", run.path("table.txt")).write_text(text)
            agg = aggregate(reports)
            _write_json_atomic(run.artifact("aggregate", run.path("aggregate.json")), agg)
            print(text)
        if args.ckpt:
            ckpt = _load_ckpt(args.ckpt)
            data = _load_data(args.data)
            plan = _plan(cfg, data, args, run)
            samples = fold_samples(plan, args.fold, data)
            input_size = int(cfg["finetune"]["input_size"])
            dump = export_features(ckpt.build_encoder(), samples, run.path("features.csv"), input_size)
            run.artifact("features", run.path("features.csv"))
            plot_projection(dump, run.artifact("projection", run.path(f"projection_{args.projection}.png")),
                            args.projection, int(cfg["seed"]))
            if ckpt.head_kind == "classifier":
                model = ckpt.build_classifier()
                cam_dir = run.path("cams")
                for s in samples[: args.cams]:
                    for mf in MAGNIFICATIONS:
                        amap = grad_cam(model, s.image(mf), target_class=1 if args.cam_class is None else args.cam_class,
                                        layer=args.cam_layer, input_size=input_size,
                                        image_id=f"{s.specimen_id}_{int(mf)}")
                        amap.save(cam_dir)
                run.artifact("cams", cam_dir)
        if not args.reports and not args.ckpt:
            raise ConfigError("report needs --reports and/or --ckpt")
    return 0


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, data=True):
    p.add_argument("--config", help="YAML/JSON config file layered over the preset")
    p.add_argument("--preset", default="synth-fast", choices=sorted(cfglib.PRESETS))
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="run directory (default $MPCS_RUN_ROOT/<command>-seed<seed>)")
    if data:
        p.add_argument("--data", help="dataset root in the canonical layout")
        p.add_argument("--split", help="existing split.json to reuse instead of building folds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpcs", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic multi-magnification dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--specimens", type=int, default=64)
    p.add_argument("--patients", type=int)
    p.add_argument("--balance", type=float, default=0.5)
    p.add_argument("--base-size", type=int, default=640)
    p.add_argument("--output-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="MPCS self-supervised pre-training")
    _common(p)
    p.add_argument("--strategy", choices=["fixed", "ordered", "random"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--fold", type=int, default=0, help="test fold kept out of pre-training")
    p.set_defaults(func=cmd_pretrain)

    for name, func, helptext in (("finetune", cmd_finetune, "fine-tune encoder and classifier"),
                                 ("lineval", cmd_lineval, "linear evaluation on a frozen encoder")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--ckpt", help="pre-trained checkpoint (omit for random initialisation)")
        p.add_argument("--fraction", type=float, help="label fraction of the train folds")
        p.add_argument("--fold", type=int, default=0)
        p.add_argument("--epochs", type=int)
        p.add_argument("--magnifications", help="comma-separated training magnifications, e.g. 200,400")
        p.add_argument("--method", help="method name recorded in the report")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--fold", type=int, help="evaluate this test fold only (default: every specimen)")
    p.add_argument("--magnifications")
    p.add_argument("--patch-size", type=int, help="tile images and vote per image")
    p.add_argument("--stride", type=int)
    p.add_argument("--method")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="label-efficiency sweep over label fractions")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--fractions", default="0.05,0.1,0.2,0.4,0.6,0.8,1.0")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--mode", choices=["full", "linear"])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("xmag", help="type-1/type-2 cross-magnification tables")
    _common(p)
    p.add_argument("--ckpts", help="directory of single-magnification classifier checkpoints")
    p.add_argument("--matrix", help="JSON {\"train,eval\": metrics} instead of checkpoints")
    p.add_argument("--train", action="store_true", help="first fine-tune one model per magnification")
    p.add_argument("--ckpt", help="initialisation for --train")
    p.add_argument("--mode", choices=["full", "linear"], default="linear")
    p.add_argument("--fold", type=int, default=0)
    p.set_defaults(func=cmd_xmag)

    p = sub.add_parser("report", help="tables, feature dumps, projections and Grad-CAM overlays")
    _common(p)
    p.add_argument("--reports", nargs="*", help="report JSON files or directories")
    p.add_argument("--layout", default="breakhis", choices=["breakhis", "bach", "bisque"])
    p.add_argument("--metric", default="ila", choices=["ila", "pla"])
    p.add_argument("--ckpt")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--projection", default="pca", choices=["pca", "tsne"])
    p.add_argument("--cams", type=int, default=2, help="number of test specimens to render maps for")
    p.add_argument("--cam-layer")
    p.add_argument("--cam-class", type=int)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("mpcs").setLevel(logging.INFO)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"mpcs {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (MPCSError, OSError, ValueError, RuntimeError) as exc:
        print(f"mpcs {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
