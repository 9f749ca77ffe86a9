"""Command-line entry point: ``umamba2 <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .architecture import (CHECKPOINT_VERSION, ArchConfig, ConfigError, arch_from_dict, build_network,
                           load_checkpoint, save_checkpoint)
from .config import RunConfig
from .data_io import (VOLUME_FORMAT_VERSION, DataError, PhantomConfig, generate_phantom, load_dataset,
                      read_volume, write_volume)
from .inference import SlidingWindowConfig, TtaConfig, parse_tta_axes, tta_predict
from .postprocess import compute_class_thresholds, evaluate_case, filter_small_components
from .prompts import load_clicks
from .schema import SchemaError, load_schema
from .ssd import benchmark_ssd
from .training import DivergenceError, TrainConfig, dae_network, load_pretrained, pretrain_dae, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
log = logging.getLogger("umamba2")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _dump(path: str | Path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _echo(cfg: RunConfig, command: str, args: argparse.Namespace) -> dict:
    flags = {k: v for k, v in vars(args).items() if k not in ("func", "config") and v is not None}
    return {"command": command, "version": __version__, "config": cfg.to_dict(), "flags": flags}


# -- subcommands ---------------------------------------------------------------------

def cmd_gen_phantoms(args, cfg: RunConfig, schema) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = cfg.phantom.to_dict()
    if args.extents:
        base["extents"] = [int(v) for v in args.extents.split(",")]
    seed = args.seed if args.seed is not None else base["seed"]
    echo = _echo(cfg, "gen-phantoms", args)
    cases = []
    for i in range(args.count):
        pcfg = PhantomConfig(**dict(base, seed=seed + i))
        image, labels = generate_phantom(pcfg, schema)
        name = f"case_{i:03d}"
        write_volume(out / f"{name}_image", image, extra={"phantom": pcfg.to_dict()})
        write_volume(out / f"{name}_label", labels, extra={"phantom": pcfg.to_dict()})
        cases.append(name)
    _dump(out / "manifest.json", {"cases": cases, "schema": schema.to_dict(), "provenance": echo,
                                  "format_version": VOLUME_FORMAT_VERSION})
    print(f"wrote {len(cases)} phantoms to {out}")
    return EXIT_OK


def _arch(cfg: RunConfig, schema, **overrides) -> ArchConfig:
    d = cfg.arch.to_dict()
    d.update(num_classes=schema.num_classes, **overrides)
    return arch_from_dict(d)


def cmd_pretrain(args, cfg: RunConfig, schema) -> int:
    cases = load_dataset(args.data_dir)
    model = dae_network(_arch(cfg, schema))
    dae = cfg.dae
    epochs = args.epochs if args.epochs is not None else dae.epochs
    res = pretrain_dae(model, [img.data for _, img, _ in cases], dae.dae_config(), epochs, dae.iters_per_epoch,
                       dae.batch_size, dae.lr, cfg.seed, dtype=cfg.training.dtype,
                       log_path=args.log)
    echo = _echo(cfg, "pretrain", args)
    save_checkpoint(args.out, res.state, model.cfg.to_dict(), {"provenance": echo, "history": res.history})
    print(f"pretrained {epochs} epochs, final L1 {res.history[-1]['loss']:.4f} -> {args.out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, schema) -> int:
    cases = load_dataset(args.data_dir)
    tcfg = cfg.training.to_dict()
    if args.epochs is not None:
        tcfg["epochs"] = args.epochs
    if args.task:
        tcfg["task"] = args.task
    interactive = tcfg["task"] == "interactive"
    if interactive and not tcfg["click_classes"]:
        tcfg["click_classes"] = schema.ids_named("canal")
    tcfg = TrainConfig(**tcfg)
    model = build_network(_arch(cfg, schema, click_branch=interactive or cfg.arch.click_branch))
    if args.pretrained:
        state, _ = load_checkpoint(args.pretrained)
        loaded = load_pretrained(model, state)
        log.info("loaded %d pretrained tensors", len(loaded))
    echo = _echo(cfg, "train", args)
    res = train(model, [(img.data, lab.data) for _, img, lab in cases], schema, tcfg,
                log_path=args.log, config_echo=echo)
    save_checkpoint(args.out, res.state, model.cfg.to_dict(),
                    {"provenance": echo, "history": res.history, "schema": schema.to_dict()})
    last = res.history[-1]
    print(f"trained {tcfg.epochs} epochs, loss {last['loss']:.4f}, train dice {last['mean_dice']:.3f} -> {args.out}")
    return EXIT_OK


def _inputs(path: Path) -> list[tuple[str, Path]]:
    if path.is_dir():
        items = [(p.name[: -len("_image.json")], p) for p in sorted(path.glob("*_image.json"))]
        if not items:
            raise DataError(f"no *_image.json volumes in {path}")
        return items
    return [(path.with_suffix("").name, path)]


def cmd_infer(args, cfg: RunConfig, schema) -> int:
    state, manifest = load_checkpoint(args.checkpoint)
    model = build_network(arch_from_dict(manifest["config"]))
    model.load_state_dict(state)
    inf = cfg.inference
    sw = SlidingWindowConfig(patch_extents=model.cfg.patch_size,
                             step_fraction=args.tile_step if args.tile_step is not None else inf.step_fraction,
                             gaussian_blend=inf.gaussian_blend and not args.no_gaussian_blend,
                             threads=args.threads)
    tta = TtaConfig(parse_tta_axes(args.tta_axes) if args.tta_axes is not None else inf.tta_axes)
    clicks = load_clicks(args.clicks) if args.clicks else None
    items = _inputs(Path(args.input))
    if clicks is not None and len(items) != 1:
        raise UsageError("--clicks needs a single input volume")
    out = Path(args.output)
    echo = _echo(cfg, "infer", args)
    timing = {"windows": 0, "passes": 0, "seconds": 0.0, "volumes": 0}
    for name, path in items:
        vol = read_volume(path)
        report = {}
        model.cast(np.float32)
        probs = tta_predict(vol.data, model, sw, tta, schema, clicks, report)
        pred = np.argmax(probs, axis=0).astype(np.uint8)
        target = out / f"{name}_pred" if Path(args.input).is_dir() else out
        target.parent.mkdir(parents=True, exist_ok=True)
        write_volume(target, pred, vol.spacing_mm, extra=echo)
        for k in ("windows", "passes", "seconds"):
            timing[k] += report[k]
        timing["volumes"] += 1
    if args.timing_report:
        _dump(args.timing_report, timing)
    print(f"predicted {timing['volumes']} volume(s): {timing['windows']} windows, {timing['passes']} passes")
    return EXIT_OK


def cmd_compute_thresholds(args, cfg: RunConfig, schema) -> int:
    cases = load_dataset(args.data_dir)
    conn = args.connectivity or cfg.postprocess.connectivity
    table = compute_class_thresholds([lab.data for _, _, lab in cases], schema, conn, cfg.postprocess.percentile)
    _dump(args.out, {"connectivity": conn, "thresholds": {str(k): v for k, v in table.items()},
                     "provenance": _echo(cfg, "compute-thresholds", args)})
    print(f"thresholds for {len(table)} classes -> {args.out}")
    return EXIT_OK


def cmd_postprocess(args, cfg: RunConfig, schema) -> int:
    table = json.loads(Path(args.thresholds).read_text())
    thresholds = {int(k): int(v) for k, v in table["thresholds"].items()}
    conn = args.connectivity or table.get("connectivity", cfg.postprocess.connectivity)
    src, out = Path(args.input), Path(args.output)
    files = sorted(src.glob("*_pred.json")) if src.is_dir() else [src]
    echo = _echo(cfg, "postprocess", args)
    for f in files:
        vol = read_volume(f)
        cleaned = filter_small_components(vol.data, thresholds, conn)
        target = out / f.with_suffix("").name if src.is_dir() else out
        target.parent.mkdir(parents=True, exist_ok=True)
        write_volume(target, cleaned.astype(vol.data.dtype), vol.spacing_mm, extra=echo)
    print(f"filtered {len(files)} volume(s)")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig, schema) -> int:
    pred_path, gt_path = Path(args.pred), Path(args.gt)
    if gt_path.is_dir():
        pairs = []
        for lab in sorted(gt_path.glob("*_label.json")):
            case = lab.name[: -len("_label.json")]
            pred = pred_path / f"{case}_pred.json"
            if not pred.exists():
                raise DataError(f"missing prediction {pred} for case {case}")
            pairs.append((case, pred, lab))
    else:
        pairs = [(gt_path.with_suffix("").name, pred_path, gt_path)]
    cases = {}
    for case, pred, lab in pairs:
        p, g = read_volume(pred), read_volume(lab)
        cases[case] = evaluate_case(p.data, g.data, schema, g.spacing_mm)
    dice = [c["mean_dice"] for c in cases.values()]
    hds = [c["mean_hd95"] for c in cases.values() if c["mean_hd95"] is not None]
    per_class = {}
    for name in schema.names[1:]:
        d = [c["per_class"][name]["dice"] for c in cases.values()]
        h = [c["per_class"][name]["hd95"] for c in cases.values() if c["per_class"][name]["hd95"] is not None]
        per_class[name] = {"dice": float(np.mean(d)), "hd95": float(np.mean(h)) if h else None,
                           "hd95_undefined": len(d) - len(h)}
    report = {"mean": {"dice": float(np.mean(dice)), "hd95": float(np.mean(hds)) if hds else None},
              "per_class": per_class, "cases": cases, "provenance": _echo(cfg, "evaluate", args)}
    if args.out:
        _dump(args.out, report)
    print(json.dumps(report["mean"]))
    return EXIT_OK


def cmd_benchmark_ssd(args, cfg: RunConfig, schema) -> int:
    lengths = [int(v) for v in args.lengths.split(",")]
    forms = args.forms.split(",")
    res = benchmark_ssd(lengths, forms, state_dim=args.state_dim, head_dim=args.head_dim, chunk_len=args.chunk_len,
                        repeats=args.repeats, seed=cfg.seed, heads=args.heads)
    text = res.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_selftest(args, cfg: RunConfig, schema) -> int:
    from .selftest import run_selftest
    results = run_selftest(schema, cfg.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_DATA


# -- parser --------------------------------------------------------------------------

def build_parser() -> Parser:
    p = Parser(prog="umamba2", description="U-Mamba2 desk-scale segmentation pipeline")
    p.add_argument("--version", action="version",
                   version=f"umamba2 {__version__} (volume format {VOLUME_FORMAT_VERSION}, "
                           f"checkpoint format {CHECKPOINT_VERSION})")
    p.add_argument("--threads", type=int, default=1, help="worker threads for window evaluation (default 1)")
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--schema", help="label schema JSON (default: bundled 12-class schema)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=Parser)

    g = sub.add_parser("gen-phantoms", help="write synthetic phantom volumes")
    g.add_argument("--count", type=int, default=8)
    g.add_argument("--seed", type=int)
    g.add_argument("--extents", help="H,W,D")
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_gen_phantoms)

    g = sub.add_parser("pretrain", help="DAE self-supervised pretraining")
    g.add_argument("--data-dir", required=True)
    g.add_argument("--out", required=True, help="checkpoint path")
    g.add_argument("--epochs", type=int)
    g.add_argument("--log")
    g.set_defaults(func=cmd_pretrain)

    g = sub.add_parser("train", help="supervised training (Task 1 or Task 2)")
    g.add_argument("--data-dir", required=True)
    g.add_argument("--out", required=True, help="checkpoint path")
    g.add_argument("--epochs", type=int)
    g.add_argument("--task", choices=["seg", "interactive"])
    g.add_argument("--pretrained", help="DAE checkpoint to initialise from")
    g.add_argument("--log", help="JSON-lines metrics log")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("infer", help="sliding-window + TTA prediction")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--input", required=True, help="image volume or directory of *_image volumes")
    g.add_argument("--output", required=True, help="label volume path or output directory")
    g.add_argument("--tile-step", type=float)
    g.add_argument("--tta-axes", help='subsets such as "1,2;2"; empty string disables mirroring')
    g.add_argument("--no-gaussian-blend", action="store_true")
    g.add_argument("--clicks")
    g.add_argument("--timing-report")
    g.set_defaults(func=cmd_infer)

    g = sub.add_parser("compute-thresholds", help="per-class component-volume thresholds from ground truth")
    g.add_argument("--data-dir", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--connectivity", type=int, choices=[6, 18, 26])
    g.set_defaults(func=cmd_compute_thresholds)

    g = sub.add_parser("postprocess", help="remove components below class thresholds")
    g.add_argument("--input", required=True)
    g.add_argument("--thresholds", required=True)
    g.add_argument("--output", required=True)
    g.add_argument("--connectivity", type=int, choices=[6, 18, 26])
    g.set_defaults(func=cmd_postprocess)

    g = sub.add_parser("evaluate", help="Dice and HD95 per class")
    g.add_argument("--pred", required=True)
    g.add_argument("--gt", required=True)
    g.add_argument("--out")
    g.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("benchmark-ssd", help="time the SSD forms")
    g.add_argument("--lengths", default="256,512,1024")
    g.add_argument("--forms", default="recurrent,quadratic,chunked")
    g.add_argument("--state-dim", type=int, default=8)
    g.add_argument("--head-dim", type=int, default=8)
    g.add_argument("--chunk-len", type=int, default=64)
    g.add_argument("--heads", type=int, default=1)
    g.add_argument("--repeats", type=int, default=3)
    g.add_argument("--out")
    g.set_defaults(func=cmd_benchmark_ssd)

    g = sub.add_parser("selftest", help="SSD equivalence, gradcheck and mirror suites")
    g.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = RunConfig.load(args.config)
        schema = load_schema(args.schema)
        return args.func(args, cfg, schema)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, SchemaError, ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
