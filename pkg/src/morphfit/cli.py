"""``morphfit`` command line.

Exit codes: 0 on success, 1 for usage errors, 2 when the data or a solver
fails. Numeric settings come from a TOML file (``--config``) with one table
per subcommand family (``[datagen]``, ``[train]``, ``[profile]``); flags win
over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import MorphfitError

log = logging.getLogger("morphfit")

THREADS_ENV = "MORPHFIT_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- helpers ------------------------------------------------------------------

def _read_config(path, section):
    if path is None:
        return {}
    from ._toml import load_toml

    return dict(load_toml(path).get(section, {}))


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return 1


def _require_file(path, what):
    if path is None:
        raise UsageError(f"{what} is required")
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _require_seed(args):
    if args.seed is None:
        raise UsageError(f"{args.command} needs --seed")
    return args.seed


def _load_model(args):
    from .model import load_model

    return load_model(_require_file(args.model, "--model"))


def _parse_params(text, model):
    """Packed parameters from a JSON file, a JSON list or comma-separated numbers."""
    from .model import unpack

    if text is None:
        raise UsageError("--params is required")
    if Path(text).is_file():
        data = json.loads(Path(text).read_text())
        if isinstance(data, dict):
            data = data["params"]
    else:
        try:
            data = json.loads(text) if text.lstrip().startswith("[") else \
                [float(x) for x in text.split(",")]
        except ValueError:
            raise UsageError(f"cannot parse --params {text!r}") from None
    try:
        return unpack(data, model.d_id, model.d_exp)
    except MorphfitError as exc:
        raise UsageError(str(exc)) from None


def _load_image(path):
    from PIL import Image

    return np.array(Image.open(_require_file(path, "--image")).convert("RGB"))


def _out_path(args, default):
    return Path(args.out) if args.out else Path(default)


def _emit(obj, args):
    """Print a JSON document, or write it to --out when that is a .json path."""
    text = json.dumps(obj, indent=2, default=_json_default)
    if args.out and Path(args.out).suffix == ".json":
        Path(args.out).write_text(text + "\n")
    else:
        print(text)


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(type(x))


def _synth_config(args, **overrides):
    from .datagen import SynthConfig

    cfg = _read_config(args.config, "datagen")
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("yaw_range", "pitch_range", "roll_range"):
        if key in cfg:
            cfg[key] = tuple(cfg[key])
    try:
        return SynthConfig(**cfg)
    except TypeError as exc:
        raise UsageError(f"bad [datagen] config: {exc}") from None


# --- subcommands ----------------------------------------------------------------

def cmd_gen_model(args):
    from .datagen import generate_model
    from .model import save_model, save_text_model

    seed = _require_seed(args)
    model = generate_model(_synth_config(args, seed=seed))
    out = _out_path(args, "model.mfm")
    if args.format == "csv":
        raise UsageError("gen-model writes binary or text models only")
    (save_text_model if args.text else save_model)(model, out)
    print(f"wrote {out}: {model.n_vertices} vertices, {len(model.triangles)} triangles, "
          f"d_id={model.d_id}, d_exp={model.d_exp}")


def cmd_gen_data(args):
    from .datagen import generate_samples, save_dataset

    seed = _require_seed(args)
    model = _load_model(args)
    cfg = _synth_config(args, seed=seed, n_samples=args.count,
                        d_id=model.d_id, d_exp=model.d_exp)
    samples = generate_samples(model, cfg, start=args.start)
    out = _out_path(args, "data")
    save_dataset(samples, out)
    print(f"wrote {len(samples)} samples to {out}")


def cmd_render_pncc(args):
    from .model import compute_ncc
    from .render import render_pncc, save_png, save_raw

    model = _load_model(args)
    p = _parse_params(args.params, model)
    img = render_pncc(model, p, compute_ncc(model), args.width, args.height)
    out = _out_path(args, "pncc.raw" if args.format == "raw" else "pncc.png")
    if args.format == "raw":
        save_raw(np.concatenate([img.color, img.depth[:, :, None]], axis=2), out)
    elif args.format in (None, "png"):
        save_png(img.color, out)
    else:
        raise UsageError("render-pncc supports --format png or raw")
    print(f"wrote {out}: {int(img.mask.sum())} face pixels")


def cmd_render_paf(args):
    from .features import build_patch_map, pac, project_anchors, sample_anchors
    from .render import save_png, save_raw

    model = _load_model(args)
    p = _parse_params(args.params, model)
    image = _load_image(args.image).astype(np.float64) / 255.0
    if args.cascade:
        from .cascade import load_cascade

        cascade = load_cascade(_require_file(args.cascade, "--cascade"), model)
        anchors, filters = cascade.anchors, cascade.extractor.filters
    else:
        rng = np.random.default_rng(0 if args.seed is None else args.seed)
        anchors = sample_anchors(model)
        filters = rng.standard_normal((args.filters, args.patch, args.patch, 3))
        filters /= np.linalg.norm(filters.reshape(len(filters), -1), axis=1)[:, None, None, None]
    pos, vis = project_anchors(anchors, model, p)
    d = filters.shape[1]
    pmap = build_patch_map(image, pos, d)
    resp = pac(pmap, filters, vis)
    fmt = args.format or "png"
    out = _out_path(args, f"paf.{fmt}")
    if fmt == "png":
        save_png(pmap, out)
    elif fmt == "raw":
        save_raw(resp, out)
    elif fmt == "json":
        out.write_text(json.dumps({"shape": list(resp.shape), "visible": int(vis.sum()),
                                   "responses": resp.tolist()}))
    else:
        raise UsageError("render-paf supports --format png, raw or json")
    print(f"wrote {out}: {vis.sum()} of {vis.size} anchors visible")


def cmd_train(args):
    from .cascade import TrainConfig, save_cascade, split_validation, train
    from .datagen import load_dataset

    seed = _require_seed(args)
    model = _load_model(args)
    data = _require_file(Path(args.data or "") / "manifest.jsonl", "--data")
    cfg = _read_config(args.config, "train")
    cfg["seed"] = seed
    cfg["threads"] = _threads(args)
    if args.stages is not None:
        cfg["stages"] = args.stages
    try:
        config = TrainConfig.from_dict(cfg)
    except MorphfitError as exc:
        raise UsageError(str(exc)) from None
    samples = load_dataset(model, data.parent)
    train_s, val_s = split_validation(samples, config.validation_fraction, seed)
    test = None
    if args.test:
        test = load_dataset(model, _require_file(Path(args.test) / "manifest.jsonl",
                                                 "--test").parent)
    cascade, history = train(model, train_s, val_s if config.regenerate else [], config,
                             test=test)
    out = _out_path(args, "cascade.npz")
    save_cascade(cascade, out)
    print(json.dumps({"cascade": str(out), **history}))


def cmd_fit(args):
    from .cascade import fit, load_cascade
    from .datagen import load_dataset
    from .evaluation import nme, sample_landmarks
    from .model import pack

    model = _load_model(args)
    cascade = load_cascade(_require_file(args.cascade, "--cascade"), model)
    rows = []
    if args.data:
        samples = load_dataset(model, _require_file(Path(args.data) / "manifest.jsonl",
                                                    "--data").parent)
        if args.index is not None:
            wanted = set(args.index)
            samples = [s for s in samples if s.sample_id in wanted]
            if not samples:
                raise UsageError(f"no samples with id {sorted(wanted)} in {args.data}")
        for s in samples:
            p, traj = fit(cascade, s.image, s.bbox, return_trajectory=True)
            gt = sample_landmarks(model, s.pg)
            rows.append({"id": s.sample_id, "params": pack(p),
                         "init_nme": nme(sample_landmarks(model, traj[0]), gt),
                         "nme": nme(sample_landmarks(model, p), gt)})
    else:
        if args.bbox is None:
            raise UsageError("fit needs --data or --image with --bbox")
        p = fit(cascade, _load_image(args.image), args.bbox)
        rows.append({"id": 0, "params": pack(p)})
    if args.format == "csv":
        import csv

        fh = open(args.out, "w", newline="") if args.out else sys.stdout
        w = csv.writer(fh)
        w.writerow(["id", "init_nme", "nme"])
        for r in rows:
            w.writerow([r["id"], r.get("init_nme", ""), r.get("nme", "")])
        if args.out:
            fh.close()
    else:
        _emit(rows, args)
    for r in rows:
        if "nme" in r:
            print(f"sample {r['id']}: init NME {r['init_nme']:.3f} -> NME {r['nme']:.3f}",
                  file=sys.stderr)


def cmd_profile(args):
    from .model import pack
    from .profiling import mesh_image, profile_step, yaw_deltas
    from .evaluation import yaw_of
    from .render import save_png

    model = _load_model(args)
    p = _parse_params(args.params, model)
    image = _load_image(args.image)
    cfg = _read_config(args.config, "profile")
    step = args.step if args.step is not None else cfg.get("step", 5.0)
    limit = args.limit if args.limit is not None else cfg.get("limit", 90.0)
    grid = args.grid_step if args.grid_step is not None else cfg.get("grid_step", 20.0)
    out = _out_path(args, "profile")
    out.mkdir(parents=True, exist_ok=True)
    mesh = mesh_image(image, model, p, grid)
    counts = {k: int((mesh.kind == i).sum())
              for i, k in enumerate(("face", "contour", "background"))}
    deltas = yaw_deltas(yaw_of(p.q), step, limit)
    for k, delta in enumerate(deltas):
        res = profile_step(image, mesh, model, p, delta)
        save_png(res.image, out / f"step_{k + 1:02d}.png")
        (out / f"step_{k + 1:02d}.json").write_text(json.dumps(
            {"yaw_delta": delta, "params": pack(res.params).tolist(), "anchors": counts}))
    print(f"wrote {len(deltas)} profiled views to {out}")


def cmd_eval(args):
    from .evaluation import (ced_svg, read_records_csv, summarize, write_ced_csv,
                             write_records_csv)

    if args.records:
        records = read_records_csv(_require_file(args.records, "--records"))
    elif args.cascade and args.data:
        from .cascade import fit, load_cascade
        from .datagen import load_dataset
        from .evaluation import make_record

        model = _load_model(args)
        cascade = load_cascade(_require_file(args.cascade, "--cascade"), model)
        samples = load_dataset(model, _require_file(Path(args.data) / "manifest.jsonl",
                                                    "--data").parent)
        records = [make_record(model, s.sample_id, fit(cascade, s.image, s.bbox), s.pg)
                   for s in samples]
    else:
        raise UsageError("eval needs --records, or --cascade with --data")
    ddof = 0 if args.std == "population" else 1
    summary = summarize(records, ddof=ddof)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_records_csv(out / "records.csv", records)
        write_ced_csv(out / "ced.csv", summary["thresholds"], summary["ced"])
        (out / "ced.svg").write_text(ced_svg(summary["thresholds"], summary["ced"]))
    if args.format == "json":
        print(json.dumps({k: summary[k] for k in ("bins", "counts", "mean", "std", "overall")}))
        return
    for label, value in summary["bins"].items():
        shown = "-" if value is None else f"{value:.2f}"
        print(f"yaw {label}: {shown} (n={summary['counts'][label]})")
    print(f"mean {summary['mean']:.2f}")
    print(f"std {summary['std']:.2f}")


def cmd_diagnose_cost(args):
    from .cost import curvature_table, owpdc_weights, wpdc_weights, write_diagnostics_csv
    from .model import pack

    model = _load_model(args)
    pg = _parse_params(args.params, model)
    rows = curvature_table(model, pg)
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    g = pack(pg)
    pc = g + args.perturb * rng.standard_normal(g.size) * np.maximum(np.abs(g), 1e-3)
    w_o = owpdc_weights(model, pc, g)
    w_w = wpdc_weights(model, np.zeros_like(pc), pc, g)
    for row, wo, ww in zip(rows, w_o, w_w):
        row["owpdc_w"] = float(wo)
        row["wpdc_w"] = float(ww)
    if args.format == "json":
        _emit(rows, args)
    elif args.out:
        write_diagnostics_csv(args.out, rows)
        print(f"wrote {args.out}")
    else:
        print(",".join(rows[0]))
        for r in rows:
            print(",".join(str(r[k]) for k in r))


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--model", help="morphable model file (MFM1 binary or text)")
    common.add_argument("--config", help="TOML file with numeric settings")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--threads", type=int,
                        help=f"worker cap (default: ${THREADS_ENV} or 1)")
    common.add_argument("--format", choices=("png", "raw", "csv", "json"))
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="morphfit", description="3D morphable model fitting toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-model", parents=[common], help="write a procedural toy model")
    p.add_argument("--text", action="store_true", help="write the plain-text format")
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--start", type=int, default=0, help="index of the first sample")
    p.set_defaults(func=cmd_gen_data)

    for name, func, text in (("render-pncc", cmd_render_pncc, "render the PNCC code image"),
                             ("render-paf", cmd_render_paf, "pose adaptive feature responses")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--params", help="packed parameters: JSON file, JSON list or a,b,c")
        p.set_defaults(func=func)
        if name == "render-pncc":
            p.add_argument("--width", type=int, default=200)
            p.add_argument("--height", type=int, default=200)
        else:
            p.add_argument("--image")
            p.add_argument("--cascade", help="take anchors and filters from a trained cascade")
            p.add_argument("--filters", type=int, default=8)
            p.add_argument("--patch", type=int, default=5)

    p = sub.add_parser("train", parents=[common], help="train a cascade")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--test", help="held-out dataset directory")
    p.add_argument("--stages", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit", parents=[common], help="fit images with a trained cascade")
    p.add_argument("--cascade")
    p.add_argument("--data")
    p.add_argument("--index", type=int, nargs="+", help="sample ids to fit")
    p.add_argument("--image")
    p.add_argument("--bbox", type=float, nargs=4, metavar=("X", "Y", "W", "H"))
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("profile", parents=[common], help="synthesise larger-yaw views")
    p.add_argument("--image")
    p.add_argument("--params")
    p.add_argument("--step", type=float)
    p.add_argument("--limit", type=float)
    p.add_argument("--grid-step", type=float)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("eval", parents=[common], help="per-yaw NME summary and CED")
    p.add_argument("--records", help="CSV with columns id,yaw,nme")
    p.add_argument("--cascade")
    p.add_argument("--data")
    p.add_argument("--std", choices=("sample", "population"), default="sample",
                   help="spread of the bin means (default: sample)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose-cost", parents=[common],
                       help="curvature and cost weights per parameter")
    p.add_argument("--params")
    p.add_argument("--perturb", type=float, default=0.05,
                   help="relative perturbation used for the weight columns")
    p.set_defaults(func=cmd_diagnose_cost)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be at least 1")
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        # downstream reader closed early (e.g. piped into head); not an error
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0
    except (MorphfitError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
