"""Command-line front end: ``panoflow <subcommand> ...`` (or ``python -m panoflow``)."""
import argparse
import json
import logging
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import PIL
import scipy

from . import __version__, edit, experiments
from . import estimators as es
from . import fusion as fu
from . import metrics as mt
from . import projections as pj
from . import synth
from .flowfield import FlowFormatError, flow_to_color, read_flo, read_flow, reproject_flow, write_flo, write_flow
from .imageio import read_pfm, read_png, write_pfm, write_png

log = logging.getLogger("panoflow")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4

PAIRS = ("E+C", "E+P", "C+P")
FUSION_MODES = ("blend", "oracle-lower", "oracle-upper")


class ConfigError(Exception):
    """Bad flags or config file (exit code 2)."""


class DataError(Exception):
    """Missing or malformed input data (exit code 3)."""


# ---------------------------------------------------------------------------
# helpers


def _spec_arg(text):
    try:
        return pj.ProjectionSpec.parse(text)
    except (ValueError, IndexError) as exc:
        raise argparse.ArgumentTypeError(f"bad projection {text!r}: {exc}") from exc


def chart_spec(short, eq_spec):
    """Chart spec for a projection letter at the working resolution of ``eq_spec``."""
    kind = pj.SHORT_NAMES[short]
    if kind == pj.EQUIRECT:
        return eq_spec
    if kind == pj.TRICYL:
        return pj.ProjectionSpec.tricyl(eq_spec.width)
    return pj.ProjectionSpec.cubepad(eq_spec.width // 4)


def short_name(spec):
    return {v: k for k, v in pj.SHORT_NAMES.items()}[spec.kind]


def equirect_for(spec):
    """Equirect grid matching a chart's angular resolution."""
    if spec.kind == pj.CUBEPAD:
        return pj.ProjectionSpec.equirect(4 * spec.face)
    return pj.ProjectionSpec.equirect(spec.width)


def _need_file(path, what):
    if path is None or not os.path.isfile(path):
        raise DataError(f"{what} not found: {path}")
    return path


def _out_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path!r}: {exc}") from exc
    return path


def load_png(path, what="image"):
    try:
        return read_png(_need_file(path, what))
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def read_frame(path):
    img = load_png(path, "frame")
    if img.ndim == 3:
        img = img[..., :3]
    return img


def frame_spec(img):
    h, w = img.shape[:2]
    if w != 2 * h:
        raise DataError(f"equirect frames must be 2:1, got {w}x{h}")
    return pj.ProjectionSpec.equirect(w)


def load_flow(path):
    _need_file(path, "flow")
    if path.endswith(".flo"):
        return read_flo(path)
    return read_flow(path)


def save_flow(flow, path):
    if path.endswith(".flo"):
        write_flo(flow, path)
    else:
        write_flow(flow, path)


def write_run_manifest(out, args, seeds=None):
    flags = {k: (str(v) if isinstance(v, pj.ProjectionSpec) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    record = {
        "command": args.command,
        "flags": flags,
        "seeds": seeds or {},
        "versions": {
            "panoflow": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pillow": PIL.__version__,
        },
    }
    with open(os.path.join(out, "run.json"), "w") as f:
        json.dump(record, f, indent=2, sort_keys=True, default=str)


def pair_seeds(seed, index, n=2):
    """Independent integer seeds for one pair, stable under any scheduling order."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence([seed, index]).spawn(n)]


# ---------------------------------------------------------------------------
# estimator flags


def add_estimator_args(p):
    g = p.add_argument_group("estimator")
    g.add_argument("--estimator", choices=es.ESTIMATORS, default=None, help="default blockmatch")
    g.add_argument("--levels", type=int, default=None)
    g.add_argument("--radius", type=int, default=None, help="block-match search radius (px)")
    g.add_argument("--block", type=int, default=None, help="block-match block size (px)")
    g.add_argument("--alpha", type=float, default=None, help="Horn-Schunck smoothness weight")
    g.add_argument("--iterations", type=int, default=None)
    g.add_argument("--pole-margin", type=float, default=None, help="equirect rows excluded from matching, per pole")
    g.add_argument("--perturb", default=None, help="perturbation model, e.g. 'profile=chart,bias=0.8,noise=0.4'")
    g.add_argument("--estimator-config", default=None, help="key = value file for the estimator")


def estimator_pairs(args):
    pairs = {}
    for key in ("levels", "radius", "block", "alpha", "iterations", "pole_margin"):
        if getattr(args, key, None) is not None:
            pairs[key] = str(getattr(args, key))
    if args.estimator is not None:
        pairs["kind"] = args.estimator
    if args.perturb:
        for item in args.perturb.split(","):
            if "=" not in item:
                raise ConfigError(f"bad --perturb entry {item!r}; expected key=value")
            k, v = item.split("=", 1)
            pairs["perturb." + k.strip()] = v.strip()
    if args.estimator_config:
        try:
            pairs.update(es.read_key_values(_need_file(args.estimator_config, "estimator config")))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return pairs


def estimator_config(pairs, spec, seed=0):
    """EstimatorConfig for one projection; perturbed runs get a per-projection default model."""
    pairs = dict(pairs)
    pairs["seed"] = str(seed)
    if pairs.get("kind") == es.PERTURBED and not any(k.startswith("perturb.") for k in pairs):
        model = experiments.EQUIRECT_MODEL if spec.kind == pj.EQUIRECT else experiments.TRICYL_MODEL
        for k, v in vars(model).items():
            pairs["perturb." + k] = str(v)
    try:
        return es.EstimatorConfig.from_pairs(pairs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"estimator configuration: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    if args.seed is None:
        raise ConfigError("--seed is required for generate")
    try:
        cfg = synth.DatasetConfig(
            schedule=args.schedule,
            pairs=args.pairs,
            seed=args.seed,
            width=args.width,
            n_objects=args.objects,
            sky_contrast=args.sky_contrast,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(args.out)
    manifest = synth.generate_dataset(cfg, out, threads=args.threads)
    write_run_manifest(out, args, {"dataset": args.seed})
    print(f"{manifest} ({cfg.pairs} pairs)")


def cmd_convert(args):
    src = _need_file(args.input, "input")
    out = _out_dir(args.out)
    stem, ext = os.path.splitext(os.path.basename(src))
    if ext.lower() == ".png":
        img = load_png(src)
        src_spec = args.src or frame_spec(img)
        try:
            converted = pj.resample(src_spec, img, args.to)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        path = os.path.join(out, f"{stem}.png")
        write_png(path, converted, bits=args.bits)
    elif ext.lower() in (".sfl", ".flo"):
        flow = load_flow(src)
        converted = flow if flow.spec == args.to else reproject_flow(flow, args.to)
        fmt = args.format or ext.lower()[1:]
        path = os.path.join(out, f"{stem}.{fmt}")
        try:
            save_flow(converted, path)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        raise DataError(f"cannot convert {src!r}: expected .png, .sfl or .flo")
    write_run_manifest(out, args)
    print(path)


def cmd_estimate(args):
    fa, fb = read_frame(args.frame_a), read_frame(args.frame_b)
    if fa.shape != fb.shape:
        raise DataError(f"frame sizes differ: {fa.shape} vs {fb.shape}")
    eq = frame_spec(fa)
    spec = args.spec or eq
    pairs = estimator_pairs(args)
    if pairs.get("kind") == es.PERTURBED and (args.gt is None or args.seed is None):
        raise ConfigError("the perturbed estimator needs --gt and --seed")
    cfg = estimator_config(pairs, spec, args.seed or 0)
    gt = load_flow(args.gt) if args.gt else None
    out = _out_dir(args.out)
    a = fa if spec == eq else pj.resample(eq, fa, spec)
    b = fb if spec == eq else pj.resample(eq, fb, spec)
    flow = es.estimate(a, b, spec, cfg, gt=gt)
    write_flow(flow, os.path.join(out, "flow.sfl"))
    write_png(os.path.join(out, "flow.png"), flow_to_color(flow))
    if args.to_equirect and spec != eq:
        write_flow(reproject_flow(flow, eq), os.path.join(out, "flow_equirect.sfl"))
    write_run_manifest(out, args, {"estimator": args.seed})
    print(os.path.join(out, "flow.sfl"))


def _to_equirect(flow, eq):
    return flow if flow.spec == eq else reproject_flow(flow, eq)


def cmd_fuse(args):
    a, b = load_flow(args.a), load_flow(args.b)
    gt = load_flow(args.gt) if args.gt else None
    if args.mode != "blend" and gt is None:
        raise ConfigError(f"--mode {args.mode} needs --gt")
    eq = gt.spec if gt is not None else equirect_for(a.spec)
    if eq.kind != pj.EQUIRECT:
        raise DataError("ground truth must be an equirect field")
    out = _out_dir(args.out)
    pa, pb = _to_equirect(a, eq), _to_equirect(b, eq)
    fb_a = fb_b = None
    if args.back_a and args.back_b:
        fb_a = fu.forward_backward_error(pa, _to_equirect(load_flow(args.back_a), eq))
        fb_b = fu.forward_backward_error(pb, _to_equirect(load_flow(args.back_b), eq))
    t = fu.heuristic_confidence(a.spec, b.spec, eq, fb_a, fb_b)
    write_pfm(os.path.join(out, "confidence.pfm"), t)
    fused = fu.blend(pa, pb, t)
    if gt is not None:
        lower, upper, _, _ = fu.oracle_bounds(pa, pb, gt, args.metric)
        write_flow(lower, os.path.join(out, "lower.sfl"))
        write_flow(upper, os.path.join(out, "upper.sfl"))
        fused = {"blend": fused, "oracle-lower": lower, "oracle-upper": upper}[args.mode]
    write_flow(fused, os.path.join(out, "fused.sfl"))
    write_run_manifest(out, args)
    print(os.path.join(out, "fused.sfl"))


def _load_mask(path, spec):
    if path is None:
        return None
    m = read_pfm(_need_file(path, "mask"))
    if m.shape != spec.shape:
        raise DataError(f"mask shape {m.shape} does not match {spec}")
    return m < 0.5


def _write_heatmaps(out, prefix, report, vmax=None):
    for which in ("epe", "sd"):
        img, used = mt.error_map_image(report, which, vmax.get(which) if vmax else None)
        write_png(os.path.join(out, f"{prefix}{which}.png"), img)
        write_pfm(os.path.join(out, f"{prefix}{which}.pfm"), np.nan_to_num(getattr(report, f"{which}_map"), nan=0.0))


def cmd_eval(args):
    pred, gt = load_flow(args.pred), load_flow(args.gt)
    if gt.spec.kind != pj.EQUIRECT:
        raise DataError("ground truth must be an equirect field")
    pred = _to_equirect(pred, gt.spec)
    out = _out_dir(args.out)
    report = mt.evaluate(pred, gt, _load_mask(args.mask, gt.spec))
    vmax = {"epe": args.vmax, "sd": args.vmax} if args.vmax else None
    _write_heatmaps(out, "", report, vmax)
    csv_text, txt = mt.compare_table([(args.method, args.dataset, report)])
    with open(os.path.join(out, "report.csv"), "w") as f:
        f.write(csv_text)
    with open(os.path.join(out, "report.txt"), "w") as f:
        f.write(txt)
    summary = report.row(args.method, args.dataset)
    summary.update(n_masked=report.n_masked, meta=report.meta)
    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    write_run_manifest(out, args)
    sys.stdout.write(txt)


def cmd_visualize(args):
    out = _out_dir(args.out)
    if args.flow is None and args.weights is None:
        raise ConfigError("visualize needs --flow and/or --weights")
    if args.flow:
        flow = load_flow(args.flow)
        stem = os.path.splitext(os.path.basename(args.flow))[0]
        write_png(os.path.join(out, f"{stem}_color.png"), flow_to_color(flow, args.max_flow))
    if args.weights:
        wm = pj.solid_angle_weights(args.weights)
        w = np.where(wm.owned, wm.weights, 0.0)
        name = f"weights_{args.weights.kind}"
        write_pfm(os.path.join(out, f"{name}.pfm"), w)
        write_png(os.path.join(out, f"{name}.png"), w / w.max(), bits=16)
        write_png(os.path.join(out, f"{name}_owned.png"), wm.owned.astype(np.float64))
    write_run_manifest(out, args)
    print(out)


# ---------------------------------------------------------------------------
# pipeline


def _pair_job(job):
    """Evaluate one frame pair; returns (rows, heatmaps) or raises."""
    index, rec, dataset, args, est_pairs = job
    root = rec["root"]
    fa = read_frame(os.path.join(root, rec["frame_a"]))
    fb = read_frame(os.path.join(root, rec["frame_b"]))
    gt = load_flow(os.path.join(root, rec["flow_ab"]))
    eq = frame_spec(fa)
    if gt.spec != eq:
        raise DataError(f"pair {index}: ground truth {gt.spec} does not match frames {eq}")
    mask = None
    if args.noc:
        mask = _load_mask(os.path.join(root, rec["occlusion"]), eq)

    letters = args.pair.split("+")
    specs = [chart_spec(s, eq) for s in letters]
    seeds = pair_seeds(args.seed, index, 2)
    preds, backs = [], []
    for spec, seed in zip(specs, seeds):
        cfg = estimator_config(est_pairs, spec, seed)
        a = fa if spec == eq else pj.resample(eq, fa, spec)
        b = fb if spec == eq else pj.resample(eq, fb, spec)
        preds.append(_to_equirect(es.estimate(a, b, spec, cfg, gt=gt), eq))
        if args.fb:
            gt_back = None
            if cfg.kind == es.PERTURBED:
                gt_back = load_flow(os.path.join(root, rec["flow_ba"]))
            backs.append(_to_equirect(es.estimate(b, a, spec, cfg, gt=gt_back), eq))

    methods = {letters[0]: preds[0], letters[1]: preds[1]}
    rows, reports = [], {}
    for name, flow in methods.items():
        reports[name] = mt.evaluate(flow, gt, mask)
    for mode in args.fusion:
        name = f"{args.pair} {mode}"
        if mode == "blend":
            fb_a = fb_b = None
            if args.fb:
                fb_a = fu.forward_backward_error(preds[0], backs[0])
                fb_b = fu.forward_backward_error(preds[1], backs[1])
            t = fu.heuristic_confidence(specs[0], specs[1], eq, fb_a, fb_b)
            reports[name] = mt.evaluate(fu.blend(preds[0], preds[1], t), gt, mask)
        else:
            pick = 0 if mode == "oracle-lower" else 1
            by_sd = fu.oracle_bounds(preds[0], preds[1], gt, "sd")[pick]
            by_epe = fu.oracle_bounds(preds[0], preds[1], gt, "epe")[pick]
            reports[name] = mt.evaluate(by_sd, gt, mask, sd_source=by_sd, epe_source=by_epe)
    for name, rep in reports.items():
        rows.append(rep.row(name, dataset))
    vmax = max(float(np.nanmax(r.epe_map)) if np.isfinite(r.epe_map).any() else 0.0 for r in reports.values())
    heat = {}
    if args.heatmaps:
        for name, rep in reports.items():
            img, _ = mt.error_map_image(rep, "epe", vmax)
            heat[f"{dataset}_{index:04d}_{name.replace(' ', '_').replace('+', '')}_epe.png"] = img
    return rows, heat


def cmd_pipeline(args):
    if args.seed is None:
        raise ConfigError("--seed is required for pipeline")
    if args.pair not in PAIRS:
        raise ConfigError(f"--pair must be one of {', '.join(PAIRS)}")
    bad = [m for m in args.fusion if m not in FUSION_MODES]
    if bad:
        raise ConfigError(f"unknown fusion mode(s) {bad}; choose from {', '.join(FUSION_MODES)}")
    est_pairs = estimator_pairs(args)
    estimator_config(est_pairs, pj.ProjectionSpec.equirect(64))  # validate before any work
    jobs = []
    for manifest in args.manifest:
        records = synth.read_manifest(_need_file(manifest, "manifest"))
        dataset = args.dataset or os.path.basename(os.path.dirname(os.path.abspath(manifest)))
        if args.limit:
            records = records[: args.limit]
        for rec in records:
            jobs.append((len(jobs), rec, dataset, args, est_pairs))
    if not jobs:
        raise DataError("no pairs to process")
    out = _out_dir(args.out)
    heat_dir = _out_dir(os.path.join(out, "heatmaps")) if args.heatmaps else None

    def run(job):
        try:
            return _pair_job(job)
        except (DataError, FlowFormatError, OSError, ValueError, FloatingPointError) as exc:
            log.error("pair %d quarantined: %s", job[0], exc)
            return exc

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        results = list(pool.map(run, jobs))

    rows, failures = [], []
    for job, res in zip(jobs, results):
        if isinstance(res, Exception):
            failures.append({"index": job[0], "dataset": job[2], "error": f"{type(res).__name__}: {res}"})
            continue
        pair_rows, heat = res
        for r in pair_rows:
            rows.append(dict(r, pair=job[0]))
        for name, img in heat.items():
            write_png(os.path.join(heat_dir, name), img)
    with open(os.path.join(out, "failures.jsonl"), "w") as f:
        for rec in failures:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    if not rows:
        raise DataError(f"all {len(jobs)} pairs failed; see failures.jsonl")

    with open(os.path.join(out, "pairs.csv"), "w") as f:
        f.write(mt.table_csv([dict(r, dataset=f"{r['dataset']}#{r['pair']}") for r in rows]))
    table = mt.add_averages(mt.pool_rows(rows))
    csv_text, txt = mt.table_csv(table), mt.table_text(table)
    with open(os.path.join(out, "compare.csv"), "w") as f:
        f.write(csv_text)
    with open(os.path.join(out, "compare.txt"), "w") as f:
        f.write(txt)
    write_run_manifest(out, args, {"pipeline": args.seed, "pairs": {str(j[0]): pair_seeds(args.seed, j[0]) for j in jobs}})
    sys.stdout.write(txt)
    if failures:
        log.warning("%d of %d pairs failed", len(failures), len(jobs))


# ---------------------------------------------------------------------------
# edit propagation


def _parse_xy(text):
    try:
        x, y = (int(round(float(t))) for t in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--at expects 'x,y', got {text!r}") from exc
    return x, y


def cmd_propagate_edit(args):
    records = synth.read_manifest(_need_file(args.manifest, "manifest"))
    if not 0 <= args.anchor < len(records) + 1:
        raise ConfigError(f"--anchor {args.anchor} outside the sequence")
    n = len(records) - args.anchor if args.frames is None else args.frames
    if n < 0 or args.anchor + n > len(records):
        raise DataError(f"only {len(records) - args.anchor} transitions after frame {args.anchor}")
    recs = records[args.anchor : args.anchor + n]
    root = records[0]["root"]
    first = read_frame(os.path.join(root, records[args.anchor]["frame_a"]))
    spec = frame_spec(first)
    if args.sprite:
        sprite = load_png(args.sprite, "sprite")
        if sprite.ndim != 3 or sprite.shape[2] != 4:
            raise DataError("sprite must be an RGBA PNG")
    else:
        sprite = edit.disc_sprite(args.radius)
    x, y = _parse_xy(args.at) if args.at else (spec.width // 2, spec.height // 2)
    for k, rec in enumerate(recs):
        if not rec.get("flow_ba"):
            raise DataError(f"missing backward flow for transition {args.anchor + k} -> {args.anchor + k + 1}")
        _need_file(os.path.join(root, rec["flow_ba"]), "backward flow")

    out = _out_dir(args.out)
    frame_dir = _out_dir(os.path.join(out, "frames"))
    layer = edit.place_sprite(spec.shape, sprite, x, y)
    track = []
    for k in range(n + 1):
        idx = args.anchor + k
        if k == 0:
            frame = first
        else:
            rec = recs[k - 1]
            frame = read_frame(os.path.join(root, rec["frame_b"]))
            back = load_flow(os.path.join(root, rec["flow_ba"]))
            if back.spec != spec:
                raise DataError(f"backward flow {rec['flow_ba']} is {back.spec}, frames are {spec}")
            layer = edit.advance_layer(layer, back)
        write_png(os.path.join(frame_dir, f"edit_{idx:04d}.png"), edit.composite(frame, layer))
        track.append({"frame": idx, "centroid": edit.layer_centroid(spec, layer), "alpha": float(layer[..., 3].sum())})
    with open(os.path.join(out, "track.json"), "w") as f:
        json.dump(track, f, indent=2)
    write_run_manifest(out, args)
    print(frame_dir)


# ---------------------------------------------------------------------------
# argument parsing


COMMANDS = {
    "generate": cmd_generate,
    "convert": cmd_convert,
    "estimate": cmd_estimate,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
    "visualize": cmd_visualize,
    "propagate-edit": cmd_propagate_edit,
}


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; its entries override command-line flags")
    common.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    common.add_argument("--log-level", default="INFO")

    parser = argparse.ArgumentParser(prog="panoflow", description="360-degree optical flow toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["generate"] = sub.add_parser("generate", parents=[common], help="render a synthetic dataset")
    p.add_argument("--schedule", choices=("city", "eft"), default="eft")
    p.add_argument("--pairs", type=int, default=8)
    p.add_argument("--seed", type=int, default=None, help="required")
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--objects", type=int, default=30)
    p.add_argument("--sky-contrast", type=float, default=0.5)
    p.add_argument("--out", required=True)

    p = subs["convert"] = sub.add_parser("convert", parents=[common], help="resample an image or re-project a flow")
    p.add_argument("input")
    p.add_argument("--to", type=_spec_arg, required=True, help="e.g. tricyl:512, cubepad:128:16, equirect:512")
    p.add_argument("--from", dest="src", type=_spec_arg, default=None, help="projection of an image input")
    p.add_argument("--format", choices=("sfl", "flo"), default=None, help="flow output format")
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)
    p.add_argument("--out", required=True)

    p = subs["estimate"] = sub.add_parser("estimate", parents=[common], help="estimate flow between two frames")
    p.add_argument("--frame-a", required=True)
    p.add_argument("--frame-b", required=True)
    p.add_argument("--spec", type=_spec_arg, default=None, help="projection to estimate in (default: the frames' equirect)")
    p.add_argument("--gt", default=None, help="ground truth, needed by the perturbed estimator")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--to-equirect", action="store_true")
    add_estimator_args(p)
    p.add_argument("--out", required=True)

    p = subs["fuse"] = sub.add_parser("fuse", parents=[common], help="fuse two flow predictions")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--mode", choices=FUSION_MODES, default="blend")
    p.add_argument("--metric", choices=("sd", "epe"), default="sd", help="oracle selection metric")
    p.add_argument("--gt", default=None)
    p.add_argument("--back-a", default=None, help="backward flow of A for the consistency cue")
    p.add_argument("--back-b", default=None)
    p.add_argument("--out", required=True)

    p = subs["eval"] = sub.add_parser("eval", parents=[common], help="score a flow against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask", default=None, help="occlusion PFM; pixels > 0.5 are excluded")
    p.add_argument("--method", default="pred")
    p.add_argument("--dataset", default="data")
    p.add_argument("--vmax", type=float, default=None, help="shared heatmap normaliser")
    p.add_argument("--out", required=True)

    p = subs["pipeline"] = sub.add_parser("pipeline", parents=[common], help="estimate, fuse and evaluate a dataset")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--dataset", default=None, help="dataset label (default: manifest directory name)")
    p.add_argument("--pair", default="E+C", help=", ".join(PAIRS))
    p.add_argument("--fusion", type=_csv_list, default=["blend"], help="comma list of " + ", ".join(FUSION_MODES))
    p.add_argument("--seed", type=int, default=None, help="required")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--noc", action="store_true", help="evaluate on non-occluded pixels only")
    p.add_argument("--fb", action="store_true", help="use forward-backward consistency in the blend")
    p.add_argument("--no-heatmaps", dest="heatmaps", action="store_false")
    add_estimator_args(p)
    p.add_argument("--out", required=True)

    p = subs["visualize"] = sub.add_parser("visualize", parents=[common], help="colour-code flows, export weight maps")
    p.add_argument("--flow", default=None)
    p.add_argument("--max-flow", type=float, default=None)
    p.add_argument("--weights", type=_spec_arg, default=None, help="export the solid-angle weight map of a projection")
    p.add_argument("--out", required=True)

    p = subs["propagate-edit"] = sub.add_parser("propagate-edit", parents=[common], help="carry a sprite through a sequence")
    p.add_argument("--manifest", required=True)
    p.add_argument("--anchor", type=int, default=0)
    p.add_argument("--frames", type=int, default=None, help="transitions to follow (default: to the end)")
    p.add_argument("--sprite", default=None, help="RGBA PNG (default: a disc)")
    p.add_argument("--radius", type=int, default=8)
    p.add_argument("--at", default=None, help="sprite centre 'x,y' in anchor-frame pixels")
    p.add_argument("--out", required=True)
    return parser, subs


def apply_config(args, subparser):
    """Overlay ``--config`` entries on parsed flags, converting with each flag's type."""
    if not args.config:
        return
    try:
        entries = es.read_key_values(_need_file(args.config, "config file"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    actions = {a.dest: a for a in subparser._actions}
    for key, raw in entries.items():
        dest = key.strip().lstrip("-").replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("help", "config"):
            raise ConfigError(f"unknown config key {key!r} for {args.command}")
        try:
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                value = raw.lower() in ("1", "true", "yes", "on")
                if isinstance(action, argparse._StoreFalseAction):
                    value = not value
            elif isinstance(action, argparse._AppendAction):
                value = _csv_list(raw)
            else:
                value = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"config key {key!r}: {value!r} not in {list(action.choices)}")
        setattr(args, dest, value)


def main(argv=None):
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format="%(levelname)s %(message)s")
    try:
        apply_config(args, subs[args.command])
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        COMMANDS[args.command](args)
        return EXIT_OK
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (DataError, FlowFormatError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except AssertionError as exc:
        log.error("internal assertion failed: %s", exc)
        return EXIT_INTERNAL
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
