"""Command-line front-end for every pipeline stage plus the dataset generator.

Exit codes: 0 success, 1 computation error, 2 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import re
import statistics
import sys
from pathlib import Path

import numpy as np

from . import fitting, losses, render, sh
from .images import (EquirectImage, FormatError, NormalMap, WORKING_HEIGHT, WORKING_WIDTH,
                     load_hdr, load_ldr, load_pfm, resize_bilinear, resize_normal_map,
                     save_hdr, save_ldr, save_pfm)

MANIFEST_VERSION = "1"

EXIT_OK = 0
EXIT_COMPUTE = 1
EXIT_IO = 2


def _parse_size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", text)
    if not m:
        raise argparse.ArgumentTypeError(f"size must look like 512x256, got {text!r}")
    w, h = int(m.group(1)), int(m.group(2))
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("size components must be >= 1")
    return w, h


def _parse_lambda(text: str):
    if text == "random":
        return "random"
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--lambda must be a number or 'random', got {text!r}")
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError("--lambda must lie in [0, 1]")
    return value


def _parse_weights(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("--weights expects three comma-separated numbers")
    return tuple(float(p) for p in parts)


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    return p


def _maybe_resize(image: EquirectImage, size, keep_size: bool) -> EquirectImage:
    if keep_size:
        return image
    return resize_bilinear(image, size[0], size[1])


def _maybe_resize_normals(nmap: NormalMap, size, keep_size: bool) -> NormalMap:
    if keep_size or (nmap.width, nmap.height) == size:
        return nmap
    return resize_normal_map(nmap, size[0], size[1])


def _worker_count() -> int:
    raw = os.environ.get("SPHLIGHT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = os.cpu_count() or 1
    return n


# ---------------------------------------------------------------------------
# Commands

def cmd_project(args) -> int:
    image = load_hdr(_require_file(args.input))
    image = _maybe_resize(image, args.size, args.keep_size)
    coeffs = sh.project(image, paper_literal=args.paper_literal)
    coeffs.save(args.output)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    coeffs = sh.ShCoefficients.load(_require_file(args.input))
    save_hdr(sh.reconstruct(coeffs, args.size[0], args.size[1]), args.output)
    return EXIT_OK


def cmd_relight(args) -> int:
    ldr = load_ldr(_require_file(args.ldr))
    normals = load_pfm(_require_file(args.normals))
    coeffs = sh.ShCoefficients.load(_require_file(args.coeffs))
    ldr = _maybe_resize(ldr, args.size, args.keep_size)
    normals = _maybe_resize_normals(normals, args.size, args.keep_size)
    if (ldr.width, ldr.height) != (normals.width, normals.height):
        raise ValueError(f"image is {ldr.width}x{ldr.height} but normals are "
                         f"{normals.width}x{normals.height}")
    relit = render.relight(ldr, normals, coeffs.scaled(args.scale))
    save_ldr(EquirectImage(np.clip(relit.pixels, 0.0, 1.0)), args.output)
    return EXIT_OK


def cmd_blend(args) -> int:
    a = load_hdr(_require_file(args.probe_a))
    b = load_hdr(_require_file(args.probe_b))
    a = _maybe_resize(a, args.size, args.keep_size)
    b = _maybe_resize(b, args.size, args.keep_size)
    save_hdr(render.blend_lights(a, b, args.lambda_blend), args.output)
    return EXIT_OK


def cmd_dering(args) -> int:
    coeffs = sh.ShCoefficients.load(_require_file(args.input))
    render.dering(coeffs, args.cutoff).save(args.output)
    return EXIT_OK


def cmd_prior(args) -> int:
    coeffs = sh.ShCoefficients.load(_require_file(args.input))
    losses.spectral_prior(coeffs).save(args.output)
    return EXIT_OK


def _scan_scenes(scenes_dir: Path):
    """Paired <name>.png + <name>_normals.pfm files; unpaired ones are reported."""
    pngs = {p.stem: p for p in sorted(scenes_dir.glob("*.png"))}
    pfms = {p.stem[:-len("_normals")]: p
            for p in sorted(scenes_dir.glob("*_normals.pfm"))}
    paired = sorted(set(pngs) & set(pfms))
    unpaired = sorted((set(pngs) | set(pfms)) - set(paired))
    return [(name, pngs[name], pfms[name]) for name in paired], unpaired


def cmd_gen_dataset(args) -> int:
    probes_dir = Path(args.probes)
    scenes_dir = Path(args.scenes)
    if not probes_dir.is_dir():
        raise FileNotFoundError(f"{args.probes}: no such directory")
    if not scenes_dir.is_dir():
        raise FileNotFoundError(f"{args.scenes}: no such directory")
    probe_paths = sorted(probes_dir.glob("*.hdr"))
    if len(probe_paths) < 2:
        raise ValueError(f"need at least 2 probes in {args.probes}, found {len(probe_paths)}")
    scenes, unpaired = _scan_scenes(scenes_dir)
    if unpaired:
        print(f"warning: skipped {len(unpaired)} unpaired scene file(s): "
              + ", ".join(unpaired), file=sys.stderr)
    if args.count > 0 and not scenes:
        raise ValueError(f"no paired scenes in {args.scenes}")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    size = args.size
    probes = [_maybe_resize(load_hdr(p), size, False) for p in probe_paths]
    scene_data = [(name,
                   _maybe_resize(load_ldr(png), size, False),
                   _maybe_resize_normals(load_pfm(pfm), size, False))
                  for name, png, pfm in scenes]

    def make_sample(index: int) -> dict:
        sample_seed = args.seed + index
        rng = np.random.default_rng(np.random.SeedSequence(sample_seed))
        pa, pb = (int(i) for i in rng.choice(len(probes), size=2, replace=False))
        scene_idx = int(rng.integers(len(scene_data)))
        lam = float(rng.uniform()) if args.lambda_blend == "random" else args.lambda_blend
        name, ldr, normals = scene_data[scene_idx]
        relit, gt = render.generate_relit_sample(ldr, normals, probes[pa], probes[pb],
                                                  lam, ldr_scale=args.scale)
        stem = f"sample_{index:05d}"
        save_ldr(relit, out_dir / f"{stem}.png")
        save_pfm(normals, out_dir / f"{stem}_normals.pfm")
        gt.save(out_dir / f"{stem}_coeffs.json")
        return {
            "relit_ldr_path": f"{stem}.png",
            "normals_path": f"{stem}_normals.pfm",
            "gt_coeffs_path": f"{stem}_coeffs.json",
            "probe_a_id": probe_paths[pa].stem,
            "probe_b_id": probe_paths[pb].stem,
            "lambda_blend": lam,
            "seed": sample_seed,
        }

    workers = min(_worker_count(), max(args.count, 1))
    if workers > 1 and args.count > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(make_sample, range(args.count)))
    else:
        entries = [make_sample(i) for i in range(args.count)]

    manifest = {"version": MANIFEST_VERSION, "entries": entries}
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return EXIT_OK


def _load_linear(path: str) -> EquirectImage:
    p = _require_file(path)
    if p.suffix.lower() == ".hdr":
        return load_hdr(p)
    if p.suffix.lower() == ".png":
        return load_ldr(p)
    raise FormatError(f"{path}: expected .png or .hdr input")


def cmd_fit(args) -> int:
    base = _load_linear(args.base)
    normals = load_pfm(_require_file(args.normals))
    target = _load_linear(args.target)
    base = _maybe_resize(base, args.size, args.keep_size)
    target = _maybe_resize(target, args.size, args.keep_size)
    normals = _maybe_resize_normals(normals, args.size, args.keep_size)
    weights = losses.LossWeights(lambda_sh=args.weights[0], lambda_rc=args.weights[1],
                                 lambda_rl=args.weights[2], alpha=args.alpha)
    gt = sh.ShCoefficients.load(_require_file(args.gt)) if args.gt else None
    report: dict
    if args.method == "lsq":
        coeffs = fitting.fit_least_squares(base, normals, target, ridge=args.ridge)
        if args.prior:
            coeffs = losses.spectral_prior(coeffs)
        report = {"method": "least_squares", "ridge": args.ridge, "prior": args.prior}
    else:
        cfg = fitting.FitConfig(method="gradient_descent", max_iters=args.iters,
                                step_size=args.step, momentum=args.momentum,
                                use_prior=args.prior, convergence_tol=args.tol)
        coeffs, trace = fitting.fit_gradient_descent(base, normals, target, gt=gt,
                                                     weights=weights, config=cfg)
        report = {"method": "gradient_descent", "prior": args.prior,
                  "iterations": len(trace) - 1, "final_loss": trace[-1], "trace": trace}
    coeffs.save(args.out)
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report, f, indent=2)
            f.write("\n")
    return EXIT_OK


def _load_eval_map(path: str, size, have_size: bool) -> EquirectImage:
    p = _require_file(path)
    if p.suffix.lower() == ".json":
        return sh.reconstruct(sh.ShCoefficients.load(p), size[0], size[1])
    image = load_hdr(p)
    if have_size:
        image = resize_bilinear(image, size[0], size[1])
    return image


def _evaluate_single(pred_path: str, gt_path: str, args) -> fitting.EvalResult:
    kinds = {Path(pred_path).suffix.lower(), Path(gt_path).suffix.lower()}
    if kinds == {".json", ".hdr"} and not args.size_given:
        raise ValueError("mixed coefficient/dense inputs require an explicit --size")
    pred = _load_eval_map(pred_path, args.size, args.size_given)
    gt = _load_eval_map(gt_path, args.size, args.size_given)
    if (pred.width, pred.height) != (gt.width, gt.height):
        raise ValueError(f"evaluated maps differ in size: {pred.width}x{pred.height} "
                         f"vs {gt.width}x{gt.height} (use --size)")
    return fitting.m_rmse(pred, gt, per_channel_scale=args.per_channel)


def cmd_evaluate(args) -> int:
    pred_p, gt_p = Path(args.pred), Path(args.gt)
    if pred_p.is_dir() and gt_p.is_dir():
        stems = sorted(
            {p.stem for p in pred_p.iterdir() if p.suffix.lower() in (".json", ".hdr")}
            & {p.stem for p in gt_p.iterdir() if p.suffix.lower() in (".json", ".hdr")})
        if not stems:
            raise ValueError("no matching scene files between the two directories")

        def find(d: Path, stem: str) -> str:
            for ext in (".json", ".hdr"):
                if (d / (stem + ext)).is_file():
                    return str(d / (stem + ext))
            raise FileNotFoundError(f"{d / stem}: vanished during evaluation")

        def one(stem: str):
            return stem, _evaluate_single(find(pred_p, stem), find(gt_p, stem), args)

        workers = min(_worker_count(), len(stems))
        if workers > 1:
            with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(one, stems))
        else:
            results = [one(s) for s in stems]
        values = []
        for stem, res in results:
            print(json.dumps({"scene": stem, **json.loads(res.to_json())}))
            values.append(res.m_rmse)
        print(json.dumps({"scenes": len(values),
                          "mean_m_rmse": statistics.fmean(values),
                          "median_m_rmse": statistics.median(values)}))
        return EXIT_OK
    result = _evaluate_single(args.pred, args.gt, args)
    print(result.to_json())
    return EXIT_OK


def cmd_grad_check(args) -> int:
    """Analytic-vs-finite-difference check on random, clamp-inactive instances."""
    w, h = args.size
    rng = np.random.default_rng(args.seed)
    worst = {"loss_sh": 0.0, "loss_rc": 0.0, "loss_rl": 0.0, "total_prior": 0.0}
    for _ in range(args.trials):
        # Prediction at 1.3x the truth keeps the renders separated, so the L1
        # term is smooth in the probed neighborhood (the check's precondition).
        gt = sh.ShCoefficients(_dc_dominant(rng))
        pred = sh.ShCoefficients(1.3 * gt.values)
        base = EquirectImage(rng.uniform(0.05, 1.0, (h, w, 3)))
        normals = NormalMap(sh.direction_grid(w, h).copy())
        worst["loss_sh"] = max(worst["loss_sh"], losses.check_gradients(
            lambda p: losses.loss_sh(gt, p), pred, args.eps))
        worst["loss_rc"] = max(worst["loss_rc"], losses.check_gradients(
            lambda p: losses.loss_rc(gt, p, w, h), pred, args.eps))
        worst["loss_rl"] = max(worst["loss_rl"], losses.check_gradients(
            lambda p: losses.loss_rl(base, normals, gt, p, args.alpha), pred, args.eps))

        raw = sh.ShCoefficients(_dc_dominant(rng))
        gt_prior = sh.ShCoefficients(0.5 * losses.spectral_prior(raw).values)

        def total(p):
            rep = losses.total_loss(gt_prior, p, losses.LossWeights(alpha=args.alpha),
                                    base=base, normals=normals, use_prior=True)
            return rep.total, rep.grad
        worst["total_prior"] = max(worst["total_prior"],
                                   losses.check_gradients(total, raw, args.eps))
    overall = max(worst.values())
    for name, err in worst.items():
        print(f"{name}: max relative error {err:.3e}")
    print(f"overall: {overall:.3e}")
    return EXIT_OK if overall <= 1e-4 else EXIT_COMPUTE


def _dc_dominant(rng) -> np.ndarray:
    """Random coefficients with a dominant positive DC term (keeps irradiance positive)."""
    values = rng.uniform(-0.25, 0.25, (3, 9))
    values[:, 0] = rng.uniform(1.5, 3.0, 3)
    return values


# ---------------------------------------------------------------------------
# Parser

def _add_common(p: argparse.ArgumentParser, *, size_default=(WORKING_WIDTH, WORKING_HEIGHT),
                keep_size: bool = False):
    p.add_argument("--config", metavar="FILE",
                   help="key=value defaults; explicit flags take precedence")
    p.add_argument("--size", type=_parse_size, default=size_default,
                   help=f"working resolution WxH (default {size_default[0]}x{size_default[1]})")
    if keep_size:
        p.add_argument("--keep-size", action="store_true",
                       help="skip resizing inputs to the working resolution")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sphlight",
        description="Spherical-harmonics lighting toolkit: projection, relighting, "
                    "losses and inverse lighting estimation.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("project", help="project an HDR panorama to lighting coefficients")
    p.add_argument("input"); p.add_argument("output")
    p.add_argument("--paper-literal", action="store_true",
                   help="use the uniform 4pi/N measure instead of solid-angle weights")
    _add_common(p, keep_size=True)
    p.set_defaults(func=cmd_project)

    p = subs.add_parser("reconstruct", help="render coefficients to a dense HDR map")
    p.add_argument("input"); p.add_argument("output")
    _add_common(p)
    p.set_defaults(func=cmd_reconstruct)

    p = subs.add_parser("relight", help="relight an LDR panorama with scaled coefficients")
    p.add_argument("ldr"); p.add_argument("normals"); p.add_argument("coeffs")
    p.add_argument("output")
    p.add_argument("--scale", type=float, default=render.DEFAULT_LDR_SCALE,
                   help="coefficient scale for LDR dynamic range (default 100)")
    _add_common(p, keep_size=True)
    p.set_defaults(func=cmd_relight)

    p = subs.add_parser("blend", help="convex combination of two HDR probes")
    p.add_argument("probe_a"); p.add_argument("probe_b"); p.add_argument("output")
    p.add_argument("--lambda", dest="lambda_blend", type=float, default=0.5,
                   help="blend ratio toward probe A (default 0.5)")
    _add_common(p, keep_size=True)
    p.set_defaults(func=cmd_blend)

    p = subs.add_parser("dering", help="attenuate high bands with the cosine window")
    p.add_argument("input"); p.add_argument("output")
    p.add_argument("--cutoff", type=int, default=render.DEFAULT_DERING_CUTOFF)
    p.add_argument("--config", metavar="FILE")
    p.set_defaults(func=cmd_dering)

    p = subs.add_parser("prior", help="apply the magnitude-preserving softmax prior")
    p.add_argument("input"); p.add_argument("output")
    p.add_argument("--config", metavar="FILE")
    p.set_defaults(func=cmd_prior)

    p = subs.add_parser("gen-dataset",
                        help="synthesize relit samples from probes and scenes")
    p.add_argument("--probes", required=True, help="directory of .hdr light probes")
    p.add_argument("--scenes", required=True,
                   help="directory of <name>.png + <name>_normals.pfm pairs")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lambda_blend", type=_parse_lambda, default=0.5,
                   help="blend ratio, or 'random' for per-sample uniform draws")
    p.add_argument("--scale", type=float, default=render.DEFAULT_LDR_SCALE)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_gen_dataset)

    p = subs.add_parser("fit", help="estimate lighting from base, normals and target")
    p.add_argument("base"); p.add_argument("normals"); p.add_argument("target")
    p.add_argument("--method", choices=("lsq", "gd"), default="lsq")
    p.add_argument("--prior", action="store_true")
    p.add_argument("--weights", type=_parse_weights, default=(0.01, 0.3, 0.7),
                   metavar="SH,RC,RL")
    p.add_argument("--alpha", type=float, default=losses.DEFAULT_ALPHA)
    p.add_argument("--gt", help="optional ground-truth coefficients JSON for anchored fits")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--step", type=float, default=1e-2)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--ridge", type=float, default=1e-8)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    _add_common(p, keep_size=True)
    p.set_defaults(func=cmd_fit)

    p = subs.add_parser("evaluate",
                        help="m-RMSE between predictions and ground truth "
                             "(coefficient JSON or dense HDR; directories for batches)")
    p.add_argument("pred"); p.add_argument("gt")
    p.add_argument("--per-channel", action="store_true",
                   help="median-scale each channel separately")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = subs.add_parser("grad-check", help="finite-difference validation of all gradients")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--alpha", type=float, default=losses.DEFAULT_ALPHA)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p, size_default=(64, 32))
    p.set_defaults(func=cmd_grad_check)

    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> set[str]:
    """Load key=value defaults from --config; explicit flags win via set_defaults.

    Returns the set of keys the config supplied.
    """
    if "--config" not in argv:
        return set()
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        raise ValueError("--config requires a file argument")
    path = argv[idx + 1]
    if not Path(path).is_file():
        raise FileNotFoundError(f"{path}: no such file")
    overrides = {}
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            overrides[key.strip().replace("-", "_")] = value.strip()
    if not overrides:
        return set()
    # Re-type values using each subparser option's declared type.
    sub_actions = [a for a in parser._actions
                   if isinstance(a, argparse._SubParsersAction)]
    command = next((a for a in argv if not a.startswith("-")), None)
    applied = set()
    if sub_actions and command in sub_actions[0].choices:
        sub = sub_actions[0].choices[command]
        typed = {}
        for action in sub._actions:
            if action.dest in overrides:
                raw = overrides[action.dest]
                if action.type is not None:
                    typed[action.dest] = action.type(raw)
                elif isinstance(action.const, bool) or isinstance(action.default, bool):
                    typed[action.dest] = raw.lower() in ("1", "true", "yes", "on")
                else:
                    typed[action.dest] = raw
        sub.set_defaults(**typed)
        applied = set(typed)
    return applied


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        config_keys = _apply_config(parser, argv)
        args = parser.parse_args(argv)
        args.size_given = ("size" in config_keys
                           or any(a == "--size" or a.startswith("--size=") for a in argv))
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError, PermissionError, FormatError,
            json.JSONDecodeError) as exc:
        print(f"sphlight: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, fitting.ComputationError, np.linalg.LinAlgError) as exc:
        print(f"sphlight: error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
