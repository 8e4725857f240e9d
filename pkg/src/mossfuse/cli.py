"""Command-line entry point.

Subcommands: synth, train, fuse, eval, analyze, selftest.
Settings resolve as: command-line flag > ``--config`` JSON file > built-in default.
Relative scene/output paths are resolved against ``$MOSSFUSE_DATA_DIR`` when set.
Exit status: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import degradation as deg
from .imagery import (SceneTriplet, SpectralImage, data_root, load_image, normalize_minmax,
                      read_srf_csv, save_image, write_srf_csv)

log = logging.getLogger("mossfuse")


class UsageError(Exception):
    pass


def _path(p):
    p = Path(p)
    return p if p.is_absolute() else data_root() / p


def _load_config(args):
    if getattr(args, "config", None):
        try:
            return json.loads(_path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    return {}


def _pick(flag, config, key, default):
    if flag is not None:
        return flag
    return config.get(key, default)


def save_scene(triplet: SceneTriplet, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_image(triplet.hrmsi, out_dir / "hrmsi")
    save_image(triplet.lrhsi, out_dir / "lrhsi")
    if triplet.truth is not None:
        save_image(triplet.truth, out_dir / "truth")
    meta = {"scale": triplet.scale}
    if "psf" in triplet.meta:
        meta["psf"] = triplet.meta["psf"]
    if "srf" in triplet.meta:
        write_srf_csv(np.asarray(triplet.meta["srf"]), out_dir / "srf.csv")
        meta["srf_csv"] = "srf.csv"
    (out_dir / "scene.json").write_text(json.dumps(meta, indent=2))


def load_scene(scene_dir) -> SceneTriplet:
    scene_dir = Path(scene_dir)
    meta_path = scene_dir / "scene.json"
    if not meta_path.exists():
        raise UsageError(f"{scene_dir} is not a scene directory (no scene.json)")
    meta = json.loads(meta_path.read_text())
    truth = load_image(scene_dir / "truth") if (scene_dir / "truth.json").exists() else None
    extra = {}
    if "psf" in meta:
        extra["psf"] = meta["psf"]
    if meta.get("srf_csv"):
        extra["srf"] = read_srf_csv(scene_dir / meta["srf_csv"]).tolist()
    return SceneTriplet(hrmsi=load_image(scene_dir / "hrmsi"), lrhsi=load_image(scene_dir / "lrhsi"),
                        scale=int(meta["scale"]), truth=truth, meta=extra)


def cmd_synth(args):
    cfg = _load_config(args)
    if args.truth:
        truth = load_image(_path(args.truth))
        if args.normalize:
            truth = normalize_minmax(truth)
    else:
        from .phantom import make_phantom
        size = _pick(args.size, cfg, "size", 64)
        truth = make_phantom(size, size, _pick(args.bands, cfg, "bands", 31),
                             seed=_pick(args.seed, cfg, "seed", 0))
    scale = _pick(args.scale, cfg, "scale", 4)
    l1 = _pick(args.lambda1, cfg, "lambda1", (0.5 * scale) ** 2)
    l2 = _pick(args.lambda2, cfg, "lambda2", (0.5 * scale) ** 2)
    psf = deg.PSFParams(l1, l2, _pick(args.theta, cfg, "theta", 0.0),
                        _pick(args.ksize, cfg, "ksize", None), scale)
    srf_path = _pick(args.srf, cfg, "srf", None)
    if srf_path:
        srf = deg.project_srf(read_srf_csv(_path(srf_path)))
    else:
        wl = truth.wavelengths or np.linspace(400, 700, truth.bands)
        srf = deg.gaussian_srf(wl, centers=[460.0, 545.0, 610.0], fwhm=[70.0, 80.0, 75.0])
    if srf.hsi_bands != truth.bands:
        raise UsageError(f"SRF has {srf.hsi_bands} rows but the image has {truth.bands} bands")
    triplet = deg.synthesize_triplet(truth, psf, srf)
    out = _path(args.out_dir or cfg.get("out_dir", "scene"))
    save_scene(triplet, out)
    print(json.dumps({"out_dir": str(out), "hrmsi": list(triplet.hrmsi.shape),
                      "lrhsi": list(triplet.lrhsi.shape)}))
    return 0


def cmd_train(args):
    from .network import ModelConfig, load_checkpoint
    from .training import TrainConfig, apply_ablation, build_model, train

    cfg = _load_config(args)
    scene = load_scene(_path(args.scene or cfg.get("scene", "scene")))
    if args.scale is not None and args.scale != scene.scale:
        raise UsageError(f"--scale {args.scale} disagrees with the scene's scale {scene.scale}")
    tc_dict = {k: v for k, v in cfg.items() if k in TrainConfig.__dataclass_fields__}
    weights = dict(tc_dict.get("weights", {}))
    for i in (1, 2, 3):
        v = getattr(args, f"alpha{i}")
        if v is not None:
            weights[f"alpha{i}"] = v
    tc_dict["weights"] = weights
    for flag, key in ((args.seed, "seed"), (args.epochs, "epochs"),
                      (args.ablation, "ablation"), (args.patch_size, "patch_size")):
        if flag is not None:
            tc_dict[key] = flag
    try:
        tconf = TrainConfig.from_dict(tc_dict)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc

    if args.checkpoint:
        model = load_checkpoint(_path(args.checkpoint))
    else:
        mc = dict(cfg.get("model", {}))
        if args.width is not None:
            mc["width"] = args.width
        mconf = ModelConfig(hsi_bands=scene.lrhsi.bands, msi_bands=scene.hrmsi.bands,
                            scale=scene.scale, **mc)
        model = build_model(mconf, tconf.seed)
    model = apply_ablation(model, tconf.ablation)
    out = _path(args.out_dir or cfg.get("out_dir", "run"))
    result = train(model, [scene], tconf, out_dir=out, log_every=args.log_every)
    summary = {"out_dir": str(out), "steps": len(result.log),
               "final_total": result.log[-1]["total"]}
    if result.final_metrics:
        summary["final_psnr"] = result.final_metrics["psnr"]
    print(json.dumps(summary))
    return 0


def cmd_fuse(args):
    from .network import load_checkpoint
    from .training import fuse_scene

    if not args.checkpoint:
        raise UsageError("fuse needs --checkpoint")
    model = load_checkpoint(_path(args.checkpoint))
    scene = load_scene(_path(args.scene))
    fused, _ = fuse_scene(model, scene)
    out = _path(args.out_dir or "fused")
    out.mkdir(parents=True, exist_ok=True)
    save_image(fused, out / "fused")
    print(json.dumps({"fused": str(out / "fused.bsq"), "shape": list(fused.shape)}))
    return 0


def cmd_eval(args):
    from .metrics import evaluate

    ref = load_image(_path(args.ref))
    est = load_image(_path(args.est))
    report = evaluate(ref, est, args.scale, peak=args.peak)
    text = json.dumps(report.to_json_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_analyze(args):
    from . import analysis
    from .network import DegradationUnavailableError, load_checkpoint
    from .training import fuse_scene

    if not args.checkpoint:
        raise UsageError("analyze needs --checkpoint")
    model = load_checkpoint(_path(args.checkpoint))
    scene = load_scene(_path(args.scene))
    out = _path(args.out_dir or "analysis")
    out.mkdir(parents=True, exist_ok=True)
    fused, bundle = fuse_scene(model, scene)
    stats = analysis.pca_features(bundle.features)
    analysis.save_analysis(out, stats)
    report = {"mean_shared_similarity": stats.mean_shared_similarity,
              "mean_cross_similarity": stats.mean_cross_similarity}
    if scene.truth is not None:
        _, err = analysis.error_map(scene.truth, fused, args.band, out / f"error_band{args.band}.png")
        report["error_map"] = err
    if "psf" in scene.meta and "srf" in scene.meta:
        try:
            est = model.estimate_degradation()
        except DegradationUnavailableError:
            est = None
        if est is not None:
            true_psf = deg.PSFParams(**scene.meta["psf"])
            if true_psf.kernel_size != est[0].kernel_size:
                true_psf = deg.PSFParams(true_psf.lambda1, true_psf.lambda2, true_psf.theta_k,
                                         est[0].kernel_size, true_psf.scale)
            report["degradation"] = analysis.compare_degradation(
                est, (true_psf, np.asarray(scene.meta["srf"])), out / "degradation.png")
    (out / "analysis.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report))
    return 0


def cmd_selftest(args):
    from . import selftest

    return 0 if selftest.run(sys.stdout, seed=args.seed or 0) else 1


def build_parser():
    p = argparse.ArgumentParser(prog="mossfuse", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (overridden by flags)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir")

    s = sub.add_parser("synth", help="simulate HR-MSI / LR-HSI from a truth cube")
    common(s)
    s.add_argument("--truth", help="truth image (.bsq + .json); a phantom is generated if omitted")
    s.add_argument("--normalize", action="store_true", help="min-max normalize the truth cube")
    s.add_argument("--size", type=int)
    s.add_argument("--bands", type=int)
    s.add_argument("--srf", help="SRF CSV (HSI bands x MSI bands)")
    s.add_argument("--lambda1", type=float)
    s.add_argument("--lambda2", type=float)
    s.add_argument("--theta", type=float)
    s.add_argument("--scale", type=int)
    s.add_argument("--ksize", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a scene directory")
    common(t)
    t.add_argument("--scene")
    t.add_argument("--scale", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--alpha1", type=float)
    t.add_argument("--alpha2", type=float)
    t.add_argument("--alpha3", type=float)
    t.add_argument("--ablation")
    t.add_argument("--patch-size", type=int)
    t.add_argument("--width", type=int)
    t.add_argument("--checkpoint", help="initialize from this checkpoint")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fuse", help="fuse a scene with a trained checkpoint")
    common(f)
    f.add_argument("--checkpoint")
    f.add_argument("--scene", required=True)
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("eval", help="score an estimate against a reference (JSON report)")
    e.add_argument("--ref", required=True)
    e.add_argument("--est", required=True)
    e.add_argument("--scale", type=int, required=True)
    e.add_argument("--peak", type=float, default=1.0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="feature PCA, error map and degradation comparison")
    common(a)
    a.add_argument("--checkpoint")
    a.add_argument("--scene", required=True)
    a.add_argument("--band", type=int, default=10)
    a.set_defaults(func=cmd_analyze)

    st = sub.add_parser("selftest", help="run the built-in invariant checks")
    st.add_argument("--seed", type=int)
    st.set_defaults(func=cmd_selftest)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mossfuse {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"mossfuse {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
