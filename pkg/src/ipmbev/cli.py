"""``ipmbev`` command line: dataset generation, rendering, round-trip checks, training, evaluation and replay.

Exit codes: 0 success, 1 validation failure (bad config, failed check),
2 I/O failure. Every command writes ``manifest.json`` next to its outputs;
``ipmbev replay <manifest>`` re-runs it and compares artifact hashes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import tempfile
from importlib import metadata
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
ROUNDTRIP_PSNR_DB = 40.0
OUT_ENV = "IPMBEV_OUT"


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _out_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    root = Path(os.environ.get(OUT_ENV, "ipmbev_out"))
    return root / command


def _hash_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def hash_tree(root: Path, skip=("manifest.json",)) -> dict[str, str]:
    """``{relative path: sha256}`` of every file under ``root``."""
    root = Path(root)
    return {p.relative_to(root).as_posix(): _hash_file(p)
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


def write_manifest(out: Path, argv: list[str], command: str, seeds: dict, configs: list[str],
                   extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "cwd": os.getcwd(),
        "configs": configs,
        "seeds": seeds,
        "artifacts": hash_tree(out),
        "version": _version(),
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def _replace_out(argv: list[str], new_out: str) -> list[str]:
    out, i, found = [], 0, False
    while i < len(argv):
        if argv[i] == "--out" and i + 1 < len(argv):
            out += ["--out", new_out]
            i += 2
            found = True
            continue
        if argv[i].startswith("--out="):
            out.append(f"--out={new_out}")
            found = True
        else:
            out.append(argv[i])
        i += 1
    if not found:
        out += ["--out", new_out]
    return out


# -- commands -------------------------------------------------------------------------

def cmd_dataset(args) -> dict:
    from .geometry import GridSpec
    from .synthworld import SceneParams
    from .training import generate_scenes

    if args.n < 1:
        raise ValueError(f"--n must be >= 1, got {args.n}")
    out = _out_dir(args, "dataset")
    out.mkdir(parents=True, exist_ok=True)
    grid = GridSpec(resolution=args.resolution)
    for i, s in enumerate(generate_scenes(args.n, args.seed, grid, SceneParams(grid=grid))):
        s.save(out / f"scene_{i:05d}")
    print(f"wrote {args.n} scenes to {out}")
    return {"out": out, "seeds": {"seed": args.seed}}


def _size(args, default):
    return tuple(args.size) if args.size else default


def cmd_render(args) -> dict:
    from .geometry import make_rig
    from .raster import write_bevr
    from .synthworld import Scene, render_perspective

    scene = Scene.load(args.scene)
    rig = make_rig(args.rig)
    out = _out_dir(args, "render")
    out.mkdir(parents=True, exist_ok=True)
    images = render_perspective(scene, rig, args.height, _size(args, (352, 128)))
    for cam, img in zip(rig, images):
        write_bevr(out / f"cam_{cam.name}.bevr", img, "image")
    print(f"rendered {len(rig)} cameras of size {images.shape[-1]}x{images.shape[-2]} to {out}")
    return {"out": out, "seeds": {"scene": scene.seed}}


def roundtrip_report(scene, rig, size, height: float = 0.0) -> dict:
    """Render the ground texture and warp it back with both sampling routes."""
    import numpy as np

    from .ipm import build_ipm_lut, visibility_mask, warp_to_bev
    from .synthworld import render_raster

    tex = scene.ground_texture.data
    lut = build_ipm_lut(scene.grid, rig, height, size)
    mask = visibility_mask(lut).data[0] > 0
    rep = {"rig": [c.name for c in rig], "size": list(size), "coverage": float(mask.mean())}
    for sampling in ("nearest", "bilinear"):
        imgs = render_raster(tex, scene.grid, rig, height, size, 0.0, sampling)
        back = warp_to_bev(list(imgs), lut, sampling, "mean", kind="image").data
        diff = (back - tex)[:, mask]
        mse = float(np.mean(diff.astype(np.float64) ** 2)) if diff.size else 0.0
        psnr = None if mse == 0 else float(10.0 * np.log10(1.0 / mse))  # None: identical
        exact = float(np.mean(np.all(back[:, mask] == tex[:, mask], axis=0))) if mask.any() else 1.0
        rep[sampling] = {"psnr_db": psnr, "exact_fraction": exact}
    psnr = rep["bilinear"]["psnr_db"]
    rep["pass"] = bool(psnr is None or psnr >= ROUNDTRIP_PSNR_DB)
    return rep


def _fmt_psnr(v) -> str:
    return "inf" if v is None else f"{v:.2f}"


def cmd_roundtrip(args) -> dict:
    from .geometry import make_rig, nadir_rig
    from .synthworld import Scene

    scene = Scene.load(args.scene)
    rig = nadir_rig(scene.grid) if args.rig == "nadir" else make_rig(args.rig)
    size = _size(args, rig[0].size)
    rep = roundtrip_report(scene, rig, size, args.height)
    out = _out_dir(args, "roundtrip")
    out.mkdir(parents=True, exist_ok=True)
    (out / "roundtrip.json").write_text(json.dumps(rep, indent=2, sort_keys=True), encoding="utf-8")
    status = "PASS" if rep["pass"] else "FAIL"
    print(f"{status} rig={args.rig} size={size[0]}x{size[1]} "
          f"psnr={_fmt_psnr(rep['bilinear']['psnr_db'])} dB exact(nearest)={rep['nearest']['exact_fraction']:.4f}")
    result = {"out": out, "seeds": {"scene": scene.seed}}
    if not rep["pass"]:
        result["failure"] = f"round-trip PSNR below {ROUNDTRIP_PSNR_DB} dB"
    return result


def cmd_train(args) -> dict:
    from .training import TrainConfig, make_data, train

    cfg = TrainConfig.load(args.config)
    if args.steps is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "steps": args.steps})
    out = _out_dir(args, "train")
    data, luts = make_data(cfg)

    def show(r):
        if r.step % max(1, args.print_every) == 0:
            print(f"step {r.step:5d} lr {r.lr:.3e} total {r.total:.5f} "
                  f"(hd {r.loss_hd:.4f} pv {r.loss_pv:.4f} jl {r.loss_jl:.4f})", flush=True)

    state = train(data, luts, cfg, out_dir=out, resume=args.resume, callback=show)
    print(f"finished at step {state.step}; checkpoint {out / 'last.npz'}")
    return {"out": out, "seeds": {"seed": cfg.seed, "dataset_seed": cfg.dataset_seed}, "configs": [args.config]}


def _parse_corruptions(text: str):
    from .evaluation import corruption_specs
    from .synthworld import CorruptionSpec

    if text == "all":
        return corruption_specs()
    specs = []
    for item in text.split(","):
        kind, _, sev = item.partition(":")
        try:
            specs.append(CorruptionSpec(kind.strip(), float(sev) if sev else 1.0))
        except ValueError as e:
            raise ValueError(f"--corrupt {item!r}: {e}") from None
    return specs


def cmd_eval(args) -> dict:
    from .evaluation import EvalReport, average_precision_scenes, corruption_sweep, load_vectors
    from .synthworld import Scene

    out = _out_dir(args, "eval")
    report = EvalReport()
    seeds = {}
    if args.vectors:
        vec = Path(args.vectors)
        if args.scene:
            pairs = [(load_vectors(vec), Scene.load(args.scene).gt_vector)]
        elif args.dataset:
            scene_dirs = sorted(p.parent for p in Path(args.dataset).glob("*/scene.json"))
            if not scene_dirs:
                raise FileNotFoundError(f"no scene archives under {args.dataset}")
            pairs = [(load_vectors(vec / f"{d.name}.json"), Scene.load(d).gt_vector) for d in scene_dirs]
        else:
            raise ValueError("--vectors needs --scene or --dataset for the ground truth")
        ap = average_precision_scenes(pairs, interpolation=args.interpolation)
        report.per_class_ap, report.mAP = ap.per_class, ap.mAP
        print(f"mAP {ap.mAP:.4f} " + " ".join(f"{k}={v:.4f}" for k, v in ap.per_class.items()))
    if args.checkpoint:
        from .geometry import make_rig
        from .network import build_luts
        from .training import SceneDataset, evaluate, generate_scenes, load_model, load_scenes

        model = load_model(args.checkpoint)
        rig = make_rig(args.rig)
        if args.dataset:
            scenes = load_scenes(args.dataset)
        else:
            scenes = generate_scenes(args.n, args.seed, model.cfg.grid)
            seeds["seed"] = args.seed
        data = SceneDataset(scenes, rig, model.cfg)
        luts = build_luts(rig, model.cfg)
        res = evaluate(model, data, luts)
        report.per_class_iou, report.miou, report.cvml = res["per_class_iou"], res["mIoU"], res["cvml"]
        print(f"mIoU {res['mIoU']:.4f} " + " ".join(f"{k}={v:.4f}" for k, v in res["per_class_iou"].items()))
        if args.corrupt:
            specs = _parse_corruptions(args.corrupt)

            def run(spec):
                r = res if spec is None else evaluate(model, data, luts, spec)
                return {"mIoU": r["mIoU"]}

            report.corruption = corruption_sweep(run, specs)
            for row in report.corruption:
                print(f"  {row['kind']:>14s} @ {row['severity']:.2f}: mIoU {row['mIoU']:.4f}")
        if args.source_miou is not None:
            from .evaluation import generalization_ratio
            report.generalization = generalization_ratio(res["mIoU"], args.source_miou)
    if not args.vectors and not args.checkpoint:
        raise ValueError("eval needs --checkpoint and/or --vectors")
    report.save(out)
    return {"out": out, "seeds": seeds}


def cmd_augcheck(args) -> dict:
    from .augment import ALL_SPECS, AugSpec
    from .training import load_scenes

    out = _out_dir(args, "augcheck")
    out.mkdir(parents=True, exist_ok=True)
    specs = ALL_SPECS if args.aug is None else (AugSpec.parse(args.aug, args.aug_seed),)
    scenes = load_scenes(args.dataset)
    rows = [augcheck_scene(s, specs) for s in scenes]
    ok = all(r["pass"] for r in rows)
    (out / "augcheck.json").write_text(json.dumps({"pass": ok, "scenes": rows}, indent=2, sort_keys=True),
                                       encoding="utf-8")
    print(f"{'PASS' if ok else 'FAIL'}: {sum(r['pass'] for r in rows)}/{len(rows)} scenes, {len(specs)} specs each")
    result = {"out": out, "seeds": {"aug_seed": args.aug_seed}}
    if not ok:
        result["failure"] = "augmentation invariant violated"
    return result


def _block_max(data, f: int):
    C, H, W = data.shape
    return data.reshape(C, H // f, f, W // f, f).max(axis=(2, 4))


def augcheck_scene(scene, specs) -> dict:
    """Inverse law, physical alignment across resolutions and IoU invariance for one scene.

    Coarser rasters are block maxima of the labels at every factor in (2, 4)
    that divides the grid; augmenting then coarsening must equal coarsening
    then augmenting.
    """
    import numpy as np

    from .augment import apply_backward, apply_forward, apply_to_points
    from .evaluation import iou

    grid = scene.grid
    sem = scene.gt_semantic.data
    tex = scene.ground_texture.data
    H, W = grid.shape
    factors = [f for f in (2, 4) if H % f == 0 and W % f == 0]
    coarse = {f: _block_max(sem, f) for f in factors}
    fg = sem[0] != 0
    shifted = np.roll(fg, 1, axis=1)
    checks = {"inverse": True, "alignment": True, "iou": True}
    X, Y = grid.cell_centers()
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    for spec in specs:
        for r in (sem, tex, *coarse.values()):
            if not np.array_equal(apply_backward(spec, apply_forward(spec, r)), r):
                checks["inverse"] = False
        moved = apply_to_points(spec, pts, grid)
        i, j = grid.to_grid_coords(moved[:, 0], moved[:, 1])
        i, j = np.floor(i).astype(int), np.floor(j).astype(int)
        fwd = apply_forward(spec, sem[0])
        if not np.array_equal(fwd[j, i], sem[0].ravel()):
            checks["alignment"] = False
        for f, c in coarse.items():
            if not np.array_equal(apply_forward(spec, c), _block_max(apply_forward(spec, sem), f)):
                checks["alignment"] = False
        if iou(apply_forward(spec, shifted), apply_forward(spec, fg)) != iou(shifted, fg):
            checks["iou"] = False
    return {"seed": int(scene.seed), "factors": factors, **checks, "pass": all(checks.values())}


def cmd_replay(args) -> dict:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    tmp = Path(tempfile.mkdtemp(prefix="ipmbev_replay_"))
    try:
        argv = _replace_out(manifest["argv"], str(tmp))
        cwd = os.getcwd()
        os.chdir(manifest.get("cwd", cwd))
        try:
            code = main(argv)
        finally:
            os.chdir(cwd)
        got = hash_tree(tmp)
        want = manifest["artifacts"]
        same = code == EXIT_OK and got == want
        diff = sorted(k for k in set(got) | set(want) if got.get(k) != want.get(k))
        print(f"replay {'IDENTICAL' if same else 'DIFFERENT'}: {len(want)} artifacts"
              + (f"; differing: {', '.join(diff[:10])}" if diff else ""))
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    result = {"out": None}
    if not same:
        result["failure"] = "replayed artifacts differ from the manifest"
    return result


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ipmbev", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS/OpenMP thread count; 1 gives bitwise-reproducible runs")
    sub = p.add_subparsers(dest="command", required=True)

    def out_arg(sp):
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command> or ./ipmbev_out/<command>)")

    sp = sub.add_parser("dataset", help="generate seeded synthetic scenes")
    sp.add_argument("--n", type=int, default=10, help="number of scenes")
    sp.add_argument("--seed", type=int, default=0, help="base seed")
    sp.add_argument("--resolution", type=float, default=0.15, help="BEV cell size in meters")
    out_arg(sp)

    sp = sub.add_parser("render", help="render camera images of one scene as cam_<name>.bevr files")
    sp.add_argument("--scene", required=True, help="scene directory")
    sp.add_argument("--rig", default="ring", help="rig preset (front, stereo, ring, nadir) or rig JSON path")
    sp.add_argument("--size", type=int, nargs=2, metavar=("W", "H"), help="image size (default 352 128)")
    sp.add_argument("--height", type=float, default=0.0, help="ground-plane height")
    out_arg(sp)

    sp = sub.add_parser("roundtrip", help="render then warp back; PASS when bilinear PSNR >= 40 dB")
    sp.add_argument("--scene", required=True, help="scene directory")
    sp.add_argument("--rig", default="nadir", help="rig preset or rig JSON path (nadir is built for the scene grid)")
    sp.add_argument("--size", type=int, nargs=2, metavar=("W", "H"), help="image size (default: the rig's native size)")
    sp.add_argument("--height", type=float, default=0.0, help="ground-plane height")
    out_arg(sp)

    sp = sub.add_parser("train", help="train from a JSON config")
    sp.add_argument("--config", required=True, help="training config JSON")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--steps", type=int, help="override config steps")
    sp.add_argument("--print-every", type=int, default=10, help="progress line interval")
    out_arg(sp)

    sp = sub.add_parser("eval", help="IoU/CVML from a checkpoint and/or AP from vector files")
    sp.add_argument("--checkpoint", help="model checkpoint (.npz)")
    sp.add_argument("--dataset", help="scene directory tree (default: generate --n scenes from --seed)")
    sp.add_argument("--scene", help="single scene directory (for --vectors)")
    sp.add_argument("--n", type=int, default=50, help="held-out scene count when generating")
    sp.add_argument("--seed", type=int, default=1, help="held-out base seed when generating")
    sp.add_argument("--rig", default="ring", help="rig preset or rig JSON path")
    sp.add_argument("--vectors", help="vector JSON file (with --scene) or directory of <scene>.json (with --dataset)")
    sp.add_argument("--interpolation", choices=("area", "101"), default="area", help="AP interpolation")
    sp.add_argument("--corrupt", help="'all' or kind:severity[,kind:severity...]")
    sp.add_argument("--source-miou", type=float, help="in-domain mIoU for the generalization ratio")
    out_arg(sp)

    sp = sub.add_parser("augcheck", help="check augmentation invariants on a dataset")
    sp.add_argument("--dataset", required=True, help="scene directory tree")
    sp.add_argument("--aug", help="flags to check, e.g. 'h,v' (default: all 8 combinations)")
    sp.add_argument("--aug-seed", type=int, default=0, help="seed recorded with the spec")
    out_arg(sp)

    sp = sub.add_parser("replay", help="re-run a manifest and compare artifact hashes")
    sp.add_argument("manifest", help="manifest.json path")
    return p


COMMANDS = {"dataset": cmd_dataset, "render": cmd_render, "roundtrip": cmd_roundtrip, "train": cmd_train,
            "eval": cmd_eval, "augcheck": cmd_augcheck, "replay": cmd_replay}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    _set_threads(args.threads)
    from .network import ConfigError

    try:
        result = COMMANDS[args.command](args)
    except (ConfigError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    out = result.get("out")
    if out is not None:
        write_manifest(Path(out), argv, args.command, result.get("seeds", {}), result.get("configs", []))
    if "failure" in result:
        print(f"check failed: {result['failure']}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
