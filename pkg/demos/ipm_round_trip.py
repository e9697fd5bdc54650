"""Render a synthetic scene into cameras, then warp the images back onto the ground grid.

A downward camera whose pixels coincide with the BEV cells reproduces the
ground texture exactly. Forward-looking cameras see distant cells through
pixels whose ground footprint is wider than a cell, so the round trip is
lossy there; the per-distance error table below shows where the loss lives.

    python3 demos/ipm_round_trip.py [--seed 3] [--resolution 0.15]
"""
import argparse

import numpy as np

from ipmbev.geometry import GridSpec, front_rig, nadir_rig, ring_rig
from ipmbev.ipm import build_ipm_lut, visibility_mask, warp_to_bev
from ipmbev.synthworld import SceneParams, generate_scene, render_raster


def round_trip(scene, rig, sampling):
    size = rig[0].size
    lut = build_ipm_lut(scene.grid, rig, 0.0, size)
    imgs = render_raster(scene.ground_texture.data, scene.grid, rig, 0.0, size, 0.0, sampling)
    back = warp_to_bev(list(imgs), lut, sampling, "mean", kind="image").data
    return back, visibility_mask(lut).data[0] > 0


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--resolution", type=float, default=0.15)
    args = ap.parse_args()

    scene = generate_scene(args.seed, SceneParams(grid=GridSpec(resolution=args.resolution)))
    tex = scene.ground_texture.data
    X, _ = scene.grid.cell_centers()
    print(f"grid {scene.grid.shape} at {args.resolution} m/cell")

    for name, rig in (("nadir", nadir_rig(scene.grid)), ("front", front_rig()), ("ring", ring_rig())):
        for sampling in ("nearest", "bilinear"):
            back, mask = round_trip(scene, rig, sampling)
            err = np.abs(back - tex).max(axis=0)
            exact = float((err[mask] == 0).mean())
            mse = float(np.mean(((back - tex)[:, mask]) ** 2))
            psnr = "inf" if mse == 0 else f"{10 * np.log10(1 / mse):.1f}"
            print(f"{name:6s} {sampling:8s} coverage {mask.mean():.2f}  exact cells {exact:.3f}  PSNR {psnr} dB")
        if name == "front":
            # error grows with range as pixel footprints outgrow the cells
            for lo, hi in ((0, 10), (10, 20), (20, 30)):
                sel = mask & (X >= lo) & (X < hi)
                print(f"        x in [{lo:2d},{hi:2d}) m: mean abs error {err[sel].mean():.4f}")


if __name__ == "__main__":
    main()
