"""Train a small BEV segmentation model on synthetic scenes and evaluate it.

The defaults finish in a few minutes on one CPU. Pass ``--steps 500
--scenes 200 --model reduced`` for the full desk-scale run.

    python3 demos/train_and_evaluate.py --out /tmp/bev_run
"""
import argparse
from dataclasses import replace
from pathlib import Path

from ipmbev import training as T
from ipmbev.evaluation import corruption_specs, corruption_sweep
from ipmbev.network import BevNet


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--model", default="reduced")
    ap.add_argument("--rig", default="front")
    ap.add_argument("--steps", type=int, default=60)
    ap.add_argument("--scenes", type=int, default=24)
    ap.add_argument("--out", type=Path, default=Path("bev_run"))
    args = ap.parse_args()

    cfg = T.TrainConfig(model=args.model, rig=args.rig, steps=args.steps, n_scenes=args.scenes,
                        checkpoint_every=max(1, args.steps // 3))
    data, luts = T.make_data(cfg)
    held, _ = T.make_data(replace(cfg, n_scenes=12, dataset_seed=1))
    print(f"{len(data)} training scenes, {len(held)} held out, {luts.n_cams} camera(s)")

    before = T.evaluate(BevNet(data.cfg, cfg.seed), held, luts)

    def show(rep):
        if rep.step % 10 == 0:
            print(f"step {rep.step:4d}  lr {rep.lr:.2e}  hd {rep.loss_hd:.3f}  pv {rep.loss_pv:.3f}  "
                  f"cvml {rep.loss_jl:.3f}  total {rep.total:.3f}")

    state = T.train(data, luts, cfg, out_dir=args.out, callback=show)
    after = T.evaluate(state.model, held, luts)
    print(f"held-out mIoU {before['mIoU']:.3f} -> {after['mIoU']:.3f}")
    for k, v in after["per_class_iou"].items():
        print(f"  {k:10s} {v:.3f}")

    rows = corruption_sweep(lambda s: T.evaluate(state.model, held, luts, s),
                            corruption_specs(("camera_crash", "gaussian_noise"), (0.0, 1.0)))
    for r in rows:
        print(f"  {r['kind']:15s} severity {r['severity']:.1f}: mIoU {r['mIoU']:.3f}")
    print(f"checkpoints and log in {args.out}")


if __name__ == "__main__":
    main()
