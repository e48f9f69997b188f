"""Scratch calibration: small-scale stage-2 learning-rate sweep."""
import sys
import time

import numpy as np

from voxelmark.detector import HiddenPayload
from voxelmark.field import RenderSettings
from voxelmark.metrics import psnr
from voxelmark.scenes import (Box, Sphere, SyntheticSceneSpec,
                              generate_synthetic_scene, make_test_payload)
from voxelmark.training import TrainConfig, stage1_fit, train_stega
from voxelmark.verification import evaluate_stega

spec = SyntheticSceneSpec(
    primitives=[Sphere((0.0, 0.0, 0.0), 0.55, 8.0, (0.85, 0.15, 0.1)),
                Box((-0.8, -0.8, -0.75), (0.8, 0.8, -0.55), 10.0,
                    (0.2, 0.45, 0.8))],
    resolution=(32, 32, 32), n_train_views=12, n_test_views=6,
    image_size=32, seed=7,
    render=RenderSettings(n_samples=48, t_near=1.2, t_far=5.2,
                          background=(1.0, 1.0, 1.0)))
gt, train, test = generate_synthetic_scene(spec)
base = TrainConfig(grid_resolution=(32, 32, 32), stage1_lr=2e4,
                   stage1_momentum=0.9, epochs_stage1=15, seed=0,
                   epsilon_w=0.05, render=spec.render)
t0 = time.time()
theta0 = stage1_fit(train, base)
print(f"stage1 done in {time.time()-t0:.0f}s")
ps0 = np.mean([psnr((__import__('voxelmark.field', fromlist=['render'])
                     .render(theta0, cam, base.render)[0]), img)
               for cam, img in test.frames])
print(f"theta0 test psnr {ps0:.2f}")

payload = HiddenPayload("image2d", image=make_test_payload(32))

from dataclasses import replace
combos = eval(sys.argv[1]) if len(sys.argv) > 1 else [
    (1000.0, 0.3), (3000.0, 0.3), (1000.0, 1.0), (3000.0, 1.0)]
for eta0, eta1 in combos:
    cfg = replace(base, eta0=eta0, eta1=eta1, epochs_stage2=40)
    t0 = time.time()
    try:
        thetas, psi, _ = train_stega([(train, theta0, payload)], None, cfg,
                                     mode="single")
        ev = evaluate_stega(thetas[0], theta0, psi, test, payload, cfg.render)
        print(f"eta0={eta0:g} eta1={eta1:g}: acc={ev.classifier_accuracy:.2f} "
              f"ssim={ev.mean_similarity:.3f} "
              f"psnr {ev.psnr_frozen:.2f}->{ev.psnr_live:.2f} "
              f"(drop {ev.psnr_frozen-ev.psnr_live:.2f}) "
              f"empty={ev.mean_empty_magnitude:.3f} "
              f"p_live={ev.mean_marked_prob_live:.2f} "
              f"p_frozen={ev.mean_marked_prob_frozen:.2f} "
              f"[{time.time()-t0:.0f}s]")
    except Exception as e:
        print(f"eta0={eta0:g} eta1={eta1:g}: FAILED {e}")
