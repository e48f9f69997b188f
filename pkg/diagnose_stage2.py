"""Scratch diagnostic: watch stage-2 dynamics step by step."""
import sys
from dataclasses import replace

import numpy as np

from voxelmark.detector import HiddenPayload, forward_detector
from voxelmark.field import RenderSettings, flatten_params, render
from voxelmark.scenes import (Box, Sphere, SyntheticSceneSpec,
                              generate_synthetic_scene, make_test_payload)
from voxelmark.training import (TrainConfig, prepare_state, stage1_fit,
                                stage2_step, build_detector_config)
from voxelmark.detector import init_detector

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
theta0 = stage1_fit(train, base)
payload = HiddenPayload("image2d", image=make_test_payload(32))

eta0, eta1, lam0, hs, epochs = (float(sys.argv[1]), float(sys.argv[2]),
                                float(sys.argv[3]), float(sys.argv[4]),
                                int(sys.argv[5]))
cfg = replace(base, eta0=eta0, eta1=eta1, lambda0=lam0,
              detector_head_scale=hs, epochs_stage2=epochs)
psi = init_detector(build_detector_config(cfg, [payload]),
                    head_scale=cfg.detector_head_scale)
state = prepare_state(train, theta0, [payload], psi, cfg)
th0_flat = flatten_params(theta0)

rng = np.random.default_rng(cfg.seed)
step = 0
for epoch in range(cfg.epochs_stage2):
    for pose in rng.permutation(len(state.cameras)):
        bd = stage2_step(state, int(pose), payload, cfg)
        step += 1
    if epoch % max(1, epochs // 12) == 0 or epoch == epochs - 1:
        cam = state.cameras[0]
        live, _ = render(state.theta, cam, cfg.render)
        g_live, y_live, _ = forward_detector(psi, live)
        g_frozen, y_frozen, _ = forward_detector(psi, state.theta0_renders[0])
        dtheta = np.abs(flatten_params(state.theta) - th0_flat)
        print(f"ep {epoch:3d} L+={bd.l_dec_plus:.4f} L-={bd.l_dec_minus:.4f} "
              f"Lc={bd.l_dec_c:.4f} Lrgb={bd.l_rgb:.5f} | "
              f"p+={g_live.marked_probability:.3f} "
              f"p-={g_frozen.marked_probability:.3f} "
              f"mean|y+|={np.abs(y_live).mean():.3f} "
              f"mean|y-|={np.abs(y_frozen).mean():.3f} "
              f"|dθ| mean={dtheta.mean():.2e} max={dtheta.max():.2e}",
              flush=True)
