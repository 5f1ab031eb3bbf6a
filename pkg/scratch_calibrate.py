"""Scratch calibration for the acceptance benchmark (not part of the package)."""
import sys
import time
import numpy as np
import torch
import usnprune as up
from usnprune.data import SceneParams, generate_dataset
from usnprune.pruning import LossWeights, PruningSchedule, TrainConfig, train, scale_keypoints_to_output

torch.set_num_threads(2)

BENCH_SCENE = SceneParams(num_keypoints=4, min_separation=7.0, background_gradient=0.06,
                          blob_amplitude_jitter=0.04,
                          blob_sigmas=(1.4, 1.4, 2.7, 2.7),
                          blob_amplitudes=(0.45, -0.45, 0.45, -0.45))

def bench_dataset(seed=0):
    return generate_dataset(384, 96, 48, BENCH_SCENE, seed=seed)

def make_cfg(rule, rho, lam_w, seed, *, epochs=60, wd=0.0, hm=5.0, temp=1.0,
             conv=(6,12,12,12), strides=(2,2,1,1), heat=(12,12), lr=0.01,
             lam_u=1.0, lam_s=1.0):
    layers = up.cnn_small(num_keypoints=4, heatmap_shape=heat, conv_channels=conv,
                          conv_strides=strides, temperature=temp)
    t_start, t_int, n_steps = 8, 2, 8
    sched = PruningSchedule(rho_final=rho, n_steps=n_steps, t_start=t_start,
                            t_end=t_start + n_steps * t_int, t_interval=t_int)
    w = LossWeights(lambda_u=lam_u, lambda_s=lam_s, lambda_w=lam_w, prune_layers=())
    perts = (up.PerturbationSpec("brightness", 1/255), up.PerturbationSpec("contrast", 0.01))
    return TrainConfig(layers=tuple(layers), input_shape=(1,32,32), epochs=epochs, schedule=sched,
                       weights=w, perturbations=perts, batch_size=64, learning_rate=lr,
                       m_samples=4, seed=seed, weight_decay=wd, prune_rule=rule,
                       heatmap_loss_weight=hm)

def summarize(tag, cfg, ds):
    t0 = time.perf_counter()
    res = train(cfg, ds)
    dt = time.perf_counter() - t0
    comp = up.compact(res.network)
    sig = up.layer_spectral_norms(comp)
    c0 = up.lipschitz_to_output(comp, 0)
    labels = scale_keypoints_to_output(comp, ds.test_keypoints)
    pred = comp.outputs(ds.test_images).numpy()
    err = np.abs(pred.reshape(48,-1,2) - labels.reshape(48,-1,2)).max(axis=2)
    print(f"{tag}: {dt:.0f}s val={res.best_val:.3f} err_mean={err.mean():.2f} "
          f"frac_kp<1={np.mean(err<1):.2f} frac_img<1={np.mean(err.max(axis=1)<1):.2f} "
          f"sig={[round(s,1) for s in sig]} C0={c0:.0f} kept={res.kept_channels}", flush=True)
    return res, comp

which = sys.argv[1] if len(sys.argv) > 1 else "wd"
ds = bench_dataset(0)

if which == "wd":
    for wd in (0.0, 3e-4, 1e-3, 3e-3):
        summarize(f"usn wd={wd}", make_cfg("usn", 0.2, 10.0, 0, wd=wd), ds)
elif which == "camp":
    wd = float(sys.argv[2])
    res, comp = summarize(f"wd={wd}", make_cfg("usn", 0.2, 10.0, 0, wd=wd), ds)
    crit = up.KeypointCriterion(delta=1.0)
    labels = scale_keypoints_to_output(comp, ds.test_keypoints)
    specs = [up.PerturbationSpec("brightness", 2/255), up.PerturbationSpec("brightness", 5/255),
             up.PerturbationSpec("contrast", 0.01), up.PerturbationSpec("contrast", 0.02),
             up.PerturbationSpec("contrast", 0.05)]
    t0 = time.perf_counter()
    rep = up.campaign({"usn": comp}, ds.test_images[:16], labels[:16], specs, crit,
                      n_cells="auto", max_cells=2048, falsify_samples=128, seed=0)
    print(f"campaign 16x5: {time.perf_counter()-t0:.0f}s")
    for s in specs:
        m = rep.summary["usn"][s.label]
        print(f"  {s.label}: acc={m['verification_accuracy']:.2f} t={m['mean_wall_time']:.2f}s kp={m['mean_correct_keypoints']:.1f}")
elif which == "trend":
    wd = float(sys.argv[2]) if len(sys.argv) > 2 else 1e-3
    crit = up.KeypointCriterion(delta=1.0)
    specs = [up.PerturbationSpec("brightness", 2/255), up.PerturbationSpec("brightness", 5/255),
             up.PerturbationSpec("contrast", 0.01), up.PerturbationSpec("contrast", 0.02),
             up.PerturbationSpec("contrast", 0.05)]
    for seed in (0, 1, 2):
        dss = bench_dataset(seed)
        nets = {}
        for rule, rho, tag in (("usn", 0.2, "usn"), ("random", 0.2, "rand"), ("none", 0.0, "full")):
            res, comp = summarize(f"s{seed}-{tag}", make_cfg(rule, rho, 10.0 if rho else 0.0, seed, wd=wd), dss)
            nets[tag] = comp
        labels = scale_keypoints_to_output(nets["usn"], dss.test_keypoints)
        t0 = time.perf_counter()
        rep = up.campaign(nets, dss.test_images[:24], labels[:24], specs, crit,
                          n_cells="auto", max_cells=2048, falsify_samples=128, seed=seed)
        print(f"  campaign: {time.perf_counter()-t0:.0f}s")
        for tag in nets:
            accs = [rep.summary[tag][s.label]["verification_accuracy"] for s in specs]
            ts = [rep.summary[tag][s.label]["mean_wall_time"] for s in specs]
            print(f"    {tag}: acc={[round(a,2) for a in accs]} mean_t={np.mean(ts):.2f}s", flush=True)
