"""Probe task learnability with plain training (no USN terms)."""
import sys
import time
import numpy as np
import torch
import usnprune as up
from usnprune.data import SceneParams, generate_dataset
from usnprune.pruning import LossWeights, PruningSchedule, TrainConfig, train, scale_keypoints_to_output

torch.set_num_threads(2)

def probe(tag, K=8, conv=(6,12,12,12), strides=(2,2,1,1), heat=(12,12), temp=1.0,
          lr=0.01, epochs=100, n_train=384, wd=0.0):
    params = SceneParams(num_keypoints=K)
    ds = generate_dataset(n_train, 64, 32, params, seed=0)
    layers = up.cnn_small(num_keypoints=K, heatmap_shape=heat, conv_channels=conv,
                          conv_strides=strides, temperature=temp)
    sched = PruningSchedule(rho_final=0.0, n_steps=1, t_start=1, t_end=1)
    cfg = TrainConfig(layers=tuple(layers), input_shape=(1,32,32), epochs=epochs,
                      schedule=sched, weights=LossWeights(0.0, 0.0, 0.0),
                      perturbations=(), batch_size=64, learning_rate=lr,
                      m_samples=2, seed=0, weight_decay=wd, prune_rule="none")
    t0 = time.perf_counter()
    res = train(cfg, ds)
    comp = res.network
    labels = scale_keypoints_to_output(comp, ds.test_keypoints)
    pred = comp.outputs(ds.test_images).numpy()
    err = np.abs(pred.reshape(32,-1,2) - labels.reshape(32,-1,2)).max(axis=2)
    sig = up.layer_spectral_norms(comp)
    c0 = up.lipschitz_to_output(comp, 0)
    print(f"{tag}: {time.perf_counter()-t0:.0f}s val={res.best_val:.3f} err_mean={err.mean():.2f} "
          f"err_p90={np.quantile(err,0.9):.2f} frac<1px={np.mean(err.max(axis=1)<1):.2f} C0={c0:.0f}", flush=True)

which = sys.argv[1]
if which == "a":
    probe("base-100ep")
    probe("lr3e-3", lr=3e-3)
    probe("big-capacity", conv=(12,24,24,24))
elif which == "b":
    probe("K4", K=4)
    probe("temp0.5", temp=0.5)
    probe("heat16", heat=(16,16))
elif which == "c":
    probe("K4-big-200ep", K=4, conv=(12,24,24,24), epochs=200)
    probe("more-data", n_train=1024, epochs=100)
