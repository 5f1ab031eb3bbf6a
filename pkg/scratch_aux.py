"""Probe: coordinate MSE + auxiliary heatmap supervision."""
import sys
import time
import numpy as np
import torch
import usnprune as up
from usnprune.data import SceneParams, generate_dataset
from usnprune.pruning import scale_keypoints_to_output

torch.set_num_threads(2)

def gaussian_targets(kps_grid, hh, ww, sigma):
    # kps_grid: (n, K, 2) in grid units -> (n, K, hh, ww) normalized maps
    n, K, _ = kps_grid.shape
    rows = torch.arange(hh, dtype=torch.float64).reshape(1, 1, hh, 1)
    cols = torch.arange(ww, dtype=torch.float64).reshape(1, 1, 1, ww)
    r = torch.as_tensor(kps_grid[..., 0]).reshape(n, K, 1, 1)
    c = torch.as_tensor(kps_grid[..., 1]).reshape(n, K, 1, 1)
    g = torch.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2 * sigma ** 2))
    return g / g.sum(dim=(2, 3), keepdim=True)

def probe(tag, K=8, conv=(6,12,12,12), strides=(2,2,1,1), heat=(12,12), temp=1.0,
          lr=0.01, epochs=80, wd=0.0, aux=1.0, sigma_t=0.9):
    params = SceneParams(num_keypoints=K)
    ds = generate_dataset(384, 64, 32, params, seed=0)
    layers = up.cnn_small(num_keypoints=K, heatmap_shape=heat, conv_channels=conv,
                          conv_strides=strides, temperature=temp)
    net = up.Network(layers, (1, 32, 32), rng=np.random.default_rng(0))
    hh, ww = heat
    opt = torch.optim.Adam(net.parameters(), lr=lr, weight_decay=wd)
    x = torch.as_tensor(ds.train_images).reshape(-1, 1, 32, 32)
    y = torch.as_tensor(scale_keypoints_to_output(net, ds.train_keypoints))
    tmaps = gaussian_targets(ds.train_keypoints * np.array([(hh-1)/31, (ww-1)/31]), hh, ww, sigma_t)
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    for ep in range(epochs):
        perm = rng.permutation(x.shape[0])
        for s in range(0, x.shape[0], 64):
            idx = perm[s:s+64]
            tr = net.forward(x[idx], with_grad=True)
            coord = ((tr.output - y[idx]) ** 2).mean()
            logits = tr.pre_activation(net.num_linear).reshape(len(idx), K, hh, ww)
            p = torch.softmax(logits.reshape(len(idx), K, -1) / temp, dim=-1).reshape(len(idx), K, hh, ww)
            aux_loss = ((p - tmaps[idx]) ** 2).mean() * (hh * ww)
            loss = coord + aux * aux_loss
            opt.zero_grad(); loss.backward(); opt.step()
    labels = scale_keypoints_to_output(net, ds.test_keypoints)
    pred = net.outputs(torch.as_tensor(ds.test_images).reshape(-1,1,32,32)).numpy()
    err = np.abs(pred.reshape(32,-1,2) - labels.reshape(32,-1,2)).max(axis=2)
    c0 = up.lipschitz_to_output(net, 0)
    print(f"{tag}: {time.perf_counter()-t0:.0f}s err_mean={err.mean():.2f} err_p90={np.quantile(err,0.9):.2f} "
          f"frac_img_all<1={np.mean(err.max(axis=1)<1):.2f} frac_kp<1={np.mean(err<1):.2f} C0={c0:.0f}", flush=True)

which = sys.argv[1] if len(sys.argv) > 1 else ""
if which == "a":
    probe("aux1", aux=1.0)
    probe("aux5", aux=5.0)
elif which == "b":
    probe("aux5-wd1e-3", aux=5.0, wd=1e-3)
    probe("aux5-wd3e-4", aux=5.0, wd=3e-4)
