"""Shared builders for randomized test networks."""

import numpy as np
import torch

from usnprune import LayerSpec, Network

torch.set_num_threads(2)


def dense_layers(dims, relu=True):
    layers = []
    for i in range(len(dims) - 1):
        layers.append(LayerSpec("dense", in_dim=dims[i], out_dim=dims[i + 1]))
        if relu and i < len(dims) - 2:
            layers.append(LayerSpec("relu"))
    return layers


def random_dense_net(rng, dims=None, relu=True, scale=1.0, head=None):
    """Dense chain on a flat input; optional soft-argmax head dims (K, H, W)."""
    if dims is None:
        n_layers = int(rng.integers(2, 5))
        dims = [int(rng.integers(3, 10)) for _ in range(n_layers + 1)]
    layers = dense_layers(dims, relu=relu)
    if head is not None:
        k, h, w = head
        assert dims[-1] == k * h * w
        layers.append(LayerSpec("soft_argmax", num_keypoints=k, height=h, width=w, temperature=1.0))
    net = Network(layers, (1, 1, dims[0]), rng=rng)
    if scale != 1.0:
        with torch.no_grad():
            for w_ in net.weights:
                w_ *= scale
    return net


def random_conv_net(rng, in_hw=(8, 8), channels=(3, 4), strides=None, dense_out=5, head=None):
    """Small conv stack plus a dense layer; optional soft-argmax head."""
    strides = strides or [int(rng.integers(1, 3)) for _ in channels]
    c, (h, w) = 1, in_hw
    layers = []
    for ch, st in zip(channels, strides):
        layers.append(LayerSpec("conv2d", in_channels=c, out_channels=ch,
                                kernel_size=3, stride=st, padding=1))
        layers.append(LayerSpec("relu"))
        c = ch
        h = (h + 2 - 3) // st + 1
        w = (w + 2 - 3) // st + 1
    if head is not None:
        k, hh, ww = head
        layers.append(LayerSpec("dense", in_dim=c * h * w, out_dim=k * hh * ww))
        layers.append(LayerSpec("soft_argmax", num_keypoints=k, height=hh, width=ww, temperature=1.0))
    else:
        layers.append(LayerSpec("dense", in_dim=c * h * w, out_dim=dense_out))
    return Network(layers, (1,) + tuple(in_hw), rng=rng)


def random_net(rng, with_head=False):
    """Mixed-family random net for property sweeps."""
    if rng.random() < 0.5:
        if with_head:
            k, h, w = 2, 3, 3
            dims = [int(rng.integers(4, 9)), int(rng.integers(4, 9)), k * h * w]
            return random_dense_net(rng, dims=dims, head=(k, h, w))
        return random_dense_net(rng)
    head = (2, 3, 3) if with_head else None
    return random_conv_net(rng, in_hw=(6, 6), channels=(int(rng.integers(2, 5)),), head=head)
