"""Independent oracles shared by the test suite.

The gradient oracle is plain central finite differences over the flat parameter
vector; it never touches the analytic backward path. Relu kinks make FD invalid
when a preactivation sits within the perturbation's reach of zero, so random
test cases are filtered by a margin on the unperturbed preactivations.
"""

import numpy as np

from fsdetect.embedding import (Conv2d, EmbeddingNetwork, Flatten, FullyConnected,
                                NetworkConfig, Relu, forward, init_network)
from fsdetect.episodes import Episode
from fsdetect.protonet import episode_loss


def central_diff(loss_fn, params, h=1e-4):
    """d loss / d params via (f(x+h) - f(x-h)) / 2h, one coordinate at a time."""
    grad = np.zeros_like(params, dtype=np.float64)
    for i in range(params.size):
        p = params.copy()
        p[i] += h
        up = loss_fn(p)
        p[i] -= 2 * h
        down = loss_fn(p)
        grad[i] = (up - down) / (2 * h)
    return grad


def max_rel_error(analytic, numeric, floor=1e-6):
    """Elementwise relative error where either gradient is meaningfully nonzero."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    mask = scale > floor
    if not mask.any():
        return 0.0
    return float((np.abs(analytic - numeric)[mask] / scale[mask]).max())


def relu_margin(net, batch):
    """Smallest |preactivation| feeding any relu for this batch (inf if no relu)."""
    _, trace = forward(net, batch, keep_trace=True)
    margins = [np.abs(cache).min()
               for layer, cache in zip(net.layers, trace.caches)
               if type(layer).__name__ == "_ReluLayer" and cache is not None]
    return min(margins) if margins else np.inf


def random_vector_net(rng, max_hidden=8):
    d = int(rng.integers(2, 7))
    h1 = int(rng.integers(3, max_hidden + 1))
    m = int(rng.integers(2, 6))
    cfg = NetworkConfig((d,), (FullyConnected(h1), Relu(), FullyConnected(m)),
                        m, seed=int(rng.integers(0, 2**31)))
    return init_network(cfg).astype(np.float64)


def random_conv_net(rng):
    c = int(rng.integers(1, 3))
    m = int(rng.integers(2, 5))
    cfg = NetworkConfig((c, 6, 6),
                        (Conv2d(2, 3, 1), Relu(), Conv2d(3, 2, 2), Relu(),
                         Flatten(), FullyConnected(m)),
                        m, seed=int(rng.integers(0, 2**31)))
    return init_network(cfg).astype(np.float64)


def random_episode(rng, input_shape, n_classes=None, n_support=None, n_query=None):
    nc = n_classes or int(rng.integers(2, 4))
    ns = n_support or int(rng.integers(1, 4))
    nq = n_query or int(rng.integers(1, 4))
    sup = rng.normal(scale=1.5, size=(nc, ns, *input_shape))
    qry = rng.normal(scale=1.5, size=(nc, nq, *input_shape))
    return Episode(tuple(range(nc)), sup, qry,
                   tuple(() for _ in range(nc)), tuple(() for _ in range(nc)))


def well_conditioned_pair(rng, conv=False, margin=None, tries=200):
    """(float64 net, episode) whose relu preactivations stay clear of zero, so the
    finite-difference oracle is valid at h=1e-4.

    An h-sized parameter step moves any preactivation by at most ~6e-4 for these
    input scales; the margins keep a 3x safety factor. Conv nets expose far more
    preactivations, so they get the tighter (but still safe) margin and tiny
    episodes.
    """
    if margin is None:
        margin = 2e-3 if conv else 1e-2
    for _ in range(tries):
        if conv:
            net = random_conv_net(rng)
            episode = random_episode(rng, net.config.input_shape,
                                     n_classes=2, n_support=1, n_query=1)
        else:
            net = random_vector_net(rng)
            episode = random_episode(rng, net.config.input_shape)
        batch = np.concatenate([
            episode.support.reshape(-1, *net.config.input_shape),
            episode.query.reshape(-1, *net.config.input_shape),
        ])
        if relu_margin(net, batch) >= margin:
            return net, episode
    raise AssertionError("could not find a kink-free (net, episode) pair")


def episode_loss_of(net, episode):
    def loss_fn(params):
        loss, _ = episode_loss(EmbeddingNetwork(net.config, params), episode)
        return loss
    return loss_fn
