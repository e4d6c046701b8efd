import numpy as np

from survkit.cox import cox_nll
from survkit.model import cox_nll_grad

FD_STEP = 1e-5
# Entries below this magnitude are structurally zero (output bias under shift
# invariance, dead ReLU units) and are compared on this absolute scale instead.
GRAD_FLOOR = 1e-4


def finite_difference_grads(net, X, T, D, h=FD_STEP):
    numeric = {}
    for key, param, _ in net.parameters():
        g = np.zeros_like(param)
        flat = param.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = cox_nll(net.forward(X), T, D)
            flat[k] = orig - h
            down = cox_nll(net.forward(X), T, D)
            flat[k] = orig
            g.reshape(-1)[k] = (up - down) / (2 * h)
        numeric[key] = g
    return numeric


def max_relative_error(net, X, T, D):
    _, analytic = cox_nll_grad(net, X, T, D)
    numeric = finite_difference_grads(net, X, T, D)
    worst = 0.0
    for key in analytic:
        a, n = analytic[key], numeric[key]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), GRAD_FLOOR)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def random_eval_network(n_features, hidden, nodes, rng, seed=0):
    """Network with randomized batch-norm state so eval mode is non-trivial."""
    from survkit.model import CoxMLP, NetworkConfig

    cfg = NetworkConfig(hidden_layers=hidden, nodes_per_layer=nodes, dropout=0.0,
                        weight_decay=0.0, seed=seed)
    net = CoxMLP(n_features, cfg)
    for l in range(hidden):
        net.gamma[l] = rng.uniform(0.5, 1.5, nodes)
        net.beta[l] = rng.normal(0, 0.3, nodes)
        net.running_mean[l] = rng.normal(0, 0.5, nodes)
        net.running_var[l] = rng.uniform(0.5, 2.0, nodes)
    for b in net.biases:
        b[:] = rng.normal(0, 0.1, b.shape)
    return net.eval_mode()


def random_batch(rng, n=8, p=5):
    X = rng.standard_normal((n, p))
    T = rng.integers(1, 5, size=n).astype(float)  # ties on purpose
    D = rng.random(n) < 0.6
    D[0] = True
    return X, T, D
