"""Shared test helpers: finite-difference gradient probes and tiny specs."""

import numpy as np

from lapal import nncore


def fd_loss_gradient(loss_fn, trees, h=1e-5, n_probes=100, seed=0):
    """Probe d(loss)/d(param) by central differences at random coordinates.

    loss_fn() must recompute the scalar loss from the trees' current
    parameters. Returns (probe coords, fd values, analytic values); the
    caller is responsible for having accumulated analytic gradients before
    calling (they are read once, up front).
    """
    if isinstance(trees, nncore.ParamTree):
        trees = [trees]
    analytic_full = np.concatenate([t.grad_flat() for t in trees])
    flats = [t.get_flat() for t in trees]
    sizes = [f.size for f in flats]
    offsets = np.cumsum([0] + sizes)
    rng = np.random.default_rng(seed)
    coords = rng.choice(offsets[-1], size=min(n_probes, offsets[-1]), replace=False)
    fd = np.empty(len(coords))
    for j, c in enumerate(coords):
        k = np.searchsorted(offsets, c, side="right") - 1
        i = c - offsets[k]
        orig = flats[k][i]
        flats[k][i] = orig + h
        trees[k].set_flat(flats[k])
        up = loss_fn()
        flats[k][i] = orig - h
        trees[k].set_flat(flats[k])
        down = loss_fn()
        flats[k][i] = orig
        trees[k].set_flat(flats[k])
        fd[j] = (up - down) / (2.0 * h)
    return coords, fd, analytic_full[coords]


def assert_grads_close(fd, analytic, rtol=1e-4, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), floor)
    rel = np.abs(fd - analytic) / denom
    worst = float(np.max(rel))
    assert worst < rtol, f"worst relative gradient error {worst:.3e} >= {rtol}"


def scalar_probe_loss(tree, x, proj_seed=0):
    """Deterministic scalar loss: fixed random projection of the outputs."""
    rng = np.random.default_rng(proj_seed)
    w = rng.standard_normal(tree.spec.output_dim)

    def loss(record=False):
        y = tree.forward(x, record=record)
        return float(np.atleast_2d(y) @ w).real if False else float((np.atleast_2d(y) * w).sum())

    return loss, w
