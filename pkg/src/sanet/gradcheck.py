"""Central finite-difference checks for every differentiable op.

All checks run in float64.  The error measure is
``|analytic - numeric| / max(1, |numeric|)``, maximised over sampled
coordinates and over random instances.  Coordinates whose probes step
across a kink of a piecewise op are left out, since neither one-sided
slope is the derivative there.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, float64_mode, record_branches

STEP = 1e-3


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def numeric_grad(f: Callable[[], float], arr: np.ndarray, coords, h: float = STEP) -> np.ndarray:
    """Central differences at ``coords``; NaN where the +-h probes cross a kink.

    A kink is any change in the discrete choices logged by the ops (ReLU
    masks, mined indices, sampling cells) between the base point and either
    probe.  Such coordinates have no meaningful central difference.
    """
    with record_branches() as base:
        f()
    out = np.empty(len(coords))
    for n, idx in enumerate(coords):
        old = arr[idx]
        arr[idx] = old + h
        with record_branches() as log_up:
            up = f()
        arr[idx] = old - h
        with record_branches() as log_down:
            down = f()
        arr[idx] = old
        smooth = _same_branches(base, log_up) and _same_branches(base, log_down)
        out[n] = (up - down) / (2 * h) if smooth else np.nan
    return out


def _max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, int]:
    ok = np.isfinite(numeric)
    err = np.abs(analytic[ok] - numeric[ok]) / np.maximum(1.0, np.abs(numeric[ok]))
    return float(err.max(initial=0.0)), int(ok.sum())


def check(fn: Callable[..., Tensor], inputs: list[Tensor], rng: np.random.Generator,
          max_coords: int = 24) -> float:
    """Max relative error of d(sum(w * fn(*inputs)))/d(inputs) for a random projection w.

    Raises if every sampled coordinate of some input straddles a kink.
    """
    with float64_mode():
        probe = fn(*inputs)
        w = rng.normal(size=probe.shape)

        def scalar():
            return float(np.sum(w * fn(*inputs).data))

        for t in inputs:
            t.requires_grad = True
        with Tape() as tape:
            loss = ad.tsum(ad.mul(fn(*inputs), Tensor(w)))
        grads = tape.gradient(loss, inputs)
        worst = 0.0
        for t, g in zip(inputs, grads):
            flat = [np.unravel_index(i, t.shape) for i in range(t.data.size)]
            if len(flat) > max_coords:
                pick = rng.choice(len(flat), size=max_coords, replace=False)
                flat = [flat[i] for i in pick]
            num = numeric_grad(scalar, t.data, flat)
            err, used = _max_rel_err(np.array([g[i] for i in flat]), num)
            if used == 0:
                raise RuntimeError(f"every probed coordinate of an input {t.shape} crosses a kink")
            worst = max(worst, err)
        return worst


TOLERANCE = 1e-4


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x)


def _off_lattice_grid(rng, n, ho, wo, h, w):
    """Normalized grid whose pixel coordinates stay clear of integers."""
    px = rng.integers(-1, w, size=(n, ho, wo)) + rng.uniform(0.15, 0.85, size=(n, ho, wo))
    py = rng.integers(-1, h, size=(n, ho, wo)) + rng.uniform(0.15, 0.85, size=(n, ho, wo))
    return np.stack([px / ((w - 1) / 2) - 1, py / ((h - 1) / 2) - 1], axis=-1)


def _tiny_model(rng, stn=True):
    from .model import SANet, SANetConfig

    cfg = SANetConfig(input_size=16, trunk_channels=(4, 6, 8), branch_channels=8,
                      embed_dim_global=4, embed_dim_part=3, num_classes=3, stn_enabled=stn,
                      seed=int(rng.integers(2**31)))
    model = SANet(cfg)
    if stn:
        # break the identity init so the sampler sees non-trivial transforms
        model.params["stn.fc2.weight"].value.data = rng.normal(0, 0.05, size=(6, 64))
        model.params["stn.fc2.bias"].value.data = np.array([0.9, 0.2, 0.05, -0.15, 1.05, -0.03])
    return model.train()


def _model_check(rng, max_coords=6) -> float:
    """Gradient of the joint objective w.r.t. a random subset of parameter entries."""
    from .losses import total_loss

    model = _tiny_model(rng)
    images = Tensor(rng.uniform(0, 1, size=(6, 3, 16, 16)))
    labels = np.array([0, 0, 1, 1, 2, 2])
    params = model.parameters()

    def scalar():
        loss, _ = total_loss(model(images), labels)
        return float(loss.data)

    with Tape() as tape:
        loss, _ = total_loss(model(images), labels)
    grads = ad.backward(tape, loss, params)
    worst = 0.0
    names = rng.choice([p.name for p in params], size=8, replace=False)
    for name in names:
        arr = model.params[name].value.data
        flat = [np.unravel_index(i, arr.shape) for i in
                rng.choice(arr.size, size=min(max_coords, arr.size), replace=False)]
        num = numeric_grad(scalar, arr, flat)
        err, _ = _max_rel_err(np.array([grads[name][i] for i in flat]), num)
        worst = max(worst, err)
    return worst


def run_suite(seed: int = 0, instances: int = 5) -> dict[str, float]:
    """Max relative error per op over ``instances`` random cases."""
    from .losses import distance_matrix
    from .stn import bilinear_sample, generate_grid, stn_forward, init_localisation

    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    def record(name, err):
        results[name] = max(results.get(name, 0.0), err)

    with float64_mode():
        def T(*shape):
            return Tensor(rng.normal(size=shape))

        for _ in range(instances):
            record("matmul", check(ad.matmul, [T(4, 5), T(5, 3)], rng))
            record("linear", check(ad.linear, [T(4, 5), T(3, 5), T(3)], rng))
            record("conv2d", check(lambda x, k, b: ad.conv2d(x, k, b, 1, 1),
                                   [T(2, 2, 5, 5), T(3, 2, 3, 3), T(3)], rng))
            record("conv2d_stride2", check(lambda x, k, b: ad.conv2d(x, k, b, 2, 2),
                                           [T(2, 2, 8, 8), T(3, 2, 5, 5), T(3)], rng))
            record("relu", check(ad.relu, [Tensor(_away_from_zero(rng, (3, 7)))], rng))
            record("global_avg_pool", check(ad.global_avg_pool, [T(2, 3, 4, 4)], rng))
            record("concat", check(lambda a, b: ad.concat([a, b]), [T(3, 2), T(3, 4)], rng))
            record("slice_spatial", check(lambda x: ad.concat(
                [ad.reshape(s, (2, -1)) for s in ad.split_spatial(x, "height")] +
                [ad.reshape(ad.slice_spatial(x, "width", 1), (2, -1))]), [T(2, 3, 4, 4)], rng))
            record("batch_norm", check(lambda x, gm, bt: ad.batch_norm(x, gm, bt)[0],
                                       [T(3, 2, 3, 3), T(2), T(2)], rng))
            record("batch_norm_2d", check(lambda x, gm, bt: ad.batch_norm(x, gm, bt)[0],
                                          [T(5, 4), T(4), T(4)], rng))
            record("channel_affine", check(ad.channel_affine, [T(2, 3, 4, 4), T(3), T(3)], rng))
            labels = rng.integers(0, 6, size=4)
            record("softmax_cross_entropy",
                   check(lambda z: ad.softmax_cross_entropy(z, labels), [T(4, 6)], rng))
            record("pairwise_distance", check(distance_matrix, [T(5, 3)], rng))
            record("generate_grid", check(lambda t: generate_grid(t, 4, 5), [T(2, 6)], rng))
            grid = Tensor(_off_lattice_grid(rng, 2, 4, 5, 6, 7))
            record("bilinear_sample", check(bilinear_sample, [T(2, 3, 6, 7), grid], rng))
            theta = Tensor(np.array([[0.9, 0.2, 0.05, -0.15, 1.05, -0.03]]) + 0.05 * rng.normal(size=(2, 6)))
            record("bilinear_sample_theta", check(
                lambda u, t: bilinear_sample(u, generate_grid(t, 5, 5)), [T(2, 3, 5, 5), theta], rng))

            loc = {p.name: p for p in init_localisation(3, rng)}
            loc["stn.fc2.weight"].value.data = rng.normal(0, 0.05, size=(6, 64))
            loc["stn.fc2.bias"].value.data = np.array([0.9, 0.2, 0.05, -0.15, 1.05, -0.03])
            loc_tensors = [p.value for p in loc.values()]
            u = T(2, 3, 8, 8)

            def stn_fn(u_, *_):
                return stn_forward(u_, loc)[0]

            record("stn_forward", check(stn_fn, [u, *loc_tensors], rng, max_coords=6))
            record("full_model", _model_check(rng))
    return results
