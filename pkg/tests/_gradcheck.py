"""Finite-difference gradient oracle and the operator case registry.

The numeric side is an independent check: central differences of the
forward value only, never touching the tape. Both test_autodiff and the
acceptance suite drive the same registry.
"""

import numpy as np

from fedrecon import ops
from fedrecon.autodiff import Tensor, backward

FD_STEP = 1e-4
FD_TOL = 1e-4


def numeric_grad(f, arrays, which, h=FD_STEP):
    """Central-difference gradient of scalar ``f(*arrays)`` wrt one input."""
    work = [a.copy() for a in arrays]
    target = work[which].reshape(-1)
    out = np.zeros_like(work[which]).reshape(-1)
    for i in range(target.size):
        orig = target[i]
        target[i] = orig + h
        fp = f(*work)
        target[i] = orig - h
        fm = f(*work)
        target[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(work[which].shape)


def max_rel_err(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_case(make_inputs, apply_fn, seed, tol=FD_TOL):
    """Assert analytic grads match central differences for one op case.

    ``apply_fn`` maps Tensors to a scalar Tensor; a fixed random
    projection inside it should scalarize multi-output ops so every
    output element gets exercised.
    """
    rng = np.random.default_rng(seed)
    arrays = make_inputs(rng)
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = apply_fn(*tensors)
    backward(loss)

    def f(*arrs):
        return apply_fn(*[Tensor(a) for a in arrs]).item()

    worst = 0.0
    for k, t in enumerate(tensors):
        num = numeric_grad(f, arrays, k)
        ana = t.grad if t.grad is not None else np.zeros_like(arrays[k])
        worst = max(worst, max_rel_err(ana, num))
    assert worst < tol, f"gradient mismatch: max rel err {worst:.3e}"
    return worst


def _fd_at(loss_fn, flat, idx, h):
    orig = flat[idx]
    flat[idx] = orig + h
    fp = loss_fn().item()
    flat[idx] = orig - h
    fm = loss_fn().item()
    flat[idx] = orig
    return (fp - fm) / (2.0 * h)


def sampled_param_fd(ps, loss_fn, n_coords=3, seed=0, tol=FD_TOL):
    """Finite-difference check on random coordinates of every parameter.

    Probes whose +-h window straddles a relu/maxpool/l1 kink make the
    numeric estimate meaningless, so each candidate is screened with a
    step-halving consistency check (central differences at h and h/2
    agree only where the loss is locally smooth) and skipped otherwise.
    """
    for _, t in ps:
        t.grad = None
    backward(loss_fn())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, t in ps:
        flat = t.data.reshape(-1)
        grad = t.grad.reshape(-1)
        checked = 0
        for idx in rng.permutation(flat.size):
            if checked >= min(n_coords, flat.size):
                break
            d1 = _fd_at(loss_fn, flat, idx, FD_STEP)
            d2 = _fd_at(loss_fn, flat, idx, FD_STEP / 2.0)
            if abs(d1 - d2) / max(abs(d1), abs(d2), 1e-3) > 1e-3:
                continue  # kink inside the probe window
            worst = max(worst, max_rel_err(np.array([grad[idx]]), np.array([d2])))
            checked += 1
        assert checked > 0, f"no smooth probe found for {name}"
    assert worst < tol, f"sampled parameter gradient mismatch: {worst:.3e}"
    return worst


def _away_from_zero(x, margin=0.05):
    s = np.where(x >= 0, 1.0, -1.0)
    return x + s * margin


def _pool_safe(rng, shape):
    """Random input whose 2x2 block maxima win by a clear margin."""
    x = rng.uniform(-1.0, 1.0, shape)
    n, c, h, w = shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
    blocks[np.arange(blocks.shape[0]), blocks.argmax(axis=1)] += 0.3
    return blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


# Each case: name -> (make_inputs(rng) -> [arrays], apply_factory(proj_rng) -> apply).
# Input sizes stay at or below 64 elements per tensor to keep FD cheap.


def _case_conv2d(rng):
    return [rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(2, 2, 3, 3))]


def _case_conv2d_strided(rng):
    return [rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(2, 2, 3, 3))]


def _build_cases():
    cases = {}

    def reg(name, make_inputs, apply_factory):
        cases[name] = (make_inputs, apply_factory)

    def scalarize(op):
        """apply_factory for ops returning arrays: project with fixed weights."""

        def factory(rng_proj):
            cache = {}

            def apply(*ts):
                out = op(*ts)
                key = out.data.shape
                if key not in cache:
                    cache[key] = rng_proj.normal(size=key)
                return (out * Tensor(cache[key])).sum()

            return apply

        return factory

    def direct(op):
        def factory(_rng_proj):
            return lambda *ts: op(*ts)

        return factory

    reg(
        "add_broadcast",
        lambda rng: [rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(3, 1, 1))],
        scalarize(ops.add),
    )
    reg(
        "mul",
        lambda rng: [rng.normal(size=(4, 4)), rng.normal(size=(4, 4))],
        scalarize(ops.mul),
    )
    reg("scale", lambda rng: [rng.normal(size=(3, 5))], scalarize(lambda t: ops.scale(t, -2.5)))
    reg("sum", lambda rng: [rng.normal(size=(3, 4))], direct(ops.tsum))
    reg("mean", lambda rng: [rng.normal(size=(2, 3, 2))], direct(ops.tmean))
    reg("log", lambda rng: [rng.uniform(0.5, 2.0, size=(3, 4))], scalarize(ops.tlog))
    reg(
        "index",
        lambda rng: [rng.normal(size=(4, 4))],
        scalarize(lambda t: ops.index(t, (slice(None), 1))),
    )
    reg(
        "relu",
        lambda rng: [_away_from_zero(rng.uniform(-1, 1, size=(3, 4, 2)))],
        scalarize(ops.relu),
    )
    reg(
        "leaky_relu",
        lambda rng: [_away_from_zero(rng.uniform(-1, 1, size=(4, 4)))],
        scalarize(lambda t: ops.leaky_relu(t, 0.2)),
    )
    reg("sigmoid", lambda rng: [rng.uniform(-3, 3, size=(2, 8))], scalarize(ops.sigmoid))
    reg("conv2d", _case_conv2d, scalarize(lambda x, w: ops.conv2d(x, w, stride=1, padding=1)))
    reg(
        "conv2d_strided",
        _case_conv2d_strided,
        scalarize(lambda x, w: ops.conv2d(x, w, stride=2, padding=0)),
    )
    reg(
        "upsample_nearest2",
        lambda rng: [rng.normal(size=(2, 2, 2, 4))],
        scalarize(ops.upsample_nearest2),
    )
    reg("maxpool2", lambda rng: [_pool_safe(rng, (2, 2, 4, 4))], scalarize(ops.maxpool2))
    reg(
        "global_avg_pool",
        lambda rng: [rng.normal(size=(2, 3, 2, 2))],
        scalarize(ops.global_avg_pool),
    )
    reg(
        "linear",
        lambda rng: [rng.normal(size=(4, 3)), rng.normal(size=(5, 3)), rng.normal(size=(5,))],
        scalarize(ops.linear),
    )
    reg(
        "concat_channels",
        lambda rng: [rng.normal(size=(2, 2, 2, 2)), rng.normal(size=(2, 3, 2, 2))],
        scalarize(ops.concat_channels),
    )

    def l1_inputs(rng):
        pred = rng.normal(size=(3, 4))
        ref = rng.normal(size=(3, 4))
        d = pred - ref
        pred = np.where(np.abs(d) < 0.05, ref + np.where(d >= 0, 0.1, -0.1), pred)
        return [pred, ref]

    reg("l1_loss", l1_inputs, direct(ops.l1_loss))
    reg(
        "bce_terms",
        lambda rng: [rng.uniform(0.1, 0.9, size=(2, 6))],
        scalarize(ops.bce_terms),
    )
    return cases


OP_CASES = _build_cases()


def run_op_case(name, seed):
    make_inputs, apply_factory = OP_CASES[name]
    # separate stream for the projection so input draws stay decoupled
    apply_fn = apply_factory(np.random.default_rng(seed + 104729))
    return check_case(make_inputs, apply_fn, seed)
