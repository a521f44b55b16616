"""Slow, obviously-correct reference computations used by the tests."""

import numpy as np


def naive_matmul(x, w):
    n, k = x.shape
    k2, m = w.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += float(x[i, t]) * float(w[t, j])
            out[i, j] = acc
    return out


def naive_conv2d(x, w, b=None, stride=1, pad=0):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for a in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if b is None else float(b[co])
                    for ci in range(cin):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[a, ci, i * stride + p, j * stride + q] * w[co, ci, p, q]
                    out[a, co, i, j] = acc
    return out


def naive_maxpool(x, k, stride):
    n, c, h, w = x.shape
    oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for a in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    out[a, ch, i, j] = x[a, ch, i * stride : i * stride + k, j * stride : j * stride + k].max()
    return out


def central_difference(f, arr, index, step=1e-6):
    """d f / d arr[index] by central differences; ``arr`` is perturbed in place and restored."""
    old = arr[index]
    arr[index] = old + step
    hi = f()
    arr[index] = old - step
    lo = f()
    arr[index] = old
    return (hi - lo) / (2 * step)


def rel_error(a, b, floor=1e-2):
    """|a - b| / max(|a| + |b|, floor): relative, floored where central-difference roundoff (~1e-8 at step 1e-6) dominates."""
    return abs(a - b) / max(abs(a) + abs(b), floor)


def grad_check(build_loss, params, rng, samples=None, step=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``build_loss`` rebuilds the scalar loss from the current parameter data;
    ``samples`` limits how many coordinates of each parameter are probed.
    """
    for p in params:
        p.grad = None
    build_loss().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = range(p.data.size) if samples is None else rng.choice(p.data.size, size=min(samples, p.data.size), replace=False)
        for i in flat:
            idx = np.unravel_index(i, p.shape)
            num = central_difference(lambda: build_loss().item(), p.data, idx, step)
            worst = max(worst, rel_error(analytic[idx], num))
    return worst


def instrumented_madds(model):
    """Count multiplies by walking a literal nested-loop forward over every conv/dense layer.

    Returns (all multiplies, multiplies whose weight is unmasked).  Padding
    positions are counted, as a loop over the padded input would execute them.
    """
    total = kept = 0
    shape = model.input_shape
    for layer in model.layers:
        if layer.kind == "dense":
            mask = layer.weight.mask
            for i in range(layer.in_features):
                for o in range(layer.out_features):
                    total += 1
                    kept += int(mask[i, o])
        elif layer.kind == "conv2d":
            c, h, w = shape
            mask = layer.weight.mask
            oh = (h + 2 * layer.pad - layer.kh) // layer.stride + 1
            ow = (w + 2 * layer.pad - layer.kw) // layer.stride + 1
            flat = mask.tolist()
            for _ in range(oh):
                for _ in range(ow):
                    for co in range(layer.cout):
                        for ci in range(layer.cin):
                            for p in range(layer.kh):
                                row = flat[co][ci][p]
                                for q in range(layer.kw):
                                    total += 1
                                    kept += row[q]
        shape = layer.output_shape(shape)
    return total, kept
