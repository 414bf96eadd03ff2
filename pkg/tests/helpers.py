"""Shared oracles: finite differences, naive loops, tiny datasets."""

from __future__ import annotations

import numpy as np

from episeg import tensor as T
from episeg.tensor import Tensor

FD_EPS = 1e-5
FD_RTOL = 1e-6


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, x: np.ndarray, eps: float = FD_EPS) -> np.ndarray:
    """Central differences of the scalar function ``f`` (which reads ``x`` in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def gradcheck(build, inputs: list[Tensor], eps: float = FD_EPS) -> float:
    """Largest relative error between tape gradients and central differences.

    ``build(*inputs)`` must return a scalar Tensor.
    """
    for t in inputs:
        t.zero_grad()
    with T.Tape() as tape:
        loss = build(*inputs)
    T.backward(tape, loss)
    analytic = [t.grad.copy() for t in inputs]

    def value():
        with T.no_tape():
            return build(*inputs).item()

    worst = 0.0
    for t, a in zip(inputs, analytic):
        worst = max(worst, rel_err(a, numeric_grad(value, t.data, eps)))
    return worst


def projected(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Random linear functional of ``out`` so every Jacobian entry is exercised."""
    R = Tensor(rng.normal(size=out.shape))
    return T.tensor_sum(T.mul(out, R))


def naive_conv2d(x, k, b, stride=1, pad=0):
    C, H, W = x.shape
    cout, cin, kh, kw = k.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, Ho, Wo))
    for o in range(cout):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for c in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            acc += k[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = acc + b[o]
    return out


def brute_counts(preds, gts, classes):
    """Single pass over every pixel of every episode."""
    tp, fp, fn = {}, {}, {}
    for pred, gt, c in zip(preds, gts, classes):
        for p, g in zip(np.asarray(pred).ravel(), np.asarray(gt).ravel()):
            tp[c] = tp.get(c, 0) + int(p and g)
            fp[c] = fp.get(c, 0) + int(p and not g)
            fn[c] = fn.get(c, 0) + int((not p) and g)
    return tp, fp, fn


def _leaf(rng, shape, scale=1.0, away_from_zero=False):
    x = rng.normal(scale=scale, size=shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 0.05, np.sign(x) * 0.05 + x, x)
    return Tensor(x, requires_grad=True)


def _distinct(rng, shape):
    # well separated values keep max pooling away from ties
    return Tensor(rng.permutation(int(np.prod(shape))).reshape(shape) * 0.1 + rng.uniform(0, 0.01, size=shape),
                  requires_grad=True)


def op_cases():
    """name -> factory(rng) -> (build, inputs) for every differentiable op."""

    def unary(op, **kw):
        def make(rng):
            x = _leaf(rng, tuple(rng.integers(1, 5, size=2)), **kw)
            R = rng.normal(size=x.shape)
            return (lambda x: T.tensor_sum(T.mul(op(x), Tensor(R)))), [x]
        return make

    def binary(op):
        def make(rng):
            shape = tuple(rng.integers(1, 5, size=2))
            bshape = (1, shape[1]) if rng.random() < 0.5 else shape
            a, b = _leaf(rng, shape), _leaf(rng, bshape)
            R = rng.normal(size=shape)
            return (lambda a, b: T.tensor_sum(T.mul(op(a, b), Tensor(R)))), [a, b]
        return make

    def conv(rng):
        cin, cout = rng.integers(1, 4, size=2)
        H, W = rng.integers(4, 8, size=2)
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x, k, b = _leaf(rng, (cin, H, W)), _leaf(rng, (cout, cin, 3, 3)), _leaf(rng, (cout,))
        R = rng.normal(size=((cout, (H + 2 * pad - 3) // stride + 1, (W + 2 * pad - 3) // stride + 1)))
        return (lambda x, k, b: T.tensor_sum(T.mul(T.conv2d(x, k, b, stride, pad), Tensor(R)))), [x, k, b]

    def maxpool(rng):
        shape = (int(rng.integers(1, 4)), int(rng.integers(2, 7)), int(rng.integers(2, 7)))
        x = _distinct(rng, shape)
        R = rng.normal(size=(shape[0], shape[1] // 2, shape[2] // 2))
        return (lambda x: T.tensor_sum(T.mul(T.maxpool2(x), Tensor(R)))), [x]

    def gap(rng):
        x = _leaf(rng, tuple(rng.integers(1, 5, size=3)))
        R = rng.normal(size=x.shape[0])
        return (lambda x: T.tensor_sum(T.mul(T.global_avg_pool(x), Tensor(R)))), [x]

    def linear(rng):
        m, n = rng.integers(1, 6, size=2)
        x, W, b = _leaf(rng, (m,)), _leaf(rng, (n, m)), _leaf(rng, (n,))
        R = rng.normal(size=n)
        return (lambda x, W, b: T.tensor_sum(T.mul(T.linear(x, W, b), Tensor(R)))), [x, W, b]

    def upsample(rng):
        C, h, w = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5)
        H, W = h + int(rng.integers(0, 6)), w + int(rng.integers(0, 6))
        x = _leaf(rng, (C, h, w))
        R = rng.normal(size=(C, H, W))
        return (lambda x: T.tensor_sum(T.mul(T.bilinear_upsample(x, H, W), Tensor(R)))), [x]

    def gather(rng):
        m, d = int(rng.integers(1, 6)), int(rng.integers(1, 10))
        idx = rng.integers(0, m, size=d)
        sign = rng.choice([-1.0, 1.0], size=d)
        x = _leaf(rng, (m,))
        R = rng.normal(size=d)
        return (lambda x: T.tensor_sum(T.mul(T.signed_gather(x, idx, sign), Tensor(R)))), [x]

    def pix_logits(rng):
        D, h, w = rng.integers(1, 5, size=3)
        F, wv, b = _leaf(rng, (D, h, w)), _leaf(rng, (D,)), _leaf(rng, (1,))
        R = rng.normal(size=(h, w))
        return (lambda F, wv, b: T.tensor_sum(T.mul(T.pixel_logits(F, wv, b), Tensor(R)))), [F, wv, b]

    def gather_pixels(rng):
        C, h, w = rng.integers(1, 4, size=3)
        idx = rng.integers(0, h * w, size=int(rng.integers(1, 6)))
        F = _leaf(rng, (C, h, w))
        R = rng.normal(size=(len(idx), C))
        return (lambda F: T.tensor_sum(T.mul(T.pixels(F, idx), Tensor(R)))), [F]

    def bce(rng):
        shape = tuple(rng.integers(1, 5, size=2))
        z = _leaf(rng, shape)
        t = rng.integers(0, 2, size=shape)
        return (lambda z: T.bce_sum(T.sigmoid(z), t)), [z]

    def bce_logits(rng):
        shape = tuple(rng.integers(1, 5, size=2))
        z = _leaf(rng, shape, scale=2.0)
        t = rng.integers(0, 2, size=shape)
        return (lambda z: T.bce_with_logits_sum(z, t)), [z]

    def softmax_ce(rng):
        C, h, w = int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        z = _leaf(rng, (C, h, w))
        lab = rng.integers(0, C, size=(h, w))
        return (lambda z: T.softmax_cross_entropy_sum(z, lab)), [z]

    def wl1(rng):
        N, M, C = rng.integers(1, 4, size=3)
        a, b = _leaf(rng, (N, C)), _leaf(rng, (M, C))
        # keep |a - b| away from the kink at zero
        b.data += np.where(rng.random((M, C)) < 0.5, 3.0, -3.0)
        weight, bias = _leaf(rng, (C,)), _leaf(rng, (1,))
        R = rng.normal(size=(N, M))
        return (lambda a, b, al, be: T.tensor_sum(T.mul(T.weighted_l1_logits(a, b, al, be), Tensor(R)))), [a, b, weight, bias]

    def norm_ch(rng):
        C, h, w = rng.integers(1, 4, size=3)
        mu, sd = rng.normal(size=C), rng.uniform(0.5, 2.0, size=C)
        F = _leaf(rng, (C, h, w))
        R = rng.normal(size=F.shape)
        return (lambda F: T.tensor_sum(T.mul(T.normalize_channels(F, mu, sd), Tensor(R)))), [F]

    def misc(rng):
        x = _leaf(rng, (int(rng.integers(2, 6)),))
        y = _leaf(rng, (int(rng.integers(1, 4)),))
        return (lambda x, y: T.mean(T.concat([T.reshape(T.getitem(x, slice(1, None)), (-1,)), T.mul(y, y)]))), [x, y]

    return {
        "add": binary(T.add), "sub": binary(T.sub), "mul": binary(T.mul),
        "relu": unary(T.relu, away_from_zero=True), "sigmoid": unary(T.sigmoid),
        "log": lambda rng: ((lambda x: T.tensor_sum(T.log(x))),
                            [Tensor(rng.uniform(0.5, 2.0, size=(3, 2)), requires_grad=True)]),
        "conv2d": conv, "maxpool2": maxpool, "global_avg_pool": gap, "linear": linear,
        "bilinear_upsample": upsample, "signed_gather": gather, "pixel_logits": pix_logits,
        "pixels": gather_pixels, "normalize_channels": norm_ch, "bce_sum": bce,
        "bce_with_logits_sum": bce_logits, "softmax_cross_entropy_sum": softmax_ce,
        "weighted_l1_logits": wl1, "reshape/getitem/concat/mean": misc,
    }


def tiny_model_config(**kw):
    from episeg.model import ModelConfig
    base = dict(image_size=16, cond_channels=(2, 3), cond_first_stride=1, seg_channels=(2, 3),
                head_dim=4, hash_seed=5, seed=3)
    base.update(kw)
    return ModelConfig(**base)


def episode_pipeline_case(rng):
    """Full one-shot loss on a tiny model; returns (build, leaves) over all parameters."""
    from episeg.data import Episode
    from episeg.model import TwoBranchModel
    from episeg.training import episode_loss

    model = TwoBranchModel.init(tiny_model_config(seed=int(rng.integers(0, 1000))))
    S = model.config.image_size
    mask = (rng.random((S, S)) < 0.7).astype(np.uint8)
    mask[0, 0] = 1
    qmask = (rng.random((S, S)) < 0.4).astype(np.uint8)
    ep = Episode(((rng.random((3, S, S)), mask),), rng.random((3, S, S)), qmask, 1)
    names = sorted(model.params)
    # zero biases put all-zero windows exactly on the relu kink
    for n in names:
        if n.endswith(".bias"):
            model.params[n].data[...] = rng.normal(0.0, 0.1, size=model.params[n].shape)
    leaves = [model.params[n] for n in names]
    return (lambda *_: episode_loss(model, ep)), leaves


def assert_episode_invariants(ep: Episode, k: int):
    assert ep.k == k == len(ep.support_ids)
    assert ep.query_id not in ep.support_ids
    assert len(set(ep.support_ids)) == k
    for img, mask in ep.support:
        assert img.shape[0] == 3 and mask.shape == img.shape[1:]
        assert set(np.unique(mask)) <= {0, 1} and mask.any()
    assert set(np.unique(ep.query_mask)) <= {0, 1} and ep.query_mask.any()
