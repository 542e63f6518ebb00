"""Central finite-difference checks of reverse-mode gradients.

The finite differences only ever read forward values, so they stay an
independent oracle for the backward rules they check.
"""

import numpy as np

from . import icp as I
from . import layers as L
from . import regularizers as R
from . import samplers as S
from . import tensor as T

STEP = 1e-5
REL_TOL = 1e-4
# Denominator floor: an absolute error of 1e-7 always passes.
DENOM_FLOOR = 1e-3


def relative_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
    return np.abs(analytic - numeric) / denom


def numerical_grad(fn, params, step=STEP):
    """Central differences of scalar ``fn()`` w.r.t. each tensor in ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(_value(fn))
            flat[i] = orig - step
            down = float(_value(fn))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def _value(fn):
    with T.GraphTape():
        return fn().data


def analytic_grad(fn, params):
    for p in params:
        p.grad = None
    with T.GraphTape():
        loss = fn()
        loss.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def check(fn, params, step=STEP):
    """Worst elementwise relative error between backward and finite differences."""
    analytic = analytic_grad(fn, params)
    numeric = numerical_grad(fn, params, step)
    return max(float(relative_error(a, n).max()) for a, n in zip(analytic, numeric))


def _param(rng, *shape, low=-2.0, high=2.0):
    return T.Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _op_cases(rng):
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    pos = _param(rng, 3, 4, low=0.5, high=2.0)
    m1, m2 = _param(rng, 4, 5), _param(rng, 5, 2)
    col = _param(rng, 1, 4)
    x_img, w_img = _param(rng, 2, 5, 5, 2), _param(rng, 3, 3, 2, 3)
    v = _param(rng, 5)
    c = _param(rng, 4, 1)
    return {
        "add": (lambda: T.sum((a + col) * b), [a, col, b]),
        "sub": (lambda: T.sum((a - b) * a), [a, b]),
        "mul": (lambda: T.sum(a * b), [a, b]),
        "div": (lambda: T.sum(a / pos), [a, pos]),
        "neg": (lambda: T.sum(-a * b), [a, b]),
        "pow": (lambda: T.sum(pos ** 2.5 + T.pow(pos, b)), [pos, b]),
        "exp": (lambda: T.sum(T.exp(a)), [a]),
        "expm1": (lambda: T.sum(T.expm1(a) * b), [a, b]),
        "log": (lambda: T.sum(T.log(pos)), [pos]),
        "log1p": (lambda: T.sum(T.log1p(pos) * b), [pos, b]),
        "sigmoid": (lambda: T.sum(T.sigmoid(a) * b), [a, b]),
        "softplus": (lambda: T.sum(T.softplus(a) * b), [a, b]),
        "log_sigmoid": (lambda: T.sum(T.log_sigmoid(a) * b), [a, b]),
        "tanh": (lambda: T.sum(T.tanh(a) * b), [a, b]),
        "matmul": (lambda: T.sum(T.matmul(m1, m2) * T.matmul(m1, m2)), [m1, m2]),
        "conv2d": (lambda: T.sum(T.conv2d(x_img, w_img) ** 2), [x_img, w_img]),
        "sum": (lambda: T.sum(T.sum(a, axis=0) ** 2), [a]),
        "mean": (lambda: T.sum(T.mean(a, axis=1, keepdims=True) * b), [a, b]),
        "cumsum": (lambda: T.sum(T.cumsum(a, axis=1) * b), [a, b]),
        "softmax": (lambda: T.sum(T.softmax(v) * T.Tensor(np.arange(5.0))), [v]),
        "log_softmax": (lambda: T.sum(T.log_softmax(a, axis=1) * b), [a, b]),
        "reshape": (lambda: T.sum(T.reshape(a, (2, 6)) * T.reshape(b, (2, 6)) ** 2), [a, b]),
        "transpose": (lambda: T.sum(T.matmul(T.transpose(a), b)), [a, b]),
        "concat": (lambda: T.sum(T.concat([a, b], axis=1) ** 2), [a, b]),
        "slice": (lambda: T.sum(a[1:, ::2] * b[:2, 1:3]), [a, b]),
        "broadcast": (lambda: T.sum(T.broadcast_to(c, (4, 3)) * T.transpose(b)), [c, b]),
        "composite": (lambda: T.sum(T.sigmoid(T.matmul(m1, m2) + 0.3)), [m1, m2]),
    }


def _composite_cases(rng):
    seed = int(rng.integers(1 << 30))
    dense = L.DenseLwtaLayer(3, 2, 2, rng)
    dense.util_logits.data[:] = rng.normal(size=dense.util_logits.shape)
    conv = L.ConvLwtaLayer(2, 2, 2, rng)
    x_dense = T.Tensor(rng.uniform(-2, 2, size=(4, 3)))
    x_conv = T.Tensor(rng.uniform(-2, 2, size=(2, 4, 4, 2)))
    mu, sigma = _param(rng, 3, 2), _param(rng, 3, 2, low=0.5, high=2.0)
    a_k, b_k = _param(rng, 3, low=0.5, high=3.0), _param(rng, 3, low=0.5, high=3.0)
    logits = _param(rng, 2, 3)

    def dense_fn():
        y, rec = dense.forward(x_dense, "relaxed", S.make_rng(seed))
        return T.sum(y * y) + L.layer_kl(dense, rec)

    def conv_fn():
        y, rec = conv.forward(x_conv, "relaxed", S.make_rng(seed))
        return T.sum(y * y) + L.layer_kl(conv, rec)

    def kumaraswamy_fn():
        u = S.sample_kumaraswamy(a_k, b_k, S.make_rng(seed))
        return R.kl_kumaraswamy_beta(a_k, b_k, 1.0, u)

    def categorical_fn():
        sample = S.sample_concrete_categorical(logits, 0.67, S.make_rng(seed))
        return R.kl_categorical_mc(T.softmax(logits), sample)

    q_logit, p_logit = _param(rng, 4), _param(rng, 4)
    return {
        "dense_lwta": (dense_fn, dense.parameters()),
        "conv_lwta": (conv_fn, conv.parameters()),
        "kl_kumaraswamy_beta": (kumaraswamy_fn, [a_k, b_k]),
        "kl_categorical": (categorical_fn, [logits]),
        "kl_bernoulli": (lambda: R.kl_bernoulli(T.sigmoid(q_logit), T.sigmoid(p_logit)), [q_logit, p_logit]),
        "kl_gaussian": (lambda: T.sum(R.kl_gaussian_standard(mu, sigma)), [mu, sigma]),
    }


def _icp_cases(rng):
    seed = int(rng.integers(1 << 30))
    n, feat_dim, dim = 4, 3, 2
    disc = I.Discriminator(dim, feat_dim, 2, 2, rng)
    h_yz = I.Predictor(dim, dim, 2, 2, rng)
    h_zy = I.Predictor(dim, dim, 2, 2, rng)
    y, zeta = _param(rng, n, dim), _param(rng, n, dim)
    feat = T.Tensor(rng.uniform(-2, 2, size=(n, feat_dim)))
    mu, sigma = _param(rng, n, dim), _param(rng, n, dim, low=0.5, high=2.0)
    logits = _param(rng, n, 3)
    labels = np.array([0, 2, 1, 2])
    negatives = I.derangement(n, rng)

    def js_gen():
        with disc.frozen():
            bound, _ = I.js_bound(disc, y, feat, negatives, "relaxed", S.make_rng(seed))
        return -bound

    def js_disc():
        bound, _ = I.js_bound(disc, T.stop_gradient(y), feat, negatives, "relaxed", S.make_rng(seed))
        return -bound

    def pred_adv():
        with h_yz.frozen(), h_zy.frozen():
            err, _ = I.prediction_error(h_yz, h_zy, zeta, y, "relaxed", S.make_rng(seed))
        return -err

    def pred_fit():
        err, _ = I.prediction_error(h_yz, h_zy, T.stop_gradient(zeta), T.stop_gradient(y),
                                    "relaxed", S.make_rng(seed))
        return err

    return {
        "icp_cross_entropy": (lambda: I.inference_loss(logits, labels), [logits]),
        "icp_mi_min": (lambda: I.mi_min_bound(mu, sigma), [mu, sigma]),
        "icp_js_generator": (js_gen, [y]),
        "icp_js_discriminator": (js_disc, disc.parameters()),
        "icp_predictability_adversary": (pred_adv, [zeta, y]),
        "icp_predictor_fit": (pred_fit, h_yz.parameters() + h_zy.parameters()),
    }


def run_suite(seed=0):
    """Return ``{case: worst relative error}`` for every op and composite."""
    prev = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    try:
        rng = S.make_rng(seed)
        cases = {**_op_cases(rng), **_composite_cases(rng), **_icp_cases(rng)}
        return {name: check(fn, params) for name, (fn, params) in cases.items()}
    finally:
        T.set_default_dtype(prev)
