"""Information competing objective: a representation split into a
capacity-minimized part ``zeta`` and a capacity-maximized part ``y`` that
cooperate on the task through ``r = [zeta; y]`` and are kept from predicting
each other.
"""

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import regularizers as R
from . import samplers as S
from . import tensor as T
from .errors import ContractError, DataError, DivergenceError

SIGMA_FLOOR = 1e-4


@dataclass
class IcpCoefficients:
    alpha: float = 1.0  # JS (maximization) term
    beta: float = 1.0  # Gaussian KL (minimization) term
    gamma: float = 1.0  # predictability minimization

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ContractError(f"coefficient {name} must be nonnegative")


@dataclass
class Encoding:
    feat: T.Tensor
    mu: T.Tensor
    sigma: T.Tensor
    zeta: T.Tensor
    y: T.Tensor
    records: list = field(default_factory=list)

    @property
    def r(self):
        return T.concat([self.zeta, self.y], axis=1)


class Discriminator(L.Network):
    """Pair classifier D(y, x_feat) -> probability the pair is genuine."""

    def __init__(self, y_dim, feat_dim, blocks, competitors, rng, activation="lwta"):
        hidden = L.DenseLwtaLayer(y_dim + feat_dim, blocks, competitors, rng, activation=activation)
        super().__init__([hidden, L.Linear(hidden.out_features, 1, rng)])

    def logit(self, y, x_feat, mode="relaxed", rng=None, tau=0.67):
        out, records = self.forward(T.concat([y, x_feat], axis=1), mode, rng, tau)
        return T.reshape(out, (out.shape[0],)), records

    def prob(self, y, x_feat, mode="discrete", rng=None, tau=0.67):
        logit, _ = self.logit(y, x_feat, mode, rng, tau)
        return T._sigmoid(logit.data)


class Predictor(L.Network):
    """Regressor used for the predictability-minimization game."""

    def __init__(self, in_dim, out_dim, blocks, competitors, rng, activation="lwta"):
        hidden = L.DenseLwtaLayer(in_dim, blocks, competitors, rng, activation=activation)
        super().__init__([hidden, L.Linear(hidden.out_features, out_dim, rng)])


class IcpModel(L.Module):
    """Backbone + split heads + classifiers + discriminator + cross-predictors.

    Parameter groups are updated by separate optimizers: ``encoder``
    (backbone, heads, classifiers), ``discriminator`` and ``predictors``.
    """

    def __init__(self, backbone, feat_dim, zeta_dim, y_dim, n_classes, rng,
                 competitors=2, aux_blocks=8, activation="lwta"):
        self.backbone = backbone
        self.feat_dim = int(feat_dim)
        self.zeta_dim = int(zeta_dim)
        self.y_dim = int(y_dim)
        self.n_classes = int(n_classes)
        self.zeta_head = L.Linear(feat_dim, 2 * zeta_dim, rng)
        self.y_head = L.Linear(feat_dim, y_dim, rng)
        self.classifier_r = L.Linear(zeta_dim + y_dim, n_classes, rng)
        self.classifier_zeta = L.Linear(zeta_dim, n_classes, rng)
        self.classifier_y = L.Linear(y_dim, n_classes, rng)
        self.discriminator = Discriminator(y_dim, feat_dim, aux_blocks, competitors, rng, activation)
        self.predictor_y_from_zeta = Predictor(zeta_dim, y_dim, aux_blocks, competitors, rng, activation)
        self.predictor_zeta_from_y = Predictor(y_dim, zeta_dim, aux_blocks, competitors, rng, activation)

    def submodules(self):
        return {
            "backbone": self.backbone,
            "zeta_head": self.zeta_head,
            "y_head": self.y_head,
            "classifier_r": self.classifier_r,
            "classifier_zeta": self.classifier_zeta,
            "classifier_y": self.classifier_y,
            "discriminator": self.discriminator,
            "predictor_y_from_zeta": self.predictor_y_from_zeta,
            "predictor_zeta_from_y": self.predictor_zeta_from_y,
        }

    def named_parameters(self):
        params = {}
        for prefix, module in self.submodules().items():
            for name, p in module.named_parameters().items():
                params[f"{prefix}.{name}"] = p
        return params

    def param_groups(self):
        groups = {"encoder": [], "discriminator": [], "predictors": []}
        for prefix, module in self.submodules().items():
            if prefix == "discriminator":
                key = "discriminator"
            elif prefix.startswith("predictor"):
                key = "predictors"
            else:
                key = "encoder"
            groups[key].extend(module.parameters())
        return groups

    def lwta_layers(self):
        return self.backbone.lwta_layers()

    def all_lwta_layers(self):
        """LWTA layers of every submodule, auxiliaries included."""
        layers = []
        for module in self.submodules().values():
            layers.extend(module.lwta_layers())
        return layers

    def encode(self, x, mode="relaxed", rng=None, tau=0.67):
        feat, records = self.backbone.forward(T.as_tensor(x), mode, rng, tau)
        stats, _ = self.zeta_head.forward(feat)
        mu = T.slice_axis(stats, 0, self.zeta_dim, axis=1)
        sigma = T.softplus(T.slice_axis(stats, self.zeta_dim, 2 * self.zeta_dim, axis=1)) + SIGMA_FLOOR
        zeta = S.sample_gaussian(mu, sigma, rng)
        y, _ = self.y_head.forward(feat)
        return Encoding(feat=feat, mu=mu, sigma=sigma, zeta=zeta, y=y, records=records)

    def classify(self, enc):
        """Logits of Q(t|r), Q(t|zeta), Q(t|y)."""
        return (self.classifier_r.forward(enc.r)[0],
                self.classifier_zeta.forward(enc.zeta)[0],
                self.classifier_y.forward(enc.y)[0])

    def predict_logits(self, x, mode="discrete", rng=None, tau=0.67):
        enc = self.encode(x, mode, rng, tau)
        return self.classifier_r.forward(enc.r)[0]


# MI minimization ---------------------------------------------------------------

def mi_min_bound(mu, sigma):
    """Batch mean of KL[N(mu, sigma^2) || N(0, I)], an upper bound on I(zeta, x)."""
    return T.mean(R.kl_gaussian_standard(mu, sigma))


# MI maximization (Jensen-Shannon) -------------------------------------------------

def derangement(n, rng):
    """Random permutation without fixed points (a single random n-cycle)."""
    if n < 2:
        raise ContractError("negative pairs need a batch of at least 2")
    order = rng.permutation(n)
    index = np.empty(n, dtype=np.int64)
    index[order] = order[np.roll(np.arange(n), -1)]
    return index


def js_bound(discriminator, y, x_feat, negatives, mode="relaxed", rng=None, tau=0.67):
    """Per-batch JS lower bound mean[log D(y, x) + log(1 - D(y_shuffled, x))].

    Returns the bound and the discriminator's sample records.
    """
    y, x_feat = T.as_tensor(y), T.as_tensor(x_feat)
    n = y.shape[0]
    y_all = T.concat([y, y[negatives]], axis=0)
    x_all = T.concat([x_feat, x_feat], axis=0)
    logit, records = discriminator.logit(y_all, x_all, mode, rng, tau)
    positive = T.log_sigmoid(logit[:n])
    negative = T.log_sigmoid(-logit[n:])
    return T.mean(positive + negative), records


def mi_max_js(discriminator, y, x_feat, rng, mode="relaxed", tau=0.67):
    """(loss_D, loss_gen) for the JS estimate of I(y, x).

    ``loss_D`` trains the discriminator on detached inputs; ``loss_gen`` sends
    gradient into ``y`` with the discriminator frozen.  Both equal minus the
    bound; they differ only in where the gradient goes.
    """
    y = T.as_tensor(y)
    negatives = derangement(y.shape[0], rng)
    x_feat = T.stop_gradient(x_feat)
    bound_d, _ = js_bound(discriminator, T.stop_gradient(y), x_feat, negatives, mode, rng, tau)
    with discriminator.frozen():
        bound_g, _ = js_bound(discriminator, y, x_feat, negatives, mode, rng, tau)
    return -bound_d, -bound_g


# inference terms ------------------------------------------------------------------

def one_hot(labels, n_classes):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DataError(f"labels must be one-dimensional, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise DataError("labels must be integers")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"label out of range [0, {n_classes})")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def inference_loss(logits, t):
    """Mean categorical cross-entropy of ``logits`` against integer labels."""
    logits = T.as_tensor(logits)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ContractError(f"need [batch, T>=2] logits, got {logits.shape}")
    target = one_hot(t, logits.shape[1])
    if target.shape[0] != logits.shape[0]:
        raise DataError(f"{target.shape[0]} labels for {logits.shape[0]} rows")
    return -T.sum(T.log_softmax(logits, axis=1) * target) * (1.0 / logits.shape[0])


# predictability minimization -----------------------------------------------------

def mse(pred, target):
    diff = pred - target
    return T.mean(diff * diff)


def standardize(x, eps=1e-6):
    """Batch z-scores per column, differentiable through the statistics."""
    centered = x - T.mean(x, axis=0, keepdims=True)
    var = T.mean(centered * centered, axis=0, keepdims=True)
    return centered / T.pow(var + eps, 0.5)


def prediction_error(h_yz, h_zy, zeta, y, mode="relaxed", rng=None, tau=0.67):
    """MSE(H(y|zeta), y) + MSE(H(zeta|y), zeta) and the predictors' records.

    Both parts are batch-standardized first, so the error is scale free: an
    encoder cannot inflate it by growing its outputs, and an unpredictable
    part scores about 1 per term.
    """
    zeta, y = standardize(T.as_tensor(zeta)), standardize(T.as_tensor(y))
    y_hat, rec_a = h_yz.forward(zeta, mode, rng, tau)
    zeta_hat, rec_b = h_zy.forward(y, mode, rng, tau)
    return mse(y_hat, y) + mse(zeta_hat, zeta), rec_a + rec_b


def predictability_min(h_yz, h_zy, zeta, y, rng=None, mode="relaxed", tau=0.67):
    """(loss_pred, loss_adv) for the min-max game.

    ``loss_pred`` trains the predictors on detached representations;
    ``loss_adv`` is the negated error with the predictors frozen, so the
    encoders are pushed to make each part unpredictable from the other.
    """
    zeta, y = T.as_tensor(zeta), T.as_tensor(y)
    if zeta.shape[0] != y.shape[0]:
        raise ContractError("zeta and y must have the same batch size")
    loss_pred, _ = prediction_error(h_yz, h_zy, T.stop_gradient(zeta), T.stop_gradient(y), mode, rng, tau)
    with h_yz.frozen(), h_zy.frozen():
        err, _ = prediction_error(h_yz, h_zy, zeta, y, mode, rng, tau)
    return loss_pred, -err


# assembly ------------------------------------------------------------------------

TERM_WEIGHTS = {
    "ce_r": None,
    "ce_zeta": None,
    "ce_y": None,
    "mi_min": "beta",
    "js_gen": "alpha",
    "pred_adv": "gamma",
}


def assemble_loss(terms, coeffs, kl_total=0.0):
    """Weighted sum of the encoder-side terms plus the KL total.

    ``terms`` maps the names in ``TERM_WEIGHTS`` to scalar tensors; a term
    whose coefficient is zero may be omitted.  Returns ``(total, report)``
    where ``report`` holds each weighted contribution and ``total``.
    """
    report = {}
    total = None
    for name, weight_name in TERM_WEIGHTS.items():
        weight = 1.0 if weight_name is None else getattr(coeffs, weight_name)
        term = terms.get(name)
        if term is None:
            if weight != 0:
                raise ContractError(f"missing loss term {name!r} with nonzero weight")
            report[name] = 0.0
            continue
        contribution = term if weight == 1.0 else term * weight
        report[name] = float(contribution.data)
        total = contribution if total is None else total + contribution
    kl_total = T.as_tensor(kl_total)
    report["kl"] = float(kl_total.data)
    total = kl_total if total is None else total + kl_total
    report["total"] = float(total.data)
    bad = {k: v for k, v in report.items() if not np.isfinite(v)}
    if bad:
        raise DivergenceError(f"non-finite loss terms: {sorted(bad)}", terms=report)
    return total, report
