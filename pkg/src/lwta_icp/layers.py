"""Stochastic local winner-takes-all layers with stick-breaking utility gates.

A layer holds ``B`` blocks of ``U`` linear competitors.  Per forward pass it
draws utility gates ``z`` (one per synapse group for dense layers, one per
kernel block for convolutional ones), gates the weights, computes the linear
responses, and lets a sampled winner per block (per position for conv) pass
its response while the other competitors output zero.

``mode="relaxed"`` uses Concrete relaxations and must run under a
:class:`~lwta_icp.tensor.GraphTape`; ``mode="discrete"`` draws hard samples.
"""

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import regularizers as R
from . import samplers as S
from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError

MODES = ("relaxed", "discrete")
ACTIVATIONS = ("lwta", "lwta-max", "relu")
UTIL_INIT = 3.0
# softplus(STICK_INIT) == 1, so q(u) starts at Kumaraswamy(1, 1).
STICK_INIT = float(np.log(np.expm1(1.0)))


class Module:
    """Parameter bookkeeping shared by layers and networks."""

    def named_parameters(self):
        return {}

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    @contextmanager
    def frozen(self):
        """Temporarily stop gradients from reaching this module's parameters."""
        params = self.parameters()
        saved = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(params, saved):
                p.requires_grad = flag

    def lwta_layers(self):
        return []


@dataclass
class LayerSampleRecord:
    """Latent draws from one forward call.

    ``xi`` is ``[N, B, U]`` (dense) or ``[N, H, L, B, U]`` (conv); ``z`` is
    ``[J, B]`` (dense) or ``[B]`` (conv); ``sticks`` is ``[B]``.
    """

    xi: T.Tensor
    z: T.Tensor
    sticks: T.Tensor
    winner_probs: T.Tensor
    mode: str
    layer: object = field(repr=False, default=None)
    version: int = -1


def _check_mode(mode):
    if mode not in MODES:
        raise ConfigError(f"unknown sampling mode {mode!r}; expected one of {MODES}")
    if mode == "relaxed" and T.active_tape() is None:
        raise ContractError("relaxed sampling needs an active GraphTape")


def _uniform_init(rng, shape, fan_in):
    # competition silences about half the units, so use the ReLU-style gain
    bound = np.sqrt(6.0 / fan_in)
    return T.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class _LwtaBase(Module):
    """Shared gate/stick machinery of the dense and convolutional layers."""

    def _init_common(self, blocks, competitors, util_shape, activation):
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
        if blocks < 1 or competitors < 1:
            raise ConfigError("blocks and competitors must be positive")
        self.B = int(blocks)
        self.U = int(competitors)
        self.activation = activation
        self.util_logits = T.Tensor(np.full(util_shape, UTIL_INIT), requires_grad=True)
        self.stick_a = T.Tensor(np.full(self.B, STICK_INIT), requires_grad=True)
        self.stick_b = T.Tensor(np.full(self.B, STICK_INIT), requires_grad=True)
        self.keep = np.ones(util_shape, dtype=bool)
        self.version = 0

    def gate_probs(self):
        """Utility posterior q(z = 1) per gate."""
        return T._sigmoid(self.util_logits.data)

    def stick_params(self):
        return T.softplus(self.stick_a), T.softplus(self.stick_b)

    @property
    def n_components(self):
        return int(self.keep.size)

    @property
    def n_pruned(self):
        return int(self.keep.size - np.count_nonzero(self.keep))

    def _sample_gates(self, mode, rng, tau):
        a, b = self.stick_params()
        sticks = S.sample_kumaraswamy(a, b, rng)
        noise = S.logistic_noise(self.util_logits.shape, rng)
        if mode == "relaxed":
            z = S.sample_concrete_bernoulli(self.util_logits, tau, rng, noise=noise)
        else:
            z = T.Tensor(S.sample_bernoulli_hard(self.util_logits, rng, noise=noise))
        if not self.keep.all():
            z = z * self.keep
        return z, sticks

    def _compete(self, h, mode, rng, tau):
        """Winner selection over the last axis of ``h`` ([..., U])."""
        probs = T.softmax(h, axis=-1)
        if self.activation == "relu":
            return T.relu(h), T.Tensor(np.ones(h.shape)), probs
        if self.activation == "lwta-max" or self.U == 1:
            xi = T.Tensor(np.eye(self.U)[np.argmax(h.data, axis=-1)])
            return xi * h, xi, probs
        gumbel = S.gumbel_from_uniform(S.uniform(h.shape, rng))
        if mode == "relaxed":
            xi = S.sample_concrete_categorical(h, tau, rng, gumbel=gumbel)
        else:
            xi = T.Tensor(S.sample_categorical_hard(h, rng, gumbel=gumbel))
        return xi * h, xi, probs

    def _record(self, xi, z, sticks, probs, mode):
        self.version += 1
        return LayerSampleRecord(xi=xi, z=z, sticks=sticks, winner_probs=probs, mode=mode,
                                 layer=self, version=self.version)

    def lwta_layers(self):
        return [self]


class DenseLwtaLayer(_LwtaBase):
    """Dense stochastic LWTA layer; output width ``B * U``.

    Weights ``W`` are ``[J, B, U]`` and utility logits ``[J, B]``: one gate
    per (input, block) synapse group.
    """

    def __init__(self, in_features, blocks, competitors, rng, activation="lwta", bias=False):
        self.J = int(in_features)
        self._init_common(blocks, competitors, (self.J, blocks), activation)
        self.W = _uniform_init(rng, (self.J, self.B, self.U), self.J)
        self.bias = T.Tensor(np.zeros((self.B, self.U)), requires_grad=True) if bias else None

    @property
    def out_features(self):
        return self.B * self.U

    def named_parameters(self):
        params = {"W": self.W, "util_logits": self.util_logits,
                  "stick_a": self.stick_a, "stick_b": self.stick_b}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def responses(self, x, z):
        """Gated linear responses ``h`` of shape ``[N, B, U]``."""
        w_eff = self.W * T.reshape(z, (self.J, self.B, 1))
        h = T.reshape(T.matmul(x, T.reshape(w_eff, (self.J, self.B * self.U))), (x.shape[0], self.B, self.U))
        if self.bias is not None:
            h = h + self.bias
        return h

    def forward(self, x, mode="relaxed", rng=None, tau=0.67):
        _check_mode(mode)
        x = T.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.J:
            raise DimensionError(f"dense LWTA layer expects [N, {self.J}] input, got {x.shape}")
        z, sticks = self._sample_gates(mode, rng, tau)
        h = self.responses(x, z)
        y, xi, probs = self._compete(h, mode, rng, tau)
        return T.reshape(y, (x.shape[0], self.B * self.U)), self._record(xi, z, sticks, probs, mode)


class ConvLwtaLayer(_LwtaBase):
    """Convolutional stochastic LWTA layer.

    Kernels ``W`` are ``[h, l, C, B, U]``; feature maps compete position by
    position inside each block, and one gate per block can silence a whole
    kernel.  Output is ``[N, H, L, B * U]`` (stride 1, same padding).
    """

    def __init__(self, in_channels, blocks, competitors, rng, kernel_size=3, activation="lwta", bias=False):
        self.C = int(in_channels)
        self.kernel_size = int(kernel_size)
        self._init_common(blocks, competitors, (blocks,), activation)
        k = self.kernel_size
        self.W = _uniform_init(rng, (k, k, self.C, self.B, self.U), k * k * self.C)
        self.bias = T.Tensor(np.zeros((self.B, self.U)), requires_grad=True) if bias else None

    @property
    def out_channels(self):
        return self.B * self.U

    def named_parameters(self):
        params = {"W": self.W, "util_logits": self.util_logits,
                  "stick_a": self.stick_a, "stick_b": self.stick_b}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def responses(self, x, z):
        """Gated feature maps ``H`` of shape ``[N, H, L, B, U]``."""
        k = self.kernel_size
        n, height, width, _ = x.shape
        maps = T.conv2d(x, T.reshape(self.W, (k, k, self.C, self.B * self.U)))
        h = T.reshape(maps, (n, height, width, self.B, self.U)) * T.reshape(z, (self.B, 1))
        if self.bias is not None:
            h = h + self.bias
        return h

    def forward(self, x, mode="relaxed", rng=None, tau=0.67):
        _check_mode(mode)
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[3] != self.C:
            raise DimensionError(f"conv LWTA layer expects [N, H, L, {self.C}] input, got {x.shape}")
        z, sticks = self._sample_gates(mode, rng, tau)
        h = self.responses(x, z)
        y, xi, probs = self._compete(h, mode, rng, tau)
        n, height, width = x.shape[:3]
        return T.reshape(y, (n, height, width, self.B * self.U)), self._record(xi, z, sticks, probs, mode)


def layer_kl_breakdown(layer, record, prior_omega=1.0, tau_prior=0.5, tau_post=0.67):
    """KL terms of one layer for the draws in ``record``.

    ``kl_xi`` is summed over the batch (and positions, for conv layers);
    ``kl_z`` and ``kl_u`` are global.  The temperatures are accepted for symmetry with the
    sampling calls; the mass-based winner estimator does not use them.
    """
    if record.layer is not layer or record.version != layer.version:
        raise ContractError("sample record does not belong to the latest forward call of this layer")
    if layer.activation == "lwta" and layer.U > 1:
        kl_xi = R.kl_categorical_mc(record.winner_probs, record.xi)
    else:
        kl_xi = T.Tensor(0.0)
    a, b = layer.stick_params()
    prior_pi = R.stick_breaking_pi(record.sticks)
    q_pi = T.sigmoid(layer.util_logits)
    if isinstance(layer, DenseLwtaLayer):
        prior_pi = T.reshape(prior_pi, (1, layer.B))
    kl_z = R.kl_bernoulli(q_pi, prior_pi)
    kl_u = R.kl_kumaraswamy_beta(a, b, prior_omega, record.sticks)
    return R.KlBreakdown(kl_xi=kl_xi, kl_z=kl_z, kl_u=kl_u)


def layer_kl(layer, record, prior_omega=1.0, tau_prior=0.5, tau_post=0.67):
    return layer_kl_breakdown(layer, record, prior_omega, tau_prior, tau_post).total


class Linear(Module):
    """Deterministic affine readout."""

    def __init__(self, in_features, out_features, rng):
        bound = 1.0 / np.sqrt(in_features)
        self.W = T.Tensor(rng.uniform(-bound, bound, size=(in_features, out_features)), requires_grad=True)
        self.b = T.Tensor(np.zeros(out_features), requires_grad=True)

    @property
    def out_features(self):
        return self.W.shape[1]

    def named_parameters(self):
        return {"W": self.W, "b": self.b}

    def forward(self, x, mode="relaxed", rng=None, tau=0.67):
        return T.matmul(T.as_tensor(x), self.W) + self.b, None


class AvgPool2d(Module):
    def __init__(self, size=2):
        self.size = int(size)

    def forward(self, x, mode="relaxed", rng=None, tau=0.67):
        n, h, w, c = x.shape
        k = self.size
        if h % k or w % k:
            raise DimensionError(f"pool size {k} does not divide spatial extent {h}x{w}")
        blocks = T.reshape(x, (n, h // k, k, w // k, k, c))
        return T.mean(blocks, axis=(2, 4)), None


class Flatten(Module):
    def forward(self, x, mode="relaxed", rng=None, tau=0.67):
        return T.reshape(x, (x.shape[0], int(np.prod(x.shape[1:])))), None


class Network(Module):
    """Sequential container; collects the sample records of its LWTA layers."""

    def __init__(self, layers):
        self.layers = list(layers)

    def named_parameters(self):
        params = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.named_parameters().items():
                params[f"{i}.{name}"] = p
        return params

    def lwta_layers(self):
        return [layer for layer in self.layers if isinstance(layer, _LwtaBase)]

    def forward(self, x, mode="relaxed", rng=None, tau=0.67):
        records = []
        for layer in self.layers:
            x, record = layer.forward(x, mode=mode, rng=rng, tau=tau)
            if record is not None:
                records.append(record)
        return x, records
