"""Training loop, checkpoints, Bayesian-averaged prediction and compression.

One optimization step draws a single relaxed sample of every latent and
updates three parameter groups in turn: encoder (backbone, heads,
classifiers) on the full objective, then the discriminator on its JS loss,
then the cross-predictors on their regression loss.  Every KL term (winner,
gate, stick) is summed over the batch's draws and divided by the
training-set size.
"""

import copy
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import icp as I
from . import layers as L
from . import tensor as T
from .config import TrainConfig
from .data import augment
from .errors import ConfigError, ContractError, DivergenceError, ParseError
from .optim import make_optimizer
from .samplers import spawn_rngs

CHECKPOINT_MAGIC = b"LWTACKPT"
CHECKPOINT_VERSION = 1
GROUPS = ("encoder", "discriminator", "predictors")
PREDICT_STREAM = 0x5EED


# architecture presets -----------------------------------------------------------------

def build_backbone(config, input_shape, rng):
    """Desk-scale backbones; hidden widths stay fixed while U varies."""
    activation = "lwta" if config.winner == "stochastic" else "lwta-max"
    u = config.u
    if config.preset == "mlp-tiny":
        if len(input_shape) != 1:
            raise ContractError("mlp-tiny needs vector inputs")
        width = 16
        first = L.DenseLwtaLayer(input_shape[0], width // u, u, rng, activation=activation)
        second = L.DenseLwtaLayer(first.out_features, width // u, u, rng, activation=activation)
        return L.Network([first, second]), second.out_features
    if config.preset == "cnn-mini":
        if len(input_shape) != 3:
            raise ContractError("cnn-mini needs [H, L, C] image inputs")
        height, width, channels = input_shape
        if height % 4 or width % 4:
            raise ContractError("cnn-mini needs spatial extents divisible by 4")
        c1 = L.ConvLwtaLayer(channels, 16 // u, u, rng, activation=activation)
        c2 = L.ConvLwtaLayer(c1.out_channels, 32 // u, u, rng, activation=activation)
        c3 = L.ConvLwtaLayer(c2.out_channels, 32 // u, u, rng, activation=activation)
        net = L.Network([c1, L.AvgPool2d(2), c2, L.AvgPool2d(2), c3, L.Flatten()])
        return net, (height // 4) * (width // 4) * c3.out_channels
    raise ContractError(f"unknown preset {config.preset!r}")


def build_model(config, input_shape, n_classes, rng):
    backbone, feat_dim = build_backbone(config, tuple(input_shape), rng)
    activation = "lwta" if config.winner == "stochastic" else "lwta-max"
    return I.IcpModel(backbone, feat_dim, config.zeta_dim, config.y_dim, n_classes, rng,
                      competitors=config.u, aux_blocks=config.aux_blocks, activation=activation)


# checkpoint -------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


@dataclass
class Checkpoint:
    config: TrainConfig
    model: I.IcpModel
    optimizers: dict
    rng_states: dict
    meta: dict
    history: list = field(default_factory=list)

    def arrays(self):
        """Every persistent array under a stable name."""
        out = {}
        for name, p in self.model.named_parameters().items():
            out[f"param/{name}"] = p.data
        for i, layer in enumerate(self.all_lwta_layers()):
            out[f"keep/{i}"] = layer.keep
        for group, opt in self.optimizers.items():
            for key, arr in opt.state_arrays().items():
                out[f"opt/{group}/{key}"] = arr
        return out

    def all_lwta_layers(self):
        return self.model.all_lwta_layers()

    def to_bytes(self):
        arrays = self.arrays()
        index, blobs, offset = [], [], 0
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            dtype = arr.dtype.newbyteorder("<") if arr.dtype.kind in "fiu" else arr.dtype
            raw = arr.astype(dtype, copy=False).tobytes()
            index.append({"name": name, "shape": list(arr.shape), "dtype": dtype.str,
                          "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config.to_toml(),
            "meta": _jsonable(self.meta),
            "history": self.history,
            "rng_states": _jsonable(self.rng_states),
            "tensors": index,
        }
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        buf.write(head)
        for raw in blobs:
            buf.write(raw)
        return buf.getvalue()

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob, path=None):
        if blob[:8] != CHECKPOINT_MAGIC:
            raise ParseError("not a checkpoint file", offset=0, path=path)
        if len(blob) < 16:
            raise ParseError("truncated checkpoint header", offset=8, path=path)
        version, head_len = struct.unpack("<II", blob[8:16])
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"unsupported checkpoint version {version}", offset=8, path=path)
        try:
            header = json.loads(blob[16:16 + head_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"corrupt checkpoint header: {exc}", offset=16, path=path) from None
        base = 16 + head_len
        try:
            config = TrainConfig.from_toml(header["config"])
            meta = _from_jsonable(header["meta"])
            ckpt = new_checkpoint(config, meta)
            ckpt.history = header["history"]
            ckpt.rng_states = _from_jsonable(header["rng_states"])
            entries = list(header["tensors"])
        except (KeyError, TypeError) as exc:
            raise ParseError(f"incomplete checkpoint header ({exc})", offset=16, path=path) from None
        targets = {}
        for name, p in ckpt.model.named_parameters().items():
            targets[f"param/{name}"] = p.data
        for i, layer in enumerate(ckpt.all_lwta_layers()):
            targets[f"keep/{i}"] = layer.keep
        opt_arrays = {g: {} for g in GROUPS}
        for entry in entries:
            start = base + entry["offset"]
            raw = blob[start:start + entry["nbytes"]]
            if len(raw) != entry["nbytes"]:
                raise ParseError(f"truncated tensor {entry['name']}", offset=start, path=path)
            arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
            name = entry["name"]
            if name.startswith("opt/"):
                _, group, key = name.split("/", 2)
                opt_arrays[group][key] = arr
            elif name in targets:
                if targets[name].shape != arr.shape:
                    raise ParseError(f"shape mismatch for {name}", offset=start, path=path)
                targets[name][...] = arr
            else:
                raise ParseError(f"unexpected tensor {name}", offset=start, path=path)
        for group, arrays in opt_arrays.items():
            if arrays:
                ckpt.optimizers[group].load_state_arrays(arrays)
        return ckpt

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), path=path)

    def copy(self):
        return Checkpoint.from_bytes(self.to_bytes())


def new_checkpoint(config, meta):
    """Freshly initialized checkpoint for ``config`` and data shape ``meta``."""
    init_rng, noise_rng, shuffle_rng, augment_rng = spawn_rngs(config.seed, 4)
    model = build_model(config, meta["input_shape"], meta["n_classes"], init_rng)
    groups = model.param_groups()
    optimizers = {g: make_optimizer(config.optimizer, groups[g], config.lr) for g in GROUPS}
    rng_states = {"noise": noise_rng.bit_generator.state,
                  "shuffle": shuffle_rng.bit_generator.state,
                  "augment": augment_rng.bit_generator.state}
    return Checkpoint(config=config, model=model, optimizers=optimizers, rng_states=rng_states,
                      meta=dict(meta))


def _restore_rng(state):
    rng = np.random.Generator(np.random.Philox())
    rng.bit_generator.state = copy.deepcopy(state)
    return rng


# training -----------------------------------------------------------------------

def _records_kl(layers_records, config, n_data):
    """Sum of the layer KL terms, scaled by 1/N."""
    total = T.Tensor(0.0)
    parts = {"kl_xi": 0.0, "kl_z": 0.0, "kl_u": 0.0}
    for record in layers_records:
        kl = L.layer_kl_breakdown(record.layer, record, config.omega, config.tau_prior, config.tau_post)
        total = total + kl.total * (1.0 / n_data)
        for key, value in kl.values().items():
            parts[key] += value
    return total, parts


def train_step(model, optimizers, xb, tb, config, n_data, rng):
    """One three-phase update; returns the per-term report."""
    coeffs = config.coeffs
    tau = config.tau_post
    with T.GraphTape() as tape:
        enc = model.encode(xb, "relaxed", rng, tau)
        logits_r, logits_zeta, logits_y = model.classify(enc)
        terms = {
            "ce_r": I.inference_loss(logits_r, tb),
            "ce_zeta": I.inference_loss(logits_zeta, tb),
            "ce_y": I.inference_loss(logits_y, tb),
        }
        if coeffs.beta:
            terms["mi_min"] = I.mi_min_bound(enc.mu, enc.sigma)
        negatives = I.derangement(len(tb), rng)
        feat = T.stop_gradient(enc.feat)
        if coeffs.alpha:
            with model.discriminator.frozen():
                bound, _ = I.js_bound(model.discriminator, enc.y, feat, negatives, "relaxed", rng, tau)
            terms["js_gen"] = -bound
        if coeffs.gamma:
            with model.predictor_y_from_zeta.frozen(), model.predictor_zeta_from_y.frozen():
                err, _ = I.prediction_error(model.predictor_y_from_zeta, model.predictor_zeta_from_y,
                                            enc.zeta, enc.y, "relaxed", rng, tau)
            terms["pred_adv"] = -err
        kl_total, kl_parts = _records_kl(enc.records, config, n_data)
        total, report = I.assemble_loss(terms, coeffs, kl_total)
        optimizers["encoder"].zero_grad()
        total.backward()
        optimizers["encoder"].step()
        tape.clear()
    report.update(kl_parts)
    report["acc"] = float(np.mean(np.argmax(logits_r.data, axis=1) == tb))

    y_fixed, zeta_fixed = T.stop_gradient(enc.y), T.stop_gradient(enc.zeta)
    if coeffs.alpha:
        with T.GraphTape() as tape:
            bound, records = I.js_bound(model.discriminator, y_fixed, feat, negatives, "relaxed", rng, tau)
            kl, _ = _records_kl(records, config, n_data)
            loss_d = -bound + kl
            optimizers["discriminator"].zero_grad()
            loss_d.backward()
            optimizers["discriminator"].step()
            tape.clear()
        report["loss_d"] = float(bound.data) * -1.0
    if coeffs.gamma:
        with T.GraphTape() as tape:
            err, records = I.prediction_error(model.predictor_y_from_zeta, model.predictor_zeta_from_y,
                                              zeta_fixed, y_fixed, "relaxed", rng, tau)
            kl, _ = _records_kl(records, config, n_data)
            loss_p = err + kl
            optimizers["predictors"].zero_grad()
            loss_p.backward()
            optimizers["predictors"].step()
            tape.clear()
        report["loss_pred"] = float(err.data)
    if not np.isfinite(report.get("loss_d", 0.0)) or not np.isfinite(report.get("loss_pred", 0.0)):
        raise DivergenceError("non-finite auxiliary loss", terms=report)
    _check_parameters(model, report)
    return report


def _check_parameters(model, report):
    """Divergence shows up as non-finite weights or sticks whose softplus underflows."""
    for name, p in model.named_parameters().items():
        if not np.all(np.isfinite(p.data)):
            raise DivergenceError(f"non-finite parameter {name}", terms=report)
    for layer in model.all_lwta_layers():
        a, b = layer.stick_params()
        if np.any(a.data <= 0) or np.any(b.data <= 0):
            raise DivergenceError("stick parameters collapsed to zero", terms=report)


def _gate_stats(model, threshold):
    probs = np.concatenate([layer.gate_probs().ravel() for layer in model.lwta_layers()])
    return {"gate_mean": float(probs.mean()), "gate_below_threshold": float(np.mean(probs < threshold))}


def train(config, dataset, checkpoint=None, log=None):
    """Train an ICP model on ``dataset``; deterministic given ``config.seed``.

    ``log`` (optional callable) receives each epoch's metric dict.
    """
    if dataset.n_train < 2:
        raise ContractError("training needs at least two examples")
    if config.augment.any and dataset.kind != "image":
        raise ConfigError("augmentation requested on vector data")
    meta = {"input_shape": list(dataset.input_shape), "n_classes": int(dataset.n_classes),
            "n_train": int(dataset.n_train), "mean": np.asarray(dataset.mean), "std": np.asarray(dataset.std),
            "epochs_done": 0}
    ckpt = checkpoint if checkpoint is not None else new_checkpoint(config, meta)
    model, optimizers = ckpt.model, ckpt.optimizers
    noise_rng = _restore_rng(ckpt.rng_states["noise"])
    shuffle_rng = _restore_rng(ckpt.rng_states["shuffle"])
    augment_rng = _restore_rng(ckpt.rng_states["augment"])
    n = dataset.n_train
    bs = min(config.batch_size, n)
    for epoch in range(ckpt.meta["epochs_done"], config.epochs):
        if config.lr_decay_every:
            # derived from the epoch index so resumed runs pick up the same rate
            lr = config.lr * config.lr_decay_factor ** (epoch // config.lr_decay_every)
            for opt in optimizers.values():
                opt.lr = lr
        last_good = ckpt.to_bytes()
        order = shuffle_rng.permutation(n)
        sums, count = {}, 0
        try:
            for start in range(0, n - bs + 1, bs):
                idx = order[start:start + bs]
                xb = augment(dataset.x_train[idx], config.augment, augment_rng)
                report = train_step(model, optimizers, xb, dataset.t_train[idx], config, n, noise_rng)
                for key, value in report.items():
                    sums[key] = sums.get(key, 0.0) + value
                count += 1
        except DivergenceError as exc:
            exc.checkpoint = Checkpoint.from_bytes(last_good)
            raise
        metrics = {"epoch": epoch + 1, **{k: v / count for k, v in sums.items()},
                   **_gate_stats(model, config.threshold)}
        ckpt.history.append(metrics)
        ckpt.meta["epochs_done"] = epoch + 1
        ckpt.rng_states = {"noise": noise_rng.bit_generator.state,
                           "shuffle": shuffle_rng.bit_generator.state,
                           "augment": augment_rng.bit_generator.state}
        if log is not None:
            log(metrics)
    return ckpt


# prediction ------------------------------------------------------------------------

def _prediction_rng(checkpoint, rng):
    if rng is not None:
        return rng
    return spawn_rngs([checkpoint.config.seed, PREDICT_STREAM], 1)[0]


def predict(checkpoint, x, n_samples=5, rng=None, chunk=512):
    """Bayesian-averaged class probabilities over ``n_samples`` discrete passes."""
    if n_samples < 1:
        raise ContractError("n_samples must be at least 1")
    rng = _prediction_rng(checkpoint, rng)
    x = np.asarray(x, dtype=np.float64)
    total = np.zeros((len(x), checkpoint.model.n_classes))
    for _ in range(n_samples):
        for start in range(0, len(x), chunk):
            logits = checkpoint.model.predict_logits(x[start:start + chunk], "discrete", rng)
            total[start:start + chunk] += T.softmax(logits, axis=1).data
    return total / n_samples


def accuracy(checkpoint, x, t, n_samples=5, rng=None):
    probs = predict(checkpoint, x, n_samples, rng)
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(t)))


# compression -----------------------------------------------------------------------

def compress(checkpoint, threshold=0.001):
    """Prune every prediction-path component with q(z = 1) < ``threshold``.

    Dense layers lose (input, block) synapse groups; conv layers lose whole
    kernel blocks (their channels read as zero).  Returns the pruned copy
    and the fraction of components removed.
    """
    if not 0 <= threshold < 1:
        raise ContractError("threshold must lie in [0, 1)")
    pruned = checkpoint.copy()
    removed = total = 0
    for layer in pruned.model.lwta_layers():
        layer.keep &= layer.gate_probs() >= threshold
        removed += layer.n_pruned
        total += layer.n_components
    ratio = removed / total if total else 0.0
    pruned.meta["compression_ratio"] = ratio
    pruned.meta["threshold"] = threshold
    return pruned, ratio


def weight_counts(checkpoint):
    """Weights of the prediction-path LWTA layers before and after pruning.

    This is the size a physically shrunk export would have.
    """
    before = after = 0
    for layer in checkpoint.model.lwta_layers():
        w = layer.W.data
        before += w.size
        if isinstance(layer, L.DenseLwtaLayer):
            after += int(layer.keep.sum()) * layer.U
        else:
            after += int(layer.keep.sum()) * (w.size // layer.B)
    return {"weights_total": before, "weights_retained": after}
