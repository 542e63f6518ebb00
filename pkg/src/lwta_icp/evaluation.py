"""Sparsity reports, linear-separability probes and feature-map export."""

import copy
import os
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ContractError, ExportError
from .samplers import spawn_rngs

PROBE_STREAM = 0x9B0BE
EXPORT_STREAM = 0xE4907
DEAD_BLOCK_SHARE = 0.99
PROBE_C = 1.0
PROBE_TOL = 1e-5
PROBE_MAX_ITER = 5000
PROBE_CHECK_EVERY = 25
TARGETS = ("zeta", "y", "total", "conv")


def _stream(checkpoint, tag, rng):
    if rng is not None:
        return rng
    return spawn_rngs([checkpoint.config.seed, tag], 1)[0]


# linear probes ---------------------------------------------------------------------

def _hinge_objective(w, b, x, signs, lam):
    margins = signs * (x @ w + b)
    return 0.5 * lam * np.sum(w * w, axis=0) + np.mean(np.maximum(0.0, 1.0 - margins), axis=0)


def fit_linear_svm(x, t, classes, c=PROBE_C, tol=PROBE_TOL, max_iter=PROBE_MAX_ITER):
    """One-vs-rest linear hinge classifiers by full-batch subgradient descent.

    Per class minimises ``lam/2 |w|^2 + mean(hinge)`` with ``lam = 1/(c n)``,
    which is the usual ``1/2 |w|^2 + c * sum(hinge)`` divided by ``n``.  The
    bias is unregularised.  All classes are optimised together; the best
    iterate is kept and the run stops once the best objective improves by
    less than ``tol`` (relative) over a check window.
    """
    n, d = x.shape
    k = len(classes)
    lam = 1.0 / (c * n)
    signs = np.where(t[:, None] == np.asarray(classes)[None, :], 1.0, -1.0)
    w = np.zeros((d, k))
    b = np.zeros(k)
    best_w, best_b = w.copy(), b.copy()
    best = _hinge_objective(w, b, x, signs, lam)
    checkpoint_obj = best.sum()
    for it in range(1, max_iter + 1):
        margins = signs * (x @ w + b)
        viol = (margins < 1.0) * signs
        grad_w = lam * w - x.T @ viol / n
        grad_b = -viol.mean(axis=0)
        step = 1.0 / np.sqrt(it)
        w = w - step * grad_w
        b = b - step * grad_b
        obj = _hinge_objective(w, b, x, signs, lam)
        better = obj < best
        best = np.where(better, obj, best)
        best_w[:, better] = w[:, better]
        best_b[better] = b[better]
        if it % PROBE_CHECK_EVERY == 0:
            current = best.sum()
            if checkpoint_obj - current <= tol * max(abs(checkpoint_obj), 1e-12):
                break
            checkpoint_obj = current
    return best_w, best_b


def probe_accuracy(x_train, t_train, x_test, t_test):
    """Held-out accuracy of a linear max-margin probe on fixed features."""
    x_train = np.asarray(x_train, dtype=np.float64).reshape(len(t_train), -1)
    x_test = np.asarray(x_test, dtype=np.float64).reshape(len(t_test), -1)
    t_train = np.asarray(t_train)
    t_test = np.asarray(t_test)
    classes = np.unique(t_train)
    if len(np.unique(np.concatenate([t_train, t_test]))) < 2 or len(classes) < 2:
        raise ContractError("linear probe needs at least two classes")
    mean = x_train.mean(axis=0)
    std = x_train.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    xs_train = (x_train - mean) / std
    xs_test = (x_test - mean) / std
    w, b = fit_linear_svm(xs_train, t_train, classes)
    pred = classes[np.argmax(xs_test @ w + b, axis=1)]
    return float(np.mean(pred == t_test))


def extract_features(checkpoint, x, n_samples=5, rng=None, chunk=512):
    """Representations averaged over ``n_samples`` discrete passes.

    Returns a dict with ``zeta``, ``y``, ``total`` (their concatenation) and
    ``conv`` (the flattened backbone output).  The ``zeta`` part is the
    posterior mean; its Gaussian sampling noise carries no input information.
    """
    rng = _stream(checkpoint, PROBE_STREAM, rng)
    model = checkpoint.model
    x = np.asarray(x, dtype=np.float64)
    sums = None
    for _ in range(n_samples):
        parts = {key: [] for key in TARGETS}
        for start in range(0, len(x), chunk):
            enc = model.encode(x[start:start + chunk], "discrete", rng)
            parts["zeta"].append(enc.mu.data)
            parts["y"].append(enc.y.data)
            parts["total"].append(np.concatenate([enc.mu.data, enc.y.data], axis=1))
            parts["conv"].append(enc.feat.data.reshape(enc.feat.shape[0], -1))
        stacked = {key: np.concatenate(v) for key, v in parts.items()}
        sums = stacked if sums is None else {k: sums[k] + stacked[k] for k in TARGETS}
    return {k: v / n_samples for k, v in sums.items()}


@dataclass
class ProbeReport:
    zeta: float
    y: float
    total: float
    conv: float
    n_train: int
    n_test: int
    n_samples: int = 5

    def to_lines(self):
        return [f"probe.{name}={getattr(self, name):.6f}" for name in TARGETS] + [
            f"probe.n_train={self.n_train}", f"probe.n_test={self.n_test}",
            f"probe.n_samples={self.n_samples}"]


def probe_report(checkpoint, dataset, n_samples=5, rng=None, targets=TARGETS):
    if len(np.unique(dataset.all_t())) < 2:
        raise ContractError("linear probe needs at least two classes")
    rng = _stream(checkpoint, PROBE_STREAM, rng)
    train = extract_features(checkpoint, dataset.x_train, n_samples, rng)
    test = extract_features(checkpoint, dataset.x_test, n_samples, rng)
    acc = {name: float("nan") for name in TARGETS}
    for name in targets:
        acc[name] = probe_accuracy(train[name], dataset.t_train, test[name], dataset.t_test)
    return ProbeReport(n_train=dataset.n_train, n_test=len(dataset.t_test), n_samples=n_samples, **acc)


def linear_probe(checkpoint, dataset, target="total", n_samples=5, rng=None):
    """Held-out probe accuracy on one representation of a frozen model."""
    if target not in TARGETS:
        raise ContractError(f"unknown probe target {target!r}; expected one of {TARGETS}")
    return getattr(probe_report(checkpoint, dataset, n_samples, rng, targets=(target,)), target)


# sparsity ----------------------------------------------------------------------------

@dataclass
class LayerSparsity:
    index: int
    kind: str
    blocks: int
    competitors: int
    active_fraction: float
    active_fraction_min: float
    active_fraction_max: float
    winner_hist: np.ndarray  # [B, U] counts
    winner_entropy: np.ndarray  # [B] nats
    dead_blocks: list
    gate_hist: np.ndarray
    gate_edges: np.ndarray = field(repr=False)


def layer_sparsity(layer, record, index=0, bins=10):
    """Exact winner statistics for one discrete-mode draw."""
    if record.mode != "discrete":
        raise ContractError("sparsity is measured on discrete-mode samples")
    xi = record.xi.data
    n = xi.shape[0]
    active = xi != 0
    per_sample = active.reshape(n, -1).sum(axis=1) / active[0].size
    counts = active.reshape(-1, layer.B, layer.U).sum(axis=0).astype(np.int64)
    share = counts / np.maximum(counts.sum(axis=1, keepdims=True), 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy = -np.sum(np.where(share > 0, share * np.log(share), 0.0), axis=1)
    dead = [int(b) for b in np.flatnonzero(share.max(axis=1) > DEAD_BLOCK_SHARE)]
    hist, edges = np.histogram(layer.gate_probs(), bins=bins, range=(0.0, 1.0))
    return LayerSparsity(index=index, kind="conv" if isinstance(layer, L.ConvLwtaLayer) else "dense",
                         blocks=layer.B, competitors=layer.U,
                         active_fraction=float(np.count_nonzero(active)) / active.size,
                         active_fraction_min=float(per_sample.min()),
                         active_fraction_max=float(per_sample.max()),
                         winner_hist=counts, winner_entropy=entropy, dead_blocks=dead,
                         gate_hist=hist, gate_edges=edges)


@dataclass
class SparsityReport:
    layers: list

    def to_lines(self):
        lines = []
        for rep in self.layers:
            p = f"layer{rep.index}"
            lines += [
                f"{p}.kind={rep.kind}",
                f"{p}.active_fraction={rep.active_fraction!r}",
                f"{p}.active_fraction_min={rep.active_fraction_min!r}",
                f"{p}.active_fraction_max={rep.active_fraction_max!r}",
                f"{p}.winner_entropy_mean={float(rep.winner_entropy.mean()):.6f}",
                f"{p}.dead_blocks={len(rep.dead_blocks)}",
                f"{p}.winner_hist={';'.join(','.join(str(c) for c in row) for row in rep.winner_hist)}",
                f"{p}.gate_hist={','.join(str(int(c)) for c in rep.gate_hist)}",
            ]
        return lines


def sparsity_report(checkpoint, x, rng=None):
    """Discrete-mode sparsity of every backbone LWTA layer on inputs ``x``."""
    rng = _stream(checkpoint, PROBE_STREAM, rng)
    backbone = checkpoint.model.backbone
    _, records = backbone.forward(T.as_tensor(np.asarray(x, dtype=np.float64)), "discrete", rng)
    return SparsityReport([layer_sparsity(rec.layer, rec, i) for i, rec in enumerate(records)])


# feature maps ----------------------------------------------------------------------

def write_pgm(path, image):
    """Binary greyscale PGM (P5) of a 2-D array, min-max scaled to 0..255."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    scaled = np.zeros(image.shape) if hi <= lo else (image - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header + pixels.tobytes())
    except OSError as exc:
        raise ExportError(f"cannot write image ({exc.strerror})", path) from exc


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, dims, maxval, pixels = blob.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError(f"not a binary PGM: {path}")
    width, height = (int(v) for v in dims.split())
    return np.frombuffer(pixels, dtype=np.uint8, count=width * height).reshape(height, width)


@dataclass
class FeatureMapExport:
    maps: np.ndarray  # [H, L, B * U]
    map_paths: list
    overlap_path: str
    overlap_count: int
    control_overlap_count: int = None


def _overlap(maps, blocks, competitors):
    active = (maps != 0).reshape(maps.shape[0], maps.shape[1], blocks, competitors).sum(axis=-1)
    per_position = np.sum(active > 1, axis=-1)
    return int(per_position.sum()), per_position


def feature_map_export(checkpoint, image, layer_index, out_dir, relu_control=False, rng=None):
    """Write every feature map of a conv LWTA layer plus a block-overlap map.

    ``image`` is one normalized ``[H, L, C]`` input.  The overlap count is
    the number of (position, block) pairs where two or more maps of the
    same block are nonzero.  With ``relu_control`` the same layer is also
    evaluated with ReLU units on the same draws for comparison.
    """
    rng = _stream(checkpoint, EXPORT_STREAM, rng)
    backbone = checkpoint.model.backbone
    conv_layers = [layer for layer in backbone.lwta_layers() if isinstance(layer, L.ConvLwtaLayer)]
    if not 0 <= layer_index < len(conv_layers):
        raise ContractError(f"layer index {layer_index} is not a convolutional LWTA layer "
                            f"(have {len(conv_layers)})")
    target = conv_layers[layer_index]
    x = T.as_tensor(np.asarray(image, dtype=np.float64).reshape((1,) + np.shape(image)[-3:]))
    for layer in backbone.layers:
        if layer is target:
            break
        x, _ = layer.forward(x, "discrete", rng)
    control_rng = copy.deepcopy(rng)
    out, _ = target.forward(x, "discrete", rng)
    maps = out.data[0]
    count, per_position = _overlap(maps, target.B, target.U)
    control = None
    if relu_control:
        twin = copy.deepcopy(target)
        twin.activation = "relu"
        control_out, _ = twin.forward(x, "discrete", control_rng)
        control, _ = _overlap(control_out.data[0], target.B, target.U)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise ExportError(f"cannot create output directory ({exc.strerror})", out_dir) from exc
    paths = []
    for b in range(target.B):
        for u in range(target.U):
            path = os.path.join(out_dir, f"layer{layer_index}_block{b}_unit{u}.pgm")
            write_pgm(path, maps[:, :, b * target.U + u])
            paths.append(path)
    overlap_path = os.path.join(out_dir, f"layer{layer_index}_overlap.pgm")
    write_pgm(overlap_path, per_position)
    return FeatureMapExport(maps=maps, map_paths=paths, overlap_path=overlap_path,
                            overlap_count=count, control_overlap_count=control)
