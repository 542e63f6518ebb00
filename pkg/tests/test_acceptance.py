"""Acceptance criteria 1 to 11.

Each test appends one ``criterion N: PASS|FAIL ...`` line that pytest prints
in an "acceptance criteria" section at the end of the run.  Run directly
with ``python3 tests/test_acceptance.py`` for the same report.

The desk-scale training criteria share trained runs through the session
``runs`` fixture, so the whole file takes roughly 15 minutes on one core.
"""

import os
import time

import numpy as np
import pytest

import conftest
import test_regularizers as reg_tests
import test_samplers as sampler_tests
from lwta_icp import cli
from lwta_icp import evaluation as E
from lwta_icp import layers as L
from lwta_icp import tensor as T
from lwta_icp import trainer
from lwta_icp.config import TrainConfig
from lwta_icp.data import ingest
from lwta_icp.gradcheck import REL_TOL, run_suite
from lwta_icp.samplers import make_rng

pytestmark = pytest.mark.slow

SEEDS_5 = range(5)
SEEDS_10 = range(10)


def report(n, ok, detail):
    conftest.ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def lwta_input(layer, n, rng):
    if isinstance(layer, L.ConvLwtaLayer):
        return rng.normal(size=(n, 8, 8, layer.C))
    return rng.normal(size=(n, layer.J))


def walk_backbone(model, x, rng):
    """Discrete pass through the backbone yielding ``(layer, input, output, record)`` per LWTA layer."""
    h = T.as_tensor(x)
    for layer in model.backbone.layers:
        out, rec = layer.forward(h, "discrete", rng)
        if rec is not None:
            yield layer, h, out, rec
        h = out


# 1 ----------------------------------------------------------------------------------

def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    errors = run_suite(0)
    elapsed = time.perf_counter() - start
    worst_case = max(errors, key=errors.get)
    ok = errors[worst_case] <= REL_TOL and elapsed <= 120
    report(1, ok, f"{len(errors)} cases, worst {errors[worst_case]:.2e} ({worst_case}), {elapsed:.1f}s")


# 2 ----------------------------------------------------------------------------------

def test_criterion_2_sampler_distributions():
    checks = [
        sampler_tests.test_gumbel_argmax_matches_softmax_chi2,
        sampler_tests.test_kumaraswamy_1_1_is_uniform_ks,
        sampler_tests.test_kumaraswamy_2_3_mean_matches_closed_form_moment,
    ] + [lambda lg=lg: sampler_tests.test_bernoulli_discrete_limit_frequency_within_3_sigma(lg)
         for lg in (-1.5, 0.0, 0.8)]
    start = time.perf_counter()
    failures = []
    for check in checks:
        try:
            check()
        except AssertionError as exc:
            failures.append(f"{getattr(check, '__name__', 'bernoulli')}: {exc}")
    elapsed = time.perf_counter() - start
    report(2, not failures and elapsed <= 60, f"{len(checks)} checks, {len(failures)} failed, {elapsed:.1f}s")


# 3 ----------------------------------------------------------------------------------

def _exact_fraction_violations(model, u, rng):
    bad = 0
    for layer in model.all_lwta_layers():
        _, rec = layer.forward(lwta_input(layer, 100, rng), "discrete", rng)
        xi = rec.xi.data
        per_sample = np.count_nonzero(xi.reshape(100, -1), axis=1) / (xi.size // 100)
        bad += int(np.sum(per_sample != 1.0 / u))
        bad += int(np.any(xi.sum(axis=-1) != 1))
    return bad


def test_criterion_3_sparsity_exactness(runs):
    rng = make_rng(303)
    models = []
    for u in (2, 4):
        for preset, data in (("mlp-tiny", ingest("blobs", seed=0)), ("cnn-mini", ingest("digits8x8", seed=0))):
            ckpt = trainer.train(TrainConfig(preset=preset, dataset=data.name, u=u, epochs=0), data)
            models.append((f"fresh {preset} U={u}", ckpt.model, u))
    models.append(("trained cnn-mini U=2", runs.digits(0)[0].model, 2))
    models.append(("trained mlp-tiny U=2", runs.blobs(0)[0].model, 2))
    trained_u4 = trainer.train(TrainConfig(u=4, epochs=5, seed=0), ingest("blobs", seed=0))
    models.append(("trained mlp-tiny U=4", trained_u4.model, 4))
    violations = {name: _exact_fraction_violations(model, u, rng) for name, model, u in models}
    total = sum(violations.values())
    report(3, total == 0, f"{len(models)} models, every LWTA layer, 100 inputs each, {total} violations")


# 4 ----------------------------------------------------------------------------------

def test_criterion_4_conv_mutual_exclusivity(runs):
    ckpt, data, _ = runs.digits(0)
    fresh = trainer.train(TrainConfig(preset="cnn-mini", dataset="digits8x8", u=4, epochs=0), data)
    rng = make_rng(404)
    x = data.x_test[:8]
    violations = checked = 0
    for model in (ckpt.model, fresh.model):
        for _ in range(100):
            for layer, _, out, _ in walk_backbone(model, x, rng):
                if isinstance(layer, L.ConvLwtaLayer):
                    n, h, w, _ = out.shape
                    active = (out.data != 0).reshape(n, h, w, layer.B, layer.U).sum(axis=-1)
                    violations += int(np.sum(active > 1))
                    checked += active.size
    report(4, violations == 0, f"{checked} block positions over 100 samples x 2 models, {violations} violations")


# 5 ----------------------------------------------------------------------------------

def test_criterion_5_kl_oracles():
    checks = {
        "categorical": reg_tests.test_categorical_mc_matches_exact_sum,
        "kumaraswamy-beta(8,8,1)": lambda: reg_tests.test_kumaraswamy_beta_mc_matches_quadrature(8.0, 8.0, 1.0),
        "kumaraswamy-beta(5,10,3)": lambda: reg_tests.test_kumaraswamy_beta_mc_matches_quadrature(5.0, 10.0, 3.0),
        "bernoulli": reg_tests.test_bernoulli_closed_form_matches_mc_oracle,
        "gaussian": reg_tests.test_gaussian_closed_form_matches_mc_oracle,
    }
    failed = []
    for name, check in checks.items():
        try:
            check()
        except AssertionError:
            failed.append(name)
    report(5, not failed, f"{len(checks)} oracles within 1%, failed: {failed or 'none'}")


# 6 ----------------------------------------------------------------------------------

def test_criterion_6_desk_scale_training(runs):
    blob_pass, digit_pass, details = 0, 0, []
    for seed in SEEDS_5:
        ckpt, data, cpu = runs.blobs(seed)
        tr = trainer.accuracy(ckpt, data.x_train, data.t_train)
        te = trainer.accuracy(ckpt, data.x_test, data.t_test)
        blob_pass += tr >= 0.99 and te >= 0.97 and cpu <= 300
        details.append(f"blobs s{seed} {tr:.3f}/{te:.3f} {cpu:.0f}s")
    for seed in SEEDS_5:
        ckpt, data, cpu = runs.digits(seed)
        te = trainer.accuracy(ckpt, data.x_test, data.t_test)
        digit_pass += te >= 0.90 and cpu <= 900
        details.append(f"digits s{seed} {te:.3f} {cpu:.0f}s")
    ok = blob_pass >= 4 and digit_pass >= 4
    report(6, ok, f"blobs {blob_pass}/5, digits {digit_pass}/5 [{'; '.join(details)}]")


# 7 ----------------------------------------------------------------------------------

def test_criterion_7_compression(runs):
    ckpt, data, _ = runs.digits(0)
    thresholds = [0.0, 1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.3, 0.5, 0.9, 0.99]
    ratios = [trainer.compress(ckpt, th)[1] for th in thresholds]
    monotone = all(a <= b for a, b in zip(ratios, ratios[1:]))
    pruned, ratio = trainer.compress(ckpt, 0.001)
    rng_seed = 707
    before = trainer.accuracy(ckpt, data.x_test, data.t_test, 5, rng=make_rng(rng_seed))
    after = trainer.accuracy(pruned, data.x_test, data.t_test, 5, rng=make_rng(rng_seed))
    drop = before - after
    ok = monotone and drop <= 0.01
    report(7, ok, f"monotone={monotone} ratios={[round(r, 3) for r in ratios]} "
                  f"ratio@0.001={ratio:.3f} acc {before:.4f}->{after:.4f} drop={drop:.4f}")


# 8 ----------------------------------------------------------------------------------

def test_criterion_8_bayesian_averaging(runs):
    acc1, acc5, var1, var5 = [], [], [], []
    for seed in SEEDS_10:
        ckpt, data, _ = runs.digits(seed)
        x, t = data.x_test, data.t_test
        rng = make_rng([808, seed])
        singles = np.stack([trainer.predict(ckpt, x, 1, rng) for _ in range(5)])
        averaged = np.stack([trainer.predict(ckpt, x, 5, rng) for _ in range(5)])
        acc1.append(np.mean(np.argmax(singles, axis=2) == t))
        acc5.append(np.mean(np.argmax(averaged, axis=2) == t))
        var1.append(singles.var(axis=0).mean())
        var5.append(averaged.var(axis=0).mean())
    m1, m5 = float(np.mean(acc1)), float(np.mean(acc5))
    reduced = all(v5 < v1 for v1, v5 in zip(var1, var5))
    ok = m5 >= m1 - 0.005 and reduced
    report(8, ok, f"mean acc 1-sample {m1:.4f}, 5-sample {m5:.4f}; variance "
                  f"{np.mean(var1):.2e}->{np.mean(var5):.2e}, reduced on {sum(a > b for a, b in zip(var1, var5))}/10 seeds")


# 9 ----------------------------------------------------------------------------------

def test_criterion_9_probe_ordering(runs):
    scores = {"zeta": [], "y": [], "total": []}
    for seed in SEEDS_10:
        ckpt, data, _ = runs.digits(seed)
        rep = E.probe_report(ckpt, data, 5, rng=make_rng([909, seed]), targets=("zeta", "y", "total"))
        for key in scores:
            scores[key].append(getattr(rep, key))
    means = {k: float(np.mean(v)) for k, v in scores.items()}
    ordered = means["total"] >= max(means["zeta"], means["y"]) - 0.01

    t = np.arange(600) % 10
    one_hot = E.probe_accuracy(np.eye(10)[t[:400]], t[:400], np.eye(10)[t[400:]], t[400:])
    rng = make_rng(910)
    labels = rng.permutation(np.repeat([0, 1], 2000))
    noise = rng.normal(size=(4000, 8))
    chance = E.probe_accuracy(noise[:2000], labels[:2000], noise[2000:], labels[2000:])
    sane = one_hot == 1.0 and abs(chance - 0.5) <= 0.05
    report(9, ordered and sane,
           f"mean over 10 seeds: total {means['total']:.4f}, zeta {means['zeta']:.4f}, y {means['y']:.4f}; "
           f"one-hot {one_hot:.3f}, noise {chance:.3f}")


# 10 ---------------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path, capsys):
    paths = []
    for _ in range(2):
        assert cli.main(["train", "--preset", "blobs", "--seed", "10", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        paths.append(next(l.split("=", 1)[1] for l in out.splitlines() if l.startswith("checkpoint=")))
    with open(paths[0], "rb") as a, open(paths[1], "rb") as b:
        identical = a.read() == b.read()
    ckpt = trainer.Checkpoint.load(paths[0])
    again = trainer.Checkpoint.from_bytes(ckpt.to_bytes())
    x = ingest("blobs", seed=10).x_test
    fwd_a = ckpt.model.predict_logits(x, "discrete", make_rng(1)).data
    fwd_b = again.model.predict_logits(x, "discrete", make_rng(1)).data
    round_trip = fwd_a.tobytes() == fwd_b.tobytes()
    report(10, identical and round_trip, f"checkpoints identical={identical}, round-trip forward bitwise={round_trip}")


# 11 ---------------------------------------------------------------------------------

def test_criterion_11_max_winner_mode(tmp_path, capsys):
    code = cli.main(["train", "--preset", "digits8x8", "--winner", "max", "--epochs", "2", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert code == 0
    path = next(l.split("=", 1)[1] for l in out.splitlines() if l.startswith("checkpoint="))
    ckpt = trainer.Checkpoint.load(path)
    data = ingest("digits8x8", seed=ckpt.config.seed)
    mismatches = layers = 0
    for layer, h_in, _, rec in walk_backbone(ckpt.model, data.x_test[:50], make_rng(11)):
        layers += 1
        h = layer.responses(h_in, rec.z).data
        expected = np.eye(layer.U)[np.argmax(h, axis=-1)]
        mismatches += int(np.sum(rec.xi.data != expected))
        assert layer.activation == "lwta-max"
    report(11, mismatches == 0 and layers > 0,
           f"--winner max trained via CLI; {layers} layers, {mismatches} entries differ from argmax one-hot")


if __name__ == "__main__":
    raise SystemExit(pytest.main([os.path.abspath(__file__), "-q"]))
