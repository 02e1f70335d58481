"""Acceptance suite: one test per criterion, each reported as a pass/fail line
in the terminal summary (see conftest.py)."""
import csv
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from fastadv import attacks
from fastadv import tensor as T
from fastadv.attacks import (AttackConfig, BudgetViolation, check_budget, fgsm_step, pgd_attack,
                             preset)
from fastadv.data import (CountMismatchError, Dataset, LabelRangeError, MagicError,
                          RecordLengthError, TruncatedError, gen_synthetic_blobs,
                          load_cifar10_binary, load_idx, write_cifar10_binary, write_idx)
from fastadv.losses import ce_loss, pco_loss
from fastadv.metrics import eval_accuracy
from fastadv.models import MLP, ModelParams, forward_logits, init_params
from fastadv.tensor import GradRequest, Tape, Tensor
from fastadv.trainers import TrainConfig, init_state, mep_update, train_epoch

from fixtures import cifar_record, idx_images, idx_labels, write
from oracles import ce, central_diff, rel_err, softmax, vertex_max

ROOT = Path(__file__).resolve().parent.parent
acceptance = pytest.mark.acceptance


def _input_grad(fn, arrays, wrt):
    tape = Tape()
    leaves = [tape.input(a) if i == wrt else tape.constant(a) for i, a in enumerate(arrays)]
    _, g = T.backward(tape, 1.0, GradRequest(False, True), output=T.sum(fn(*leaves)))
    return g.data


def _fd(fn, arrays, wrt):
    def f(v):
        args = [Tensor(v) if i == wrt else Tensor(a) for i, a in enumerate(arrays)]
        return float(fn(*args).data.sum())
    return central_diff(f, arrays[wrt])


def _smooth(x):
    # keep samples off the relu/clamp kinks at 0 and +-0.5
    return np.where(np.abs(x) < 0.05, x + 0.1, np.where(np.abs(np.abs(x) - 0.5) < 0.05, x + 0.1, x))


@acceptance(1, "gradient correctness: analytic vs finite differences")
def test_gradients_match_finite_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    errors = []
    with T.precision(64):
        unary = [T.neg, T.square, T.relu, lambda a: T.scale(a, -1.7),
                 lambda a: T.clamp(a, -0.5, 0.5),
                 lambda a: T.square(T.flatten(a)), lambda a: T.square(T.reshape(a, (-1,))),
                 lambda a: T.mul(T.log_softmax(a), Tensor(np.linspace(-1, 1, 12).reshape(3, 4))),
                 lambda a: T.mul(T.softmax(a), Tensor(np.linspace(-1, 2, 12).reshape(3, 4))),
                 lambda a: T.mean(T.square(a)),
                 lambda a: T.square(T.pick(a, np.array([0, 3, 1])))]
        for fn in unary:
            for _ in range(5):
                a = _smooth(rng.normal(size=(3, 4)))
                errors.append(rel_err(_input_grad(fn, [a], 0), _fd(fn, [a], 0)))
        binary = [T.add, T.sub, T.mul]
        for op in binary:
            fn = (lambda op: lambda p, q: T.square(op(p, q)))(op)
            for _ in range(5):
                args = [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]
                for wrt in (0, 1):
                    errors.append(rel_err(_input_grad(fn, args, wrt), _fd(fn, args, wrt)))
        affine = lambda p, q, r: T.square(T.add_bias(T.matmul(p, q), r))  # noqa: E731
        conv = lambda p, q, r: T.square(T.conv2d(p, q, r))  # noqa: E731
        pool = lambda p: T.square(T.maxpool2d(p))  # noqa: E731
        for _ in range(5):
            args = [rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)]
            errors += [rel_err(_input_grad(affine, args, w), _fd(affine, args, w)) for w in range(3)]
            args = [rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3)),
                    rng.normal(size=3)]
            errors += [rel_err(_input_grad(conv, args, w), _fd(conv, args, w)) for w in range(3)]
            x = rng.normal(size=(2, 2, 4, 4))
            errors.append(rel_err(_input_grad(pool, [x], 0), _fd(pool, [x], 0)))

        # full regularized loss on a 2-layer MLP, gradients w.r.t. every parameter
        for trial in range(5):
            model = init_params(MLP(input_shape=(5,), hidden=(6,), num_classes=3), trial)
            xt, xc, xp = (rng.random((4, 5)) for _ in range(3))
            y = rng.integers(0, 3, 4)
            total, _, _ = pco_loss(model, xt, xc, xp, y, beta=10.0)
            grads, _ = T.backward(total.tape, 1.0, GradRequest(wrt_params=True), output=total)

            def oracle(m):
                pt, pc, pp = (softmax(forward_logits(m, v)) for v in (xt, xc, xp))
                reg = ((pc - pp) ** 2).mean() - ((pt - pc) ** 2).mean()
                return ce(forward_logits(m, xt), y) + 10.0 * reg

            for name, arr in model.params.items():
                fd = central_diff(lambda v: oracle(model.replace({**model.params, name: v})), arr)
                errors.append(rel_err(grads[name].data, fd))
    elapsed = time.perf_counter() - t0
    print(f"{len(errors)} cases, max relative error {max(errors):.2e}, {elapsed:.1f}s")
    assert len(errors) >= 100
    assert max(errors) < 1e-5
    assert elapsed < 120


@acceptance(2, "loss identity: regularized loss with beta=0 equals cross-entropy")
def test_beta_zero_loss_is_cross_entropy():
    rng = np.random.default_rng(1)
    with T.precision(64):
        model = init_params(MLP(input_shape=(6,), hidden=(8,), num_classes=4), 0)
        for _ in range(50):
            xt, xc, xp = (rng.random((5, 6)) for _ in range(3))
            y = rng.integers(0, 4, 5)
            total, _, _ = pco_loss(model, xt, xc, xp, y, beta=0.0)
            reference = ce_loss(Tensor(forward_logits(model, xt)), y).item()
            assert abs(total.item() - reference) <= 1e-12


@acceptance(3, "fusion algebra and lambda range over a 3-epoch run")
def test_fusion_identity_over_training_run():
    data = gen_synthetic_blobs(3, 8, 60, 0.1, seed=0)
    cfg = TrainConfig(method="FGSM_PCO", epsilon=0.1, epochs=3, batch_size=16,
                      lr_base=0.05).validate()
    state = init_state(init_params(MLP(input_shape=(8,), hidden=(16,), num_classes=3), 0),
                       cfg, data)
    worst, batches, lam_lo, lam_hi = 0.0, 0, 1.0, 0.0

    def check(art):
        nonlocal worst, batches, lam_lo, lam_hi
        assert art.x_train_raw.dtype == np.float32
        lam = art.lam.reshape(-1, 1)
        expected = (np.float32(1) - lam) * np.float32(cfg.gamma) * art.delta
        worst = max(worst, float(np.abs((art.x_train_raw - art.x_prev) - expected).max()))
        lam_lo, lam_hi = min(lam_lo, float(art.lam.min())), max(lam_hi, float(art.lam.max()))
        batches += 1

    for _ in range(cfg.epochs):
        state, _ = train_epoch(state, data, cfg, check)
    print(f"{batches} batches, max identity error {worst:.2e}, lambda in [{lam_lo:.4f}, "
          f"{lam_hi:.4f}]")
    assert batches == 3 * 12
    assert worst <= 1e-6
    assert 0 < lam_lo and lam_hi < 1


@acceptance(4, "single-step attack reaches the best box vertex on linear models")
def test_fgsm_matches_vertex_enumeration():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    hits = 0
    with T.precision(64):
        for _ in range(100):
            d = int(rng.integers(1, 11))
            arch = MLP(input_shape=(d,), hidden=(), num_classes=2)
            model = ModelParams(arch, {"fc0.weight": rng.normal(size=(2, d)),
                                       "fc0.bias": rng.normal(size=2)})
            x = rng.random((1, d))
            y = np.array([int(rng.integers(2))])
            eps = float(rng.uniform(0.01, 0.3))
            x_adv, _ = fgsm_step(model, x, y, eps)
            best = vertex_max(lambda v: ce(forward_logits(model, v), y), x, eps)
            hits += abs(ce(forward_logits(model, x_adv), y) - best) <= 1e-12 * max(1.0, best)
    elapsed = time.perf_counter() - t0
    print(f"{hits}/100 trials at the vertex maximum, {elapsed:.1f}s")
    assert hits == 100 and elapsed < 60


@acceptance(5, "L-inf budget holds after every attack and projected trainer epoch")
def test_budget_invariant_everywhere():
    assert attacks.BUDGET_CHECKS, "test build must enable continuous budget checks"
    with pytest.raises(BudgetViolation):
        check_budget(np.array([0.5], np.float32), np.array([0.0], np.float32), 0.1)
    data = gen_synthetic_blobs(3, 8, 40, 0.2, seed=5)
    model = init_params(MLP(input_shape=(8,), hidden=(16,), num_classes=3), 5)
    eps = 0.1
    for name in attacks.PRESETS:
        for clamp in (True, False):
            p = preset(name, eps, seed=1)
            cfg = AttackConfig(p.epsilon, p.alpha, p.steps, p.random_start, clamp, p.seed)
            check_budget(pgd_attack(model, data.x, data.y, cfg), data.x, eps)
    check_budget(fgsm_step(model, data.x, data.y, eps)[0], data.x, eps)
    for method in ("FGSM_PCO", "FGSM_MEP", "FGSM_RS", "FGSM_AT", "PGD_AT"):
        cfg = TrainConfig(method=method, epsilon=eps, epochs=2, batch_size=16, pgd_steps=3,
                          lr_base=0.05).validate()
        state = init_state(model, cfg, data)
        for _ in range(cfg.epochs):
            state, _ = train_epoch(state, data, cfg)  # trainers assert the budget per batch
            if method == "FGSM_PCO":
                check_budget(state.store.arrays["x_prev"], data.x, eps)
            if method == "FGSM_MEP":
                check_budget(data.x + state.store.arrays["eta"], data.x, eps)


@acceptance(6, "attack strength ordering: PGD-50 <= PGD-10 <= FGSM <= clean")
def test_attack_ordering_on_trained_model():
    train = gen_synthetic_blobs(3, 8, 150, 0.15, seed=6)
    test = gen_synthetic_blobs(3, 8, 100, 0.15, seed=1006)
    cfg = TrainConfig(method="FGSM_PCO", epsilon=0.1, epochs=10, batch_size=32, lr_base=0.05,
                      lr_milestones=(8,)).validate()
    state = init_state(init_params(MLP(input_shape=(8,), hidden=(32,), num_classes=3), 6),
                       cfg, train)
    for _ in range(cfg.epochs):
        state, _ = train_epoch(state, train, cfg)
    eps = 0.15
    acc = {"clean": eval_accuracy(state.model, test)}
    for name in ("fgsm", "pgd10", "pgd50"):
        acc[name] = eval_accuracy(state.model, test, preset(name, eps, seed=6))
    print(", ".join(f"{k} {v:.3f}" for k, v in acc.items()))
    slack = 0.01
    assert acc["pgd50"] <= acc["pgd10"] + slack
    assert acc["pgd10"] <= acc["fgsm"] + slack
    assert acc["fgsm"] <= acc["clean"] + slack
    assert acc["clean"] - acc["pgd50"] > 0.05  # the attacks are doing something


@acceptance(7, "desk MNIST: RS overfits catastrophically, PCO does not")
def test_catastrophic_overfitting_scenario(tmp_path):
    mnist = ROOT / "data" / "mnist"
    if not (mnist / "train-images-idx3-ubyte").exists():
        subprocess.run([sys.executable, str(ROOT / "scripts" / "prepare_mnist.py"),
                        "--out", str(mnist)], check=True, cwd=ROOT)
    out = tmp_path / "co"
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, str(ROOT / "scripts" / "run_overfit_scenario.py"),
                           "--config", str(ROOT / "configs" / "desk-mnist-co.cfg"),
                           "--seeds", "0", "1", "2", "--out", str(out)],
                          cwd=ROOT, capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    print(proc.stdout, proc.stderr[-2000:], f"{elapsed / 60:.1f} min", sep="\n")
    result = json.loads((out / "scenario.json").read_text())
    gate = result["gate"]
    assert gate["pco_not_worse_every_seed"]
    assert gate["rs_flagged"] >= 2
    assert gate["pco_flagged"] == 0


@acceptance(8, "momentum-prior recursion matches hand-computed traces")
def test_mep_scalar_traces():
    eps, alpha = 0.125, 0.0625  # dyadic values keep the hand arithmetic exact
    # visit 1 with g = +1 from eta = 0.03125, momentum 0; visit 2 with g = -1
    expected = {  # mu: (m1, delta1, eta1, m2, delta2, eta2)
        0.0: (1.0, 0.09375, 0.09375, -1.0, 0.03125, 0.03125),
        0.3: (1.0, 0.09375, 0.09375, -0.7, 0.03125, 0.03125),
        1.0: (1.0, 0.09375, 0.09375, 0.0, 0.03125, 0.09375),
    }
    for mu, (m1, d1, e1, m2, d2, e2) in expected.items():
        eta, mom = np.array([0.03125]), np.array([0.0])
        mom, delta, eta = mep_update(eta, mom, np.array([1.0]), mu, alpha, eps)
        assert (mom[0], delta[0], eta[0]) == (m1, d1, e1), mu
        mom, delta, eta = mep_update(eta, mom, np.array([-1.0]), mu, alpha, eps)
        assert mom[0] == pytest.approx(m2, abs=1e-15) and (delta[0], eta[0]) == (d2, e2), mu

    # the trainer follows the same recursion: frozen 1-D model, so g = +1 on every visit
    with T.precision(64):
        arch = MLP(input_shape=(1,), hidden=(), num_classes=2)
        model = ModelParams(arch, {"fc0.weight": np.array([[-1.0], [1.0]]),
                                   "fc0.bias": np.zeros(2)})
        data = Dataset(np.array([[0.5]]), np.array([0]), "one", 2)
        for mu in expected:
            cfg = TrainConfig(method="FGSM_MEP", epsilon=eps, attack_alpha=alpha, mu=mu,
                              epochs=2, batch_size=1, lr_base=0.0, clamp_pixels=False).validate()
            state = init_state(model, cfg, data)
            seen = []
            for _ in range(2):
                state, _ = train_epoch(state, data, cfg, seen.append)
            eta0 = seen[0].eta_prev[0, 0]
            eta1 = min(eta0 + alpha, eps)
            eta2 = min(eta1 + alpha, eps)
            assert [a.g_c[0, 0] for a in seen] == [1.0, 1.0]
            assert seen[0].momentum[0, 0] == 1.0 and seen[1].momentum[0, 0] == mu + 1.0
            assert seen[0].delta[0, 0] == eta1 and seen[1].delta[0, 0] == eta2
            assert state.store.arrays["eta"][0, 0] == eta2
            assert state.store.arrays["momentum"][0, 0] == mu + 1.0


def _metrics_without_wall_time(path):
    rows = list(csv.reader(open(path)))
    col = rows[0].index("wall_time_s")
    return [r[:col] + r[col + 1:] for r in rows]


@acceptance(9, "determinism across runs and across a checkpoint resume")
def test_determinism_and_resume(tmp_path):
    base = [sys.executable, "-m", "fastadv.cli", "train", "--config",
            str(ROOT / "configs" / "blobs-smoke.cfg"), "--override", "train.epochs=3",
            "--override", "dataset.n_per_class=40", "--seed", "3"]

    def train(out, *extra):
        subprocess.run([*base, "--out", str(out), *extra], check=True, cwd=ROOT)
        return _metrics_without_wall_time(out / "metrics.csv")

    first = train(tmp_path / "a")
    assert train(tmp_path / "b") == first
    train(tmp_path / "c", "--override", "train.epochs=1", "--override", "run.checkpoint_every=1")
    resumed = train(tmp_path / "d", "--resume", str(tmp_path / "c" / "ckpt_epoch001.fatb"))
    assert resumed == first
    assert len(first) == 4


@acceptance(10, "dataset formats: byte-exact round trips and distinct errors")
def test_format_fidelity(tmp_path):
    images, labels = write(tmp_path / "i", idx_images()), write(tmp_path / "l", idx_labels())
    ds = load_idx(images, labels)
    write_idx(np.rint(ds.x[:, 0] * 255), ds.y, tmp_path / "i2", tmp_path / "l2")
    assert (tmp_path / "i2").read_bytes() == images.read_bytes()
    assert (tmp_path / "l2").read_bytes() == labels.read_bytes()

    raw = cifar_record(7) + cifar_record(3, first_pixel=9, fill=128)
    cifar = load_cifar10_binary(write(tmp_path / "c.bin", raw))
    assert cifar.y.tolist() == [7, 3] and cifar.x[0, 0, 0, 0] == 1.0
    write_cifar10_binary(np.rint(cifar.x * 255), cifar.y, tmp_path / "c2.bin")
    assert (tmp_path / "c2.bin").read_bytes() == raw

    cases = [
        (MagicError, lambda: load_idx(images, write(tmp_path / "bad", idx_labels(magic=0x803)))),
        (TruncatedError, lambda: load_idx(write(tmp_path / "t", idx_images()[:-2]), labels)),
        (CountMismatchError, lambda: load_idx(images, write(tmp_path / "n",
                                                            idx_labels(1, b"\x03")))),
        (RecordLengthError, lambda: load_cifar10_binary(write(tmp_path / "r", bytes(3072)))),
        (LabelRangeError, lambda: load_cifar10_binary(write(tmp_path / "g", cifar_record(10)))),
    ]
    for error, load in cases:
        with pytest.raises(error) as info:
            load()
        assert type(info.value) is error
