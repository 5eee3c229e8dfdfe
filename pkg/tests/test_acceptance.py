"""The ten acceptance criteria, each at its stated tolerance.

Every test carries a ``criterion`` marker; the conftest hook prints one
PASS/FAIL line per criterion at the end of the session.
"""

import itertools
import json
import time

import numpy as np
import pytest

from cmi_tune import cli
from cmi_tune import tensor as tn
from cmi_tune.cmi import (centroid_objective, compute_centroids, dataset_cmi, kl_divergence,
                          perturb_centroids)
from cmi_tune.data import (accuracy, collate, f1_binary, iter_batches, matthews_corr, synth_task,
                           synth_vocab)
from cmi_tune.distiller import (DistillConfig, compare_teachers, distill, distill_run,
                                init_student, teacher_logits)
from cmi_tune.losses import cls_loss, final_loss, kd_loss, lm_loss, max_cmi_loss, min_cmi_loss
from cmi_tune.model import (ModelConfig, final_hidden, forward, init_params, lm_probs,
                            sequence_log_prob)
from cmi_tune.report import build_report
from cmi_tune.trainer import TeacherCandidate, TrainConfig, fit, select_teacher, sweep

from conftest import jitter, tiny_config

criterion = pytest.mark.criterion


def note(record, text):
    record("detail", text)


# -- 1 ----------------------------------------------------------------------------

@criterion(1, "finite-difference gradients of every loss through the model")
def test_gradient_integrity(record_property):
    t0 = time.process_time()
    task = synth_task("majority_token", 40, 0, length=8)
    worst, checks = 0.0, 0
    for seed in range(20):
        params = jitter(init_params(tiny_config(), seed), seed + 100)
        rng = np.random.default_rng(seed)
        pick = np.concatenate([rng.choice(np.flatnonzero(task.labels == y), 3, replace=False)
                               for y in (0, 1)])
        batch = collate(task, pick)
        with tn.no_grad():
            feats = tn.softmax(forward(batch.ids, params, lengths=batch.lengths).pooled).data
        cents = compute_centroids(feats, batch.labels, 2)
        teacher = rng.normal(size=(6, 2))
        losses = {
            "L1": lambda: lm_loss(batch, params),
            "L2": lambda: cls_loss(batch, params),
            "LFinal": lambda: final_loss(batch, params, 0.5),
            "LMinCMI": lambda: min_cmi_loss(batch, params, cents, 0.5, gamma=0.5),
            "LMaxCMI": lambda: max_cmi_loss(batch, params, cents, 0.2, gamma=0.5, clip=50.0),
            "LKD": lambda: kd_loss(forward(batch.ids, params, lengths=batch.lengths).logits,
                                   teacher, batch.labels, 0.5, 2.0),
        }
        for name, f in losses.items():
            rep = tn.finite_diff_check(f, params.parameters(), tol=1e-4, max_coords=4, seed=seed)
            worst = max(worst, rep.max_rel_error)
            checks += 1
            assert rep.passed, f"{name} seed {seed}: relative error {rep.max_rel_error:.2e}"
    elapsed = time.process_time() - t0
    note(record_property, f"{checks} checks, worst rel err {worst:.1e}, {elapsed:.0f}s CPU")
    assert elapsed < 120


# -- 2 ----------------------------------------------------------------------------

@criterion(2, "CMI oracles and random-cluster properties")
def test_cmi_correctness(record_property):
    feats = np.array([[0.8, 0.2], [0.6, 0.4], [0.5, 0.5], [0.5, 0.5]])
    labels = np.array([0, 0, 1, 1])
    cents = compute_centroids(feats, labels, 2)
    assert abs(dataset_cmi(feats, labels, cents, "eq11_average").item() - 0.024157 / 2) < 1e-6
    oracle = ((0.8 * np.log(0.8 / 0.7) + 0.2 * np.log(0.2 / 0.3))
              + (0.6 * np.log(0.6 / 0.7) + 0.4 * np.log(0.4 / 0.3))) / 2
    assert abs(dataset_cmi(feats, labels, cents, "eq11_average").item() - oracle / 2) < 1e-9
    assert abs(dataset_cmi(feats, labels, cents, "eq12_literal").item() - oracle) < 1e-9

    rng = np.random.default_rng(0)
    for _ in range(1000):
        C, d, n = int(rng.integers(2, 4)), int(rng.integers(2, 6)), int(rng.integers(4, 12))
        lab = np.concatenate([np.arange(C), rng.integers(0, C, n - C)])
        f = rng.dirichlet(np.ones(d), size=n)
        c = compute_centroids(f, lab, C)
        for mode in ("eq11_average", "eq12_literal"):
            assert dataset_cmi(f, lab, c, mode).item() > 0
        flat = c.probs[lab]
        for mode in ("eq11_average", "eq12_literal"):
            assert abs(dataset_cmi(flat, lab, compute_centroids(flat, lab, C), mode).item()) < 1e-14
    note(record_property, f"toy cluster CMI {oracle:.6f}")


# -- 3 ----------------------------------------------------------------------------

@criterion(3, "closed-form centroid step is optimal")
def test_inner_minimisation(record_property):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        C, d = int(rng.integers(2, 4)), int(rng.integers(2, 7))
        labels = np.arange(15) % C
        feats = rng.dirichlet(np.ones(d), size=15)
        g = compute_centroids(feats, labels, C).probs
        base = centroid_objective(feats, labels, g)
        for _ in range(100):
            q = perturb_centroids(g, rng)
            assert centroid_objective(feats, labels, q) >= base
            for y in range(C):
                m = labels == y
                gap = (centroid_objective(feats[m], labels[m], q)
                       - centroid_objective(feats[m], labels[m], g)) / m.sum()
                err = abs(gap - kl_divergence(g[y], q[y]).item())
                worst = max(worst, err)
                assert err < 1e-9
    note(record_property, f"worst identity error {worst:.1e}")


# -- 4 ----------------------------------------------------------------------------

@criterion(4, "autoregressive normalisation and causality")
def test_markov_consistency(record_property):
    params = jitter(init_params(tiny_config(vocab_size=2, context_len=3), 3), 4, scale=0.5)
    worst = 0.0
    for first in (0, 1):
        total = sum(np.exp(sequence_log_prob(np.array((first, *rest)), params).item())
                    for rest in itertools.product((0, 1), repeat=2))
        worst = max(worst, abs(total - 1.0))
    assert worst < 1e-9
    for prefix in ((0,), (1,), (0, 1)):
        p = lm_probs(final_hidden([list(prefix)], params), params).data[0, -1]
        assert abs(p.sum() - 1.0) < 1e-12

    big = jitter(init_params(tiny_config(), 0), 1)
    ids = np.array([[0, 4, 5, 6, 7, 8, 9, 1]])
    base = final_hidden(ids, big).data
    for j in range(ids.shape[1]):
        changed = ids.copy()
        changed[0, j] = 11 if ids[0, j] != 11 else 10
        out = final_hidden(changed, big).data
        assert np.array_equal(out[0, :j], base[0, :j])
        assert not np.array_equal(out[0, j:], base[0, j:])
    note(record_property, f"|sum - 1| = {worst:.1e}")


# -- 5 and 6 ----------------------------------------------------------------------

# Settings for the paired runs. The criteria fix the task, sizes, width and
# epochs; the rest is chosen here (see README).
PAIRED = dict(epochs=5, lr=1e-3, batch_size=32, seed=0, centroid_refresh="per_step_ema")


@pytest.fixture(scope="module")
def paired_task():
    v = synth_vocab()
    train = synth_task("majority_token", 2000, 0, v)
    dev = synth_task("majority_token", 500, 1, v, split="dev")
    return train, dev, ModelConfig(vocab_size=len(v), embed_dim=64)


def _timed_fit(task, **kw):
    train, dev, mcfg = task
    t0 = time.process_time()
    _, rep = fit(init_params(mcfg, PAIRED["seed"]), train, dev, TrainConfig(**PAIRED, **kw))
    return rep, time.process_time() - t0


@pytest.fixture(scope="module")
def baseline_run(paired_task):
    return _timed_fit(paired_task)


@criterion(5, "min-CMI halves final train CMI at equal accuracy")
def test_min_cmi_behaviour(paired_task, baseline_run, record_property):
    base, t_base = baseline_run
    run, t_run = _timed_fit(paired_task, lam=0.5, cmi_sign="min")
    ratio = run.epochs[-1].train_cmi / base.epochs[-1].train_cmi
    gap = abs(run.metric - base.metric)
    note(record_property, f"CMI ratio {ratio:.3f}, accuracy {run.metric:.3f} vs "
                          f"{base.metric:.3f}, {t_base + t_run:.0f}s CPU")
    assert ratio <= 0.5
    assert gap <= 0.02
    assert t_base + t_run < 300


@criterion(6, "max-CMI raises final train CMI without clipping")
def test_max_cmi_behaviour(paired_task, baseline_run, record_property):
    base, t_base = baseline_run
    run, t_run = _timed_fit(paired_task, lam=0.2, cmi_sign="max")
    ratio = run.epochs[-1].train_cmi / base.epochs[-1].train_cmi
    note(record_property, f"CMI ratio {ratio:.3f}, clip events {run.clip_events}, "
                          f"accuracy {run.metric:.3f}, {t_base + t_run:.0f}s CPU")
    assert run.status == "ok"
    assert ratio >= 1.5
    assert run.clip_events == 0
    assert t_base + t_run < 300


# -- 7 ----------------------------------------------------------------------------

SMALL = dict(vocab_size=12, embed_dim=16, context_len=12, num_layers=2, num_heads=2, ff_mult=2)


@pytest.fixture(scope="module")
def small_task():
    v = synth_vocab()
    return (synth_task("majority_token", 120, 0, v, length=10),
            synth_task("majority_token", 60, 1, v, length=10, split="dev"))


@criterion(7, "distillation identities, full grid and teacher comparison")
def test_distillation(small_task, tmp_path, record_property):
    train, dev = small_task
    teacher = jitter(init_params(tiny_config(**SMALL), 0), 1, scale=0.2)
    cache = teacher_logits(teacher, train)
    worst = 0.0
    for batch in iter_batches(train, 16, seed=0):
        logits = forward(batch.ids, teacher.copy(), lengths=batch.lengths).logits
        kd = kd_loss(logits, cache[batch.sample_ids], batch.labels, 1.0, 1.0, reduction="mean")
        worst = max(worst, abs(kd.item()))
    assert worst < 1e-8

    student = init_student(teacher)
    cfg = TrainConfig(epochs=2, batch_size=16, lr=1e-3, seed=3)
    kd_params, _ = distill_run(cache, student.copy(), train, dev, 0.0, 2.0, cfg)
    ft_params, _ = fit(student.copy(), train, dev, cfg)
    assert all(kd_params[n].data.tobytes() == ft_params[n].data.tobytes() for n in ft_params.names())

    grid = DistillConfig(alphas=[0.05, 0.5, 0.9], temperatures=[1, 2, 5], epochs=2,
                         runs_per_config=3, batch_size=16, lr=3e-3)
    res = distill(teacher, train, dev, grid)
    assert len(res.cells) == 9 and all(len(c.runs) == 3 for c in res.cells)

    tcfg = dict(epochs=5, lr=3e-3, batch_size=16, seed=0)
    max_t, _ = fit(init_params(tiny_config(**SMALL), 0), train, dev,
                   TrainConfig(lam=0.2, cmi_sign="max", **tcfg))
    plain_t, _ = fit(init_params(tiny_config(**SMALL), 0), train, dev, TrainConfig(**tcfg))
    out = tmp_path / "compare"
    cmp = compare_teachers({"max_cmi": max_t, "baseline": plain_t}, train, dev, grid, out_dir=out)
    md = build_report(out, tmp_path / "report")["markdown"].read_text()
    assert "delta (max_cmi - baseline)" in md
    rows = {r["teacher"]: r["student_metric"] for r in cmp["rows"]}
    note(record_property, f"kd at step 0 {worst:.1e}; student from max-CMI teacher "
                          f"{rows['max_cmi']:.3f} vs plain teacher {rows['baseline']:.3f}")


# -- 8 ----------------------------------------------------------------------------

@criterion(8, "three-run medians and teacher selection")
def test_protocol_fidelity(small_task, record_property):
    train, dev = small_task
    factory = lambda seed: init_params(tiny_config(**SMALL), seed)  # noqa: E731
    base = TrainConfig(cmi_sign="max", lam=0.1, epochs=1, batch_size=16, lr=3e-3)
    res = sweep(factory, train, dev, [0.05, 0.2], base, runs_per_config=3)
    for lam in (0.05, 0.2):
        cells = [c for c in res.cells if c.lam == lam]
        assert len(cells) == 3
        ranked = sorted((c.report for c in cells), key=lambda r: (r.metric, r.seed))
        assert res.medians[lam].report is ranked[1]

    pick = select_teacher([{"lam": 0.1, "metric": 0.9, "cmi": 0.5},
                           {"lam": 0.2, "metric": 0.8, "cmi": 0.2}])
    assert pick.lam == 0.2 and pick.ratio == 4.0
    single = TeacherCandidate(0.3, 0.5, 0.25)
    assert select_teacher([single]) is single
    assert select_teacher([TeacherCandidate(0.4, 0.8, 0.2),
                           TeacherCandidate(0.1, 0.8, 0.2)]).lam == 0.1
    note(record_property, "medians over 3 seeds; ratio 4.0 beats 1.8")


# -- 9 ----------------------------------------------------------------------------

@criterion(9, "metrics match the contingency table")
def test_metric_oracles(record_property):
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(1, 50))
        p, t = rng.integers(0, 2, n), rng.integers(0, 2, n)
        tp = sum(1 for a, b in zip(p, t) if a == 1 and b == 1)
        tn_ = sum(1 for a, b in zip(p, t) if a == 0 and b == 0)
        fp = sum(1 for a, b in zip(p, t) if a == 1 and b == 0)
        fn = sum(1 for a, b in zip(p, t) if a == 0 and b == 1)
        assert accuracy(p, t) == (tp + tn_) / n
        assert f1_binary(p, t) == (2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0)
        denom = (tp + fp) * (tp + fn) * (tn_ + fp) * (tn_ + fn)
        assert matthews_corr(p, t) == ((tp * tn_ - fp * fn) / float(np.sqrt(denom)) if denom else 0.0)
    note(record_property, "1000 random cases, exact equality")


# -- 10 ---------------------------------------------------------------------------

@criterion(10, "re-running a command reproduces its artifacts bit for bit")
def test_determinism(tmp_path, record_property):
    doc = {"model": {"embed_dim": 16, "context_len": 12, "num_layers": 2, "num_heads": 2,
                     "ff_mult": 2},
           "data": {"n_train": 80, "n_dev": 40, "length": 10},
           "train": {"cmi_sign": "max", "lam": 0.2, "epochs": 2, "batch_size": 16, "lr": 3e-3},
           "sweep": {"lambdas": [0.1, 0.3], "runs_per_config": 2}}
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(doc))
    compared = 0
    for attempt in ("a", "b"):
        root = tmp_path / attempt
        assert cli.main(["train", "--config", str(cfg), "--out", str(root / "train"),
                         "--seed", "5"]) == 0
        assert cli.main(["sweep", "--config", str(cfg), "--out", str(root / "sweep")]) == 0
    for sub in ("train", "sweep"):
        a_files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a" / sub).rglob("*")
                         if p.is_file())
        b_files = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b" / sub).rglob("*")
                         if p.is_file())
        assert a_files == b_files
        for rel in a_files:
            a = (tmp_path / "a" / rel).read_bytes().replace(str(tmp_path / "a").encode(), b"")
            b = (tmp_path / "b" / rel).read_bytes().replace(str(tmp_path / "b").encode(), b"")
            assert a == b, rel
            compared += 1
    for attempt in ("a", "b"):
        root = tmp_path / attempt
        dist = dict(doc, distill={"teacher_checkpoint": str(root / "train" / "checkpoint.ckpt"),
                                  "alphas": [0.5], "temperatures": [2.0], "epochs": 1,
                                  "runs_per_config": 1, "batch_size": 16})
        (root / "d.json").write_text(json.dumps(dist))
        assert cli.main(["distill", "--config", str(root / "d.json"),
                         "--out", str(root / "distill")]) == 0
    for name in ("student.ckpt", "distill_grid.csv", "best_cell.json"):
        assert ((tmp_path / "a" / "distill" / name).read_bytes()
                == (tmp_path / "b" / "distill" / name).read_bytes())
        compared += 1
    note(record_property, f"{compared} artifact files identical across two runs")
