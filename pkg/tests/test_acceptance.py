"""Acceptance suite: one test per shipping criterion, each printing a
single PASS/FAIL line (visible even without -s) and enforcing its own
runtime budget.

1. analytic gradients match central finite differences
2. clustering / evaluation / hard selection match independent oracles
3. memory banks keep their invariants over long random update runs
4. end-to-end learning reaches high mAP on a separable synthetic set
5. the mu sweep reproduces the hybrid-beats-endpoints ordering
6. deterministic mode gives byte-identical artifacts
7. the evaluator implements the single-query junk-filter protocol
"""

import csv
import time
from dataclasses import replace

import numpy as np
import pytest

from hybridreid import (
    ClusterBank,
    InstanceBank,
    PseudoLabeling,
    SynthSpec,
    TrainConfig,
    cluster_loss,
    dbscan,
    evaluate_retrieval,
    generate,
    hard_instance_loss,
    hybrid_loss,
    init_cluster_bank,
    init_instance_bank,
    l2_normalize,
    save_features,
    select_hard_negative,
    select_hard_positive,
    softmax_contrastive,
    train,
    update_cluster_bank,
    update_instance_bank,
)
from hybridreid.cli import main
from hybridreid.core import cameras, identities
from hybridreid.encoder import MLPEncoder
from hybridreid.trainer import embed_all

from oracles import (
    canonical_partition,
    fd_grad,
    ref_dbscan,
    ref_evaluate,
    ref_hard_negative,
    ref_hard_positive,
    rel_err,
)

FD_H = 1e-6
GRAD_TOL = 1e-4


def emit(capsys, line):
    with capsys.disabled():
        print(line, flush=True)


def check(capsys, criterion, ok, detail):
    emit(capsys, f"[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def test_criterion_1_gradients_match_finite_differences(capsys):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0

    def track(analytic, fd):
        nonlocal worst
        worst = max(worst, rel_err(analytic, fd))

    for _ in range(100):  # softmax_contrastive
        m, d = int(rng.integers(2, 12)), int(rng.integers(2, 8))
        keys = l2_normalize(rng.standard_normal((m, d)))
        q = l2_normalize(rng.standard_normal(d)).copy()
        pos = int(rng.integers(0, m))
        tau = float(rng.uniform(0.05, 1.0))
        out = softmax_contrastive(q, keys, pos, tau)
        track(out.grad_query,
              fd_grad(lambda: softmax_contrastive(q, keys, pos, tau).value,
                      q, FD_H))

    for _ in range(100):  # cluster_loss
        c, d = int(rng.integers(2, 10)), int(rng.integers(2, 8))
        bank = ClusterBank(
            centroids=l2_normalize(rng.standard_normal((c, d))), alpha=0.2
        )
        q = l2_normalize(rng.standard_normal(d)).copy()
        own = int(rng.integers(0, c))
        tau = float(rng.uniform(0.05, 1.0))
        out = cluster_loss(q, bank, own, tau)
        track(out.grad_query,
              fd_grad(lambda: cluster_loss(q, bank, own, tau).value, q, FD_H))

    for _ in range(100):  # hard_instance_loss (selection is stop-gradient)
        c, s, d = int(rng.integers(2, 7)), int(rng.integers(2, 7)), 5
        bank = InstanceBank(slots=l2_normalize(rng.standard_normal((c, s, d))))
        q = l2_normalize(rng.standard_normal(d)).copy()
        own = int(rng.integers(0, c))
        tau = float(rng.uniform(0.05, 1.0))
        out = hard_instance_loss(q, bank, own, tau)
        track(out.grad_query,
              fd_grad(lambda: hard_instance_loss(q, bank, own, tau).value,
                      q, FD_H))

    for _ in range(100):  # hybrid_loss blend
        d = 5
        cbank = ClusterBank(
            centroids=l2_normalize(rng.standard_normal((4, d))), alpha=0.2
        )
        ibank = InstanceBank(slots=l2_normalize(rng.standard_normal((4, 3, d))))
        q = l2_normalize(rng.standard_normal(d)).copy()
        mu = float(rng.uniform(0.0, 1.0))

        def hybrid_value():
            return hybrid_loss(
                cluster_loss(q, cbank, 1, 0.2),
                hard_instance_loss(q, ibank, 1, 0.2),
                mu,
            ).value

        out = hybrid_loss(
            cluster_loss(q, cbank, 1, 0.2),
            hard_instance_loss(q, ibank, 1, 0.2),
            mu,
        )
        track(out.grad_query, fd_grad(hybrid_value, q, FD_H))

    for trial in range(100):  # full encoder chain through the loss
        d_in, hid, d_out = (int(rng.integers(3, 6)), int(rng.integers(4, 8)),
                            int(rng.integers(2, 5)))
        model = MLPEncoder([d_in, hid, d_out], seed=trial)
        x = rng.standard_normal((2, d_in))
        keys = l2_normalize(rng.standard_normal((5, d_out)))
        pos = int(rng.integers(0, 5))
        tau = 0.2

        def chain_value():
            emb, _ = model.forward(x)
            return sum(
                softmax_contrastive(emb[b], keys, pos, tau).value
                for b in range(2)
            )

        emb, cache = model.forward(x)
        grad_emb = np.stack([
            softmax_contrastive(emb[b], keys, pos, tau).grad_query
            for b in range(2)
        ])
        grads = model.backward(cache, grad_emb)
        for p, g in zip(model.parameters(), grads):
            track(g, fd_grad(chain_value, p, FD_H))

    elapsed = time.perf_counter() - t0
    check(
        capsys, 1,
        worst < GRAD_TOL and elapsed < 30.0,
        f"max rel err {worst:.3e} over 5x100 configs, h={FD_H:g} "
        f"({elapsed:.1f}s < 30s)",
    )


def test_criterion_2_oracle_equivalence(capsys):
    rng = np.random.default_rng(77)
    t0 = time.perf_counter()

    mismatches = 0
    for _ in range(50):  # (a) dbscan vs reference partition, 200 points
        pts = rng.standard_normal((200, 3)) * rng.uniform(0.5, 2.0)
        d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
        np.fill_diagonal(d, 0.0)
        eps = float(rng.uniform(0.3, 1.5))
        min_pts = int(rng.integers(2, 10))
        got = dbscan(d, eps, min_pts)
        ref_labels, ref_c = ref_dbscan(d, eps, min_pts)
        if got.num_clusters != ref_c:
            mismatches += 1
            continue
        if canonical_partition(got.assignment) != canonical_partition(ref_labels):
            mismatches += 1

    eval_worst = 0.0
    scored = 0
    for _ in range(50):  # (b) mAP/CMC vs brute force
        nq = int(rng.integers(2, 21))
        ng = int(rng.integers(10, 51))
        dim = int(rng.integers(2, 6))
        q = rng.standard_normal((nq, dim))
        g = rng.standard_normal((ng, dim))
        q_ids = rng.integers(0, 5, size=nq)
        g_ids = rng.integers(0, 5, size=ng)
        q_cams = rng.integers(0, 3, size=nq)
        g_cams = rng.integers(0, 3, size=ng)
        res = evaluate_retrieval(q, g, q_ids, q_cams, g_ids, g_cams)
        ref_map, ref_cmc, _ = ref_evaluate(q, g, q_ids, q_cams, g_ids, g_cams)
        eval_worst = max(eval_worst, abs(res.map - ref_map))
        for k in (1, 5, 10):
            eval_worst = max(eval_worst, abs(res.cmc[k] - ref_cmc[k]))
        scored += 1

    hard_bad = 0
    for _ in range(1000):  # (c) hard selection vs exhaustive scan
        c, s, dim = int(rng.integers(2, 8)), int(rng.integers(1, 9)), 4
        slots = l2_normalize(rng.standard_normal((c, s, dim)))
        bank = InstanceBank(slots=slots)
        query = l2_normalize(rng.standard_normal(dim))
        own = int(rng.integers(0, c))
        other = int((own + 1) % c)
        pi, _ = select_hard_positive(query, bank, own)
        ni, _ = select_hard_negative(query, bank, other)
        if pi != ref_hard_positive(query, slots[own]):
            hard_bad += 1
        if ni != ref_hard_negative(query, slots[other]):
            hard_bad += 1

    elapsed = time.perf_counter() - t0
    check(
        capsys, 2,
        mismatches == 0 and eval_worst <= 1e-12 and scored == 50
        and hard_bad == 0 and elapsed < 60.0,
        f"dbscan mismatches {mismatches}/50, eval max diff {eval_worst:.2e}, "
        f"hard-selection errors {hard_bad}/1000 ({elapsed:.1f}s < 60s)",
    )


def test_criterion_3_memory_bank_invariants(capsys):
    rng = np.random.default_rng(5)
    dim = 6
    emb = l2_normalize(rng.standard_normal((70, dim)))
    labels = PseudoLabeling(
        assignment=np.repeat(np.arange(7), 10), num_clusters=7
    )
    cbank = init_cluster_bank(emb, labels, alpha=0.2)
    ibank = init_instance_bank(emb, labels, slots=4, rng_seed=0)
    frozen = 6  # never appears in any batch below
    frozen_c = cbank.centroids[frozen].tobytes()
    frozen_i = ibank.slots[frozen].tobytes()
    identity_bank = init_cluster_bank(emb, labels, alpha=1.0)
    identity_bytes = identity_bank.centroids.tobytes()

    for _ in range(1000):
        bsz = int(rng.integers(1, 10))
        batch = l2_normalize(rng.standard_normal((bsz, dim)))
        batch_labels = rng.integers(0, 6, size=bsz)
        update_cluster_bank(cbank, batch, batch_labels)
        update_instance_bank(ibank, batch, batch_labels)
        update_cluster_bank(identity_bank, batch, batch_labels)

    cnorm = np.abs(np.linalg.norm(cbank.centroids, axis=1) - 1.0).max()
    inorm = np.abs(
        np.linalg.norm(ibank.slots.reshape(-1, dim), axis=1) - 1.0
    ).max()
    untouched = (cbank.centroids[frozen].tobytes() == frozen_c
                 and ibank.slots[frozen].tobytes() == frozen_i)
    alpha_one_identity = identity_bank.centroids.tobytes() == identity_bytes

    check(
        capsys, 3,
        cnorm < 1e-6 and inorm < 1e-6 and untouched and alpha_one_identity,
        f"after 1000 updates: norm drift {max(cnorm, inorm):.2e} < 1e-6, "
        f"absent cluster bitwise-unchanged={untouched}, "
        f"alpha=1 exact identity={alpha_one_identity}",
    )


def test_criterion_4_end_to_end_learning(capsys):
    t0 = time.perf_counter()
    maps, rank1s = [], []
    for seed in range(5):
        spec = SynthSpec(
            num_identities=50, instances_per_identity=20, dims=32,
            num_cameras=3, sigma_within=0.02, sigma_cam=0.08,
            min_angle_deg=45.0, seed=100 + seed,
        )
        train_s, query_s, gallery_s = generate(spec)
        cfg = TrainConfig(epochs=20, seed=seed)  # defaults, mu = 0.5
        model, _, _ = train(train_s, cfg)
        res = evaluate_retrieval(
            embed_all(model, query_s),
            embed_all(model, gallery_s),
            identities(query_s), cameras(query_s),
            identities(gallery_s), cameras(gallery_s),
        )
        maps.append(res.metrics()["mAP"])
        rank1s.append(res.metrics()["rank1"])
    elapsed = time.perf_counter() - t0
    med_map = float(np.median(maps))
    med_r1 = float(np.median(rank1s))
    check(
        capsys, 4,
        med_map >= 0.95 and med_r1 >= 0.95 and elapsed < 120.0,
        f"median over 5 seeds: mAP {med_map:.4f} >= 0.95, "
        f"Rank-1 {med_r1:.4f} >= 0.95 ({elapsed:.1f}s < 120s)",
    )


def test_criterion_5_mu_trend_via_ablate(capsys, tmp_path):
    t0 = time.perf_counter()
    spec = SynthSpec(
        num_identities=30, instances_per_identity=16, dims=16,
        num_cameras=3, sigma_within=0.08, sigma_cam=0.18,
        min_angle_deg=30.0, seed=77,
    )
    train_s, query_s, gallery_s = generate(spec)
    save_features(train_s, tmp_path / "train.feat")
    save_features(query_s, tmp_path / "query.feat")
    save_features(gallery_s, tmp_path / "gallery.feat")
    out = tmp_path / "ablate"
    rc = main([
        "ablate",
        "--features", str(tmp_path / "train.feat"),
        "--query", str(tmp_path / "query.feat"),
        "--gallery", str(tmp_path / "gallery.feat"),
        "--out-dir", str(out),
        "--mu-values", "0", "0.5", "1",
        "--seeds", "0", "1", "2", "3", "4",
        "--epochs", "20",
        "--num-identities-per-batch", "8",
        "--instances-per-identity", "8",
        "--slots-per-cluster", "8",
        "--kreciprocal-k", "20",
        "--lr", "1e-3",
    ])
    assert rc == 0
    with open(out / "summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    by_mu = {}
    for row in rows:
        by_mu.setdefault(float(row["mu"]), []).append(float(row["mAP"]))
    means = {mu: float(np.mean(v)) for mu, v in by_mu.items()}
    elapsed = time.perf_counter() - t0
    ok = (
        len(rows) == 15
        and means[0.5] >= means[0.0]
        and means[0.5] >= means[1.0]
        and elapsed < 900.0
    )
    check(
        capsys, 5,
        ok,
        f"mean mAP over 5 seeds: mu=0.5 {means[0.5]:.4f} >= "
        f"mu=0 {means[0.0]:.4f} and >= mu=1 {means[1.0]:.4f} "
        f"({elapsed:.1f}s < 900s)",
    )


def test_criterion_6_deterministic_runs_byte_identical(capsys, tmp_path):
    data = tmp_path / "data"
    assert main([
        "gen-data", "--out-dir", str(data),
        "--num-identities", "10", "--instances-per-identity", "10",
        "--dims", "16", "--seed", "4",
    ]) == 0
    runs = []
    for name in ("one", "two"):
        out = tmp_path / name
        rc = main([
            "train", "--features", str(data / "train.feat"),
            "--out-dir", str(out),
            "--deterministic", "--seed", "7",
            "--epochs", "4",
            "--num-identities-per-batch", "4",
            "--instances-per-identity", "4",
            "--slots-per-cluster", "4",
            "--kreciprocal-k", "9",
        ])
        assert rc == 0
        runs.append(out)
    same_metrics = (runs[0] / "metrics.csv").read_bytes() == (
        runs[1] / "metrics.csv"
    ).read_bytes()
    same_ckpt = (runs[0] / "checkpoint.ckpt").read_bytes() == (
        runs[1] / "checkpoint.ckpt"
    ).read_bytes()
    check(
        capsys, 6,
        same_metrics and same_ckpt,
        f"two --deterministic --seed 7 runs: metrics byte-identical="
        f"{same_metrics}, checkpoint byte-identical={same_ckpt}",
    )


def test_criterion_7_protocol_conformance(capsys):
    t0 = time.perf_counter()
    problems = []

    # relevant at ranks 1 and 3 of the kept list: AP = (1/1 + 2/3) / 2
    q = np.array([[0.0, 1.0]])
    g = np.array([[0.1, 1.0], [0.2, 1.0], [0.3, 1.0], [0.4, 1.0]])
    res = evaluate_retrieval(q, g, [1], [0], [1, 9, 1, 9], [1, 1, 1, 1])
    if abs(res.map - 0.8333333333333333) > 1e-4:
        problems.append(f"rank-(1,3) AP {res.map:.6f} != 0.8333")

    # same-id same-camera nearest neighbor must be junk
    res = evaluate_retrieval(
        q, g, [1], [0], np.array([1, 1, 9, 9]), np.array([0, 1, 0, 1])
    )
    if res.cmc[1] != 1.0 or res.map != 1.0:
        problems.append("junk same-id/same-cam item was scored")

    # same-id other-camera twin stays; other-id same-camera stays
    res = evaluate_retrieval(
        q, g, [1], [0], np.array([9, 1, 9, 9]), np.array([0, 1, 1, 1])
    )
    if abs(res.map - 0.5) > 1e-12:
        problems.append("distractors were dropped by the junk filter")

    # query whose matches are all junk is skipped, not scored as zero
    q2 = np.array([[0.0, 1.0], [5.0, 1.0]])
    g2 = np.array([[0.1, 1.0], [5.1, 1.0]])
    res = evaluate_retrieval(q2, g2, [1, 2], [0, 1], [1, 2], [0, 0])
    if not np.isnan(res.average_precisions[0]) or res.map != 1.0:
        problems.append("fully-junk query was not skipped")

    elapsed = time.perf_counter() - t0
    check(
        capsys, 7,
        not problems and elapsed < 5.0,
        f"protocol unit cases clean ({elapsed:.2f}s < 5s)"
        + ("" if not problems else "; " + "; ".join(problems)),
    )
