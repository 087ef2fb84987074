"""End-to-end acceptance checks, one test per criterion.

Each test records a ``CRITERION n PASS/FAIL`` line that the conftest hook
prints in the terminal summary. Run directly with ``python3 tests/test_acceptance.py``.
"""

import math
import sys
import time

import numpy as np
import pytest

from ememndt.encoder import embed
from ememndt.encoder import grad_check as encoder_grad_check
from ememndt.memory import cosine, filter_stream, implant
from ememndt.ndt import NodeScores, explain_embedding, leaf_probabilities, lla, mpm, ndt_loss
from ememndt.ndt import grad_check as ndt_grad_check
from ememndt.pipeline import desk_scale_config, make_model, run_pipeline
from ememndt.tree import TextEmbedding, build_tree

from _util import (
    ACCEPTANCE_LINES,
    all_trees,
    merges_oracle,
    path_product_oracle,
    random_model,
    random_tree,
    tree_clusters,
)

SEED = 7


def record(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run_a")
    t = time.perf_counter()
    result = run_pipeline(desk_scale_config(SEED), out)
    result.timings["wall"] = time.perf_counter() - t
    return result


@pytest.fixture(scope="module")
def train_features(run):
    return embed(run.encoder, run.train.instances)


def test_criterion_1_normalization():
    rng = np.random.default_rng(1)
    t = time.perf_counter()
    worst_leaf, worst_node = 0.0, 0.0
    for i in range(1000):
        M = (2, 4, 8, 13)[i % 4]
        model = random_model(random_tree(M, rng), rng, aggregation=("max", "mean")[i % 2])
        dist = lla(mpm(rng.normal(size=6), model), model)
        worst_leaf = max(worst_leaf, abs(sum(dist.s.values()) - 1.0))
        for probs in dist.child_probs.values():
            worst_node = max(worst_node, abs(sum(probs.values()) - 1.0))
    elapsed = time.perf_counter() - t
    ok = worst_leaf <= 1e-9 and worst_node <= 1e-9 and elapsed < 10
    record(1, ok, f"max |sum s - 1| {worst_leaf:.2e}, max node error {worst_node:.2e}, {elapsed:.2f}s")


def test_criterion_2_lla_oracle():
    rng = np.random.default_rng(2)
    worst, checked = 0.0, 0
    for M in (2, 3, 4):
        for tree in all_trees(M):
            for _ in range(100):
                gamma = {n: float(rng.normal(scale=10.0)) for n in tree.nodes}
                s = lla(NodeScores(gamma), tree).s
                oracle = path_product_oracle(tree, gamma)
                worst = max(worst, max(abs(s[m] - oracle[m]) for m in tree.leaf_ids))
                checked += 1
    record(2, worst <= 1e-12, f"{checked} score assignments over all trees M<=4, max error {worst:.2e}")


def test_criterion_3_lnmf_invariant():
    rng = np.random.default_rng(3)
    violations, first_missing = 0, 0
    for i in range(200):
        n, width = int(rng.integers(1, 501)), int(rng.integers(1, 65))
        eta = (0.3, 0.7, 0.9)[i % 3]
        centers = rng.normal(size=(int(rng.integers(1, 6)), width))
        X = centers[rng.integers(0, len(centers), n)] + rng.uniform(0.05, 0.5) * rng.normal(size=(n, width))
        kept = filter_stream(X, eta)
        first_missing += kept[0] != 0
        for a_i, a in enumerate(kept):
            for b in kept[a_i + 1:]:
                violations += cosine(X[a], X[b]) > eta
    ok = violations == 0 and first_missing == 0
    record(3, ok, f"200 streams, {violations} pairwise violations, {first_missing} first-element rejections")


def test_criterion_4_eta_trend(run, train_features):
    sizes = [implant(run.train, run.encoder, run.tree, eta, features=train_features).total
             for eta in (0.3, 0.7, 0.9, 1.0)]
    N = len(run.train)
    ok = sizes[0] <= sizes[1] <= sizes[2] and sizes[3] == N
    record(4, ok, f"total EMB at eta 0.3/0.7/0.9 = {sizes[:3]}, eta 1 -> {sizes[3]} (N = {N})")


def _ndt_tie_free(model, G, targets, margin=1e-3):
    """Rows whose best prototype leads the runner-up by ``margin`` in every leaf."""
    keep = []
    for i, g in enumerate(G):
        ok = True
        for leaf in model.tree.leaf_ids:
            Hg = model.transform(leaf, g[None])[0]
            He = model.transform(leaf, model.banks.banks[leaf].features)
            cos = He @ Hg / (np.linalg.norm(He, axis=1) * np.linalg.norm(Hg))
            if len(cos) > 1 and np.diff(np.sort(cos)[-2:])[0] < margin:
                ok = False
        if ok:
            keep.append(i)
    return G[keep], np.asarray(targets)[keep]


def test_criterion_5_gradient_checks(run, train_features):
    t = time.perf_counter()
    enc = encoder_grad_check(run.encoder, run.train.instances[:6], epsilon=1e-5, n_coords=150, seed=5,
                             labels=run.train.taxonomy.names)
    model = run.model
    targets = [model.tree.leaf_of(i.label) for i in run.train.instances[:16]]
    G, tg = _ndt_tie_free(model, train_features[:16], targets)
    ndt = ndt_grad_check(model, G, tg, epsilon=1e-5, n_coords=150, seed=5)
    elapsed = time.perf_counter() - t
    ok = enc.max_rel_error <= 1e-4 and ndt.max_rel_error <= 1e-4 and len(G) > 0 and elapsed < 60
    record(5, ok, f"encoder max rel err {enc.max_rel_error:.2e}, NDT max rel err {ndt.max_rel_error:.2e} "
                  f"({len(G)} tie-free rows), 150 coords each, {elapsed:.1f}s")


def test_criterion_6_clustering_oracle():
    rng = np.random.default_rng(6)
    mismatches, sets = 0, 0
    while sets < 50:
        M = int(rng.integers(2, 7))
        pts = rng.normal(size=(M, int(rng.integers(1, 6))))
        d = [np.linalg.norm(pts[i] - pts[j]) for i in range(M) for j in range(i + 1, M)]
        if len(set(np.round(d, 9))) < len(d):
            continue
        sets += 1
        for linkage in ("average", "single", "complete"):
            tree = build_tree([TextEmbedding(f"b{i}", p) for i, p in enumerate(pts)], linkage)
            mismatches += tree_clusters(tree) != merges_oracle(pts, linkage)
    record(6, mismatches == 0, f"50 sets x 3 linkages, {mismatches} mismatches against brute force")


def test_criterion_7_end_to_end(run):
    f1 = run.report.macro["f1"]
    base = run.base_report.macro["f1"]
    wall = run.timings["wall"]
    ok = f1 >= 0.85 and f1 >= base - 0.02 and wall < 300 and run.encoder.config.d_model == 32
    record(7, ok, f"macro F1 {f1:.4f} (base {base:.4f}), {len(run.test)} test instances, {wall:.1f}s")


def test_criterion_8_explanations(run):
    model = run.model
    tree = model.tree
    G = embed(run.encoder, run.test.instances)
    broken, correct, matched = 0, 0, 0
    for inst, g in zip(run.test.instances, G):
        tr = explain_embedding(g, model, inst.instance_id)
        leaf = tr.path[-1]
        valid = (tr.path[0] == tree.root_id and tree.nodes[leaf].kind == "leaf"
                 and all(c in tree.nodes[p].children for p, c in zip(tr.path, tr.path[1:]))
                 and tree.nodes[leaf].label == tr.predicted_label)
        bank = model.banks.banks[leaf]
        member = (tr.prototype.leaf_id == leaf and 0 <= tr.prototype.index < bank.K
                  and bank.prototypes[tr.prototype.index].instance_id == tr.prototype.instance_id)
        Hg = model.transform(leaf, g[None])[0]
        He = model.transform(leaf, bank.features)
        cos = He @ Hg / (np.linalg.norm(He, axis=1) * np.linalg.norm(Hg))
        best = model.rho * float(cos.max())
        max_sim = abs(tr.prototype.similarity - best) <= 1e-9 and cos[tr.prototype.index] >= cos.max() - 1e-12
        broken += not (valid and member and max_sim)
        if tr.predicted_label == inst.label:
            correct += 1
            matched += tr.prototype.label == tr.predicted_label
    frac = matched / correct if correct else 0.0
    ok = broken == 0 and frac >= 0.9
    record(8, ok, f"{len(G)} traces, {broken} invariant failures, matched-label rate {frac:.3f} "
                  f"over {correct} correct predictions")


def test_criterion_9_determinism(run, tmp_path):
    second = run_pipeline(desk_scale_config(SEED), tmp_path)
    same = {name: run.files[name].read_bytes() == second.files[name].read_bytes()
            for name in ("model.json", "report.json", "base_report.json", "encoder.json", "confusion.csv")}
    record(9, all(same.values()), "byte-identical: " + ", ".join(f"{k}={v}" for k, v in same.items()))


def test_criterion_10_untrained_nll(run, train_features):
    model = make_model(run.train, run.encoder, run.tree, desk_scale_config(SEED), train_features)
    targets = [model.tree.leaf_of(i.label) for i in run.train.instances]
    loss = ndt_loss(train_features, targets, model)
    M = model.tree.M
    P = leaf_probabilities(model, train_features)
    spread = float(np.abs(P - 1.0 / M).max())
    ok = abs(loss - math.log(M)) <= 0.05 * math.log(M)
    record(10, ok, f"untrained loss {loss:.4f} vs ln {M} = {math.log(M):.4f}, "
                   f"max |s - 1/M| {spread:.4f}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
