"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. Everything is seeded, so the
numbers asserted here are reproducible end to end on one machine.
"""

import json
import time

import numpy as np
import pytest

from fsdetect.cli import run as cli_run
from fsdetect.embedding import init_network, vector_network_config
from fsdetect.episodes import (SamplerConfig, SynthConfig, generate_synthetic,
                               preprocess, sample_episode)
from fsdetect.evaluate import (accuracy, average_precision, build_zero_shot_registry,
                               evaluate_binary, shot_sweep, zero_shot_detect)
from fsdetect.optim import ScheduleConfig, train
from fsdetect.protonet import (Prototype, PrototypeRegistry, classify_batch,
                               compute_prototype, episode_loss, sq_euclidean)
from fsdetect.util import seed_for

from fd import central_diff, episode_loss_of, max_rel_error, random_episode, \
    well_conditioned_pair

SEED = 2024
HELD_OUT = 1          # gen_a


def report(num, description, checks):
    """Print one pass/fail line, then fail the test if any check failed."""
    ok = all(bool(v) for _, v in checks)
    print(f"[criterion {num}] {'PASS' if ok else 'FAIL'} - {description}")
    for label, value in checks:
        print(f"    {label}: {'ok' if value else 'FAILED'}")
    assert ok, f"criterion {num} failed: " + \
        ", ".join(label for label, value in checks if not value)


# ---------------------------------------------------------------------------
# shared desk runs
# ---------------------------------------------------------------------------

DESK_SYNTH = dict(num_fake_classes=6, dimension=16, center_separation=4.0,
                  samples_per_class=400, seed=SEED)
DESK_SCHEDULE = ScheduleConfig(base_lr=1e-3, gamma=0.5, step_size=80_000,
                               total_steps=2000, episodes_per_step=16)


def tenshot_accuracy(net, ds, class_id, tag, repeats=1):
    vals = []
    for rep in range(repeats):
        rng = np.random.default_rng(seed_for(SEED, f"{tag}:{class_id}:{rep}"))
        rep_ = evaluate_binary(net, ds, class_id, shots=10, n_query=70, rng=rng,
                               protocol={"protocol": tag, "shots": 10, "seed": SEED})
        vals.append(rep_.accuracy)
    return float(np.mean(vals))


@pytest.fixture(scope="module")
def desk_run():
    ds = generate_synthetic(SynthConfig(within_class_noise=1.5, **DESK_SYNTH))
    train_ds = ds.without_class(HELD_OUT)
    net = init_network(vector_network_config(16, 64, (64, 64), seed=7))
    start = time.monotonic()
    result = train(net, train_ds, SamplerConfig(3, 5, 5, seed=SEED), DESK_SCHEDULE)
    return {"ds": ds, "train_ds": train_ds, "result": result,
            "train_seconds": time.monotonic() - start}


@pytest.fixture(scope="module")
def multimodal_run():
    ds = generate_synthetic(SynthConfig(within_class_noise=1.75,
                                        multimodal_classes=(HELD_OUT,), **DESK_SYNTH))
    net = init_network(vector_network_config(16, 64, (64, 64), seed=7))
    result = train(net, ds.without_class(HELD_OUT), SamplerConfig(3, 5, 5, seed=SEED),
                   DESK_SCHEDULE)
    return {"ds": ds, "result": result}


# ---------------------------------------------------------------------------
# 1. gradient suite
# ---------------------------------------------------------------------------

def test_criterion_1_gradient_suite():
    rng = np.random.default_rng(seed_for(SEED, "gradsuite"))
    start = time.monotonic()
    worst = 0.0
    n_pairs = 50
    for k in range(n_pairs):
        net, episode = well_conditioned_pair(rng, conv=(k % 5 == 4))
        assert net.parameter_count <= 5000
        _, analytic = episode_loss(net, episode)
        numeric = central_diff(episode_loss_of(net, episode), net.params, h=1e-4)
        worst = max(worst, max_rel_error(analytic, numeric))
    elapsed = time.monotonic() - start
    report(1, f"gradients vs central differences over {n_pairs} pairs "
              f"(max rel err {worst:.3g}, {elapsed:.1f}s)",
           [("max relative error < 1e-4", worst < 1e-4),
            ("runtime < 2 min", elapsed < 120.0)])


# ---------------------------------------------------------------------------
# 2. math-core oracles
# ---------------------------------------------------------------------------

def test_criterion_2_math_core_oracles():
    rng = np.random.default_rng(seed_for(SEED, "mathcore"))

    proto_ok = True
    for _ in range(200):
        vecs = rng.normal(size=(int(rng.integers(1, 12)), int(rng.integers(2, 9))))
        total = np.zeros(vecs.shape[1])
        for v in vecs:
            total = total + v
        oracle = total / len(vecs)
        got = compute_prototype(vecs, 0, "fake").vector
        proto_ok &= bool(np.abs(got - oracle).max() <= 1e-6)

    classify_ok = True
    sums_ok = True
    cases = 10_000
    for i in range(cases):
        n, m = int(rng.integers(2, 7)), int(rng.integers(2, 5))
        protos = rng.normal(size=(n, m))
        ids = [int(x) for x in rng.permutation(n) * 2 + 1]
        if i % 10 == 0:
            protos[1] = protos[0]     # force exact distance ties
        query = protos[0] + rng.normal(scale=0.5, size=m) if i % 3 else protos[0].copy()
        reg = PrototypeRegistry([Prototype(c, "fake", v, 1) for c, v in zip(ids, protos)],
                                m, "few-shot")
        probs, nearest = classify_batch(query[None, :], reg)
        best = min((sq_euclidean(query, v), c) for v, c in zip(protos, ids))
        classify_ok &= int(nearest[0]) == best[1]
        sums_ok &= abs(probs[0].sum() - 1.0) <= 1e-9

    loss_ok = True
    for n_c in (2, 3, 5):
        net = init_network(vector_network_config(4, 8, (6,), seed=3))
        net.params[:] = 0
        net.params[-8:] = 1.0          # constant embedding regardless of input
        ep = random_episode(rng, (4,), n_classes=n_c, n_support=3, n_query=2)
        loss, _ = episode_loss(net, ep)
        loss_ok &= abs(loss - np.log(n_c)) <= 1e-9

    report(2, "prototype mean, nearest-neighbor classify, probability sums, ln(Nc) loss",
           [("prototype = brute-force mean (1e-6, 200 sets)", proto_ok),
            (f"classify = argmin with lowest-id ties ({cases} cases)", classify_ok),
            ("probabilities sum to 1 within 1e-9", sums_ok),
            ("constant-network loss = ln(Nc) within 1e-9", loss_ok)])


# ---------------------------------------------------------------------------
# 3. average precision oracle
# ---------------------------------------------------------------------------

def ap_oracle(scores, truth):
    thresholds = [k / 10.0 for k in range(11)]
    fakes = sum(1 for t in truth if t == "fake")
    pr = []
    for t in thresholds:
        tp = sum(1 for s, y in zip(scores, truth) if s >= t and y == "fake")
        fp = sum(1 for s, y in zip(scores, truth) if s >= t and y == "real")
        pr.append((tp / (tp + fp) if tp + fp else 1.0, tp / fakes))
    ap = 0.0
    for k in range(11):
        r_next = pr[k + 1][1] if k + 1 < 11 else 0.0
        ap += (pr[k][1] - r_next) * pr[k][0]
    return ap


def test_criterion_3_average_precision_oracle():
    rng = np.random.default_rng(seed_for(SEED, "ap"))
    agree = True
    for _ in range(1000):
        n = int(rng.integers(1, 50))
        scores = np.round(rng.uniform(0, 1, n), 3)
        truth = ["fake" if rng.random() < 0.5 else "real" for _ in range(n)]
        if "fake" not in truth:
            truth[0] = "fake"
        agree &= average_precision(scores, truth) == ap_oracle(scores, truth)
    worked = average_precision([0.95, 0.55, 0.65, 0.15],
                               ["fake", "fake", "real", "real"])
    report(3, "average precision vs 11-threshold enumeration",
           [("exact agreement on 1000 random score sets", agree),
            ("worked example = 1/3 + 1/2", abs(worked - (1 / 3 + 1 / 2)) < 1e-12)])


# ---------------------------------------------------------------------------
# 4. end-to-end desk run
# ---------------------------------------------------------------------------

def test_criterion_4_desk_run(desk_run):
    ds, train_ds, result = desk_run["ds"], desk_run["train_ds"], desk_run["result"]
    net = result.network
    held_acc = tenshot_accuracy(net, ds, HELD_OUT, "crit4-held")
    seen_accs = [tenshot_accuracy(net, ds, c.class_id, "crit4-seen")
                 for c in ds.fake_classes() if c.class_id != HELD_OUT]
    seen_mean = float(np.mean(seen_accs))

    registry = build_zero_shot_registry(net, train_ds, 1024, seed=SEED)
    held_rec, real_rec = ds.class_by_id(HELD_OUT), ds.real_class()
    queries = [preprocess(held_rec.samples[i], "eval") for i in held_rec.indices("test")]
    queries += [preprocess(real_rec.samples[i], "eval") for i in real_rec.indices("test")]
    truth = ["fake"] * 80 + ["real"] * 80
    zs_acc = accuracy(zero_shot_detect(net, registry, queries), truth)

    report(4, f"desk run: held-out 10-shot {held_acc:.3f}, zero-shot {zs_acc:.3f}, "
              f"seen mean {seen_mean:.3f}, train {desk_run['train_seconds']:.0f}s",
           [("training finished in < 5 min", desk_run["train_seconds"] < 300.0),
            ("held-out 10-shot ACC >= 0.90", held_acc >= 0.90),
            ("zero-shot ACC >= 0.70", zs_acc >= 0.70),
            ("seen-class ACC >= held-out ACC - 0.05", seen_mean >= held_acc - 0.05)])


# ---------------------------------------------------------------------------
# 5. shot-sweep trend
# ---------------------------------------------------------------------------

def test_criterion_5_shot_sweep_trend(desk_run):
    result = shot_sweep(desk_run["result"].network, desk_run["ds"], HELD_OUT,
                        shots_list=[1, 3, 5, 10], repeats=20, seed=SEED)
    accs = [e["acc_mean"] for e in result.entries]
    shots = [e["shots"] for e in result.entries]
    monotone = all(accs[i + 1] >= accs[i] - 0.02 for i in range(len(accs) - 1))
    gain = accs[-1] - accs[0]
    print(result.render_text())
    report(5, f"shot sweep over K={shots}: accs {[round(a, 4) for a in accs]}",
           [("all four shot counts evaluated", shots == [1, 3, 5, 10]),
            ("mean ACC non-decreasing within 0.02 slack", monotone),
            ("ACC(10) - ACC(1) > 0", gain > 0.0)])


# ---------------------------------------------------------------------------
# 6. multimodal stress
# ---------------------------------------------------------------------------

def test_criterion_6_multimodal_stress(multimodal_run):
    ds, result = multimodal_run["ds"], multimodal_run["result"]
    accs = {c.name: tenshot_accuracy(result.network, ds, c.class_id, "crit6", repeats=10)
            for c in ds.fake_classes()}
    mm = accs["gen_a"]
    unimodal = [v for k, v in accs.items() if k != "gen_a"]
    print("per-class 10-shot accuracy:", {k: round(v, 4) for k, v in accs.items()})
    report(6, f"two-mode class {mm:.3f} vs unimodal mean {np.mean(unimodal):.3f}",
           [("multimodal class 10-shot ACC >= 0.80", mm >= 0.80),
            ("every unimodal class scores higher", min(unimodal) > mm)])


# ---------------------------------------------------------------------------
# 7. determinism
# ---------------------------------------------------------------------------

def test_criterion_7_determinism(tmp_path, capsys):
    data = tmp_path / "data"
    assert cli_run(["synth-data", "--seed", "11", "--out", str(data), "--classes", "3",
                    "--dim", "8", "--separation", "4.0", "--noise", "1.0",
                    "--samples-per-class", "80"]) == 0
    capsys.readouterr()
    runs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert cli_run(["train", "--seed", "11", "--data", str(data), "--out", str(out),
                        "--steps", "40", "--episodes-per-step", "2", "--lr", "1e-3",
                        "--threads", "1", "--exclude", "gen_c"]) == 0
        capsys.readouterr()
        assert cli_run(["ablate", "--seed", "11", "--data", str(data), "--out", str(out),
                        "--ckpt", str(out / "checkpoint.ckpt"), "--exclude", "gen_c",
                        "--shots-list", "1,3", "--repeats", "3", "--threads", "1"]) == 0
        capsys.readouterr()
        runs.append(out)
    a, b = runs
    loss_seq = []
    for out in runs:
        recs = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
        loss_seq.append([(r["step"], r["lr"], r["loss"]) for r in recs])
    ckpt_same = (a / "checkpoint.ckpt").read_bytes() == (b / "checkpoint.ckpt").read_bytes()
    report_same = (a / "ablation.json").read_bytes() == (b / "ablation.json").read_bytes()
    report(7, "identical config+seed reproduces losses, checkpoint, and report bytes",
           [("training loss sequences identical", loss_seq[0] == loss_seq[1]),
            ("checkpoints byte-identical", ckpt_same),
            ("report JSON byte-identical", report_same)])


# ---------------------------------------------------------------------------
# 8. sampler invariants
# ---------------------------------------------------------------------------

def test_criterion_8_sampler_invariants(desk_run):
    ds = desk_run["ds"]
    cfg = SamplerConfig(3, 5, 5, seed=SEED)
    rng = np.random.default_rng(seed_for(SEED, "crit8"))
    overlap = 0
    bad_counts = 0
    leaked = 0
    episodes = 10_000
    test_idx = {c.class_id: set(c.indices("test")) for c in ds.classes}
    for _ in range(episodes):
        ep = sample_episode(ds, cfg, rng)
        for cid, sup, qry in zip(ep.class_ids, ep.support_indices, ep.query_indices):
            if set(sup) & set(qry):
                overlap += 1
            if len(set(sup)) != 5 or len(set(qry)) != 5:
                bad_counts += 1
            if (set(sup) | set(qry)) & test_idx[cid]:
                leaked += 1
    report(8, f"{episodes} episodes: overlap {overlap}, bad counts {bad_counts}, "
              f"leaks {leaked}",
           [("zero support/query overlap", overlap == 0),
            ("exact cardinalities everywhere", bad_counts == 0),
            ("no test-split leakage", leaked == 0)])
