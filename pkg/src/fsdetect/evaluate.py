"""Detection protocols and metrics.

Few-shot binary detection builds a two-prototype registry from K fake and K real
supports; zero-shot detection classifies against precomputed per-class prototypes.
Scores (p_fake) feed accuracy at the 0.5 decision point and an average precision
computed over a fixed 0.1-step threshold sweep.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .embedding import EmbeddingNetwork, forward, init_network
from .episodes import ClassDataset, SamplerConfig, preprocess
from .errors import InputError, MetricError, SamplingError, StateError
from .optim import ScheduleConfig, train
from .protonet import PrototypeRegistry, classify_batch, compute_prototype
from .util import seed_for as _seed_for

log = logging.getLogger(__name__)

AP_THRESHOLDS = [k / 10.0 for k in range(11)]

REAL_ID = 0
FAKE_ID = 1


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectionVerdict:
    sample_id: str
    p_fake: float
    predicted: str            # "real" | "fake"
    nearest_class_id: int


@dataclass
class EvalReport:
    accuracy: float
    average_precision: float
    counts: dict              # tp/fp/tn/fn at the 0.5 decision point
    protocol: dict            # shots, seed, class under test, ...
    verdicts: Optional[list] = None

    def to_dict(self) -> dict:
        d = {
            "acc": self.accuracy,
            "ap": self.average_precision,
            "counts": self.counts,
            "protocol": self.protocol.get("protocol", ""),
            "shots": self.protocol.get("shots"),
            "seed": self.protocol.get("seed"),
            "excluded_class": self.protocol.get("excluded_class"),
            "test_class": self.protocol.get("test_class"),
        }
        if self.verdicts is not None:
            d["verdicts"] = [vars(v) for v in self.verdicts]
        return d


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def accuracy(verdicts: Sequence[DetectionVerdict], truth: Sequence[str]) -> float:
    if len(verdicts) != len(truth) or not verdicts:
        raise MetricError("verdicts and truth must be equal-length and nonempty")
    for t in truth:
        if t not in ("real", "fake"):
            raise MetricError(f"truth labels must be real/fake, got {t!r}")
    hits = sum(v.predicted == t for v, t in zip(verdicts, truth))
    return hits / len(verdicts)


def average_precision(p_fakes: Sequence[float], truth: Sequence[str]) -> float:
    """Step-interpolated PR sum over thresholds 0.0, 0.1, ..., 1.0.

    predict fake iff p >= t; precision := 1 when nothing is predicted fake;
    AP = sum_k (R(t_k) - R(t_{k+1})) * P(t_k) with R past the last threshold = 0.
    """
    if len(p_fakes) != len(truth) or not truth:
        raise MetricError("p_fakes and truth must be equal-length and nonempty")
    scores = np.asarray(p_fakes, dtype=np.float64)
    is_fake = np.array([t == "fake" for t in truth])
    n_fake = int(is_fake.sum())
    if n_fake == 0:
        raise MetricError("average precision needs at least one fake sample")
    precision, recall = [], []
    for t in AP_THRESHOLDS:
        pred = scores >= t
        tp = int((pred & is_fake).sum())
        fp = int((pred & ~is_fake).sum())
        precision.append(tp / (tp + fp) if tp + fp else 1.0)
        recall.append(tp / n_fake)
    recall.append(0.0)
    return float(sum((recall[k] - recall[k + 1]) * precision[k]
                     for k in range(len(AP_THRESHOLDS))))


def confusion_counts(verdicts: Sequence[DetectionVerdict], truth: Sequence[str]) -> dict:
    tp = sum(v.predicted == "fake" and t == "fake" for v, t in zip(verdicts, truth))
    fp = sum(v.predicted == "fake" and t == "real" for v, t in zip(verdicts, truth))
    tn = sum(v.predicted == "real" and t == "real" for v, t in zip(verdicts, truth))
    fn = sum(v.predicted == "real" and t == "fake" for v, t in zip(verdicts, truth))
    return {"tp": tp, "fp": fp, "tn": tn, "fn": fn}


def make_report(verdicts, truth, protocol: dict, include_verdicts: bool = False) -> EvalReport:
    return EvalReport(
        accuracy=accuracy(verdicts, truth),
        average_precision=average_precision([v.p_fake for v in verdicts], truth),
        counts=confusion_counts(verdicts, truth),
        protocol=dict(protocol),
        verdicts=list(verdicts) if include_verdicts else None,
    )


# ---------------------------------------------------------------------------
# detection protocols
# ---------------------------------------------------------------------------

def _embed(net: EmbeddingNetwork, samples) -> np.ndarray:
    emb, _ = forward(net, samples)
    return emb.astype(np.float64)


def fewshot_detect(net: EmbeddingNetwork, support_fake, support_real, queries,
                   ids: Optional[Sequence[str]] = None):
    """Binary few-shot detection: two prototypes, p_fake from the two-class softmax,
    verdict = nearer prototype with ties going to real."""
    support_fake = list(support_fake)
    support_real = list(support_real)
    queries = list(queries)
    if not support_fake or not support_real:
        raise InputError("need at least one fake and one real support sample")
    if not queries:
        raise InputError("need at least one query")
    c_fake = compute_prototype(_embed(net, support_fake), FAKE_ID, "fake", name="fake")
    c_real = compute_prototype(_embed(net, support_real), REAL_ID, "real", name="real")
    registry = PrototypeRegistry([c_real, c_fake], net.embedding_dim, "few-shot",
                                 net.checkpoint_id())
    probs, nearest = classify_batch(_embed(net, queries), registry)
    fake_col = registry.class_ids().index(FAKE_ID)
    if ids is None:
        ids = [f"q{i}" for i in range(len(queries))]
    return [
        DetectionVerdict(sample_id=str(ids[i]), p_fake=float(probs[i, fake_col]),
                         predicted="fake" if nearest[i] == FAKE_ID else "real",
                         nearest_class_id=int(nearest[i]))
        for i in range(len(queries))
    ]


def build_zero_shot_registry(net: EmbeddingNetwork, train_ds: ClassDataset,
                             samples_per_class: int = 1024, seed: int = 0) -> PrototypeRegistry:
    """One prototype per training class from up to `samples_per_class` train-split
    samples, selected seed-deterministically."""
    rng = np.random.default_rng(_seed_for(seed, "zero-shot-registry"))
    protos = []
    for c in train_ds.classes:
        idx = c.indices("train")
        if not idx:
            raise InputError(f"class {c.name!r} has no training samples")
        take = min(samples_per_class, len(idx))
        if take < samples_per_class:
            log.warning("class %s has %d < %d training samples; using all of them",
                        c.name, len(idx), samples_per_class)
        chosen = np.sort(rng.choice(np.asarray(idx), size=take, replace=False))
        batch = [preprocess(c.samples[int(i)], "eval", image_cfg=train_ds.image_cfg)
                 for i in chosen]
        protos.append(compute_prototype(_embed(net, batch), c.class_id, c.kind, name=c.name))
    return PrototypeRegistry(protos, net.embedding_dim, "zero-shot", net.checkpoint_id())


def zero_shot_detect(net: EmbeddingNetwork, registry: PrototypeRegistry, queries,
                     ids: Optional[Sequence[str]] = None):
    """Verdict fake iff the nearest prototype is fake-kind; p_fake is the summed
    probability mass of all fake prototypes."""
    kinds = registry.kinds()
    if "real" not in kinds:
        raise StateError("zero-shot registry has no real prototype")
    if "fake" not in kinds:
        raise StateError("zero-shot registry has no fake prototype")
    queries = list(queries)
    if not queries:
        raise InputError("need at least one query")
    probs, nearest = classify_batch(_embed(net, queries), registry)
    fake_cols = [i for i, k in enumerate(kinds) if k == "fake"]
    fake_ids = {registry.class_ids()[i] for i in fake_cols}
    p_fake = probs[:, fake_cols].sum(axis=1)
    if ids is None:
        ids = [f"q{i}" for i in range(len(queries))]
    return [
        DetectionVerdict(sample_id=str(ids[i]), p_fake=float(p_fake[i]),
                         predicted="fake" if int(nearest[i]) in fake_ids else "real",
                         nearest_class_id=int(nearest[i]))
        for i in range(len(queries))
    ]


# ---------------------------------------------------------------------------
# evaluation draws
# ---------------------------------------------------------------------------

def _draw(ds: ClassDataset, record, count: int, rng, exclude=()):
    idx = [i for i in record.indices("test") if i not in exclude]
    if len(idx) < count:
        raise SamplingError(
            f"class {record.name!r} has {len(idx)} usable test samples, need {count}")
    picked = rng.choice(np.asarray(idx), size=count, replace=False)
    samples = [preprocess(record.samples[int(i)], "eval", image_cfg=ds.image_cfg)
               for i in picked]
    return samples, [int(i) for i in picked]


def draw_binary_eval(ds: ClassDataset, fake_class_id: int, shots: int, n_query: int, rng):
    """Support/query draw for one binary evaluation: K supports and n_query queries
    per side, all from the test split, supports and queries disjoint."""
    fake = ds.class_by_id(fake_class_id)
    real = ds.real_class()
    sup_f, used_f = _draw(ds, fake, shots, rng)
    sup_r, used_r = _draw(ds, real, shots, rng)
    qry_f, _ = _draw(ds, fake, n_query, rng, exclude=set(used_f))
    qry_r, _ = _draw(ds, real, n_query, rng, exclude=set(used_r))
    queries = qry_f + qry_r
    truth = ["fake"] * n_query + ["real"] * n_query
    ids = [f"{fake.name}:{i}" for i in range(n_query)] + [f"real:{i}" for i in range(n_query)]
    return sup_f, sup_r, queries, truth, ids


def evaluate_binary(net, ds, fake_class_id, shots, n_query, rng, protocol):
    sup_f, sup_r, queries, truth, ids = draw_binary_eval(ds, fake_class_id, shots, n_query, rng)
    verdicts = fewshot_detect(net, sup_f, sup_r, queries, ids=ids)
    return make_report(verdicts, truth, protocol)


# ---------------------------------------------------------------------------
# experiment runners
# ---------------------------------------------------------------------------

@dataclass
class CrossGenConfig:
    dataset: ClassDataset
    network: object               # NetworkConfig template
    sampler: SamplerConfig
    schedule: ScheduleConfig
    shots: int = 10
    query_cap: int = 200
    seed: int = 0


@dataclass
class CrossGenResult:
    class_names: list
    reports: list                 # reports[i][j]: excluded class i, tested class j

    def to_dict(self) -> dict:
        return {
            "classes": self.class_names,
            "matrix": [[r.to_dict() for r in row] for row in self.reports],
        }

    def render_text(self) -> str:
        width = max(15, max(len(n) for n in self.class_names) + 2)
        head = "excluding".ljust(width) + "".join(n.ljust(width) for n in self.class_names)
        lines = [head, "-" * len(head)]
        for name, row in zip(self.class_names, self.reports):
            cells = "".join(
                f"{100 * r.accuracy:.1f} / {100 * r.average_precision:.1f}".ljust(width)
                for r in row)
            lines.append(name.ljust(width) + cells)
        return "\n".join(lines)


def cross_generator_run(cfg: CrossGenConfig) -> CrossGenResult:
    """Leave-one-class-out protocol: for each excluded fake class, train on the rest,
    then run few-shot detection of every fake class (seen and unseen) against real."""
    fakes = cfg.dataset.fake_classes()
    if len(fakes) < 2:
        raise InputError("cross-generator runs need at least two fake classes")
    names = [c.name for c in fakes]
    reports = []
    for excluded in fakes:
        train_ds = cfg.dataset.without_class(excluded.class_id)
        net = init_network(cfg.network)
        result = train(net, train_ds, cfg.sampler, cfg.schedule, sinks=None)
        log.info("cross-generator: trained without %s (final loss %.4f)",
                 excluded.name, result.losses[-1] if len(result.losses) else float("nan"))
        row = []
        for tested in fakes:
            rng = np.random.default_rng(
                _seed_for(cfg.seed, f"crossgen:{excluded.name}:{tested.name}"))
            n_query = min(cfg.query_cap,
                          len(tested.indices("test")) - cfg.shots,
                          len(cfg.dataset.real_class().indices("test")) - cfg.shots)
            if n_query < 1:
                raise SamplingError(
                    f"not enough test samples to evaluate {tested.name} at K={cfg.shots}")
            row.append(evaluate_binary(
                result.network, cfg.dataset, tested.class_id, cfg.shots, n_query, rng,
                protocol={"protocol": "fewshot-crossgen", "shots": cfg.shots,
                          "seed": cfg.seed, "excluded_class": excluded.name,
                          "test_class": tested.name}))
        reports.append(row)
    return CrossGenResult(names, reports)


@dataclass
class ShotSweepResult:
    entries: list                 # {shots, repeats, acc_mean, acc_std, ap_mean, ap_std}

    def to_dict(self) -> dict:
        return {"sweep": self.entries}

    def render_text(self) -> str:
        lines = [f"{'shots':>6}  {'acc mean':>9}  {'acc sd':>7}  {'ap mean':>9}  {'ap sd':>7}"]
        for e in self.entries:
            lines.append(f"{e['shots']:>6}  {e['acc_mean']:>9.4f}  {e['acc_std']:>7.4f}  "
                         f"{e['ap_mean']:>9.4f}  {e['ap_std']:>7.4f}")
        return "\n".join(lines)


DEFAULT_SHOTS = (1, 3, 5, 10, 25, 50, 100, 200)


def shot_sweep(net: EmbeddingNetwork, ds: ClassDataset, held_out_class: int,
               shots_list: Sequence[int] = DEFAULT_SHOTS, repeats: int = 20,
               seed: int = 0, query_factor: int = 3) -> ShotSweepResult:
    """Few-shot accuracy/AP versus K on one class, with query count fixed at
    query_factor * K per side. K values the test split cannot cover are skipped."""
    fake = ds.class_by_id(held_out_class)
    real = ds.real_class()
    entries = []
    for shots in shots_list:
        need = shots + query_factor * shots
        if len(fake.indices("test")) < need or len(real.indices("test")) < need:
            log.warning("skipping K=%d: needs %d test samples per side", shots, need)
            continue
        accs, aps = [], []
        for rep in range(repeats):
            rng = np.random.default_rng(_seed_for(seed, f"sweep:{shots}:{rep}"))
            report = evaluate_binary(
                net, ds, held_out_class, shots, query_factor * shots, rng,
                protocol={"protocol": "shot-sweep", "shots": shots, "seed": seed,
                          "test_class": fake.name, "repeat": rep})
            accs.append(report.accuracy)
            aps.append(report.average_precision)
        entries.append({
            "shots": int(shots), "repeats": int(repeats),
            "acc_mean": float(np.mean(accs)), "acc_std": float(np.std(accs)),
            "ap_mean": float(np.mean(aps)), "ap_std": float(np.std(aps)),
        })
    return ShotSweepResult(entries)


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------

def export_embeddings(net: EmbeddingNetwork, ds: ClassDataset, out_path,
                      per_class_cap: int = 1024, seed: int = 0, split: str = "test") -> None:
    """CSV of embeddings for external projection: header class_id,class_name,kind,e_0..;
    at most `per_class_cap` seed-deterministic rows per class."""
    rng = np.random.default_rng(_seed_for(seed, "export"))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    m = net.embedding_dim
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("class_id,class_name,kind," + ",".join(f"e_{i}" for i in range(m)) + "\n")
        for c in ds.classes:
            idx = c.indices(split)
            if not idx:
                log.warning("class %s has no %s samples to export", c.name, split)
                continue
            take = min(per_class_cap, len(idx))
            chosen = np.sort(rng.choice(np.asarray(idx), size=take, replace=False))
            batch = [preprocess(c.samples[int(i)], "eval", image_cfg=ds.image_cfg)
                     for i in chosen]
            emb = _embed(net, batch)
            for row in emb:
                fh.write(f"{c.class_id},{c.name},{c.kind},"
                         + ",".join(format(float(v), ".9g") for v in row) + "\n")
