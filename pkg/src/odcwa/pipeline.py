"""Synthetic open-set benchmark, training loop, evaluation and sweeps.

The benchmark places ``K`` known Gaussian blobs and a few unknown blobs at
evenly spaced angles on a circle; unknown blobs only appear in the test
split.  Background points are drawn uniformly over the bounding box and are
labelled with the background class ``K + 1``.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import math
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .losses import (
    MODES,
    LossCoefficients,
    MemoryBank,
    build_anchors,
    combined_loss,
    delta_schedule,
    mine_hard_examples,
)
from .model import ModelParams, apply_spectral_norm, backward, forward, init_params, sgd_step
from .numerics import NumericalError, make_rng, softmax_rows
from .openset_eval import (
    BACKGROUND,
    UNKNOWN,
    DetectionRecord,
    ap_unknown,
    aose,
    cluster_indices,
    compactness_ratio,
    known_recall,
    mean_ap_known,
    wi_operating_threshold,
    wilderness_impact,
)

WALL_CLOCK_FIELDS = ("wall_clock_seconds", "started_at")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    num_known: int = 5
    num_unknown: int = 3
    samples_per_class: int = 200
    test_samples_per_class: int = 100
    background_samples: int = 400
    test_background_samples: int = 200
    radius: float = 2.5
    cluster_std: float = 0.5
    box_margin: float = 2.0
    hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 16
    embed_dim: int = 16
    k_max: int = 3000
    batch_size: int = 128
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    alpha_scale: float = 20.0
    tau: float = 0.1
    alpha_w: float = 1.0
    beta: float = 0.5
    lam: float = 1.7e-3
    delta0: float = 0.21
    blur: float = 0.1
    p: float = 1.0
    k_fg: int = 3
    k_bg: int = 3
    bank_capacity: int = 64
    spectral_norm: bool = True
    sn_iters: int = 1000
    mode: str = "OD-CWA"
    score_thresholds: tuple[float, ...] = (0.0, 0.5, 0.7, 0.9)
    target_recall: float = 0.8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "score_thresholds", tuple(float(t) for t in self.score_thresholds))
        if self.mode == "CE-baseline":
            for name in ("lam", "beta", "delta0"):
                object.__setattr__(self, name, 0.0)
            object.__setattr__(self, "spectral_norm", False)
        for name in ("lr", "momentum", "weight_decay", "alpha_scale", "alpha_w", "beta", "lam", "delta0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.blur <= 0:
            raise ValueError("blur must be > 0")
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.num_known < 1 or self.num_unknown < 0:
            raise ValueError("need at least one known class and a non-negative unknown count")
        if self.samples_per_class < 1 or self.batch_size < 1 or self.k_max < 0:
            raise ValueError("sample counts and batch size must be positive")

    @property
    def num_classes(self) -> int:
        return self.num_known + 2

    def coefficients(self, delta: float) -> LossCoefficients:
        return LossCoefficients(
            lam=self.lam, beta=self.beta, delta=delta, tau=self.tau, alpha_w=self.alpha_w, p=self.p, blur=self.blur
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        d["score_thresholds"] = list(self.score_thresholds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **kw})


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def config_hash(cfg: TrainConfig) -> str:
    payload = canonical_json({"config": cfg.to_dict(), "version": __version__})
    return hashlib.sha256(payload.encode()).hexdigest()


# -- data ----------------------------------------------------------------------


@dataclass
class SyntheticDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    meta: dict

    def to_json(self) -> str:
        return canonical_json(
            {
                "x_train": self.x_train.tolist(),
                "y_train": self.y_train.tolist(),
                "x_test": self.x_test.tolist(),
                "y_test": self.y_test.tolist(),
                "meta": self.meta,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SyntheticDataset":
        d = json.loads(text)
        return cls(
            np.asarray(d["x_train"], dtype=np.float64).reshape(-1, 2),
            np.asarray(d["y_train"], dtype=int),
            np.asarray(d["x_test"], dtype=np.float64).reshape(-1, 2),
            np.asarray(d["y_test"], dtype=int),
            d["meta"],
        )


def generate_dataset(cfg: TrainConfig) -> SyntheticDataset:
    """Known blobs at every ``(K+U)/K``-th position on the circle, unknown blobs in between.

    Test labels: known ``0..K-1``, unknown ``K``, background ``K+1``.
    """
    rng = make_rng(cfg.seed)
    K, U = cfg.num_known, cfg.num_unknown
    slots = K + U
    angles = 2 * np.pi * np.arange(slots) / slots
    # spread the unknown slots evenly between known ones
    unknown_slots = [int(round((j + 0.5) * slots / U)) % slots for j in range(U)] if U else []
    unknown_slots = sorted(set(unknown_slots))
    while len(unknown_slots) < U:
        unknown_slots.append(next(s for s in range(slots) if s not in unknown_slots))
    known_slots = [s for s in range(slots) if s not in unknown_slots]
    means = {s: cfg.radius * np.array([np.cos(angles[s]), np.sin(angles[s])]) for s in range(slots)}
    lo, hi = -(cfg.radius + cfg.box_margin), cfg.radius + cfg.box_margin

    def blobs(slot_list, labels, n):
        xs = [means[s] + cfg.cluster_std * rng.standard_normal((n, 2)) for s in slot_list]
        ys = [np.full(n, lab, dtype=int) for lab in labels]
        return xs, ys

    xs, ys = blobs(known_slots, range(K), cfg.samples_per_class)
    xs.append(rng.uniform(lo, hi, size=(cfg.background_samples, 2)))
    ys.append(np.full(cfg.background_samples, K + 1, dtype=int))
    x_train, y_train = np.concatenate(xs), np.concatenate(ys)

    xs, ys = blobs(known_slots, range(K), cfg.test_samples_per_class)
    uxs, uys = blobs(unknown_slots, [K] * U, cfg.test_samples_per_class)
    xs += uxs
    ys += uys
    xs.append(rng.uniform(lo, hi, size=(cfg.test_background_samples, 2)))
    ys.append(np.full(cfg.test_background_samples, K + 1, dtype=int))
    x_test, y_test = np.concatenate(xs), np.concatenate(ys)

    meta = {
        "seed": cfg.seed,
        "known_means": [means[s].tolist() for s in known_slots],
        "unknown_means": [means[s].tolist() for s in unknown_slots],
        "covariance": [[cfg.cluster_std**2, 0.0], [0.0, cfg.cluster_std**2]],
        "box": [lo, hi],
        "num_known": K,
        "num_unknown": U,
    }
    return SyntheticDataset(x_train, y_train, x_test, y_test, meta)


def stratified_batch(rng: np.random.Generator, labels: np.ndarray, size: int) -> np.ndarray:
    """``size`` indices split as evenly as possible over the classes present."""
    classes = np.unique(labels)
    base, extra = divmod(size, len(classes))
    picked = []
    for i, c in enumerate(classes):
        pool = np.flatnonzero(labels == c)
        n = min(base + (1 if i < extra else 0), pool.size)
        picked.append(rng.choice(pool, size=n, replace=False))
    return np.sort(np.concatenate(picked))


# -- training --------------------------------------------------------------------


@dataclass
class RunReport:
    config: dict
    config_hash: str
    version: str
    loss_series: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    cluster_indices: dict = field(default_factory=dict)
    compactness_ratio: float | None = None
    wall_clock_seconds: float = 0.0
    started_at: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=1, sort_keys=True)

    def canonical(self) -> str:
        """Canonical form without wall-clock fields, used for determinism checks."""
        d = self.to_dict()
        for k in WALL_CLOCK_FIELDS:
            d.pop(k, None)
        return canonical_json(_jsonable(d))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isinf(v):
            return "infinite" if v > 0 else "-infinite"
        if math.isnan(v):
            return "nan"
        return v
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def train(cfg: TrainConfig, dataset: SyntheticDataset) -> tuple[ModelParams, RunReport]:
    started, t0 = time.time(), time.perf_counter()
    rng = make_rng(cfg.seed)
    params = init_params(rng, 2, cfg.hidden, cfg.feature_dim, cfg.embed_dim, cfg.num_classes)
    # SN is applied from the very first forward pass
    if cfg.spectral_norm:
        params = apply_spectral_norm(params, cfg.sn_iters)
    velocity = None
    bank = MemoryBank(cfg.num_known, cfg.embed_dim, cfg.bank_capacity)
    anchors = build_anchors(cfg.num_known, cfg.num_classes, cfg.alpha_scale)
    report = RunReport(cfg.to_dict(), config_hash(cfg), __version__, started_at=started)

    delta = delta_schedule(cfg.delta0, 0, cfg.k_max)
    for k in range(cfg.k_max):
        idx = stratified_batch(rng, dataset.y_train, cfg.batch_size)
        x, y = dataset.x_train[idx], dataset.y_train[idx]
        trace = forward(params, x, cfg.alpha_scale)
        if not np.all(np.isfinite(trace.features)):
            raise NumericalError(f"non-finite features in the forward pass at iteration {k}")
        mined = mine_hard_examples(trace.logits, y, cfg.num_known, cfg.k_fg, cfg.k_bg)
        bd, g_logits, g_emb = combined_loss(
            cfg.mode, trace.logits, trace.embeddings, y, bank, anchors, cfg.coefficients(delta), mined, cfg.num_known
        )
        for name in ("l_ce", "l_up", "l_ic", "l_cwa", "total"):
            if not math.isfinite(getattr(bd, name)):
                raise NumericalError(f"non-finite {name} at iteration {k}")
        grads = backward(params, trace, g_logits, g_emb)
        for name, arr in grads.named_arrays().items():
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite gradient for {name} at iteration {k}")
        params, velocity = sgd_step(
            params,
            grads,
            cfg.lr,
            cfg.momentum,
            cfg.weight_decay,
            velocity,
            spectral_norm=cfg.spectral_norm,
            sn_iters=cfg.sn_iters,
        )
        if not np.all(np.isfinite(params.flat())):
            raise NumericalError(f"non-finite parameters after step {k}")
        bank.enqueue(trace.embeddings, y)
        delta = delta_schedule(cfg.delta0, k + 1, cfg.k_max)
        entry = bd.as_dict()
        entry["iteration"] = k
        report.loss_series.append(entry)

    report.wall_clock_seconds = time.perf_counter() - t0
    return params, report


# -- evaluation ------------------------------------------------------------------


def _gt_code(label: int, K: int) -> int:
    if label < K:
        return int(label)
    return UNKNOWN if label == K else BACKGROUND


def detection_records(params: ModelParams, dataset: SyntheticDataset, cfg: TrainConfig) -> list[DetectionRecord]:
    """One record per test point whose argmax class is not background."""
    K = cfg.num_known
    trace = forward(params, dataset.x_test, cfg.alpha_scale)
    prob = softmax_rows(trace.logits)
    pred = np.argmax(prob, axis=1)
    score = prob[np.arange(prob.shape[0]), pred]
    records = []
    for i, (c, s, g) in enumerate(zip(pred, score, dataset.y_test)):
        if c == K + 1:
            continue
        gt = _gt_code(int(g), K)
        records.append(DetectionRecord(f"t{i}", UNKNOWN if c == K else int(c), float(s), gt, gt != BACKGROUND))
    return records


def evaluate(params: ModelParams, dataset: SyntheticDataset, cfg: TrainConfig) -> dict:
    """Open-set metrics, Σ/μ and cluster indices on the test split."""
    K = cfg.num_known
    records = detection_records(params, dataset, cfg)
    y = dataset.y_test
    known_counts = {c: int(np.sum(y == c)) for c in range(K)}
    total_known = sum(known_counts.values())

    trace = forward(params, dataset.x_test, cfg.alpha_scale)
    pred = np.argmax(trace.logits, axis=1)
    metrics: dict = {"accuracy": float(np.mean(pred == y))}
    metrics["mAP_K"] = 100.0 * mean_ap_known(records, known_counts)
    n_unknown = int(np.sum(y == K))
    metrics["AP_U"] = 100.0 * ap_unknown(records, n_unknown) if n_unknown else None

    known_dets = [r for r in records if r.pred >= 0]
    if known_dets:
        thr = wi_operating_threshold(records, total_known, cfg.target_recall)
        metrics["operating_threshold"] = thr
        metrics["known_recall"] = known_recall(records, thr, total_known)
        metrics["WI"] = wilderness_impact(records, thr)
        metrics["AOSE"] = aose(records, thr)
    else:
        metrics.update(operating_threshold=None, known_recall=0.0, WI=None, AOSE=0)
    grid = {}
    for t in cfg.score_thresholds:
        try:
            wi = wilderness_impact(records, t)
        except ValueError:
            wi = None
        grid[repr(t)] = {"WI": wi, "AOSE": aose(records, t)}
    metrics["threshold_grid"] = grid

    mask = y < K
    emb, lab = trace.embeddings[mask], y[mask]
    out = {"metrics": metrics}
    out["compactness_ratio"] = compactness_ratio(emb, lab)
    out["cluster_indices"] = cluster_indices(emb, lab)
    return out


def run(cfg: TrainConfig, dataset: SyntheticDataset | None = None) -> tuple[ModelParams, RunReport]:
    """Generate (if needed), train and evaluate one configuration."""
    if dataset is None:
        dataset = generate_dataset(cfg)
    t0 = time.perf_counter()
    params, report = train(cfg, dataset)
    ev = evaluate(params, dataset, cfg)
    report.metrics = ev["metrics"]
    report.compactness_ratio = ev["compactness_ratio"]
    report.cluster_indices = ev["cluster_indices"]
    report.wall_clock_seconds = time.perf_counter() - t0
    return params, report


# -- sweeps ----------------------------------------------------------------------

SWEEP_METRICS = ("WI", "AOSE", "mAP_K", "AP_U", "accuracy", "compactness_ratio", "DI", "CHI", "HI", "DBI", "XBI")


def expand_grid(grid: dict[str, list]) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("sweep grid must be non-empty")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def sweep(base: TrainConfig, grid: dict[str, list], seeds=None) -> list[dict]:
    """Train/evaluate every grid cell for each seed; failures are recorded per row.

    All cells share the same seeds, hence the same datasets and initialisations.
    """
    seeds = [base.seed] if seeds is None else list(seeds)
    rows = []
    for cell_index, cell in enumerate(expand_grid(grid)):
        for seed in seeds:
            row = {"cell": cell_index, "seed": seed, **cell, "status": "ok", "error": ""}
            try:
                cfg = base.replace(seed=seed, **cell)
                _, rep = run(cfg)
                row.update(_flatten_metrics(rep))
            except (NumericalError, ValueError, FloatingPointError) as exc:
                row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
                row.update({m: None for m in SWEEP_METRICS})
            rows.append(row)
    return rows


def _flatten_metrics(rep: RunReport) -> dict:
    m = rep.metrics
    out = {k: m.get(k) for k in ("WI", "AOSE", "mAP_K", "AP_U", "accuracy")}
    out["compactness_ratio"] = rep.compactness_ratio
    out.update(rep.cluster_indices)
    return out


def write_sweep_csv(rows: list[dict], path) -> None:
    if not rows:
        raise ValueError("no sweep rows")
    fields = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: _csv_cell(r.get(k)) for k in fields})


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "infinite" if math.isinf(v) else repr(v)
    return v


# -- embedding export ------------------------------------------------------------

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#bcbd22")


def export_embeddings(params: ModelParams, dataset: SyntheticDataset, path, cfg: TrainConfig) -> tuple[Path, Path]:
    """Write test embeddings as CSV plus an SVG scatter of their first two coordinates.

    Class codes follow the dump convention: unknown ``-2``, background ``-1``.
    """
    path = Path(path)
    trace = forward(params, dataset.x_test, cfg.alpha_scale)
    Z = trace.embeddings
    codes = np.array([_gt_code(int(c), cfg.num_known) for c in dataset.y_test])
    cols = ["x", "y"] + [f"z{i}" for i in range(2, Z.shape[1])] + ["class_id"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for z, c in zip(Z, codes):
            w.writerow([repr(float(v)) for v in z] + [int(c)])
    svg_path = path.with_suffix(".svg")
    svg_path.write_text(_scatter_svg(Z[:, :2], codes))
    return path, svg_path


def _scatter_svg(xy: np.ndarray, codes: np.ndarray, size: int = 480, pad: int = 20) -> str:
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    pts = pad + (xy - lo) / span * (size - 2 * pad)
    root = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(size), height=str(size))
    ET.SubElement(root, "rect", width=str(size), height=str(size), fill="white")
    for (px, py), c in zip(pts, codes):
        py = size - py
        if c == UNKNOWN:
            d = f"M{px - 3:.2f},{py - 3:.2f} L{px + 3:.2f},{py + 3:.2f} M{px - 3:.2f},{py + 3:.2f} L{px + 3:.2f},{py - 3:.2f}"
            ET.SubElement(root, "path", d=d, stroke="black", attrib={"stroke-width": "1.2"})
        elif c == BACKGROUND:
            ET.SubElement(root, "circle", cx=f"{px:.2f}", cy=f"{py:.2f}", r="1.5", fill="#bbbbbb")
        else:
            ET.SubElement(root, "circle", cx=f"{px:.2f}", cy=f"{py:.2f}", r="2.5", fill=PALETTE[int(c) % len(PALETTE)])
    return ET.tostring(root, encoding="unicode")
