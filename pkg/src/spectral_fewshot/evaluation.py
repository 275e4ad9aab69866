"""Meta-testing, ablations, sweeps and the structural / distributional diagnostics."""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

from .datasets import ClassSplit, class_split
from .encoder import GraphTensors, config_hash
from .episodes import sample_episode
from .graph import Graph, homophily_degrees
from .trainer import VARIANTS, TrainConfig, encode_for, episode_forward, squared_distances, train

CI_Z = 1.96


@dataclass(frozen=True)
class EvalConfig:
    num_tasks: int = 100
    num_runs: int = 5
    seed: int = 0
    transductive: bool = True  # calibrate with the (unlabelled) query embeddings
    num_projections: int = 64

    def __post_init__(self):
        if self.num_tasks < 1 or self.num_runs < 1:
            raise ValueError("num_tasks and num_runs must be >= 1")


@dataclass
class EvalReport:
    per_task_accuracy: np.ndarray  # percentages, run-major
    mean_accuracy: float
    std: float
    ci95: float
    num_runs: int
    config_hash: str
    diagnostics: dict = field(default_factory=dict)
    per_run_mean: list = field(default_factory=list)
    split_seeds: list = field(default_factory=list)
    replay: list = field(default_factory=list)  # per run: episode digest + initial weight hashes

    @classmethod
    def from_accuracies(cls, accs, num_runs, cfg_hash, diagnostics=None, per_run_mean=None,
                        split_seeds=None):
        accs = np.asarray(accs, dtype=np.float64)
        std = float(accs.std())
        return cls(per_task_accuracy=accs, mean_accuracy=float(accs.mean()), std=std,
                   ci95=CI_Z * std / np.sqrt(len(accs)), num_runs=num_runs,
                   config_hash=cfg_hash, diagnostics=dict(diagnostics or {}),
                   per_run_mean=list(per_run_mean or []),
                   split_seeds=list(split_seeds or []))

    def summary(self) -> dict:
        return {
            "mean_accuracy": self.mean_accuracy,
            "std": self.std,
            "ci95": self.ci95,
            "num_runs": self.num_runs,
            "num_tasks_total": len(self.per_task_accuracy),
            "per_run_mean": self.per_run_mean,
            "split_seeds": self.split_seeds,
            "config_hash": self.config_hash,
            "diagnostics": self.diagnostics,
            "ci_note": "ci95 = 1.96 * pooled std of per-task accuracy / sqrt(tasks * runs)",
        }

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "per_task.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task", "accuracy"])
            for i, a in enumerate(self.per_task_accuracy):
                w.writerow([i, f"{a:.6f}"])
        (out / "report.json").write_text(json.dumps(self.summary(), indent=2) + "\n")
        return out


# -- prediction and per-task scoring ---------------------------------------------


def predict(query_embeddings, calibrated_prototypes, metric_head=None) -> torch.Tensor:
    """Index of the nearest (squared Euclidean) prototype; ties go to the lowest index."""
    protos = getattr(calibrated_prototypes, "corrected", calibrated_prototypes)
    q = torch.as_tensor(query_embeddings)
    if metric_head is not None:
        q = q @ metric_head
    d = squared_distances(q, torch.as_tensor(protos, dtype=q.dtype)).detach().cpu().numpy()
    return torch.from_numpy(np.argmin(d, axis=1))  # first minimum wins


def score_tasks(model, z, episodes, config: TrainConfig, transductive=True):
    accs = []
    for ep in episodes:
        q, cal, head = episode_forward(model, z, ep, config, use_queries=transductive)
        pred = predict(q, cal, head)
        accs.append(100.0 * float((pred.numpy() == ep.query_labels).mean()))
    return accs


def evaluate(params, graph: Graph, split: ClassSplit, eval_config: EvalConfig = EvalConfig(),
             train_config: TrainConfig = TrainConfig(), tensors: Optional[GraphTensors] = None,
             run_offset: int = 0) -> EvalReport:
    """Score ``params`` on ``num_tasks`` novel-class tasks for each of ``num_runs`` runs."""
    c = train_config
    gt = tensors or GraphTensors(graph, c.torch_dtype, c.spec.gating_blocks)
    params.eval()
    with torch.no_grad():
        enc = encode_for(params, gt, c)
    novel = split.classes_for("test")
    d_hom, d_het = homophily_degrees(graph)
    all_accs, run_means, shifts = [], [], []
    with torch.no_grad():
        for r in range(eval_config.num_runs):
            rng = np.random.default_rng([eval_config.seed, 3, run_offset + r])
            eps = [sample_episode(graph, novel, c.n_way, c.k_shot, c.m_query, rng)
                   for _ in range(eval_config.num_tasks)]
            accs = score_tasks(params, enc.z, eps, c, eval_config.transductive)
            all_accs.extend(accs)
            run_means.append(float(np.mean(accs)))
            if r == 0:
                proj_rng = np.random.default_rng([eval_config.seed, 4])
                for ep in eps:
                    s = enc.z[torch.from_numpy(ep.support_ids)]
                    q = enc.z[torch.from_numpy(ep.query_ids)]
                    if c.metric_head_mode == "all":
                        s, q = s @ params.metric_head, q @ params.metric_head
                    shifts.append(distribution_shift(s.numpy(), q.numpy(),
                                                     eval_config.num_projections, proj_rng))
    diag = {"epsilon_g": epsilon_g(enc.alpha.numpy(), d_hom, d_het),
            "dist_shift": float(np.mean(shifts))}
    h = config_hash({"train": c.to_dict(), "eval": dataclasses.asdict(eval_config)})
    return EvalReport.from_accuracies(all_accs, eval_config.num_runs, h, diag, run_means,
                                      [split.seed] * eval_config.num_runs)


# -- multi-run experiments -------------------------------------------------------


SplitSpec = Union[ClassSplit, Callable[[int], ClassSplit]]  # hashable when caching


@dataclass(frozen=True)
class ResampledSplits:
    """Run ``r`` uses the class split drawn with seed ``base_seed + r``."""

    dataset: str
    num_classes: int
    base_seed: int = 0
    sizes: Optional[tuple] = None  # (base, val, novel); None looks up the dataset name

    def __call__(self, run: int) -> ClassSplit:
        return class_split(self.dataset, self.num_classes, seed=self.base_seed + run,
                           sizes=self.sizes)


def resampled_splits(dataset: str, num_classes: int, base_seed: int = 0,
                     sizes=None) -> ResampledSplits:
    return ResampledSplits(dataset, num_classes, base_seed,
                           None if sizes is None else tuple(sizes))


@dataclass
class ExperimentResult:
    report: EvalReport
    logs: list
    train_seconds: float


def run_experiment(graph: Graph, splits: SplitSpec, train_config: TrainConfig,
                   eval_config: EvalConfig = EvalConfig(), progress=None,
                   keep_models: bool = False) -> ExperimentResult:
    """Train one model per run (seed ``seed + r``) and pool the test accuracies."""
    gts = {}
    accs, run_means, diags, logs, secs, models, seeds, replay = [], [], [], [], 0.0, [], [], []
    for r in range(eval_config.num_runs):
        split = splits(r) if callable(splits) else splits
        tc = train_config.replace(seed=train_config.seed + r)
        key = tc.spec.gating_blocks
        if key not in gts:
            gts[key] = GraphTensors(graph, tc.torch_dtype, key)
        model, log = train(graph, split, tc, tensors=gts[key])
        rep = evaluate(model, graph, split, dataclasses.replace(eval_config, num_runs=1), tc,
                       tensors=gts[key], run_offset=r)
        accs.extend(rep.per_task_accuracy)
        run_means.append(rep.mean_accuracy)
        seeds.append(split.seed)
        replay.append({"episode_digest": log.episode_digest, "init_hashes": log.init_hashes})
        diags.append(rep.diagnostics)
        logs.append(log)
        secs += log.seconds
        if keep_models:
            models.append(model)
        if progress:
            progress(r, rep, log)
    diag = {k: float(np.mean([d[k] for d in diags])) for k in diags[0]}
    h = config_hash({"train": train_config.to_dict(), "eval": dataclasses.asdict(eval_config)})
    report = EvalReport.from_accuracies(accs, eval_config.num_runs, h, diag, run_means, seeds)
    report.replay = replay
    res = ExperimentResult(report, logs, secs)
    if keep_models:
        res.models = models
    return res


def ablation_run(variant: str, graph: Graph, splits: SplitSpec, train_config: TrainConfig,
                 eval_config: EvalConfig = EvalConfig(), cache: Optional[dict] = None) -> EvalReport:
    """Train and score one variant under the same seeds and tasks as the full model."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    return _cached_run(graph, splits, train_config.replace(variant=variant), eval_config, cache)


def hyperparam_sweep(param: str, grid: Sequence[float], graph: Graph, splits: SplitSpec,
                     train_config: TrainConfig, eval_config: EvalConfig = EvalConfig(),
                     cache: Optional[dict] = None) -> list:
    """One paired experiment per grid value; returns ``[(value, mean accuracy, report)]``."""
    if param not in ("sigma", "tau"):
        raise ValueError(f"can only sweep sigma or tau, got {param!r}")
    if not len(grid):
        raise ValueError("empty grid")
    for v in grid:
        if not v > 0:
            raise ValueError(f"grid values must be positive, got {v}")
    rows = []
    for v in grid:
        rep = _cached_run(graph, splits, train_config.replace(**{param: float(v)}), eval_config, cache)
        rows.append((float(v), rep.mean_accuracy, rep))
    return rows


def _cached_run(graph, splits, tc, ec, cache):
    key = (graph.name, splits, tc.hash(), config_hash(dataclasses.asdict(ec)))
    if cache is not None and key in cache:
        return cache[key]
    rep = run_experiment(graph, splits, tc, ec).report
    if cache is not None:
        cache[key] = rep
    return rep


# -- diagnostics -----------------------------------------------------------------


def epsilon_g(alpha, d_hom, d_het) -> float:
    """Mean gap between the low-pass weight and the node's homophily indicator."""
    alpha = np.asarray(alpha, dtype=np.float64)
    ideal = (np.asarray(d_hom) > np.asarray(d_het)).astype(np.float64)
    return float(np.mean(np.abs(alpha[:, 0] - ideal)))


def wasserstein_1d(a, b) -> float:
    """Exact W1 between two empirical 1-D distributions (uniform weights).

    Integrates ``|F_a^-1(t) - F_b^-1(t)|`` over the union of both quantile
    breakpoints; equal sizes reduce to the mean sorted difference.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if not len(a) or not len(b):
        raise ValueError("both samples must be nonempty")
    t = np.union1d(np.arange(1, len(a) + 1) / len(a), np.arange(1, len(b) + 1) / len(b))
    dt = np.diff(np.concatenate([[0.0], t]))
    mid = t - dt / 2
    qa = a[np.minimum((mid * len(a)).astype(np.int64), len(a) - 1)]
    qb = b[np.minimum((mid * len(b)).astype(np.int64), len(b) - 1)]
    return float(np.sum(np.abs(qa - qb) * dt))


def distribution_shift(support, query, num_projections: int = 64,
                       rng: Optional[np.random.Generator] = None) -> float:
    """Sliced Wasserstein-1 between support and query point clouds."""
    s = np.atleast_2d(np.asarray(support, dtype=np.float64))
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    if s.shape[1] != q.shape[1]:
        raise ValueError("support and query dimensions differ")
    if s.shape[1] == 1:
        return wasserstein_1d(s[:, 0], q[:, 0])
    rng = rng if rng is not None else np.random.default_rng(0)
    dirs = rng.standard_normal((num_projections, s.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return float(np.mean([wasserstein_1d(s @ u, q @ u) for u in dirs]))


@dataclass
class CaseStudy:
    rows: list  # dicts: bin, lo, hi, count, alpha_low, alpha_high, norm_low, norm_high
    spearman_low: float
    spearman_high: float
    files: list = field(default_factory=list)


def gating_case_study(params=None, graph: Graph = None, num_bins: int = 20,
                      config: TrainConfig = TrainConfig(), out_dir=None,
                      alpha=None) -> CaseStudy:
    """Mean expert weight per equal-width bin of same-label degree.

    Normalized columns divide each bin's mean by that expert's mean over all
    nodes. ``alpha`` may be given directly instead of ``params``.
    """
    from scipy.stats import spearmanr

    if graph is None or graph.num_nodes == 0:
        raise ValueError("case study needs a nonempty graph")
    if alpha is None:
        gt = GraphTensors(graph, config.torch_dtype, config.spec.gating_blocks)
        params.eval()
        with torch.no_grad():
            alpha = encode_for(params, gt, config).alpha.numpy()
    alpha = np.asarray(alpha, dtype=np.float64)
    d_hom, _ = homophily_degrees(graph)
    lo, hi = float(d_hom.min()), float(d_hom.max())
    edges = np.linspace(lo, hi if hi > lo else lo + 1.0, num_bins + 1)
    idx = np.clip(np.searchsorted(edges, d_hom, side="right") - 1, 0, num_bins - 1)
    g_low, g_high = alpha[:, 0].mean(), alpha[:, 1].mean()
    rows = []
    for b in range(num_bins):
        m = idx == b
        if not m.any():
            continue
        a_low, a_high = float(alpha[m, 0].mean()), float(alpha[m, 1].mean())
        rows.append({"bin": b, "lo": float(edges[b]), "hi": float(edges[b + 1]),
                     "count": int(m.sum()), "alpha_low": a_low, "alpha_high": a_high,
                     "norm_low": a_low / g_low if g_low > 0 else float("nan"),
                     "norm_high": a_high / g_high if g_high > 0 else float("nan")})
    bins = [r["bin"] for r in rows]

    def rank_corr(key):
        vals = [r[key] for r in rows]
        if len(rows) < 2 or np.ptp(vals) == 0:
            return float("nan")
        return float(spearmanr(bins, vals)[0])

    study = CaseStudy(rows, rank_corr("alpha_low"), rank_corr("alpha_high"))
    if out_dir is not None:
        study.files = _write_case_study(study, Path(out_dir))
    return study


def _write_case_study(study: CaseStudy, out: Path) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "gating_case_study.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(study.rows[0]))
        w.writeheader()
        w.writerows(study.rows)
    files = [csv_path]
    centers = [(r["lo"] + r["hi"]) / 2 for r in study.rows]
    for key, label, name in (("norm_low", "low-pass", "gate_low.png"),
                             ("norm_high", "high-pass", "gate_high.png")):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.bar(centers, [r[key] for r in study.rows],
               width=(study.rows[0]["hi"] - study.rows[0]["lo"]) * 0.9)
        ax.axhline(1.0, color="gray", lw=0.8, ls="--")
        ax.set_xlabel("same-label degree $d^{hom}$")
        ax.set_ylabel(f"{label} weight / global mean")
        fig.tight_layout()
        fig.savefig(out / name, dpi=120)
        plt.close(fig)
        files.append(out / name)
    return files


def project_2d(*arrays):
    """Deterministic linear map to 2-D shared by all arrays (PCA of their union)."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    if arrays[0].shape[1] <= 2:
        return [np.pad(a, ((0, 0), (0, 2 - a.shape[1]))) for a in arrays]
    allp = np.concatenate(arrays)
    mean = allp.mean(axis=0)
    _, _, vt = np.linalg.svd(allp - mean, full_matrices=False)
    basis = vt[:2]
    # fix the sign so the largest-magnitude loading is positive
    signs = np.sign(basis[np.arange(2), np.abs(basis).argmax(axis=1)])
    basis = basis * signs[:, None]
    return [(a - mean) @ basis.T for a in arrays]


def calibration_visual(support, query, raw_prototypes, corrected_prototypes, out_path,
                       support_labels=None, query_labels=None) -> dict:
    """Scatter support (stars), queries (circles), raw and corrected prototypes over a query KDE."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from scipy.stats import gaussian_kde

    s, q, p, ph = project_2d(*(np.asarray(torch.as_tensor(a).detach(), dtype=np.float64)
                               for a in (support, query, raw_prototypes, corrected_prototypes)))
    out_path = Path(out_path)
    if out_path.parent and not out_path.parent.exists():
        out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    pts = np.concatenate([s, q, p, ph])
    pad = 0.15 * (np.ptp(pts, axis=0) + 1e-9)
    lo, hi = pts.min(axis=0) - pad, pts.max(axis=0) + pad
    try:
        kde = gaussian_kde(q.T)
        gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], 80), np.linspace(lo[1], hi[1], 80))
        dens = kde(np.vstack([gx.ravel(), gy.ravel()])).reshape(gx.shape)
        ax.contour(gx, gy, dens, levels=6, cmap="Blues", linewidths=0.8)
    except (np.linalg.LinAlgError, ValueError):
        pass  # degenerate query cloud: no contours
    sc = None if support_labels is None else np.asarray(support_labels)
    qc = None if query_labels is None else np.asarray(query_labels)
    def colors(labels):
        if labels is None:
            return {"c": "tab:blue"}
        return {"c": labels, "cmap": "tab10", "vmin": 0, "vmax": 9}

    ax.scatter(q[:, 0], q[:, 1], marker="o", s=18, label="query", **colors(qc))
    ax.scatter(s[:, 0], s[:, 1], marker="*", s=120, edgecolors="k", label="support",
               **colors(sc))
    ax.scatter(p[:, 0], p[:, 1], marker="x", s=60, c="gray", label="raw prototype")
    ax.scatter(ph[:, 0], ph[:, 1], marker="D", s=60, c="crimson", edgecolors="k",
               label="corrected prototype")
    ax.set_xlim(lo[0], hi[0])
    ax.set_ylim(lo[1], hi[1])
    ax.legend(fontsize=7, loc="best")
    fig.tight_layout()
    try:
        fig.savefig(out_path, dpi=120)
    finally:
        plt.close(fig)
    return {"path": out_path, "support": s, "query": q, "raw": p, "corrected": ph}
