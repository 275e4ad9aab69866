"""Episodic training with the distance-based cross-entropy objective."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from . import __version__
from .calibration import CalibratedPrototypes, calibrate, prototypes, uncalibrated
from .datasets import ClassSplit
from .encoder import (GraphTensors, SpectralEncoder, config_hash, encode_tensors, init_params,
                      params_hash)
from .episodes import Episode, sample_episode
from .graph import GATING_BLOCKS, Graph, homophily_degrees

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class Variant:
    alpha: Optional[tuple] = None  # pinned gate weights, None = learned gate
    calibrate: bool = True
    gating_blocks: tuple = GATING_BLOCKS


VARIANTS = {
    "full": Variant(),
    "no_high": Variant(alpha=(1.0, 0.0)),
    # the high-pass expert still forms its differential against H_low
    "no_low": Variant(alpha=(0.0, 1.0)),
    "no_cal": Variant(calibrate=False),
    "no_both": Variant(alpha=(1.0, 0.0), calibrate=False),
    "gate_wo_X": Variant(gating_blocks=("n", "phi", "deg")),
    "gate_wo_N": Variant(gating_blocks=("x", "phi", "deg")),
    "gate_wo_phi": Variant(gating_blocks=("x", "n", "deg")),
    "gate_wo_D": Variant(gating_blocks=("x", "n", "phi")),
}


INIT_HASH_PREFIXES = ("low_pass", "high_pass", "gate", "metric_head", "beta")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n_way: int = 2
    k_shot: int = 5
    m_query: int = 10
    tau: float = 2.0
    sigma: float = 1.0
    lambda_scale: float = 1.0
    trainable_lambda: bool = False
    learning_rate: float = 1e-3
    max_episodes: int = 2000
    val_every: int = 50
    val_tasks: int = 50
    patience: int = 10
    seed: int = 0
    variant: str = "full"
    hidden: int = 32
    gate_hidden: int = 96
    kernel_mode: str = "softmax"  # or "normalized"
    weighting: str = "sample"  # or "dimension"
    metric_head_mode: str = "all"  # or "literal": W_l on queries only
    metric_head_init: str = "uniform"  # or "identity"
    dtype: str = "float32"

    def __post_init__(self):
        for k in ("tau", "sigma", "learning_rate"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")
        for k in ("n_way", "k_shot", "m_query", "val_every", "val_tasks", "patience",
                  "hidden", "gate_hidden"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.max_episodes < 0:
            raise ValueError("max_episodes must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.metric_head_mode not in ("all", "literal"):
            raise ValueError(f"unknown metric_head_mode {self.metric_head_mode!r}")
        if self.metric_head_init not in ("identity", "uniform"):
            raise ValueError(f"unknown metric_head_init {self.metric_head_init!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def spec(self) -> Variant:
        return VARIANTS[self.variant]

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_from_dict(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**data)


def load_yaml(path) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at top level")
    return data


def dump_yaml(data: dict, path):
    Path(path).write_text(yaml.safe_dump(data, sort_keys=True))


# -- objective -------------------------------------------------------------------


def squared_distances(x: torch.Tensor, protos: torch.Tensor) -> torch.Tensor:
    return ((x[:, None, :] - protos[None, :, :]) ** 2).sum(dim=-1)


def episode_loss(query_embeddings, query_labels, calibrated_prototypes, metric_head=None):
    """Mean cross-entropy of ``softmax(-||z W_l - P_hat_k||^2)``.

    ``metric_head=None`` means the queries are already in the metric space.
    ``calibrated_prototypes`` may be a tensor or a CalibratedPrototypes.
    """
    protos = getattr(calibrated_prototypes, "corrected", calibrated_prototypes)
    labels = torch.as_tensor(query_labels, dtype=torch.long)
    n = protos.shape[0]
    if len(labels) and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"query label outside [0, {n})")
    q = query_embeddings if metric_head is None else query_embeddings @ metric_head
    return F.cross_entropy(-squared_distances(q, protos), labels)


def episode_forward(model: SpectralEncoder, z: torch.Tensor, episode: Episode, config: TrainConfig,
                    use_queries: bool = True):
    """Project, build prototypes, calibrate. Returns (queries, calibrated, head).

    ``head`` is the metric head still to be applied to the queries (literal
    mode only); in the default mode it is ``None``.
    """
    s = z[torch.from_numpy(episode.support_ids)]
    q = z[torch.from_numpy(episode.query_ids)]
    head = model.metric_head
    if config.metric_head_mode == "all":
        s, q, head = s @ head, q @ head, None
    raw = prototypes(s, torch.from_numpy(episode.support_labels), episode.n_way, config.k_shot)
    if config.spec.calibrate and use_queries:
        cal = calibrate(raw, q, config.sigma, model.beta, config.kernel_mode, config.weighting)
    else:
        cal = uncalibrated(raw, model.beta)
    return q, cal, head


def build_model(in_dim: int, config: TrainConfig) -> SpectralEncoder:
    model = init_params(in_dim, config.hidden, config.seed, config.gate_hidden,
                        config.lambda_scale, config.trainable_lambda, config.spec.gating_blocks,
                        config.metric_head_init)
    return model.to(config.torch_dtype)


def encode_for(model, gt, config: TrainConfig):
    v = config.spec
    need_high = v.alpha is None or v.alpha[1] > 0
    return encode_tensors(model, gt, config.tau, v.alpha, need_high=need_high)


# -- training --------------------------------------------------------------------


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    best_episode: Optional[int] = None
    best_val_accuracy: Optional[float] = None
    stopped_early: bool = False
    seconds: float = 0.0
    episode_digest: str = ""  # hash of the sampled training episode sequence
    init_hashes: dict = field(default_factory=dict)  # per-module digests of the initial weights

    def __len__(self):
        return len(self.records)

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")


def _accuracy(q, cal, head, labels) -> float:
    from .evaluation import predict

    pred = predict(q, cal, head)
    return float((pred == torch.as_tensor(labels)).double().mean())


def validate(model, gt, episodes, config: TrainConfig) -> tuple[float, torch.Tensor]:
    """Mean accuracy (in [0, 1]) over ``episodes`` and the gate weights used."""
    model.eval()
    with torch.no_grad():
        enc = encode_for(model, gt, config)
        accs = [_accuracy(*episode_forward(model, enc.z, ep, config), ep.query_labels)
                for ep in episodes]
    return float(np.mean(accs)), enc.alpha


def train(graph: Graph, split: ClassSplit, config: TrainConfig, log_path=None,
          tensors: Optional[GraphTensors] = None, progress=None):
    """Meta-train on the base classes, select the snapshot with best validation accuracy."""
    from .evaluation import epsilon_g

    t0 = time.perf_counter()
    model = build_model(graph.feature_dim, config)
    log = TrainingLog(init_hashes={k: params_hash(model, k) for k in INIT_HASH_PREFIXES})
    if config.max_episodes == 0:
        return model, log
    gt = tensors or GraphTensors(graph, config.torch_dtype, config.spec.gating_blocks)
    base = split.classes_for("train")
    val_classes = split.classes_for("val")
    ep_rng = np.random.default_rng([config.seed, 1])
    val_rng = np.random.default_rng([config.seed, 2])
    c = config
    val_eps = [sample_episode(graph, val_classes, c.n_way, c.k_shot, c.m_query, val_rng)
               for _ in range(c.val_tasks)] if len(val_classes) >= c.n_way else []
    if not val_eps:
        logger.warning("%d validation classes < n_way=%d: no early stopping, last snapshot kept",
                       len(val_classes), c.n_way)
    d_hom, d_het = homophily_degrees(graph)
    opt = torch.optim.Adam(model.parameters(), lr=c.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)

    best_acc, best_state, stale = -1.0, None, 0
    digest = hashlib.sha256()
    for i in range(c.max_episodes):
        episode = sample_episode(graph, base, c.n_way, c.k_shot, c.m_query, ep_rng)
        digest.update(repr(episode.key()).encode())
        model.train()
        enc = encode_for(model, gt, c)
        q, cal, head = episode_forward(model, enc.z, episode, c)
        loss = episode_loss(q, torch.from_numpy(episode.query_labels), cal, head)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss.item()} at episode {i} "
                                   f"(variant={c.variant}, seed={c.seed})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        rec = {"episode": i, "loss": loss.item()}
        if val_eps and (i + 1) % c.val_every == 0:
            acc, alpha = validate(model, gt, val_eps, c)
            eg = epsilon_g(alpha.detach().numpy(), d_hom, d_het)
            rec.update(val_accuracy=acc, epsilon_g=eg)
            if acc > best_acc:
                best_acc, best_state, stale = acc, copy.deepcopy(model.state_dict()), 0
                log.best_episode = i
            else:
                stale += 1
            if progress:
                progress(rec)
        log.records.append(rec)
        if val_eps and stale >= c.patience:
            log.stopped_early = True
            break
    if best_state is not None:
        model.load_state_dict(best_state)
        log.best_val_accuracy = best_acc
    model.eval()
    log.episode_digest = digest.hexdigest()[:16]
    log.seconds = time.perf_counter() - t0
    if log_path is not None:
        log.write_jsonl(log_path)
    return model, log


def manifest(config: TrainConfig, extra: Optional[dict] = None) -> dict:
    out = {
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "seeds": {"init": config.seed, "train_episodes": [config.seed, 1],
                  "val_episodes": [config.seed, 2]},
        "optimizer": {"name": "adam", "lr": config.learning_rate, "betas": list(ADAM_BETAS),
                      "eps": ADAM_EPS},
        "version": __version__,
        "torch": torch.__version__,
    }
    if extra:
        out.update(extra)
    return out


# -- gradient verification -------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_tensor: dict  # name -> (max relative error, analytic gradient norm)


def gradient_check(params: SpectralEncoder, graph: Graph, episode: Episode, config: TrainConfig,
                   step: float = 1e-5, denom_floor: float = 1e-6) -> GradCheckResult:
    """Compare autograd against central differences for every parameter entry.

    Runs in float64 with batch norm in inference mode. Relative error is
    ``|a - n| / max(|a|, |n|, denom_floor)``.
    """
    model = copy.deepcopy(params).to(torch.float64)
    model.eval()
    cfg = config.replace(dtype="float64")
    gt = GraphTensors(graph, torch.float64, model.gate.blocks)
    labels = torch.from_numpy(episode.query_labels)

    def loss_fn():
        enc = encode_for(model, gt, cfg)
        q, cal, head = episode_forward(model, enc.z, episode, cfg)
        return episode_loss(q, labels, cal, head)

    named = [(n, p) for n, p in model.named_parameters()]
    model.zero_grad()
    loss_fn().backward()
    analytic = {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
                for n, p in named}
    per, worst = {}, 0.0
    with torch.no_grad():
        for name, p in named:
            flat = p.view(-1)
            num = torch.empty_like(flat)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                hi = loss_fn().item()
                flat[j] = orig - step
                lo = loss_fn().item()
                flat[j] = orig
                num[j] = (hi - lo) / (2 * step)
            a = analytic[name].view(-1)
            denom = torch.maximum(torch.maximum(a.abs(), num.abs()),
                                  torch.tensor(denom_floor, dtype=a.dtype))
            rel = float(((a - num).abs() / denom).max()) if flat.numel() else 0.0
            per[name] = (rel, float(a.norm()))
            worst = max(worst, rel)
    return GradCheckResult(max_rel_error=worst, per_tensor=per)
