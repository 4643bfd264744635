"""Episodic training loop, evaluation harness and run reports."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .episodes import (
    SAME_SUBJECT,
    Episode,
    MetaSplit,
    WindowPool,
    batch_arrays,
    check_feasible,
    forward_episodes,
    normalize_scenario,
    sample_episode,
    sample_episodes,
)
from .errors import DivergenceError, ParameterError
from .layers import ModelConfig, init_params
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "EvalResult",
    "EvalRecord",
    "RunReport",
    "train",
    "evaluate",
    "evaluate_episodes",
    "centroid_baseline",
    "params_checksum",
    "snapshot",
    "fit_batch",
]


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int | None = None  # None: 64, or 32 for 10-way 5-shot
    max_steps: int = 30000
    eval_every: int = 500
    eval_episodes: int = 1000
    seed: int = 0
    scenario: str = "new-subjects"
    n_way: int = 5
    k_shot: int = 1
    sampling_mode: str = SAME_SUBJECT
    label_shuffle: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ParameterError(f"batch size must be >= 1, got {self.batch_size}")
        if self.max_steps < 0 or self.eval_every < 1 or self.eval_episodes < 1:
            raise ParameterError("max_steps must be >= 0, eval_every and eval_episodes >= 1")
        self.scenario = normalize_scenario(self.scenario)

    @property
    def resolved_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 32 if (self.n_way, self.k_shot) == (10, 5) else 64


@dataclass
class EvalResult:
    accuracy: float
    stderr: float
    loss: float
    n_episodes: int
    correct: np.ndarray = field(repr=False)


@dataclass
class EvalRecord:
    step: int
    split: str
    loss: float
    acc: float
    stderr: float
    episodes: int
    wall: float

    def line(self) -> str:
        return (
            f"step={self.step} split={self.split} loss={self.loss:.6f} acc={self.acc:.4f} "
            f"stderr={self.stderr:.4f} episodes={self.episodes} wall={self.wall:.2f}"
        )


@dataclass
class RunReport:
    records: list[EvalRecord] = field(default_factory=list)
    final: dict[str, dict] = field(default_factory=dict)
    best_step: int = 0
    steps: int = 0
    notes: list[str] = field(default_factory=list)

    def lines(self) -> str:
        return "\n".join(r.line() for r in self.records) + ("\n" if self.records else "")

    def summary(self) -> dict:
        return {
            "best_step": self.best_step,
            "steps": self.steps,
            "final": self.final,
            "notes": self.notes,
            "records": [asdict(r) for r in self.records],
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.lines())
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def params_checksum(params) -> str:
    h = hashlib.sha256()
    for name, p in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def snapshot(params) -> dict[str, Tensor]:
    """Detached copies of the parameter values."""
    return {n: Tensor(p.data.copy()) for n, p in params.items()}


def _frozen(params) -> dict[str, Tensor]:
    # read-only views: no graph is recorded and nothing can write back
    out = {}
    for n, p in params.items():
        view = p.data.view()
        view.flags.writeable = False
        out[n] = Tensor(view)
    return out


def _stderr(p: float, n: int) -> float:
    return math.sqrt(p * (1 - p) / n) if n else float("nan")


EVAL_CHUNK = 50


def evaluate_episodes(params, episodes: list[Episode], cfg: ModelConfig, workers: int = 1) -> EvalResult:
    """Accuracy and mean loss on a fixed list of materialized episodes."""
    frozen = _frozen(params)
    chunks = [episodes[i : i + EVAL_CHUNK] for i in range(0, len(episodes), EVAL_CHUNK)]

    def run(chunk):
        windows, support, query = batch_arrays(chunk)
        logits = forward_episodes(windows, support, cfg, frozen).data.astype(np.float64)
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        losses = -logp[np.arange(len(query)), query]
        return np.argmax(logits, axis=-1) == query, losses

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    correct = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, bool)
    losses = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0)
    n = correct.size
    acc = float(correct.mean()) if n else float("nan")
    return EvalResult(acc, _stderr(acc, n), float(losses.mean()) if n else float("nan"), n, correct)


def evaluate(
    params,
    pool: WindowPool,
    cfg: ModelConfig,
    n_way: int | None = None,
    k_shot: int | None = None,
    n_episodes: int = 1000,
    seed: int = 0,
    mode: str = SAME_SUBJECT,
    label_shuffle: bool = True,
    workers: int = 1,
) -> EvalResult:
    """Accuracy +- stderr on a fixed-seed episode stream. Parameters are not modified."""
    n_way = n_way or cfg.n_way
    k_shot = k_shot or cfg.k_shot
    if (n_way, k_shot) != (cfg.n_way, cfg.k_shot):
        raise ParameterError(f"model built for {cfg.n_way}-way {cfg.k_shot}-shot, asked for {n_way}-way {k_shot}-shot")
    episodes = sample_episodes(pool, n_episodes, n_way, k_shot, mode, seed, label_shuffle, workers=workers)
    return evaluate_episodes(params, episodes, cfg, workers)


def centroid_baseline(
    pool: WindowPool, n_way: int, k_shot: int, n_episodes: int = 1000, seed: int = 0, mode: str = SAME_SUBJECT
) -> EvalResult:
    """Nearest-centroid accuracy on per-window channel means.

    Independent of the network: each support window is reduced to its
    mean over time, slots are represented by the mean of their k support
    vectors, and the query goes to the nearest slot (Euclidean).
    """
    episodes = sample_episodes(pool, n_episodes, n_way, k_shot, mode, seed)
    correct = np.empty(len(episodes), dtype=bool)
    for i, ep in enumerate(episodes):
        feats = ep.windows.mean(axis=1).astype(np.float64)
        support, query = feats[:-1], feats[-1]
        centroids = np.stack([support[ep.support_labels == s].mean(axis=0) for s in range(n_way)])
        pred = int(np.argmin(((centroids - query) ** 2).sum(axis=1)))
        correct[i] = pred == ep.query_label
    acc = float(correct.mean())
    return EvalResult(acc, _stderr(acc, correct.size), float("nan"), correct.size, correct)


def _step(params, opt: Adam, cfg: ModelConfig, windows, support, query) -> tuple[float, int]:
    """One Adam update; returns the batch loss and number of correct queries before it."""
    opt.zero_grad()
    logits = forward_episodes(windows, support, cfg, params)
    loss = T.cross_entropy(logits, query)
    value = loss.item()
    n_correct = int(np.sum(np.argmax(logits.data, axis=-1) == query))
    if not math.isfinite(value):
        return value, n_correct
    loss.backward()
    opt.step()
    return value, n_correct


def fit_batch(params, cfg: ModelConfig, windows, support, query, steps: int, lr: float = 1e-4) -> list[tuple[float, int]]:
    """Repeated Adam steps on one frozen batch. Returns (loss, n_correct) before each step."""
    opt = Adam(params, lr=lr)
    return [_step(params, opt, cfg, windows, support, query) for _ in range(steps)]


def _dump_divergence(out_dir, step, params, windows, support, query):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"divergence_step{step}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, windows=windows, support=support, query=query, **{n: p.data for n, p in params.items()})
    return path


def train(
    meta_split: MetaSplit,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    params=None,
    out_dir=None,
    on_record: Callable[[EvalRecord], None] | None = None,
) -> tuple[dict[str, Tensor], RunReport]:
    """Episodic training with periodic meta-val evaluation.

    Each step samples a batch of episodes from meta-train, takes the mean
    query cross-entropy and applies one Adam update. The parameters with the
    best meta-val accuracy are returned alongside the report, which also
    holds their final meta-val and meta-test accuracies.
    """
    if (model_cfg.n_way, model_cfg.k_shot) != (train_cfg.n_way, train_cfg.k_shot):
        raise ParameterError(
            f"model is {model_cfg.n_way}-way {model_cfg.k_shot}-shot but training asks for "
            f"{train_cfg.n_way}-way {train_cfg.k_shot}-shot"
        )
    N, k, mode = train_cfg.n_way, train_cfg.k_shot, train_cfg.sampling_mode
    for split in ("meta_train", "meta_val", "meta_test"):
        check_feasible(meta_split.pool(split), N, k, mode)

    seeds = np.random.SeedSequence(train_cfg.seed).spawn(3)
    episode_rng = np.random.default_rng(seeds[0])
    val_seed = int(seeds[1].generate_state(1)[0])
    test_seed = int(seeds[2].generate_state(1)[0])
    params = params if params is not None else init_params(model_cfg)
    opt = Adam(params, lr=train_cfg.lr)
    report = RunReport()
    if meta_split.val_from_train:
        report.notes.append("meta-val episodes are drawn from the meta-train repetitions")
    batch = train_cfg.resolved_batch_size
    start = time.perf_counter()

    def record(step, split, res: EvalResult):
        rec = EvalRecord(step, split, res.loss, res.accuracy, res.stderr, res.n_episodes, time.perf_counter() - start)
        report.records.append(rec)
        if on_record:
            on_record(rec)
        log.info(rec.line())
        return rec

    def validate(step):
        res = evaluate(params, meta_split.meta_val, model_cfg, N, k, train_cfg.eval_episodes, val_seed, mode,
                       train_cfg.label_shuffle, train_cfg.workers)
        record(step, "meta_val", res)
        return res.accuracy

    best_acc = validate(0)
    best, report.best_step = snapshot(params), 0
    recent = []
    for step in range(1, train_cfg.max_steps + 1):
        eps = [sample_episode(meta_split.meta_train, N, k, mode, episode_rng, train_cfg.label_shuffle) for _ in range(batch)]
        windows, support, query = batch_arrays(eps)
        loss, n_correct = _step(params, opt, model_cfg, windows, support, query)
        if not math.isfinite(loss):
            dump = _dump_divergence(out_dir, step, params, windows, support, query)
            raise DivergenceError(f"non-finite loss {loss} at step {step}" + (f"; state dumped to {dump}" if dump else ""))
        recent.append((loss, n_correct))
        if step % train_cfg.eval_every == 0 or step == train_cfg.max_steps:
            n = len(recent) * batch
            acc = sum(c for _, c in recent) / n
            record(step, "meta_train", EvalResult(acc, _stderr(acc, n), float(np.mean([v for v, _ in recent])), n, np.zeros(0)))
            recent = []
            acc = validate(step)
            if acc > best_acc:
                best_acc, best, report.best_step = acc, snapshot(params), step
    report.steps = train_cfg.max_steps

    best_params = {n: Tensor(p.data, requires_grad=True) for n, p in best.items()}
    for split, seed in (("meta_val", val_seed), ("meta_test", test_seed)):
        res = evaluate(best_params, meta_split.pool(split), model_cfg, N, k, train_cfg.eval_episodes, seed, mode,
                       train_cfg.label_shuffle, train_cfg.workers)
        record(report.best_step, f"final_{split}", res)
        report.final[split] = {"accuracy": res.accuracy, "stderr": res.stderr, "loss": res.loss, "episodes": res.n_episodes}
    return best_params, report
