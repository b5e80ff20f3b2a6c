"""Dataset preparation, training loop, ranking evaluation and grid search."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from wgpnn.config import TrainConfig, expand_grid
from wgpnn.errors import NumericalError, UnknownTokenError
from wgpnn.gp import Posterior, RegularizerConfig, gp_posterior, predict_scores, quadrature_grid, regularizer_from_posterior, uce_loss_approx
from wgpnn.graph import FilterIndex, GraphStore, Quadruple, add_reciprocals, build_filter_index, time_unit
from wgpnn.neural import WGPNN, WindowBatch
from wgpnn.optim import AdamState, adam_step

log = logging.getLogger(__name__)

HITS_AT = (1, 3, 10)


def split_by_time(quadruples, fractions=(0.8, 0.1, 0.1)):
    """Split time-sorted quadruples so that train < valid < test timestamps.

    A timestamp joins a split while the number of events strictly before it
    is below that split's cumulative fraction, so a timestamp straddling a
    boundary goes to the earlier split. Each split keeps at least one
    timestamp.
    """
    quads = list(quadruples)
    times = sorted({q.timestamp for q in quads})
    if len(times) < 3:
        raise ValueError(f"need at least 3 distinct timestamps to split, got {len(times)}")
    n = len(quads)
    counts = np.array([0] + [0] * len(times))
    index = {t: i for i, t in enumerate(times)}
    for q in quads:
        counts[index[q.timestamp] + 1] += 1
    before = np.cumsum(counts)[:-1]  # events strictly before each timestamp
    c1 = fractions[0] * n
    c2 = (fractions[0] + fractions[1]) * n
    i_valid = int(np.sum(before < c1 - 1e-9))
    i_test = int(np.sum(before < c2 - 1e-9))
    T = len(times)
    i_test = min(max(i_test, 2), T - 1)
    i_valid = min(max(i_valid, 1), i_test - 1)
    t_valid, t_test = times[i_valid], times[i_test]
    train = [q for q in quads if q.timestamp < t_valid]
    valid = [q for q in quads if t_valid <= q.timestamp < t_test]
    test = [q for q in quads if q.timestamp >= t_test]
    return train, valid, test


def query_offset(query_time, last_time, unit, tau_max):
    """Log-scaled offset ``log(1 + (t_q - t_last) / unit)``.

    Without history the offset is measured from time 0 and capped at ``tau_max``.
    """
    if last_time is None:
        return min(math.log1p(query_time / unit), tau_max)
    return math.log1p((query_time - last_time) / unit)


@dataclass
class TKGData:
    """A split dataset. Splits hold original quadruples; reciprocals are added on demand."""

    num_entities: int
    num_predicates: int
    train: list[Quadruple]
    valid: list[Quadruple]
    test: list[Quadruple]
    unit: int = 1
    entities: dict[str, int] | None = None
    predicates: dict[str, int] | None = None
    _filter: FilterIndex | None = field(default=None, repr=False)

    @classmethod
    def from_splits(cls, train, valid, test, num_entities=None, num_predicates=None, **kwargs):
        quads = list(train) + list(valid) + list(test)
        if num_entities is None:
            num_entities = 1 + max(max(q.subject, q.object) for q in quads)
        if num_predicates is None:
            num_predicates = 1 + max(q.predicate for q in quads)
        unit = kwargs.pop("unit", None) or time_unit(q.timestamp for q in quads)
        return cls(num_entities, num_predicates, list(train), list(valid), list(test), unit=unit, **kwargs)

    @property
    def num_relations(self):
        return 2 * self.num_predicates

    def queries(self, split):
        return add_reciprocals(getattr(self, split), self.num_predicates)

    def store(self, *splits):
        quads = []
        for split in splits:
            quads.extend(self.queries(split))
        return GraphStore(quads)

    @property
    def filter_index(self):
        if self._filter is None:
            self._filter = build_filter_index(self.queries("train"), self.queries("valid"), self.queries("test"))
        return self._filter

    def tau_max(self, window):
        """99th percentile of training query offsets, floored at ``log 2``."""
        store = self.store("train")
        unit = self.unit
        offsets = []
        for q in self.queries("train"):
            last = store.window((q.subject, q.predicate), q.timestamp, window).last_time
            if last is not None:
                offsets.append(math.log1p((q.timestamp - last) / unit))
        if not offsets:
            return math.log(2.0)
        return max(float(np.percentile(offsets, 99)), math.log(2.0))


@dataclass
class QueryBatch:
    windows: WindowBatch
    queries: list[Quadruple]
    targets: torch.Tensor
    tau_star: torch.Tensor


def make_batches(store: GraphStore, queries, window, unit, tau_max, batch_size, num_entities=None):
    """Build history windows and query offsets for time-ordered batches of queries."""
    batches = []
    queries = sorted(queries, key=lambda q: q.timestamp)
    for start in range(0, len(queries), batch_size):
        chunk = queries[start : start + batch_size]
        wins, taus = [], []
        for q in chunk:
            if num_entities is not None and not (0 <= q.subject < num_entities and 0 <= q.object < num_entities):
                raise UnknownTokenError(q.subject if q.subject >= num_entities else q.object, kind="entity id")
            win = store.window((q.subject, q.predicate), q.timestamp, window)
            if win.entries and win.entries[-1][0] >= q.timestamp:
                raise AssertionError(f"history window leaks future slice for {q}")
            wins.append(win)
            taus.append(query_offset(q.timestamp, win.last_time, unit, tau_max))
        batches.append(
            QueryBatch(
                WindowBatch.from_windows(wins, window),
                chunk,
                torch.tensor([q.object for q in chunk], dtype=torch.long),
                torch.tensor(taus, dtype=torch.float64),
            )
        )
    return batches


def event_losses(model: WGPNN, batch: QueryBatch, config: TrainConfig, tau_max):
    """Per-event UCE loss at the query offset plus the regularizer summed over candidates."""
    points = model(batch.windows)
    kp = model.kernel_params(config.query_weight, config.jitter)
    reg_cfg = RegularizerConfig(config.alpha, config.beta, config.nu, tau_max, config.quad_points)
    B, C = len(batch.queries), model.num_entities
    grid = quadrature_grid(reg_cfg)
    queries = torch.cat([batch.tau_star[:, None], grid.expand(B, -1)], -1)  # (B, 1 + Q)
    post = gp_posterior(points.tau, points.y, points.w, queries[:, None, :].expand(B, C, -1), kp)
    uce = uce_loss_approx(post.mean[..., 0], post.var[..., 0], batch.targets)
    if config.alpha == 0 and config.beta == 0:
        return uce
    reg = regularizer_from_posterior(Posterior(post.mean[..., 1:], post.var[..., 1:]), reg_cfg)
    return uce + reg.sum(-1)


def model_params(model: WGPNN):
    return dict(model.named_parameters())


def train_epoch(model: WGPNN, batches, config: TrainConfig, state: AdamState, tau_max):
    """One pass over time-ordered batches with one Adam step per batch. Returns the mean event loss."""
    params = model_params(model)
    names = list(params)
    total, count = 0.0, 0
    for batch in batches:
        losses = event_losses(model, batch, config, tau_max)
        finite = torch.isfinite(losses)
        if not bool(finite.all()):
            bad = batch.queries[int((~finite).nonzero()[0])]
            raise NumericalError(f"non-finite loss for event {tuple(bad)}")
        loss = losses.mean()
        grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
        adam_step(params, dict(zip(names, grads)), state, lr=config.lr)
        total += float(losses.detach().sum())
        count += len(batch.queries)
    return total / max(count, 1)


@dataclass
class RankReport:
    """Per-query ranks under raw and time-aware filtered scoring."""

    queries: list[Quadruple]
    raw: np.ndarray
    filtered: np.ndarray
    num_predicates: int

    @property
    def direction(self):
        return np.array(["subject" if q.predicate >= self.num_predicates else "object" for q in self.queries])

    def metrics(self, which="both"):
        if which == "both":
            sel = np.ones(len(self.queries), dtype=bool)
        else:
            sel = self.direction == which
        return {
            "raw": rank_metrics(self.raw[sel]),
            "filtered": rank_metrics(self.filtered[sel]),
        }

    def summary(self):
        return {which: self.metrics(which) for which in ("both", "object", "subject")}

    @property
    def mrr(self):
        return self.metrics()["filtered"]["mrr"]

    def rows(self):
        for q, d, r, f in zip(self.queries, self.direction, self.raw, self.filtered):
            yield {
                "subject": q.subject,
                "predicate": q.predicate,
                "object": q.object,
                "timestamp": q.timestamp,
                "direction": str(d),
                "raw_rank": float(r),
                "filtered_rank": float(f),
            }


def rank_metrics(ranks) -> dict[str, float]:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        return {"mrr": float("nan"), **{f"hits@{k}": float("nan") for k in HITS_AT}, "count": 0}
    out = {"mrr": float(np.mean(1.0 / ranks))}
    for k in HITS_AT:
        out[f"hits@{k}"] = float(np.mean(ranks <= k))
    out["count"] = int(ranks.size)
    return out


def rank_of(scores, target, exclude=(), worst_case=False):
    """1 + number of candidates scoring higher + half the ties (all ties if ``worst_case``)."""
    scores = np.asarray(scores)
    keep = np.ones(scores.shape[0], dtype=bool)
    keep[list(exclude)] = False
    keep[target] = False
    true = scores[target]
    higher = int(np.sum(scores[keep] > true))
    ties = int(np.sum(scores[keep] == true))
    return 1.0 + higher + (ties if worst_case else 0.5 * ties)


@torch.no_grad()
def score_batch(model: WGPNN, batch: QueryBatch, config: TrainConfig):
    points = model(batch.windows)
    return predict_scores(points.as_tuple(), batch.tau_star, model.kernel_params(config.query_weight, config.jitter))


@torch.no_grad()
def evaluate(model: WGPNN, batches, filter_index: FilterIndex, config: TrainConfig, num_predicates) -> RankReport:
    queries, raw, filtered = [], [], []
    for batch in batches:
        scores = score_batch(model, batch, config).mean.numpy()
        for q, row in zip(batch.queries, scores):
            others = filter_index[(q.subject, q.predicate, q.timestamp)] - {q.object}
            queries.append(q)
            raw.append(rank_of(row, q.object, worst_case=config.worst_case_ties))
            filtered.append(rank_of(row, q.object, others, worst_case=config.worst_case_ties))
    return RankReport(queries, np.array(raw), np.array(filtered), num_predicates)


class Trainer:
    """Ties a model, its optimizer state and a prepared dataset together."""

    def __init__(self, data: TKGData, config: TrainConfig, model: WGPNN | None = None, state: AdamState | None = None, tau_max=None):
        self.data = data
        self.config = config
        self.tau_max = tau_max if tau_max is not None else data.tau_max(config.window)
        self.model = model or WGPNN(data.num_entities, data.num_relations, dim=config.dim, num_points=config.num_points, seed=config.seed)
        self.state = state or AdamState()
        self.epoch = 0
        self._batches = {}

    def batches(self, split, eval_batch_size=None):
        key = (split, eval_batch_size)
        if key not in self._batches:
            history = {"train": ("train",), "valid": ("train", "valid"), "test": ("train", "valid", "test")}[split]
            self._batches[key] = make_batches(
                self.data.store(*history),
                self.data.queries(split),
                self.config.window,
                self.data.unit,
                self.tau_max,
                eval_batch_size or self.config.batch_size,
                self.data.num_entities,
            )
        return self._batches[key]

    def train_epoch(self):
        loss = train_epoch(self.model, self.batches("train"), self.config, self.state, self.tau_max)
        self.epoch += 1
        return loss

    def evaluate(self, split):
        return evaluate(self.model, self.batches(split, 512), self.data.filter_index, self.config, self.data.num_predicates)

    def fit(self, epochs=None, validate=True, callback=None):
        """Train with early stopping on validation filtered MRR.

        Returns the per-epoch history and the best parameters seen (a state dict).
        """
        epochs = self.config.epochs if epochs is None else epochs
        history = []
        best_mrr, best_state, stale = -math.inf, None, 0
        for _ in range(epochs):
            loss = self.train_epoch()
            record = {"epoch": self.epoch, "loss": loss}
            if validate and self.data.valid:
                record["valid_mrr"] = self.evaluate("valid").mrr
            history.append(record)
            log.info("epoch %d loss %.6f valid_mrr %s", self.epoch, loss, record.get("valid_mrr"))
            if callback:
                callback(self, record)
            score = record.get("valid_mrr", -loss)
            if score > best_mrr:
                best_mrr, stale = score, 0
                best_state = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
            else:
                stale += 1
                if stale >= self.config.patience:
                    break
        return history, best_state


def grid_search(data: TKGData, grid, base: TrainConfig | None = None, epochs=5):
    """Train every grid point for ``epochs`` and pick the best validation filtered MRR.

    Ties prefer fewer pseudo-points, then smaller embeddings. Returns the best
    config and one result row per grid point.
    """
    configs = grid if isinstance(grid, list) else expand_grid(grid, base)
    if not configs:
        raise ValueError("empty grid")
    results = []
    for cfg in configs:
        trainer = Trainer(data, cfg)
        for _ in range(epochs):
            trainer.train_epoch()
        metrics = trainer.evaluate("valid").metrics()
        results.append({"config": cfg, "valid_mrr": metrics["filtered"]["mrr"], "metrics": metrics})
    best = min(results, key=lambda r: (-r["valid_mrr"], r["config"].num_points, r["config"].dim))
    return best["config"], results
