"""SGD-with-momentum training and the multi-seed best-accuracy protocol."""

from __future__ import annotations

import dataclasses
import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from laurel.data import Dataset, batches
from laurel.model import Model, ModelConfig, build, count_params, forward
from laurel.tensor import Tensor, backward, cross_entropy

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    cosine: bool = True
    warmup_steps: int = 0
    eval_every: int | None = None  # defaults to min(100, steps)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.eval_every is None:
            object.__setattr__(self, "eval_every", min(100, max(self.steps, 1)))
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 1 <= self.eval_every <= self.steps:
            raise ValueError("eval_every must lie in [1, steps]")
        if self.warmup_steps < 0 or not 0 <= self.momentum < 1:
            raise ValueError("need warmup_steps >= 0 and 0 <= momentum < 1")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def lr_at(self, step: int) -> float:
        """Learning rate used for update number ``step`` (0-based)."""
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        if not self.cosine:
            return self.lr
        span = max(self.steps - self.warmup_steps, 1)
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * (step - self.warmup_steps) / span))


@dataclass
class MetricsRecord:
    step: int
    train_loss: float
    eval_accuracy: float | None
    learning_rate: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrialResult:
    seed: int
    best_eval_accuracy_at_1: float
    step_of_best: int
    final_train_loss: float
    param_count: int
    wall_time: float = field(default=0.0, compare=False)
    failed: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        # wall time is left out so serialised results stay reproducible
        d = dataclasses.asdict(self)
        del d["wall_time"]
        return d


class SGD:
    """``v <- mu*v - lr*g``; ``p <- p + v`` applied to every parameter."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, grads: dict[Tensor, np.ndarray], lr: float) -> None:
        for k, p in self.params.items():
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            v = self.velocity[k]
            v *= self.momentum
            v -= lr * g
            p.data += v


def train_step(model: Model, batch, opt: SGD, lr: float) -> float:
    """One forward/backward/update; returns the batch loss before the update."""
    x, y = batch
    # overflow shows up as a non-finite loss, reported below
    with np.errstate(over="ignore", invalid="ignore"):
        loss = cross_entropy(forward(model, x), y)
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite training loss {value}")
    opt.step(backward(loss), lr)
    return value


def predict(model: Model, features: np.ndarray, chunk: int = 1000) -> np.ndarray:
    """Arg-max class per row; ties go to the lowest class index."""
    out = []
    for s in range(0, features.shape[0], chunk):
        logits = forward(model, Tensor(features[s:s + chunk])).data
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out)


def accuracy(model: Model, dataset: Dataset) -> float:
    with _no_grad(model):
        return float(np.mean(predict(model, dataset.features) == dataset.labels))


class _no_grad:
    """Temporarily mark a model's tensors as constants to skip graph building."""

    def __init__(self, model: Model):
        self.params = list(model.parameters().values())

    def __enter__(self):
        for p in self.params:
            p.requires_grad = False

    def __exit__(self, *exc):
        for p in self.params:
            p.requires_grad = True


def _step_batches(train: Dataset, batch_size: int, seed: int):
    epoch = 0
    while True:
        yield from batches(train, batch_size, [seed, epoch])
        epoch += 1


def run_trial(model_config: ModelConfig, train_config: TrainConfig, train: Dataset,
              evaluation: Dataset, seed: int) -> tuple[TrialResult, list[MetricsRecord]]:
    """Train one model and track its best eval accuracy@1.

    Evaluation happens after every ``eval_every`` updates and after the last
    one. Divergence ends the trial early and is reported on the result.
    """
    _, result, records = train_model(model_config, train_config, train, evaluation, seed)
    return result, records


def train_model(model_config: ModelConfig, train_config: TrainConfig, train: Dataset,
                evaluation: Dataset, seed: int) -> tuple[Model, TrialResult, list[MetricsRecord]]:
    """:func:`run_trial`, also handing back the trained model."""
    t0 = time.perf_counter()
    model = build(model_config.replace(seed=seed))
    opt = SGD(model.parameters(), train_config.momentum)
    records: list[MetricsRecord] = []
    best, best_step, loss = -1.0, 0, float("nan")
    error = None
    stream = _step_batches(train, train_config.batch_size, seed)
    try:
        for step in range(train_config.steps):
            lr = train_config.lr_at(step)
            loss = train_step(model, next(stream), opt, lr)
            done = step + 1
            if done % train_config.eval_every == 0 or done == train_config.steps:
                acc = accuracy(model, evaluation)
                records.append(MetricsRecord(done, loss, acc, lr))
                if acc > best:
                    best, best_step = acc, done
    except DivergenceError as exc:
        error = f"step {step + 1}: {exc}"
        logger.warning("trial seed=%d diverged at %s", seed, error)
        records.append(MetricsRecord(step + 1, float("nan"), None, lr))
    result = TrialResult(
        seed=seed,
        best_eval_accuracy_at_1=max(best, 0.0),
        step_of_best=best_step,
        final_train_loss=loss,
        param_count=count_params(model),
        wall_time=time.perf_counter() - t0,
        failed=error is not None,
        error=error,
    )
    return model, result, records


def _trial_job(args):
    return run_trial(*args)


@dataclass
class TrialSummary:
    mean: float
    std: float
    median: float
    results: list[TrialResult]
    metrics: list[list[MetricsRecord]]
    failures: int

    @property
    def accuracies(self) -> list[float]:
        return [r.best_eval_accuracy_at_1 for r in self.results if not r.failed]


def run_trials(model_config: ModelConfig, train_config: TrainConfig, train: Dataset,
               evaluation: Dataset, seeds=None, workers: int = 1) -> TrialSummary:
    """Best accuracy@1 over seeds: mean, sample std and median of completed trials.

    Results are ordered as ``seeds``, whatever order the workers finish in.
    """
    seeds = list(train_config.seeds if seeds is None else seeds)
    if not seeds:
        raise ValueError("run_trials needs at least one seed")
    jobs = [(model_config, train_config, train, evaluation, s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outs = list(pool.map(_trial_job, jobs))
    else:
        outs = [_trial_job(j) for j in jobs]
    results = [o[0] for o in outs]
    accs = [r.best_eval_accuracy_at_1 for r in results if not r.failed]
    if accs:
        mean = statistics.fmean(accs)
        std = statistics.stdev(accs) if len(accs) > 1 else 0.0
        median = statistics.median(accs)
    else:
        mean = std = median = float("nan")
    return TrialSummary(mean, std, median, results, [o[1] for o in outs],
                        sum(r.failed for r in results))
