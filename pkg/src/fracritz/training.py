"""Plain SGD on the discrete energy."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .ansatz import ProblemSpec, SpecialNetParams, as_flat, from_flat, trace_eval
from .core_ad import FnnParams, FnnShape
from .domain import McSample, halton_points, uniform_test_points
from .quadrature import DEFAULT_CHUNK_ROWS, loss_and_grad, sinc_scheme
from .reference import ModelProblem, solution_error

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 5000
    batch_count: int = 1
    lr: float = 0.1
    lr_decay: float = 0.5
    lr_decay_every: int = 1000
    seed: int = 0
    record_every: int = 1
    eval_every: int = 100
    init_range: str = "standard"  # "standard": 1/sqrt(M); "literal": sqrt(M)
    divergence_factor: float = 1e6

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_count < 1:
            raise ValueError("batch_count must be >= 1")
        if self.lr < 0 or not 0 < self.lr_decay <= 1 or self.lr_decay_every < 1:
            raise ValueError("invalid learning-rate schedule")
        if self.record_every < 1 or self.eval_every < 1:
            raise ValueError("record_every and eval_every must be >= 1")
        if self.init_range not in ("standard", "literal"):
            raise ValueError(f"unknown init_range {self.init_range!r}")

    def learning_rate(self, epoch: int) -> float:
        """Rate used in ``epoch`` (0-based): halved every ``lr_decay_every`` epochs by default."""
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)


@dataclass
class QuadConfig:
    h: float = 1.0 / 3.0
    n_points: int = 10_000
    skip: int = 0
    chunk_rows: int = DEFAULT_CHUNK_ROWS


@dataclass
class RunReport:
    kind: str
    shape: FnnShape
    loss_history: list = field(default_factory=list)   # (epochs done, mean batch loss)
    error_history: list = field(default_factory=list)  # (epochs done, e_l2 after it)
    final_error: float = float("nan")
    seconds: float = 0.0
    config: dict = field(default_factory=dict)
    params: object = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "shape": asdict(self.shape),
            "loss_history": [[e, v] for e, v in self.loss_history],
            "error_history": [[e, v] for e, v in self.error_history],
            "final_error": self.final_error,
            "seconds": self.seconds,
            "config": self.config,
        }


def init_fnn(shape: FnnShape, rng: np.random.Generator, init_range: str = "standard") -> FnnParams:
    bound = 1.0 / math.sqrt(shape.width) if init_range == "standard" else math.sqrt(shape.width)
    return FnnParams(shape, rng.uniform(-bound, bound, shape.size))


def init_params(shape: FnnShape, seed: int, kind: str = "special", init_range: str = "standard"):
    """Uniform initialization of every weight, bias and output entry; decay rates start at 0.5."""
    rng = np.random.default_rng(seed)
    if kind == "simple":
        return init_fnn(shape, rng, init_range)
    if kind != "special":
        raise ValueError(f"unknown ansatz kind {kind!r}")
    return SpecialNetParams(init_fnn(shape, rng, init_range), init_fnn(shape, rng, init_range))


def sgd_step(flat: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    flat = np.asarray(flat, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if flat.shape != grad.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameters {flat.shape}")
    if not np.isfinite(grad).all():
        raise FloatingPointError("non-finite gradient, aborting epoch")
    return flat - lr * grad


def train(spec: ProblemSpec, kind: str, shape: FnnShape, quad: QuadConfig, cfg: TrainConfig,
          test_points: np.ndarray | None = None, mp: ModelProblem | None = None,
          params=None, sample: McSample | None = None, callback=None) -> RunReport:
    """Minimize the discrete energy with minibatch SGD over the Halton points.

    Each epoch visits every batch once, in order; the full sinc node set is
    used for every step.  ``loss_history`` stores the mean batch loss of
    each recorded epoch, ``error_history`` the relative l2 error of the
    trace on ``test_points`` (when a model problem is given).
    """
    t0 = time.perf_counter()
    if params is None:
        params = init_params(shape, cfg.seed, kind, cfg.init_range)
    kind, shape, flat = as_flat(params)
    flat = flat.copy()
    if sample is None:
        sample = halton_points(spec.domain, quad.n_points, quad.skip, cfg.batch_count)
    scheme = sinc_scheme(spec.s, quad.h)
    if mp is None and spec.rhs == "sine" and spec.domain == ModelProblem(spec.d, spec.s).domain:
        mp = ModelProblem(spec.d, spec.s)
    if test_points is None and mp is not None:
        test_points = uniform_test_points(spec.domain, 10_000, cfg.seed)

    report = RunReport(kind, shape, config={"train": asdict(cfg), "quad": asdict(quad),
                                             "s": spec.s, "d": spec.d})

    def error(flat_now):
        p = from_flat(kind, shape, flat_now)
        return solution_error(lambda x: trace_eval(p, spec, x), mp, test_points)

    reference_loss = None
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate(epoch)
        losses = []
        for k in range(sample.batch_count):
            value, grad = loss_and_grad(None, spec, sample.batch(k), scheme, quad.chunk_rows,
                                        flat=flat, kind=kind, shape=shape)
            if reference_loss is None:
                reference_loss = max(abs(value), 1.0)
            if abs(value) > cfg.divergence_factor * reference_loss:
                raise DivergenceError(
                    f"loss {value:.3e} at epoch {epoch} exceeds {cfg.divergence_factor:g} x initial")
            losses.append(value)
            flat = sgd_step(flat, grad, lr)
        done = epoch + 1
        last = done == cfg.epochs
        if epoch == 0 or done % cfg.record_every == 0 or last:
            report.loss_history.append((done, math.fsum(losses) / len(losses)))
        if mp is not None and (epoch == 0 or done % cfg.eval_every == 0 or last):
            report.error_history.append((done, error(flat)))
            log.info("epoch %d loss %.6e error %.4e", epoch, losses[-1], report.error_history[-1][1])
        if callback is not None:
            callback(epoch, losses, flat)

    report.params = from_flat(kind, shape, flat)
    if mp is not None:
        report.final_error = report.error_history[-1][1]
    report.seconds = time.perf_counter() - t0
    return report
