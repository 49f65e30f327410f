"""Adam, the training loop, evaluation and the per-subject protocol."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .dataset import DEFAULT_TEST_REPS, EmgRecording, WindowSet, segment_windows, split_by_repetition
from .errors import ConfigError, DataError, NumericalError, ProtocolError
from .model import HdcamModel, ModelConfig, count_parameters
from .sigproc import preprocess

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 120
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")


# optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, t: int, config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if t < 1:
        raise ValueError(f"Adam step index must be >= 1, got {t}")
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for k, theta in params.items():
        g = grads.get(k)
        if g is None:
            continue
        if g.shape != theta.shape:
            raise RuntimeError(f"gradient for {k} has shape {g.shape}, parameter {theta.shape}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(theta)
            state.v[k] = np.zeros_like(theta)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        theta -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
    state.t = t


class Adam:
    def __init__(self, params: Mapping[str, T.Tensor], config: TrainConfig):
        self.params = dict(params)
        self.config = config
        self.state = AdamState()

    def step(self) -> None:
        data = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step(data, grads, self.state, self.state.t + 1, self.config)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# training ------------------------------------------------------------------

@dataclass
class TrainResult:
    loss_curve: list[float]
    steps: int
    final_loss: float
    grad_norm_max: float


def _grad_norms(model: HdcamModel) -> dict[str, float]:
    return {k: float(np.linalg.norm(p.grad)) if p.grad is not None else 0.0
            for k, p in model.named_parameters()}


def train_model(model: HdcamModel, train: WindowSet, config: TrainConfig,
                on_epoch: Callable[[int, float], bool | None] | None = None) -> TrainResult:
    """Mini-batch cross-entropy descent with Adam; returns the epoch-mean loss curve.

    ``on_epoch(epoch, loss)`` may return True to stop after that epoch.
    """
    N = len(train)
    if N == 0:
        raise DataError("training set is empty")
    if train.length != model.expected_length(train.fs):
        raise ConfigError(f"model expects L={model.expected_length(train.fs)} samples, "
                          f"training windows have L={train.length}")
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, config)
    curve: list[float] = []
    steps = 0
    gmax = 0.0
    bs = config.batch_size
    for epoch in range(config.epochs):
        order = rng.permutation(N) if config.shuffle else np.arange(N)
        total = 0.0
        for bi, a in enumerate(range(0, N, bs)):
            idx = order[a:a + bs]
            x = T.Tensor(train.batch(idx).astype(model.dtype, copy=False))
            loss = T.cross_entropy(model(x, fs=train.fs), train.labels[idx])
            value = float(loss.data)
            T.backward(loss)
            norms = _grad_norms(model)
            gn = math.sqrt(sum(n * n for n in norms.values()))
            if not math.isfinite(value) or not math.isfinite(gn):
                worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:3]
                raise NumericalError(f"non-finite loss/gradients at epoch {epoch + 1}, batch {bi} "
                                     f"(loss={value}, grad norm={gn}, largest: {worst})")
            gmax = max(gmax, gn)
            opt.step()
            opt.zero_grad()
            steps += 1
            total += value * len(idx)
        curve.append(total / N)
        log.debug("epoch %d loss %.5f", epoch + 1, curve[-1])
        if on_epoch is not None and on_epoch(epoch + 1, curve[-1]):
            break
    return TrainResult(curve, steps, curve[-1] if curve else float("nan"), gmax)


# evaluation ----------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray          # [true, predicted] counts
    n: int

    @property
    def per_class_recall(self) -> np.ndarray:
        support = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(support > 0, np.diag(self.confusion) / np.maximum(support, 1), np.nan)


def predict(model: HdcamModel, ws: WindowSet, batch_size: int = 256) -> np.ndarray:
    """Arg-max class per window; ties resolve to the lowest class index."""
    out = np.empty(len(ws), dtype=np.int64)
    with T.no_grad():
        for a in range(0, len(ws), batch_size):
            idx = np.arange(a, min(a + batch_size, len(ws)))
            logits = model(T.Tensor(ws.batch(idx).astype(model.dtype, copy=False)), fs=ws.fs)
            out[idx] = np.argmax(logits.data, axis=1)
    return out


def evaluate(model: HdcamModel, test: WindowSet, batch_size: int = 256) -> EvalResult:
    if len(test) == 0:
        raise DataError("test set is empty")
    pred = predict(model, test, batch_size)
    K = model.config.num_classes
    conf = np.zeros((K, K), dtype=np.int64)
    np.add.at(conf, (test.labels, pred), 1)
    return EvalResult(float(np.mean(pred == test.labels)), conf, len(test))


# protocol ------------------------------------------------------------------

@dataclass(frozen=True)
class ProtocolSpec:
    window_ms: int = 300
    stride_ms: float = 50.0          # training windows
    eval_stride_ms: float = 100.0    # test windows
    test_reps: tuple[int, ...] = (2, 5)
    include_rest: bool = False
    fc: float = 1.0
    mu: float = 256.0
    zero_phase: bool = False


@dataclass
class SubjectRun:
    subject_id: int
    accuracy: float
    confusion: np.ndarray
    loss_curve: list[float]
    n_train: int
    n_test: int
    clip_rate: float
    scales: np.ndarray
    state: dict[str, np.ndarray]
    seed: int


@dataclass
class Metrics:
    per_subject_accuracy: dict[int, float]
    mean_accuracy: float
    std_accuracy: float               # population STD over subjects
    confusion: np.ndarray
    loss_curve: dict[int, list[float]]

    def to_dict(self) -> dict:
        return {
            "per_subject_accuracy": {str(k): v for k, v in self.per_subject_accuracy.items()},
            "mean": self.mean_accuracy,
            "std": self.std_accuracy,
            "confusion": self.confusion.tolist(),
            "loss_curve": {str(k): v for k, v in self.loss_curve.items()},
        }


def subject_seed(seed: int, subject_id: int) -> int:
    return int(np.random.SeedSequence([seed, subject_id]).generate_state(1)[0])


def prepare_subject(rec: EmgRecording, spec: ProtocolSpec, num_classes: int,
                    scales: np.ndarray | None = None):
    """Preprocess one recording and return (train windows, test windows, pipeline result)."""
    pre = preprocess(rec, test_reps=spec.test_reps, scales=scales, fc=spec.fc, mu=spec.mu,
                     zero_phase=spec.zero_phase)
    kw = dict(num_classes=num_classes - (1 if spec.include_rest else 0), include_rest=spec.include_rest)
    train_all = segment_windows(pre.recording, spec.window_ms, spec.stride_ms, **kw)
    test_all = segment_windows(pre.recording, spec.window_ms, spec.eval_stride_ms, **kw)
    if len(train_all) == 0 or len(test_all) == 0:
        raise ProtocolError(f"subject {rec.subject_id}: window {spec.window_ms} ms / stride "
                            f"{spec.stride_ms} ms yields no windows (movement runs too short)")
    train, _ = split_by_repetition(train_all, spec.test_reps)
    _, test = split_by_repetition(test_all, spec.test_reps)
    return train, test, pre


def run_subject(rec: EmgRecording, model_config: ModelConfig, spec: ProtocolSpec,
                train_config: TrainConfig) -> SubjectRun:
    train, test, pre = prepare_subject(rec, spec, model_config.num_classes)
    seed = subject_seed(train_config.seed, rec.subject_id)
    model = HdcamModel(model_config, seed=seed)
    cfg = TrainConfig(**{**asdict(train_config), "seed": seed})
    result = train_model(model, train, cfg)
    ev = evaluate(model, test)
    log.info("subject %d: accuracy %.4f (%d train / %d test windows)",
             rec.subject_id, ev.accuracy, len(train), len(test))
    return SubjectRun(rec.subject_id, ev.accuracy, ev.confusion, result.loss_curve, len(train),
                      len(test), pre.clip_rate, pre.scales, model.state_dict(), seed)


def aggregate(runs: Sequence[SubjectRun], num_classes: int) -> Metrics:
    runs = sorted(runs, key=lambda r: r.subject_id)
    accs = np.array([r.accuracy for r in runs])
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for r in runs:
        conf += r.confusion
    return Metrics({r.subject_id: r.accuracy for r in runs}, float(accs.mean()),
                   float(accs.std(ddof=0)), conf, {r.subject_id: r.loss_curve for r in runs})


def _run_job(args):
    loader, model_config, spec, train_config = args
    rec = loader() if callable(loader) else loader
    return run_subject(rec, model_config, spec, train_config)


def run_protocol(model_config: ModelConfig, subjects: Iterable, spec: ProtocolSpec,
                 train_config: TrainConfig, jobs: int = 1) -> tuple[Metrics, list[SubjectRun]]:
    """Train and evaluate one independent model per subject.

    ``subjects`` holds recordings or zero-argument callables that load one.
    """
    if spec.window_ms != model_config.window_ms:
        raise ConfigError(f"protocol window {spec.window_ms} ms != model window {model_config.window_ms} ms")
    jobs_args = [(s, model_config, spec, train_config) for s in subjects]
    if not jobs_args:
        raise ProtocolError("no subjects to run")
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_job, jobs_args))
    else:
        runs = [_run_job(a) for a in jobs_args]
    return aggregate(runs, model_config.num_classes), runs
