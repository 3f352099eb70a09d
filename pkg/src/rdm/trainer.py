"""Two-phase training loop: ERM pre-training, then the configured objective.

Randomness is keyed on ``(seed, step)`` rather than drawn from a running
stream, so a run resumed from a saved state continues exactly where the
uninterrupted run would have been.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tape, no_grad
from .data import DomainDataset, sample_domain_batches
from .kernel import KernelSpec
from .model import ModelParams, forward_risks, init_xavier, predict
from .objectives import ObjectiveConfig, compute_objective

log = logging.getLogger(__name__)

SELECTION_MODES = ("train-domain-validation", "test-domain-validation")
CSV_HEADER = ("step", "domain_id", "split", "accuracy", "mean_risk", "penalty", "worst_domain", "lr")
DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    """Loss became non-finite or exceeded the guard; carries the last good state."""

    def __init__(self, message, best: ModelParams | None = None, metrics=None):
        super().__init__(message)
        self.best = best
        self.metrics = metrics


@dataclass
class TrainConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    steps: int = 600
    pre_train_steps: int = 0
    lr: float = 1e-4
    lr_after_pretrain: float | None = None
    batch_size: int = 512
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    cosine: bool = True
    reset_optimizer_after_pretrain: bool = True
    model_selection: str = "test-domain-validation"
    checkpoint: str = "best"
    seed: int = 0
    eval_interval: int = 15
    hidden: int = 390
    dropout: float = 0.2

    def __post_init__(self):
        if isinstance(self.objective, dict):
            obj = dict(self.objective)
            if "kernel" in obj and isinstance(obj["kernel"], dict):
                obj["kernel"] = KernelSpec(**obj["kernel"])
            self.objective = ObjectiveConfig(**obj)
        self.adam_betas = tuple(self.adam_betas)
        if self.steps < 0 or not 0 <= self.pre_train_steps <= self.steps:
            raise ValueError("need 0 <= pre_train_steps <= steps")
        if not self.lr > 0 or (self.lr_after_pretrain is not None and not self.lr_after_pretrain > 0):
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.eval_interval < 1 or self.hidden < 1:
            raise ValueError("batch_size, eval_interval and hidden must be >= 1")
        if self.checkpoint not in ("best", "last"):
            raise ValueError("checkpoint must be 'best' or 'last'")
        if self.model_selection not in SELECTION_MODES:
            raise ValueError(f"model_selection must be one of {SELECTION_MODES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["objective"]["kernel"]["bandwidths"] = list(self.objective.kernel.bandwidths)
        return d


@dataclass
class Benchmark:
    """Training domains (with optional held-out splits) and test domains."""

    train: list[DomainDataset]
    test: list[DomainDataset] = field(default_factory=list)
    val: list[DomainDataset] = field(default_factory=list)
    test_val: list[DomainDataset] = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.train[0].dim

    @property
    def num_classes(self) -> int:
        return self.train[0].num_classes


@dataclass
class EvalRecord:
    step: int
    lr: float
    penalty: float
    worst_domain: int
    rows: list[tuple[int, str, float, float]]  # (domain_id, split, accuracy, mean_risk)
    selection_score: float
    wall: float = 0.0

    def accuracy(self, split: str) -> float:
        accs = [r[2] for r in self.rows if r[1] == split]
        return float(np.mean(accs)) if accs else float("nan")


@dataclass
class StepRecord:
    step: int
    loss: float
    penalty: float
    worst_domain: int
    phase: int


@dataclass
class TrainMetrics:
    config: dict
    evals: list[EvalRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    best_step: int = -1
    best_score: float = -math.inf

    @property
    def objective(self) -> str:
        return self.config["objective"]["kind"]

    def best(self) -> EvalRecord | None:
        for rec in self.evals:
            if rec.step == self.best_step:
                return rec
        return None

    @property
    def test_accuracy(self) -> float:
        """Test-domain accuracy of the selected checkpoint."""
        rec = self.best()
        return float("nan") if rec is None else rec.accuracy("test")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for rec in self.evals:
            for domain_id, split, acc, risk in rec.rows:
                w.writerow([rec.step, domain_id, split, repr(acc), repr(risk),
                            repr(rec.penalty), rec.worst_domain, repr(rec.lr)])
        return buf.getvalue()

    def summary(self) -> dict:
        best = self.best()
        final = self.evals[-1] if self.evals else None
        return {
            "config": self.config,
            "best_step": self.best_step,
            "selection_score": self.best_score,
            "selected": None if best is None else [list(r) for r in best.rows],
            "selected_test_accuracy": self.test_accuracy,
            "final_step": None if final is None else final.step,
            "final": None if final is None else [list(r) for r in final.rows],
            "penalty_trace": [[s.step, s.penalty, s.worst_domain] for s in self.steps],
        }

    def state_dict(self) -> dict:
        return {
            "config": self.config,
            "evals": [asdict(e) for e in self.evals],
            "steps": [asdict(s) for s in self.steps],
            "best_step": self.best_step,
            "best_score": self.best_score,
        }

    @classmethod
    def from_state(cls, d: dict) -> "TrainMetrics":
        evals = [EvalRecord(**{**e, "rows": [tuple(r) for r in e["rows"]]}) for e in d["evals"]]
        return cls(d["config"], evals, [StepRecord(**s) for s in d["steps"]],
                   d["best_step"], d["best_score"])


# --- optimiser ------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0,
              betas=(0.9, 0.999), eps: float = 1e-8, names: Sequence[str] | None = None):
    """In-place Adam update with bias correction and decoupled weight decay."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def cosine_lr(step: int, total: int, base: float) -> float:
    if total <= 0:
        return base
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


# --- evaluation -----------------------------------------------------------


def evaluate(params: ModelParams, dataset: DomainDataset) -> tuple[float, float]:
    """Eval-mode (accuracy, mean cross-entropy) over a whole dataset."""
    with no_grad():
        logits = predict(params, dataset.inputs)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    risk = float(-logp[np.arange(len(dataset)), dataset.labels].mean())
    acc = float((logits.argmax(axis=1) == dataset.labels).mean())
    return acc, risk


def _param_names(params: ModelParams) -> list[str]:
    names = []
    for i in range(len(params.weights)):
        names += [f"W{i}", f"b{i}"]
    return names


def _evaluate_all(params: ModelParams, bench: Benchmark):
    rows = []
    for split, sets in (("train", bench.train), ("val", bench.val),
                        ("test", bench.test), ("test_val", bench.test_val)):
        for ds in sets:
            acc, risk = evaluate(params, ds)
            rows.append((ds.domain_id, split, acc, risk))
    return rows


def _selection_score(rows, mode: str) -> float:
    def mean_acc(split):
        accs = [r[2] for r in rows if r[1] == split]
        return float(np.mean(accs)) if accs else None

    if mode == "test-domain-validation":
        order = ("test_val", "test")
    else:
        order = ("val", "train")
    for split in order:
        score = mean_acc(split)
        if score is not None:
            return score
    return float("nan")


# --- training -------------------------------------------------------------


@dataclass
class TrainState:
    """Everything needed to resume a run after ``step`` completed updates."""

    step: int
    params: ModelParams
    adam: AdamState
    best: ModelParams
    metrics: TrainMetrics
    dro_q: np.ndarray | None = None

    def save(self, path) -> None:
        arrays = {
            "step": np.array(self.step),
            "params": self.params.flat(),
            "best": self.best.flat(),
            "adam_t": np.array(self.adam.t),
            "adam_m": np.concatenate([m.ravel() for m in self.adam.m]),
            "adam_v": np.concatenate([v.ravel() for v in self.adam.v]),
            "dims": np.array(self.params.dims),
            "dropout": np.array(self.params.dropout),
            "metrics": np.array(json.dumps(self.metrics.state_dict())),
        }
        if self.dro_q is not None:
            arrays["dro_q"] = self.dro_q
        with open(path, "wb") as f:
            np.savez(f, **arrays)

    @classmethod
    def load(cls, path) -> "TrainState":
        with np.load(path) as z:
            dims = tuple(int(d) for d in z["dims"])
            dropout = float(z["dropout"])
            params = init_xavier(dims, 0, dropout)
            params.load_flat(z["params"])
            best = init_xavier(dims, 0, dropout)
            best.load_flat(z["best"])
            adam = AdamState.zeros_like(params.parameters())
            adam.t = int(z["adam_t"])
            _unflatten(z["adam_m"], adam.m)
            _unflatten(z["adam_v"], adam.v)
            metrics = TrainMetrics.from_state(json.loads(str(z["metrics"])))
            q = z["dro_q"] if "dro_q" in z.files else None
            return cls(int(z["step"]), params, adam, best, metrics, q)


def _unflatten(blob, arrays) -> None:
    off = 0
    for a in arrays:
        a[...] = blob[off: off + a.size].reshape(a.shape)
        off += a.size


def _scheduled_lr(cfg: TrainConfig, t: int, base: float) -> float:
    """Cosine annealing restarted at the phase switch, so each phase decays
    its own base rate over its own length."""
    if not cfg.cosine:
        return base
    if t < cfg.pre_train_steps:
        return cosine_lr(t, cfg.pre_train_steps, base)
    return cosine_lr(t - cfg.pre_train_steps, cfg.steps - cfg.pre_train_steps, base)


def _step_seed(seed: int, step: int) -> int:
    return (seed << 32) | step


class Trainer:
    """Stateful driver behind :func:`train`.

    ``run(until=k)`` stops after ``k`` completed updates; :meth:`fork` then
    continues the same state under a different config.  Because batches and
    dropout masks depend only on ``(seed, step)``, an ERM run forked at the
    phase switch reproduces a penalised run's first phase bit for bit.
    """

    def __init__(self, config: TrainConfig, bench: Benchmark, state: TrainState | None = None,
                 state_path=None):
        if not bench.train:
            raise ValueError("no training domains")
        if (config.objective.kind != "erm" and config.pre_train_steps < config.steps
                and len(bench.train) < 2):
            raise ValueError(f"objective {config.objective.kind} needs at least 2 training domains")
        self.config, self.bench, self.state_path = config, bench, state_path
        if state is None:
            dims = (bench.input_dim, config.hidden, config.hidden, bench.num_classes)
            params = init_xavier(dims, config.seed, config.dropout)
            state = TrainState(0, params, AdamState.zeros_like(params.parameters()),
                               params.copy(), TrainMetrics(config.to_dict()))
        self.state = state
        self._obj_state = {} if state.dro_q is None else {"q": state.dro_q.copy()}
        self._t0 = time.perf_counter()

    def fork(self, config: TrainConfig, state_path=None) -> "Trainer":
        s = self.state
        metrics = TrainMetrics.from_state(json.loads(json.dumps(s.metrics.state_dict())))
        metrics.config = config.to_dict()
        adam = AdamState([m.copy() for m in s.adam.m], [v.copy() for v in s.adam.v], s.adam.t)
        state = TrainState(s.step, s.params.copy(), adam, s.best.copy(), metrics,
                           None if s.dro_q is None else s.dro_q.copy())
        return Trainer(config, self.bench, state, state_path)

    def _record_eval(self, step, lr, penalty, worst):
        st, cfg = self.state, self.config
        rows = _evaluate_all(st.params, self.bench)
        score = _selection_score(rows, cfg.model_selection)
        st.metrics.evals.append(EvalRecord(step, lr, penalty, worst, rows, score,
                                           time.perf_counter() - self._t0))
        better = score > st.metrics.best_score
        if cfg.checkpoint == "last" or better:
            st.metrics.best_score, st.metrics.best_step = score, step
            st.best = st.params.copy()
        log.debug("step %d selection %.4f penalty %.3g", step, score, penalty)

    def run(self, until: int | None = None) -> TrainState:
        cfg, st = self.config, self.state
        until = cfg.steps if until is None else min(until, cfg.steps)
        params, metrics = st.params, st.metrics
        plist, names = params.parameters(), _param_names(params)
        erm_cfg = ObjectiveConfig("erm", kernel=cfg.objective.kernel)
        if st.step == 0 and not metrics.evals:
            self._record_eval(0, cfg.lr, float("nan"), -1)

        for t in range(st.step, until):
            phase = 1 if t < cfg.pre_train_steps else 2
            base = cfg.lr if phase == 1 or cfg.lr_after_pretrain is None else cfg.lr_after_pretrain
            lr = _scheduled_lr(cfg, t, base)
            if phase == 2 and t == cfg.pre_train_steps and t > 0 and cfg.reset_optimizer_after_pretrain:
                st.adam = AdamState.zeros_like(plist)

            rng = np.random.default_rng([cfg.seed, t, 0xBA7C])
            batches = sample_domain_batches(self.bench.train, cfg.batch_size, rng)
            with Tape() as tape:
                risks = [forward_risks(params, b, train=True, step_seed=_step_seed(cfg.seed, t))
                         for b in batches]
                result = compute_objective(risks, erm_cfg if phase == 1 else cfg.objective,
                                           self._obj_state)
            loss = result.loss.item()
            if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
                raise DivergenceError(f"loss {loss} at step {t} (last good checkpoint: step "
                                      f"{metrics.best_step})", st.best, metrics)
            worst = result.worst
            if worst is None:
                worst = int(np.argmax([r.risks.data.mean() for r in risks]))
            metrics.steps.append(StepRecord(t, loss, result.penalty, worst, phase))

            grads = tape.gradients(result.loss, plist)
            try:
                adam_step(plist, grads, st.adam, lr, cfg.weight_decay, cfg.adam_betas, cfg.adam_eps, names)
            except FloatingPointError as err:
                raise DivergenceError(f"{err} at step {t} (last good checkpoint: step "
                                      f"{metrics.best_step})", st.best, metrics) from None

            done = t + 1
            st.step = done
            if "q" in self._obj_state:
                st.dro_q = self._obj_state["q"].copy()
            if done % cfg.eval_interval == 0 or done in (cfg.steps, cfg.pre_train_steps):
                self._record_eval(done, lr, result.penalty, worst)
                if self.state_path is not None:
                    st.save(self.state_path)
        return st

    def result(self) -> tuple[ModelParams, TrainMetrics]:
        return self.state.best, self.state.metrics


def train(config: TrainConfig, bench: Benchmark, resume: TrainState | None = None,
          state_path=None) -> tuple[ModelParams, TrainMetrics]:
    """Run the full protocol; returns the selected checkpoint and metric log.

    Phase 1 (``pre_train_steps`` updates) optimises plain ERM at ``lr``;
    phase 2 switches to ``config.objective`` at ``lr_after_pretrain``.
    ``state_path``, when given, receives a resumable :class:`TrainState`
    after every evaluation.
    """
    trainer = Trainer(config, bench, resume, state_path)
    trainer.run()
    return trainer.result()
