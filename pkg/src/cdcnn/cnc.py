"""Cross-domain network co-training.

Three phases, each deterministic given ``TrainConfig.seed``:

1. pre-train the location predictor (LN) and the communication predictor
   (CN) independently on the labeled residents;
2. co-train: each round, residents on which LN is more confident than CN
   teach CN (LN output as target), then residents on which the freshly
   updated CN is more confident than LN teach LN;
3. fine-tune the fused CD-CNN on the labeled residents, starting from the
   co-trained domain parameters and a fresh output subnetwork.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .datagen import Residents
from .model import ModelConfig, Network, init_params, param_norm

PHASE_KEYS = {"init": 0, "pretrain": 1, "cotrain": 2, "finetune": 3, "finetune_init": 4}


class NonFiniteLossError(FloatingPointError):
    def __init__(self, batch_index: int, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}")
        self.batch_index = batch_index
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    l2_lambda: float = 1e-4
    batch_size: int = 32
    pretrain_epochs: int = 10
    finetune_epochs: int = 10
    cotrain_batch: int = 2000
    cotrain_epochs: int = 2
    max_rounds: int = 4
    convergence_tol: float = 0.0
    pseudo_label_mode: str = "continuous"
    loss: str = "squared"
    # keep each co-training batch at the labeled class mix
    prior_matched_selection: bool = True
    selection_rank: str = "gated_source"
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if self.batch_size < 1 or self.cotrain_batch < 0:
            raise ValueError("batch sizes must be positive")
        if min(self.pretrain_epochs, self.finetune_epochs, self.cotrain_epochs, self.max_rounds) < 0:
            raise ValueError("epoch and round counts must be >= 0")
        if self.pseudo_label_mode not in ("continuous", "hard"):
            raise ValueError(f"pseudo_label_mode must be 'continuous' or 'hard', got {self.pseudo_label_mode!r}")
        if self.selection_rank not in RANKINGS:
            raise ValueError(f"selection_rank must be one of {RANKINGS}, got {self.selection_rank!r}")
        if self.loss not in ("squared", "cross_entropy"):
            raise ValueError(f"loss must be 'squared' or 'cross_entropy', got {self.loss!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def phase_rng(seed: int, phase: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(PHASE_KEYS[phase],)))


def phase_seed(seed: int, phase: str) -> int:
    return int(phase_rng(seed, phase).integers(2 ** 31))


class TrainLog:
    """Event records with monotone timestamps, dumped as JSON lines."""

    def __init__(self):
        self._t0 = time.perf_counter()
        self.events: list[dict] = []

    def record(self, event: str, **payload) -> dict:
        entry = {"event": event, "t": time.perf_counter() - self._t0, **payload}
        self.events.append(entry)
        return entry

    def select(self, event: str) -> list[dict]:
        return [e for e in self.events if e["event"] == event]

    def extend(self, other: "TrainLog"):
        offset = (other._t0 - self._t0)
        last = self.events[-1]["t"] if self.events else 0.0
        for e in other.events:
            self.events.append({**e, "t": max(last, e["t"] + offset)})
            last = self.events[-1]["t"]

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.events:
                fh.write(json.dumps(e, sort_keys=True) + "\n")

    @staticmethod
    def read_jsonl(path) -> list[dict]:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]


# ----------------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------------

def _loss_and_grad(y: np.ndarray, target: np.ndarray, loss: str):
    if loss == "squared":
        diff = y - target
        return float(np.mean(diff ** 2)), 2.0 * diff / y.size
    eps = 1e-12
    yc = np.clip(y, eps, 1 - eps)
    value = -np.mean(target * np.log(yc) + (1 - target) * np.log(1 - yc))
    return float(value), (yc - target) / (yc * (1 - yc)) / y.size


def objective(network: Network, params, residents: Residents, targets, l2_lambda: float, loss="squared") -> float:
    """Mean data loss plus ``l2_lambda * ||theta||^2`` over the network's parameters."""
    y = network.predict(params, residents.R, residents.U)
    data, _ = _loss_and_grad(y, np.asarray(targets, dtype=np.float64), loss)
    return data + l2_lambda * param_norm(params, network.param_names) ** 2


def minimize(network: Network, params: dict, residents: Residents, targets, config: TrainConfig,
             epochs: int, rng: np.random.Generator, log: TrainLog | None = None, phase: str = ""):
    """Mini-batch gradient descent on mean loss + ``lambda * ||theta||^2``.

    Only the parameters of ``network`` move; every other entry of ``params``
    is passed through. Updates build new arrays, so the input dict is never
    modified. Returns ``(params, per-epoch mean objective)``.
    """
    n = len(residents)
    if n == 0:
        raise ValueError("minimize needs a nonempty sample set")
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (n,):
        raise ValueError(f"targets must have shape ({n},), got {targets.shape}")
    names = network.param_names
    R = residents.R if network.loc else None
    U = residents.U if network.com else None
    params = dict(params)
    lr, lam = config.learning_rate, config.l2_lambda
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = np.sort(order[start:start + config.batch_size])
            y, cache = network.forward(params, None if R is None else R[idx], None if U is None else U[idx])
            data_loss, dy = _loss_and_grad(y, targets[idx], config.loss)
            reg = lam * sum(float(np.sum(params[k] ** 2)) for k in names) if lam else 0.0
            if not np.isfinite(data_loss + reg):
                raise NonFiniteLossError(b, epoch)
            total += (data_loss + reg) * len(idx)
            if lr == 0:
                continue
            grads = network.backward(params, cache, dy)
            for k in names:
                params[k] = params[k] - lr * (grads[k] + 2.0 * lam * params[k])
        losses.append(total / n)
        if log is not None:
            log.record("epoch", phase=phase, network=network.kind, epoch=epoch, objective=losses[-1])
    return params, losses


# ----------------------------------------------------------------------------
# phases
# ----------------------------------------------------------------------------

def pretrain(labeled: Residents, labels, model_config: ModelConfig, config: TrainConfig,
             balanced: bool = True, log: TrainLog | None = None):
    """Train LN and CN separately on the labeled residents.

    Returns every parameter of CD-CNN plus the two heads; only the ``loc``,
    ``com``, ``ln`` and ``cn`` entries have been trained.
    """
    if len(labeled) == 0:
        raise ValueError("pretraining needs labeled residents")
    log = log if log is not None else TrainLog()
    start = log.record("phase_start", phase="pretrain")["t"]
    params = init_params(model_config, phase_seed(config.seed, "init"), balanced)
    rng = phase_rng(config.seed, "pretrain")
    labels = np.asarray(labels, dtype=np.float64)
    for kind in ("ln", "cn"):
        params, _ = minimize(Network(model_config, kind, balanced), params, labeled, labels, config,
                             config.pretrain_epochs, rng, log, "pretrain")
    log.record("phase_end", phase="pretrain", wall_clock_s=log.events[-1]["t"] - start)
    return params, log


class UnlabeledPool:
    """Residents available for co-training; each can be selected once."""

    def __init__(self, residents: Residents):
        self.residents = residents
        self.selected = np.zeros(len(residents), dtype=bool)

    def __len__(self):
        return len(self.residents)

    def remaining(self) -> np.ndarray:
        return np.flatnonzero(~self.selected)

    def take(self, idx: np.ndarray):
        idx = np.asarray(idx, dtype=np.int64)
        if self.selected[idx].any():
            raise ValueError("resident selected twice")
        self.selected[idx] = True


@dataclass
class Selection:
    indices: np.ndarray        # pool indices
    pseudo_labels: np.ndarray
    margins: np.ndarray
    confidences: np.ndarray    # confidence of the source model

    def __len__(self):
        return len(self.indices)


def confidence(y) -> np.ndarray:
    return 2.0 * np.abs(np.asarray(y, dtype=np.float64) - 0.5)


RANKINGS = ("margin", "gated_source", "source")


def select_confident(source_out, other_out, pool: UnlabeledPool, B: int, mode: str = "continuous",
                     candidates: np.ndarray | None = None, class_prior: float | None = None,
                     rank_by: str = "margin") -> Selection:
    """Pick up to ``B`` residents where the source model is more confident
    than the other one, ranked by the confidence margin.

    ``source_out`` and ``other_out`` are model outputs aligned with
    ``candidates`` (default: ``pool.remaining()``). Chosen residents are
    removed from the pool. Ties are broken by pool index.

    With ``class_prior`` set, at most ``round(B * class_prior)`` residents
    with a positive pseudo-label and ``B`` minus that many negatives are
    kept, each side still ranked by margin.
    """
    if B < 0:
        raise ValueError("B must be >= 0")
    candidates = pool.remaining() if candidates is None else np.asarray(candidates)
    source_out = np.asarray(source_out, dtype=np.float64)
    margin = confidence(source_out) - confidence(other_out)
    if rank_by not in RANKINGS:
        raise ValueError(f"rank_by must be one of {RANKINGS}, got {rank_by!r}")
    key = margin if rank_by == "margin" else confidence(source_out)
    order = np.lexsort((candidates, -key))
    if rank_by != "source":
        order = order[margin[order] > 0]
    if class_prior is None:
        order = order[:B]
    else:
        n_pos = int(round(B * class_prior))
        positive = source_out[order] >= 0.5
        keep = np.zeros(order.size, dtype=bool)
        keep[np.flatnonzero(positive)[:n_pos]] = True
        keep[np.flatnonzero(~positive)[:B - n_pos]] = True
        order = order[keep]
    labels = source_out[order] if mode == "continuous" else np.rint(source_out[order])
    sel = Selection(candidates[order], labels, margin[order], confidence(source_out[order]))
    pool.take(sel.indices)
    return sel


def _diff_norm(a: dict, b: dict, names) -> float:
    return float(np.sqrt(sum(np.sum((a[k] - b[k]) ** 2) for k in names)))


def cotrain(params: dict, pool: UnlabeledPool, model_config: ModelConfig, config: TrainConfig,
            balanced: bool = True, log: TrainLog | None = None, class_prior: float = 0.5):
    """Alternate CN and LN updates on confidently pseudo-labeled residents.

    Stops when the pool is exhausted, after ``max_rounds`` rounds, or when
    both parameter changes of a round fall below ``convergence_tol``.
    ``class_prior`` (the labeled positive share) is used when
    ``config.prior_matched_selection`` is on.
    """
    prior = class_prior if config.prior_matched_selection else None
    log = log if log is not None else TrainLog()
    start = log.record("phase_start", phase="cotrain")["t"]
    ln = Network(model_config, "ln", balanced)
    cn = Network(model_config, "cn", balanced)
    rng = phase_rng(config.seed, "cotrain")
    R, U = pool.residents.R, pool.residents.U
    rounds = 0
    for t in range(1, config.max_rounds + 1):
        rem = pool.remaining()
        if rem.size == 0:
            break
        rounds = t
        y_ln = ln.predict(params, R=R, index=rem)
        y_cn = cn.predict(params, U=U, index=rem)
        # (a) LN(t-1) teaches CN
        sel = select_confident(y_ln, y_cn, pool, config.cotrain_batch, config.pseudo_label_mode, rem, prior, config.selection_rank)
        before = params
        if len(sel):
            params, _ = minimize(cn, params, Residents(R[sel.indices], U[sel.indices]), sel.pseudo_labels,
                                 config, config.cotrain_epochs, rng, log, "cotrain")
        d_cn = _diff_norm(before, params, cn.param_names)
        log.record("cotrain_update", round=t, direction="ln->cn", updated="cn", teacher_version=t - 1,
                   student_version=t, selected=len(sel), mean_confidence=_mean(sel.confidences), change=d_cn)
        # (b) CN(t) teaches LN
        rem2 = pool.remaining()
        keep = np.searchsorted(rem, rem2)
        y_cn2 = cn.predict(params, U=U, index=rem2)
        sel2 = select_confident(y_cn2, y_ln[keep], pool, config.cotrain_batch, config.pseudo_label_mode, rem2, prior, config.selection_rank)
        before = params
        if len(sel2):
            params, _ = minimize(ln, params, Residents(R[sel2.indices], U[sel2.indices]), sel2.pseudo_labels,
                                 config, config.cotrain_epochs, rng, log, "cotrain")
        d_ln = _diff_norm(before, params, ln.param_names)
        log.record("cotrain_update", round=t, direction="cn->ln", updated="ln", teacher_version=t,
                   student_version=t, selected=len(sel2), mean_confidence=_mean(sel2.confidences), change=d_ln)
        if (len(sel) + len(sel2) == 0) or (d_cn < config.convergence_tol and d_ln < config.convergence_tol):
            break
    log.record("phase_end", phase="cotrain", rounds=rounds, selected=int(pool.selected.sum()),
               remaining=int((~pool.selected).sum()), wall_clock_s=log.events[-1]["t"] - start)
    return params, log


def _mean(values) -> float:
    return float(np.mean(values)) if len(values) else 0.0


def finetune(params: dict, labeled: Residents, labels, model_config: ModelConfig, config: TrainConfig,
             balanced: bool = True, log: TrainLog | None = None):
    """Train the fused network on labels. Domain parameters start from
    ``params``; the output subnetwork is freshly initialised."""
    if len(labeled) == 0:
        raise ValueError("fine-tuning needs labeled residents")
    log = log if log is not None else TrainLog()
    start = log.record("phase_start", phase="finetune")["t"]
    net = Network(model_config, "cdcnn", balanced)
    fresh = net.init_params(phase_seed(config.seed, "finetune_init"))
    params = dict(params)
    for name in net.param_names:
        if name.startswith("out."):
            params[name] = fresh[name]
    params, _ = minimize(net, params, labeled, np.asarray(labels, dtype=np.float64), config,
                         config.finetune_epochs, phase_rng(config.seed, "finetune"), log, "finetune")
    log.record("phase_end", phase="finetune", wall_clock_s=log.events[-1]["t"] - start)
    return params, log


def train_full(labeled: Residents, labels, pool: Residents | None, model_config: ModelConfig,
               config: TrainConfig, balanced: bool = True):
    """Pre-train, co-train, fine-tune. Returns ``(params, TrainLog)``."""
    log = TrainLog()
    params, _ = pretrain(labeled, labels, model_config, config, balanced, log)
    if pool is not None and len(pool) and config.max_rounds > 0:
        prior = float(np.mean(np.asarray(labels) == 1))
        params, _ = cotrain(params, UnlabeledPool(pool), model_config, config, balanced, log, prior)
    params, _ = finetune(params, labeled, labels, model_config, config, balanced, log)
    return params, log
