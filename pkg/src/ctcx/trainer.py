"""Momentum-SGD training loop, dataset handling, and the 4-scenario matrix.

Training is deterministic: utterance order, dropout masks, and weight init
all derive from the training seed, so identical inputs give byte-identical
metrics logs. Batches are processed one utterance at a time; gradients are
summed in visiting order and divided by the actual batch length.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .ctc import (
    beam_search_decode,
    ctc_forward_backward,
    edit_distance,
    greedy_decode,
)
from .frontend import (
    FeatureConfig,
    FeatureMatrix,
    ManifestRow,
    feature_normalize,
    load_wav,
    mfcc,
    read_feature_cache,
    resample,
)
from .network import (
    ModelConfig,
    ModelParams,
    backward,
    forward,
    init_params,
    log_softmax,
    named_tensors,
    validate_params,
    zeros_like_params,
)
from .text_labels import Alphabet, encode, normalize_transcript
from .transfer import Checkpoint, transfer_weights

logger = logging.getLogger(__name__)

METRICS_HEADER = "epoch,train_cost,train_ler,val_cost,val_ler"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0005
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 500
    dropout_keep: float = 0.5
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    grad_clip_norm: float | None = 5.0  # None disables clipping
    seed: int = 0
    eval_decoder: str = "greedy"
    beam_width: int = 8

    def __post_init__(self) -> None:
        if self.learning_rate < 0 or not 0.0 <= self.momentum < 1.0:
            raise ValueError("learning_rate must be >= 0 and momentum in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError(f"dropout_keep {self.dropout_keep} outside (0, 1]")
        if len(self.split) != 3 or any(p < 0 for p in self.split):
            raise ValueError(f"bad split {self.split}")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split {self.split} does not sum to 1")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError(f"bad grad_clip_norm {self.grad_clip_norm}")
        if self.eval_decoder not in ("greedy", "beam"):
            raise ValueError(f"unknown eval_decoder {self.eval_decoder!r}")
        if self.beam_width < 1:
            raise ValueError(f"bad beam_width {self.beam_width}")


@dataclass
class MetricsRow:
    epoch: int
    train_cost: float
    train_ler: float
    val_cost: float
    val_ler: float

    def to_csv(self) -> str:
        # repr keeps the shortest exact float form, so logs are byte-stable
        return ",".join(
            [str(self.epoch)]
            + [repr(float(v)) for v in (self.train_cost, self.train_ler, self.val_cost, self.val_ler)]
        )

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_cost": self.train_cost,
            "train_ler": self.train_ler,
            "val_cost": self.val_cost,
            "val_ler": self.val_ler,
        }


@dataclass
class OptimizerState:
    velocity: ModelParams


@dataclass
class Utterance:
    utt_id: str
    text: str
    labels: tuple[int, ...]
    features: np.ndarray  # (T, F) float64


def min_frames_rule(num_labels: int) -> int:
    """Frames required to keep an utterance: 2L+1 (extended label length)."""
    return 2 * num_labels + 1


def load_dataset(
    rows,
    alphabet: Alphabet,
    feature_config: FeatureConfig | None = None,
    normalize: bool = True,
) -> tuple[list[Utterance], list[tuple[ManifestRow, str]]]:
    """Build utterances from manifest rows; returns (kept, dropped-with-reason).

    Feature cache files (.mfcc) are read directly; WAV files go through the
    full frontend (resampled when needed). Rows whose label sequence cannot
    fit the frame count (2L+1 > T) are dropped here, never mid-epoch.
    """
    cfg = feature_config or FeatureConfig()
    kept: list[Utterance] = []
    dropped: list[tuple[ManifestRow, str]] = []
    for row in rows:
        path = Path(row.audio)
        try:
            if path.suffix == ".mfcc":
                values = read_feature_cache(path)
            else:
                clip = load_wav(path)
                if clip.sample_rate_hz != cfg.sample_rate_hz:
                    clip = resample(clip, cfg.sample_rate_hz)
                values = mfcc(clip, cfg).values
        except (OSError, ValueError) as e:
            dropped.append((row, f"unreadable audio: {e}"))
            continue

        text = normalize_transcript(row.text, alphabet)
        if not text:
            dropped.append((row, "empty transcript after normalization"))
            continue
        labels = encode(text, alphabet)
        if min_frames_rule(len(labels)) > values.shape[0]:
            dropped.append(
                (row, f"label length {len(labels)} needs {min_frames_rule(len(labels))} frames, "
                      f"got {values.shape[0]}")
            )
            continue

        values = np.asarray(values, dtype=np.float64)
        if normalize:
            values = feature_normalize(FeatureMatrix(values, cfg)).values
        kept.append(Utterance(path.stem, text, labels, values))

    for row, reason in dropped:
        logger.warning("dropped %s: %s", row.audio, reason)
    return kept, dropped


def split_dataset(items, split, seed: int):
    """Deterministic shuffle then floor-proportion partition, remainder to train."""
    items = list(items)
    n = len(items)
    if n < 10:
        raise ValueError(f"need at least 10 items to split, got {n}")
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9:
        raise ValueError(f"bad split {split}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(n * split[1])
    n_test = int(n * split[2])
    n_train = n - n_val - n_test
    shuffled = [items[i] for i in order]
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_val],
        shuffled[n_train + n_val :],
    )


def global_grad_norm(grads: ModelParams) -> float:
    total = 0.0
    for _, g in named_tensors(grads):
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def clip_gradients(grads: ModelParams, max_norm: float) -> float:
    """Scale grads in place to the given global norm; returns pre-clip norm."""
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for _, g in named_tensors(grads):
            g *= scale
    return norm


def _add_params(dst: ModelParams, src: ModelParams) -> None:
    for (_, a), (_, b) in zip(named_tensors(dst), named_tensors(src)):
        a += b


def _scale_params(dst: ModelParams, scale: float) -> None:
    for _, a in named_tensors(dst):
        a *= scale


def momentum_step(
    params: ModelParams, grads: ModelParams, state: OptimizerState, cfg: TrainConfig
) -> bool:
    """Classical momentum update in place: v <- mu v + g, theta <- theta - lr v.

    Gradients are globally norm-clipped first. A non-finite gradient skips
    the whole step (logged) so one bad utterance cannot poison the weights.
    """
    for name, g in named_tensors(grads):
        if not np.all(np.isfinite(g)):
            logger.warning("non-finite gradient in %s; step skipped", name)
            return False
    if cfg.grad_clip_norm is not None:
        clip_gradients(grads, cfg.grad_clip_norm)
    for (_, theta), (_, g), (_, v) in zip(
        named_tensors(params), named_tensors(grads), named_tensors(state.velocity)
    ):
        v *= cfg.momentum
        v += g
        theta -= cfg.learning_rate * v
    return True


def _dropout_seed(cfg: TrainConfig, epoch: int, position: int) -> int:
    return int(np.random.SeedSequence((cfg.seed, epoch, 1, position)).generate_state(1)[0])


def _epoch_order(cfg: TrainConfig, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, epoch, 0)))
    return rng.permutation(n)


def train_epoch(
    params: ModelParams,
    model_cfg: ModelConfig,
    data: list[Utterance],
    cfg: TrainConfig,
    state: OptimizerState,
    epoch: int,
) -> tuple[float, float]:
    """One pass over the data; returns (mean utterance cost, train LER).

    The LER is measured on the training-mode outputs (dropout active), so
    it is a progress signal, not a clean evaluation.
    """
    if not data:
        raise ValueError("empty training set")
    order = _epoch_order(cfg, epoch, len(data))
    total_cost = 0.0
    total_edit = 0
    total_ref = 0

    for start in range(0, len(order), cfg.batch_size):
        batch = order[start : start + cfg.batch_size]
        batch_grads = zeros_like_params(params)
        for offset, idx in enumerate(batch):
            utt = data[idx]
            logits, cache = forward(
                params,
                model_cfg,
                utt.features,
                train_mode=True,
                dropout_seed=_dropout_seed(cfg, epoch, start + offset),
            )
            log_probs = log_softmax(logits)
            res = ctc_forward_backward(log_probs, utt.labels)
            if not res.feasible:
                raise RuntimeError(
                    f"utterance {utt.utt_id} became infeasible mid-epoch; "
                    f"the load-time filter should have dropped it"
                )
            total_cost += res.neg_log_likelihood
            total_edit += edit_distance(utt.labels, greedy_decode(log_probs))
            total_ref += len(utt.labels)
            _add_params(batch_grads, backward(params, model_cfg, cache, res.dlogits))
        _scale_params(batch_grads, 1.0 / len(batch))
        momentum_step(params, batch_grads, state, cfg)

    return total_cost / len(data), total_edit / total_ref


def evaluate(
    params: ModelParams,
    model_cfg: ModelConfig,
    data: list[Utterance],
    decoder: str = "greedy",
    beam_width: int = 8,
) -> tuple[float, float]:
    """Eval-mode mean cost and corpus LER; deterministic."""
    if not data:
        raise ValueError("empty evaluation set")
    if decoder not in ("greedy", "beam"):
        raise ValueError(f"unknown decoder {decoder!r}")
    total_cost = 0.0
    total_edit = 0
    total_ref = 0
    for utt in data:
        logits, _ = forward(params, model_cfg, utt.features, train_mode=False)
        log_probs = log_softmax(logits)
        total_cost += ctc_forward_backward(log_probs, utt.labels).neg_log_likelihood
        if decoder == "greedy":
            decoded = greedy_decode(log_probs)
        else:
            decoded = beam_search_decode(log_probs, beam_width)
        total_edit += edit_distance(utt.labels, decoded)
        total_ref += len(utt.labels)
    return total_cost / len(data), total_edit / total_ref


def train(
    train_set: list[Utterance],
    val_set: list[Utterance],
    alphabet: Alphabet,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    params: ModelParams | None = None,
    metrics_path=None,
) -> tuple[ModelParams, list[MetricsRow]]:
    """Full training run; returns the trained params and per-epoch metrics.

    ``params`` may carry transferred weights; otherwise a fresh model is
    initialized from the training seed. Metrics are written per epoch when
    ``metrics_path`` is given. An empty val set records NaN val columns.
    """
    if not train_set:
        raise ValueError("empty training set")
    if alphabet.num_classes != model_cfg.num_classes:
        raise ValueError(
            f"alphabet {alphabet.name!r} needs {alphabet.num_classes} classes, "
            f"model config has {model_cfg.num_classes}"
        )
    effective_cfg = replace(model_cfg, dropout_keep=cfg.dropout_keep, seed=cfg.seed)
    if params is None:
        params = init_params(effective_cfg)
    else:
        validate_params(params, effective_cfg)

    state = OptimizerState(zeros_like_params(params))
    rows: list[MetricsRow] = []
    out = open(metrics_path, "w", encoding="utf-8") if metrics_path is not None else None
    try:
        if out:
            out.write(METRICS_HEADER + "\n")
        log_every = max(1, cfg.epochs // 10)
        for epoch in range(1, cfg.epochs + 1):
            train_cost, train_ler = train_epoch(
                params, effective_cfg, train_set, cfg, state, epoch
            )
            if val_set:
                val_cost, val_ler = evaluate(
                    params, effective_cfg, val_set, cfg.eval_decoder, cfg.beam_width
                )
            else:
                val_cost, val_ler = float("nan"), float("nan")
            row = MetricsRow(epoch, train_cost, train_ler, val_cost, val_ler)
            rows.append(row)
            if out:
                out.write(row.to_csv() + "\n")
                out.flush()
            if epoch % log_every == 0 or epoch == cfg.epochs:
                logger.info(
                    "epoch %d/%d train_cost=%.4f train_ler=%.4f val_cost=%.4f val_ler=%.4f",
                    epoch, cfg.epochs, train_cost, train_ler, val_cost, val_ler,
                )
    finally:
        if out:
            out.close()
    return params, rows


ARCH_NAMES = {"lstm": "LSTM", "bilstm": "BiLSTM"}


@dataclass
class ScenarioResult:
    name: str
    arch: str
    init: str
    rows: list[MetricsRow]

    @property
    def final(self) -> MetricsRow:
        return self.rows[-1]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "arch": self.arch,
            "init": self.init,
            "epochs": self.final.epoch,
            "final": self.final.to_dict(),
        }


@dataclass
class ExperimentResult:
    scenarios: list[ScenarioResult]
    improvements_percent: dict[str, dict[str, float]]
    warnings: list[str]

    def to_dict(self) -> dict:
        return {
            "scenarios": [s.to_dict() for s in self.scenarios],
            "improvements_percent": self.improvements_percent,
            "warnings": self.warnings,
        }


def _improvement_percent(baseline: float, transfer: float) -> float:
    if baseline == 0.0:
        return float("nan")
    return 100.0 * (baseline - transfer) / baseline


def run_experiment_matrix(
    utterances: list[Utterance],
    alphabet: Alphabet,
    cfg: TrainConfig,
    hidden: int = 128,
    feature_dim: int = 13,
    source_checkpoints: dict[str, Checkpoint] | None = None,
    metrics_dir=None,
) -> ExperimentResult:
    """Train {LSTM, BiLSTM} x {random, transfer} on one shared split.

    ``source_checkpoints`` maps arch name to the source model for the
    transfer rows; a checkpoint only fits the arch it was trained as, so
    the two rows need separate sources. Missing sources downgrade to a
    warning and the baseline rows alone.
    """
    source_checkpoints = source_checkpoints or {}
    train_set, val_set, _ = split_dataset(utterances, cfg.split, cfg.seed)
    scenarios: list[ScenarioResult] = []
    warnings: list[str] = []
    finals: dict[tuple[str, str], MetricsRow] = {}

    for arch in ("lstm", "bilstm"):
        model_cfg = ModelConfig(
            feature_dim=feature_dim,
            num_classes=alphabet.num_classes,
            hidden=hidden,
            num_layers=2,
            bidirectional=(arch == "bilstm"),
        )
        for init in ("random", "transfer"):
            if init == "transfer":
                source = source_checkpoints.get(arch)
                if source is None:
                    warnings.append(
                        f"no source checkpoint for {ARCH_NAMES[arch]}; transfer row skipped"
                    )
                    continue
                params, _ = transfer_weights(source, model_cfg, alphabet, cfg.seed)
                name = f"{ARCH_NAMES[arch]} with {source.alphabet_name} model"
            else:
                params = None
                name = ARCH_NAMES[arch]
            metrics_path = (
                Path(metrics_dir) / f"{arch}-{init}.csv" if metrics_dir is not None else None
            )
            logger.info("training scenario: %s", name)
            _, rows = train(
                train_set, val_set, alphabet, model_cfg, cfg, params, metrics_path
            )
            scenarios.append(ScenarioResult(name, arch, init, rows))
            finals[(arch, init)] = rows[-1]

    improvements: dict[str, dict[str, float]] = {}
    for arch in ("lstm", "bilstm"):
        base = finals.get((arch, "random"))
        tran = finals.get((arch, "transfer"))
        if base is None or tran is None:
            continue
        improvements[arch] = {
            "train_cost": _improvement_percent(base.train_cost, tran.train_cost),
            "train_ler": _improvement_percent(base.train_ler, tran.train_ler),
            "val_cost": _improvement_percent(base.val_cost, tran.val_cost),
            "val_ler": _improvement_percent(base.val_ler, tran.val_ler),
        }
    return ExperimentResult(scenarios, improvements, warnings)
