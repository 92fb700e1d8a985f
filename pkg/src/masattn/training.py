"""LoRA fine-tuning: masked cross-entropy, AdamW, linear warmup/decay, checkpoint evals."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import torch

from . import numerics as nx
from .chatdata import EOS, ChatExample, render_chat, render_prompt, truncate
from .engine import generate
from .errors import ConfigError, DivergenceError, NonFiniteError, ValidationError
from .lora import AdapterSet, attach, trainable_parameters
from .masking import SegmentedTokens, build_mask, check_mode, unify_segments
from .model import ModelConfig, ModelWeights, run

log = logging.getLogger(__name__)

LOSS_SCOPES = ("assistant_only", "full_sequence")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 3
    warmup_steps: int = 100
    cutoff_len: int = 256
    lora_r: int = 32
    lora_alpha: float = 64.0
    lora_dropout: float = 0.05
    lora_targets: tuple[str, ...] = ("w_q", "w_v")
    weight_decay: float = 0.0
    seed: int = 0
    train_mode: str = "mas"
    eval_mode: str | None = None  # defaults to train_mode
    loss_scope: str = "assistant_only"
    unified_segments: bool = False
    checkpoints_per_epoch: int = 3
    eval_batch_size: int = 64

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.cutoff_len < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("cutoff_len, batch_size and epochs must be >= 1")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.loss_scope not in LOSS_SCOPES:
            raise ConfigError(f"loss_scope must be one of {LOSS_SCOPES}")
        if self.checkpoints_per_epoch < 1:
            raise ConfigError("checkpoints_per_epoch must be >= 1")
        check_mode(self.train_mode)
        if self.eval_mode is not None:
            check_mode(self.eval_mode)
        object.__setattr__(self, "lora_targets", tuple(self.lora_targets))

    @property
    def resolved_eval_mode(self) -> str:
        return self.eval_mode or self.train_mode

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Checkpoint:
    step: int
    loss: float
    accuracy: dict[str, float]
    wall_time: float = 0.0


@dataclass
class MetricsHistory:
    checkpoints: list[Checkpoint] = field(default_factory=list)

    def add(self, cp: Checkpoint) -> None:
        if self.checkpoints and cp.step <= self.checkpoints[-1].step:
            raise ValidationError("checkpoint steps must be strictly increasing")
        self.checkpoints.append(cp)

    def __len__(self) -> int:
        return len(self.checkpoints)

    @property
    def tasks(self) -> list[str]:
        names = sorted({t for cp in self.checkpoints for t in cp.accuracy if t != "avg"})
        return names + ["avg"]

    def final_accuracy(self, task: str = "avg") -> float:
        return self.checkpoints[-1].accuracy[task]

    def to_csv(self, path: str | Path) -> None:
        """Wall time is left out so that reruns produce identical files."""
        tasks = self.tasks
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"] + [f"acc_{t}" for t in tasks])
            for cp in self.checkpoints:
                w.writerow([cp.step, repr(cp.loss)] + [repr(cp.accuracy.get(t, float("nan"))) for t in tasks])

    @classmethod
    def from_csv(cls, path: str | Path) -> "MetricsHistory":
        hist = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                acc = {k[4:]: float(v) for k, v in row.items() if k.startswith("acc_")}
                hist.add(Checkpoint(int(row["step"]), float(row["loss"]), acc))
        return hist


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean of ``-log softmax(logits)[target]`` over positions where ``loss_mask`` is 1."""
    weights = torch.as_tensor(loss_mask).to(logits.dtype)
    total = weights.sum()
    if total <= 0:
        raise ValidationError("loss mask selects no positions")
    logp = torch.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, torch.as_tensor(targets, dtype=torch.long).unsqueeze(-1)).squeeze(-1)
    return -(picked * weights).sum() / total


def assistant_loss_mask(seg: SegmentedTokens, scope: str = "assistant_only") -> list[int]:
    """Position ``i`` is scored when it predicts token ``i + 1`` and that token is in scope."""
    n = len(seg)
    if scope == "full_sequence":
        return [1] * (n - 1) + [0]
    if scope != "assistant_only":
        raise ConfigError(f"unknown loss scope {scope!r}")
    if "assistant" not in seg.roles:
        raise ValidationError("example has no assistant tokens")
    return [1 if i + 1 < n and seg.roles[i + 1] == "assistant" else 0 for i in range(n)]


def adamw_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None], state: dict, lr: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """In-place AdamW update with bias correction and decoupled weight decay.

    ``state`` holds the step counter and first/second moments; pass the same dict
    on every call.
    """
    b1, b2 = betas
    t = state.get("step", 0) + 1
    state["step"] = t
    m_all = state.setdefault("m", [torch.zeros_like(p) for p in params])
    v_all = state.setdefault("v", [torch.zeros_like(p) for p in params])
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, m_all, v_all):
            if g is None:
                continue
            if weight_decay:
                p.mul_(1 - lr * weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))


def lr_at(step: int, lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear ramp 0 -> lr over warmup, then linear decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValidationError("step must be >= 0")
    if step < warmup_steps:
        return lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return lr
    return lr * max(0.0, (total_steps - step) / (total_steps - warmup_steps))


@dataclass
class Batch:
    tokens: torch.Tensor   # (B, n)
    allowed: torch.Tensor  # (B, n, n)
    targets: torch.Tensor  # (B, n)
    loss_mask: torch.Tensor  # (B, n)
    lengths: list[int]


def prepare(seg: SegmentedTokens, unified: bool = False) -> SegmentedTokens:
    return unify_segments(seg) if unified else seg


def collate(segs: Sequence[SegmentedTokens], mode: str, loss_scope: str | None = "assistant_only") -> Batch:
    """Right-pad with EOS; every example keeps its own mask. Pad rows are causal."""
    n = max(len(s) for s in segs)
    b = len(segs)
    tokens = torch.full((b, n), EOS, dtype=torch.long)
    allowed = torch.ones(n, n, dtype=torch.bool).tril().repeat(b, 1, 1)
    targets = torch.full((b, n), EOS, dtype=torch.long)
    loss_mask = torch.zeros(b, n)
    for i, s in enumerate(segs):
        L = len(s)
        tokens[i, :L] = torch.tensor(s.token_ids)
        allowed[i, :L, :L] = build_mask(s, mode).allowed
        targets[i, :L - 1] = tokens[i, 1:L]
        if loss_scope is not None:
            loss_mask[i, :L] = torch.tensor(assistant_loss_mask(s, loss_scope), dtype=loss_mask.dtype)
    return Batch(tokens, allowed, targets, loss_mask, [len(s) for s in segs])


def evaluate(weights: ModelWeights, config: ModelConfig, examples: Sequence[ChatExample], mode: str,
             adapters: AdapterSet | None = None, unified: bool = False, batch_size: int = 64) -> dict[str, float]:
    """Exact-match accuracy per task plus ``avg`` (mean over tasks).

    Multiple-choice items are scored by the argmax over their choice tokens at the
    first answer position; other items by greedy generation.
    """
    check_mode(mode)
    correct: dict[str, int] = {}
    seen: dict[str, int] = {}
    mc = [ex for ex in examples if _single_token_choices(ex)]
    free = [ex for ex in examples if not _single_token_choices(ex)]
    with torch.no_grad():
        for start in range(0, len(mc), batch_size):
            chunk = mc[start:start + batch_size]
            segs = [prepare(render_prompt(ex), unified) for ex in chunk]
            batch = collate(segs, mode, loss_scope=None)
            logits, _ = run(batch.tokens, batch.allowed, weights, config, adapters=adapters)
            for i, ex in enumerate(chunk):
                last = logits[i, batch.lengths[i] - 1]
                ids = [ord(c) for c in ex.choices]
                pred = ex.choices[int(torch.argmax(last[ids]))]
                _tally(correct, seen, ex.task, pred == ex.assistant)
        for ex in free:
            seg = prepare(render_prompt(ex), unified)
            out = generate(seg, weights, config, mode, max_new=len(ex.assistant.encode()) + 1, stop_token=EOS,
                           adapters=adapters)
            _tally(correct, seen, ex.task, bytes(t for t in out if t < 256) == ex.assistant.encode())
    acc = {t: correct[t] / seen[t] for t in sorted(seen)}
    acc["avg"] = sum(acc.values()) / len(acc) if acc else float("nan")
    return acc


def _single_token_choices(ex: ChatExample) -> bool:
    return bool(ex.choices) and all(len(c) == 1 and ord(c) < 128 for c in ex.choices) and ex.assistant in ex.choices


def _tally(correct, seen, task, ok):
    seen[task] = seen.get(task, 0) + 1
    correct[task] = correct.get(task, 0) + int(ok)


def checkpoint_steps(n_examples: int, cfg: TrainConfig) -> list[int]:
    per_epoch = math.ceil(n_examples / cfg.batch_size)
    total = per_epoch * cfg.epochs
    k = cfg.checkpoints_per_epoch
    steps = set()
    for j in range(1, k * cfg.epochs + 1):
        epoch, part = divmod(j, k)
        steps.add(max(1, min(total, epoch * per_epoch + round(part * per_epoch / k))))
    return sorted(steps)


def train(weights: ModelWeights, config: ModelConfig, train_set: Sequence[ChatExample], cfg: TrainConfig,
          eval_set: Sequence[ChatExample] = (), adapters: AdapterSet | None = None,
          on_checkpoint: Callable[[Checkpoint], None] | None = None) -> tuple[MetricsHistory, AdapterSet]:
    """Fine-tune LoRA adapters on ``train_set``; base weights stay frozen.

    Returns the metrics history and the trained adapters. Adapters are attached
    here (seeded from ``cfg.seed``) unless passed in.
    """
    if not train_set:
        raise ValidationError("training set is empty")
    if adapters is None:
        adapters = attach(weights, cfg.lora_targets, cfg.lora_r, cfg.lora_alpha, seed=cfg.seed,
                          dropout_p=cfg.lora_dropout)
    else:
        weights.requires_grad_(False)
    params = trainable_parameters(adapters)
    gen = torch.Generator().manual_seed(cfg.seed)

    segs, skipped = [], 0
    for ex in train_set:
        s = truncate(prepare(render_chat(ex, include_assistant=True), cfg.unified_segments), cfg.cutoff_len)
        if s is None or len(s) > config.max_seq:
            skipped += 1
            continue
        segs.append(s)
    if skipped:
        log.info("skipped %d examples that would lose their answer at cutoff %d", skipped, cfg.cutoff_len)
    if not segs:
        raise ValidationError("no training examples survive truncation")

    per_epoch = math.ceil(len(segs) / cfg.batch_size)
    total = per_epoch * cfg.epochs
    eval_at = set(checkpoint_steps(len(segs), cfg))
    eval_mode = cfg.resolved_eval_mode
    history = MetricsHistory()
    state: dict = {}
    step = 0
    running, running_n = 0.0, 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(segs), generator=gen).tolist()
        for start in range(0, len(order), cfg.batch_size):
            batch = collate([segs[i] for i in order[start:start + cfg.batch_size]], cfg.train_mode, cfg.loss_scope)
            try:
                logits, _ = run(batch.tokens, batch.allowed, weights, config, adapters=adapters, train=True,
                                generator=gen)
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite forward pass at step {step} (epoch {epoch})") from exc
            loss = cross_entropy(logits, batch.targets, batch.loss_mask)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"loss became {float(loss)} at step {step} (epoch {epoch})")
            for p in params:
                p.grad = None
            try:
                nx.backward(loss)
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite values at step {step}: {exc}") from exc
            adamw_step(params, [p.grad for p in params], state, lr_at(step, cfg.lr, cfg.warmup_steps, total),
                       weight_decay=cfg.weight_decay)
            step += 1
            running += loss.item()
            running_n += 1
            if step in eval_at:
                acc = evaluate(weights, config, eval_set, eval_mode, adapters, cfg.unified_segments,
                               cfg.eval_batch_size) if eval_set else {"avg": float("nan")}
                cp = Checkpoint(step, running / running_n, acc, time.perf_counter() - t0)
                history.add(cp)
                log.info("step %d loss %.4f acc %.4f", step, cp.loss, acc.get("avg", float("nan")))
                if on_checkpoint:
                    on_checkpoint(cp)
                running, running_n = 0.0, 0
    for p in params:
        p.grad = None
    return history, adapters


def load_train_config(path: str | Path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))


def pretrain(config: ModelConfig, corpus: Sequence[ChatExample], steps: int, lr: float = 1e-3,
             batch_size: int = 32, warmup_steps: int = 100, seed: int = 0, mode: str = "causal",
             weight_decay: float = 0.01, weights: ModelWeights | None = None,
             loss_scope: str = "full_sequence", log_every: int = 0,
             init_std: float | None = None) -> tuple[ModelWeights, list[float]]:
    """Full-parameter language-model training of a base model on ``corpus``.

    Stands in for the pretrained checkpoint that LoRA fine-tuning starts from:
    causal mask by default, loss on every next-token prediction unless
    ``loss_scope`` narrows it. ``init_std`` defaults to 1/sqrt(d) for a fresh
    model: at 0.02 a toy model sits on a long plateau before any content lookup
    forms. Returns (weights, losses).
    """
    if weights is None:
        from .model import init_weights
        weights = init_weights(config, seed=seed, std=init_std or config.d ** -0.5)
    weights.requires_grad_(True)
    params = weights.parameters()
    gen = torch.Generator().manual_seed(seed)
    segs = [render_chat(ex, include_assistant=True) for ex in corpus]
    segs = [s for s in segs if len(s) <= config.max_seq]
    if not segs:
        raise ValidationError("empty pretraining corpus")
    state: dict = {}
    losses = []
    order: list[int] = []
    for step in range(steps):
        if len(order) < batch_size:
            order += torch.randperm(len(segs), generator=gen).tolist()
        idx, order = order[:batch_size], order[batch_size:]
        batch = collate([segs[i] for i in idx], mode, loss_scope)
        logits, _ = run(batch.tokens, batch.allowed, weights, config)
        loss = cross_entropy(logits, batch.targets, batch.loss_mask)
        for p in params:
            p.grad = None
        nx.backward(loss)
        adamw_step(params, [p.grad for p in params], state, lr_at(step, lr, warmup_steps, steps),
                   weight_decay=weight_decay)
        losses.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            log.info("pretrain step %d loss %.4f", step + 1, sum(losses[-log_every:]) / log_every)
    weights.requires_grad_(False)
    for p in params:
        p.grad = None
    return weights, losses
