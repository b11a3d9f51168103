"""Training loop, evaluation, metrics records and the scheme experiments."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .autodiff import no_grad
from .blocks import Scheme, parse_scheme
from .data import Corpus, Split, batch_stream, iter_batches
from .errors import ContractError, DivergenceError
from .layers import cross_entropy_ls
from .model import Model, ModelConfig, build_model
from .optim import Adam, OptimConfig, lr_at

log = logging.getLogger(__name__)


@dataclass
class RunRecord:
    step: int
    loss: float
    lr: float
    valid_ppl: Optional[float] = None
    grad_norm: float = 0.0
    grad_norms: list = field(default_factory=list)
    gammas: list = field(default_factory=list)


@dataclass
class EvalResult:
    loss: float
    ppl: float
    accuracy: float
    n_tokens: int


def evaluate(model: Model, split: Split, batch_tokens: int = 2048) -> EvalResult:
    """Unsmoothed mean NLL, perplexity and argmax token accuracy on masked positions."""
    nll = 0.0
    correct = 0.0
    count = 0.0
    with no_grad():
        for batch in iter_batches(split, batch_tokens):
            logits = model.forward(batch.inputs, train=False).data
            z = logits - logits.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            picked = np.take_along_axis(logp, batch.targets[..., None], axis=-1)[..., 0]
            nll -= float((picked * batch.mask).sum())
            correct += float(((logits.argmax(axis=-1) == batch.targets) * batch.mask).sum())
            count += float(batch.mask.sum())
    if count == 0:
        return EvalResult(math.nan, math.nan, math.nan, 0)
    loss = nll / count
    return EvalResult(loss, math.exp(loss), correct / count, int(count))


def _grad_norm(tensors) -> float:
    return math.sqrt(sum(float((t.grad * t.grad).sum()) for t in tensors if t.grad is not None))


def train(model: Model, corpus: Corpus, cfg: OptimConfig,
          sink: Optional[Callable[[RunRecord], None]] = None,
          validate: bool = True) -> list:
    """Optimize ``model`` for ``cfg.total_steps`` updates and return the records.

    A record at step s describes the model after s updates; step 0 is logged
    before the first update. The block gradient norms are L2 norms of
    d loss / d (block input) from the most recent backward pass.
    """
    records: list = []
    if cfg.total_steps == 0:
        return records
    do_valid = validate and len(corpus.valid) > 0
    seed_data = np.random.SeedSequence([model.cfg.seed, 7])
    stream = batch_stream(corpus.train, cfg.batch_tokens, np.random.default_rng(seed_data))
    opt = Adam(model.named_parameters(), cfg)
    params = opt.params
    valid_history: list = []
    last_ppl: Optional[float] = None
    regressions = 0

    def emit(step, loss, lr, need_valid):
        nonlocal last_ppl, regressions
        # read gradients before validation replaces the recorded block inputs
        block_norms = [float(np.linalg.norm(t.grad)) if t.grad is not None else 0.0
                       for t in model.block_inputs]
        if do_valid and (need_valid or last_ppl is None):
            ppl = evaluate(model, corpus.valid, cfg.batch_tokens).ppl
            if valid_history and ppl > valid_history[-1]:
                regressions += 1
            else:
                regressions = 0
            valid_history.append(ppl)
            last_ppl = ppl
        rec = RunRecord(
            step=step,
            loss=loss,
            lr=lr,
            valid_ppl=last_ppl if do_valid else None,
            grad_norm=_grad_norm(params),
            grad_norms=block_norms,
            gammas=model.gammas(),
        )
        records.append(rec)
        if sink is not None:
            sink(rec)

    def forward_backward():
        total = 0.0
        for _ in range(cfg.grad_accum):
            batch = next(stream)
            logits = model.forward(batch.inputs, train=True)
            loss = cross_entropy_ls(logits, batch.targets, cfg.label_smoothing, batch.mask)
            if cfg.grad_accum > 1:
                loss = loss * (1.0 / cfg.grad_accum)
            loss.backward()
            total += loss.item()
        return total

    def check(step, loss):
        if not math.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at step {step}", step=step, records=records)

    opt.zero_grad()
    loss = forward_backward()
    check(0, loss)
    emit(0, loss, lr_at(1, cfg), need_valid=True)
    opt.zero_grad()

    for step in range(1, cfg.total_steps + 1):
        loss = forward_backward()
        check(step, loss)
        lr = lr_at(step, cfg)
        try:
            opt.step(lr)
        except DivergenceError as exc:
            exc.records = records
            raise
        last = step == cfg.total_steps
        need_valid = step % cfg.valid_every == 0 or last
        stop = False
        if step % cfg.log_every == 0 or last or need_valid:
            emit(step, loss, lr, need_valid)
            stop = do_valid and regressions >= cfg.early_stop_patience
        opt.zero_grad()
        if stop:
            log.info("early stop at step %d after %d validation regressions", step, regressions)
            break
    return records


# -- CSV serialization ------------------------------------------------------

def record_header(records: Sequence[RunRecord]) -> list:
    if not records:
        return ["step", "loss", "lr"]
    first = records[0]
    cols = ["step", "loss"]
    if first.valid_ppl is not None:
        cols.append("valid_ppl")
    cols.append("lr")
    cols += [f"grad_norm_block_{i}" for i in range(len(first.grad_norms))]
    cols += [f"gamma_{i}" for i in range(len(first.gammas))]
    return cols


def _row(rec: RunRecord) -> list:
    row = [str(rec.step), repr(float(rec.loss))]
    if rec.valid_ppl is not None:
        row.append(repr(float(rec.valid_ppl)))
    row.append(repr(float(rec.lr)))
    row += [repr(float(v)) for v in rec.grad_norms]
    row += [repr(float(v)) for v in rec.gammas]
    return row


def write_records(path, records: Sequence[RunRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(record_header(records))
        for rec in records:
            w.writerow(_row(rec))


def read_records(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(RunRecord(
                step=int(row["step"]),
                loss=float(row["loss"]),
                lr=float(row["lr"]),
                valid_ppl=float(row["valid_ppl"]) if "valid_ppl" in row else None,
                grad_norms=[float(row[k]) for k in row if k.startswith("grad_norm_block_")],
                gammas=[float(row[k]) for k in row if k.startswith("gamma_")],
            ))
    return out


def write_gradnorm(path, records: Sequence[RunRecord]) -> None:
    n = len(records[0].grad_norms) if records else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "grad_norm"] + [f"grad_norm_block_{i}" for i in range(n)])
        for rec in records:
            w.writerow([rec.step, repr(float(rec.grad_norm))] + [repr(float(v)) for v in rec.grad_norms])


# -- experiments --------------------------------------------------------------

TRUNCATION_SCHEMES = (Scheme.EULER, Scheme.RK2, Scheme.RK2_G1, Scheme.RK2_LEARN, Scheme.RK4)


@dataclass
class RunSummary:
    scheme: str
    seed: int
    depth: int
    params: int
    final_loss: float
    valid_ppl: float
    best_valid_ppl: float
    accuracy: float
    diverged: bool = False
    records: list = field(default_factory=list, repr=False)


def run_one(model_cfg: ModelConfig, optim_cfg: OptimConfig, corpus: Corpus,
            sink: Optional[Callable[[RunRecord], None]] = None) -> RunSummary:
    """Build, train and evaluate one model; divergence is reported, not raised."""
    model = build_model(model_cfg)
    diverged = False
    try:
        records = train(model, corpus, optim_cfg, sink)
    except DivergenceError as exc:
        log.warning("run %s seed %d diverged: %s", model_cfg.scheme, model_cfg.seed, exc)
        records = exc.records
        diverged = True
    ev = evaluate(model, corpus.valid, optim_cfg.batch_tokens) if len(corpus.valid) else None
    ppls = [r.valid_ppl for r in records if r.valid_ppl is not None]
    return RunSummary(
        scheme=model_cfg.scheme,
        seed=model_cfg.seed,
        depth=model_cfg.depth,
        params=model.param_count(),
        final_loss=records[-1].loss if records else math.nan,
        valid_ppl=ev.ppl if ev else math.nan,
        best_valid_ppl=min(ppls) if ppls else math.nan,
        accuracy=ev.accuracy if ev else math.nan,
        diverged=diverged,
        records=records,
    )


def compare_schemes(model_cfg: ModelConfig, optim_cfg: OptimConfig, corpus: Corpus,
                    schemes: Iterable = tuple(Scheme), seeds: Iterable[int] = (0,)) -> list:
    """Train every (scheme, seed) pair on a shared configuration, in scheme order."""
    out = []
    for scheme in schemes:
        for seed in seeds:
            cfg = dataclasses.replace(model_cfg, scheme=parse_scheme(scheme).value, seed=int(seed))
            out.append(run_one(cfg, optim_cfg, corpus))
    return out


def truncation_study(schemes: Iterable, depths: Iterable[int], corpus: Corpus,
                     model_cfg: ModelConfig, optim_cfg: OptimConfig,
                     seeds: Iterable[int] = (0,)) -> list:
    """One trained LM per (scheme, depth, seed) with depth restricted to 1 or 2."""
    depths = list(depths)
    if not depths or any(d not in (1, 2) for d in depths):
        raise ContractError(f"truncation study uses depths 1 and 2 only, got {depths}")
    out = []
    for depth in depths:
        for scheme in schemes:
            for seed in seeds:
                cfg = dataclasses.replace(model_cfg, depth=depth,
                                          scheme=parse_scheme(scheme).value, seed=int(seed))
                out.append(run_one(cfg, optim_cfg, corpus))
    return out
