"""Experiment orchestration: single training runs with periodic dev evaluation
and best-checkpoint selection, and the matrix of plans (from-scratch scheme
comparison, continued training with new tokens, direct-data finetuning and
domain finetuning)."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .evaluate import corpus_bleu, generate, majority_detector, off_target_rate
from .langspec import SentencePair, Universe
from .model import (Batch, Checkpoint, ModelConfig, OptimizerState, backward, batch_loss, collate,
                    dropout_generator, init_params, load_checkpoint, optimizer_step,
                    reset_nonparameter_state, save_checkpoint)
from .tagging import PAD, TokenScheme, Vocabulary, apply_scheme

log = logging.getLogger(__name__)

SELECTION_METRICS = ("dev_bleu_ex", "dev_bleu_xy", "dev_bleu_all")
DEV_EX, DEV_XY = "E<=>X", "X<=>Y"
MID_FRACTION = 0.44


@dataclass(frozen=True)
class Resume:
    """Start from a parent's checkpoint.

    ``parent`` names another plan; ``at`` is ``"mid"`` (the parent's mid
    checkpoint), ``"final"`` or ``"best"``. ``path`` overrides the lookup.
    """

    parent: str | None = None
    at: str = "final"
    reset_nonparameter: bool = True
    path: str | None = None


@dataclass(frozen=True)
class ExperimentPlan:
    name: str
    scheme: str
    data: str
    total_steps: int
    eval_every: int
    init: Resume | None = None
    selection_metric: str = "dev_bleu_all"
    dev_sets: tuple[str, ...] = (DEV_EX, DEV_XY)
    peak_lr: float = 3e-3
    warmup: int = 200
    batch_size: int = 64
    seed: int = 0
    mid_step: int | None = None

    def __post_init__(self):
        TokenScheme.parse(self.scheme)
        if self.selection_metric not in SELECTION_METRICS:
            raise ValueError(f"unknown selection metric {self.selection_metric!r}")
        if self.total_steps < 0 or self.eval_every < 1:
            raise ValueError("total_steps must be >= 0 and eval_every >= 1")

    @property
    def mid(self) -> int:
        return self.mid_step if self.mid_step is not None else round(MID_FRACTION * self.total_steps)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        d = dict(d)
        if d.get("init") is not None:
            d["init"] = Resume(**d["init"])
        d["dev_sets"] = tuple(d.get("dev_sets", (DEV_EX, DEV_XY)))
        return cls(**d)


@dataclass
class CurveRow:
    step: int
    total_step: int
    devset: str
    bleu: float
    off_target: float
    loss: float


@dataclass
class TrainingCurve:
    plan: str
    rows: list[CurveRow] = field(default_factory=list)

    def metric(self, devset: str) -> list[tuple[int, float]]:
        return [(r.step, r.bleu) for r in self.rows if r.devset == devset]

    def value_at(self, devset: str, step: int, field_: str = "bleu") -> float:
        for r in self.rows:
            if r.devset == devset and r.step == step:
                return getattr(r, field_)
        raise KeyError(f"no {devset} row at step {step}")

    def steps(self) -> list[int]:
        return sorted({r.step for r in self.rows})

    def write_csv(self, path: str | Path, append: bool = False):
        path = Path(path)
        new = not (append and path.exists())
        with open(path, "a" if append else "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            if new:
                w.writerow(["plan", "step", "total_step", "devset", "metric", "value"])
            for r in self.rows:
                for metric in ("bleu", "off_target", "loss"):
                    w.writerow([self.plan, r.step, r.total_step, r.devset, metric,
                                f"{getattr(r, metric):.6f}"])


@dataclass
class RunResult:
    best: Checkpoint
    curve: TrainingCurve
    final: Checkpoint
    snapshots: dict[int, Checkpoint]
    best_step: int
    best_total_step: int


def selection_value(metric: str, scores: Mapping[str, float]) -> float:
    if metric == "dev_bleu_ex":
        return scores[DEV_EX]
    if metric == "dev_bleu_xy":
        # domain plans register their own non-English dev sets
        return float(np.mean([v for k, v in scores.items() if k != DEV_EX]))
    return float(np.mean(list(scores.values())))


def _group_mean_bleu(hyps) -> float:
    by_dir: dict = {}
    for h in hyps:
        by_dir.setdefault(h.direction, []).append(h)
    return float(np.mean([corpus_bleu([h.output for h in hs], [h.reference for h in hs])
                          for hs in by_dir.values()]))


class Trainer:
    """Runs one plan against fixed data. Step ``t`` of a run always sees the
    batch and dropout mask derived from ``(seed, t)``."""

    def __init__(self, plan: ExperimentPlan, train_pairs: Sequence[SentencePair],
                 dev: Mapping[str, Sequence[SentencePair]], vocab: Vocabulary, universe: Universe,
                 log_fn: Callable[[dict], None] | None = None):
        if not train_pairs and plan.total_steps > 0:
            raise ValueError(f"plan {plan.name!r}: empty training data")
        self.plan = plan
        self.scheme = TokenScheme.parse(plan.scheme)
        self.vocab = vocab
        self.universe = universe
        self.examples = [apply_scheme(p, self.scheme, vocab) for p in train_pairs]
        self.dev = {k: list(dev[k]) for k in plan.dev_sets if k in dev}
        self.detector = majority_detector(universe)
        self.log_fn = log_fn

    def batch_at(self, step: int) -> Batch:
        rng = np.random.default_rng([self.plan.seed, step])
        idx = rng.integers(0, len(self.examples), size=self.plan.batch_size)
        return collate([self.examples[i] for i in idx])

    def dev_loss(self, ckpt: Checkpoint, pairs: Sequence[SentencePair]) -> float:
        total, n = 0.0, 0
        with torch.no_grad():
            for i in range(0, len(pairs), 256):
                b = collate([apply_scheme(p, self.scheme, self.vocab) for p in pairs[i:i + 256]])
                k = int((b.tgt != PAD).sum())
                total += float(batch_loss(ckpt.params, ckpt.config, b, None, eps=0.0)) * k
                n += k
        return total / max(n, 1)

    def evaluate(self, ckpt: Checkpoint) -> dict[str, tuple[float, float, float]]:
        out = {}
        for name, pairs in self.dev.items():
            hyps = generate(ckpt, pairs, self.scheme, self.vocab, "greedy",
                            max_len=max(len(p.tgt) for p in pairs) + 4)
            out[name] = (_group_mean_bleu(hyps), off_target_rate(hyps, self.detector),
                         self.dev_loss(ckpt, pairs))
        return out

    def run(self, ckpt: Checkpoint, save_steps: Sequence[int] = ()) -> RunResult:
        plan = self.plan
        ckpt = ckpt.clone()
        start = ckpt.step
        base_total = int(ckpt.provenance.get("total_steps", 0)) - start
        ckpt.provenance.update({"scheme": self.scheme.value, "plan": plan.name,
                                "optimizer": "radam"})
        curve = TrainingCurve(plan.name)
        snapshots: dict[int, Checkpoint] = {}
        best, best_val, best_step = ckpt.clone(), float("-inf"), start
        params, opt = ckpt.params, ckpt.optimizer
        t0 = time.time()
        running, last_eval = 0.0, start
        for step in range(start + 1, start + plan.total_steps + 1):
            gen = dropout_generator(ckpt.seed, step) if ckpt.config.dropout > 0 else None
            loss, grads = backward(params, ckpt.config, self.batch_at(step), gen)
            params, opt = optimizer_step(params, grads, opt)
            running += loss
            ckpt.params, ckpt.optimizer, ckpt.step = params, opt, step
            ckpt.provenance["total_steps"] = base_total + step
            if step in save_steps:
                snapshots[step] = ckpt.clone()
            if step % plan.eval_every == 0 or step == start + plan.total_steps or step in save_steps:
                scores = self.evaluate(ckpt)
                for name, (bleu, off, dloss) in scores.items():
                    curve.rows.append(CurveRow(step, base_total + step, name, bleu, off, dloss))
                val = selection_value(plan.selection_metric, {k: v[0] for k, v in scores.items()})
                if val > best_val:
                    best, best_val, best_step = ckpt.clone(), val, step
                event = {"plan": plan.name, "step": step, "loss": running / max(step - last_eval, 1),
                         "lr": opt.lr, "elapsed": round(time.time() - t0, 2),
                         **{f"bleu[{k}]": round(v[0], 3) for k, v in scores.items()},
                         **{f"offtgt[{k}]": round(v[1], 4) for k, v in scores.items()}}
                running, last_eval = 0.0, step
                if self.log_fn:
                    self.log_fn(event)
                log.info(json.dumps(event))
        best.provenance["best_step"] = best_step
        return RunResult(best, curve, ckpt, snapshots, best_step,
                         base_total + best_step)


def fresh_checkpoint(cfg: ModelConfig, plan: ExperimentPlan, seed: int | None = None) -> Checkpoint:
    seed = plan.seed if seed is None else seed
    return Checkpoint(cfg, init_params(cfg, seed), OptimizerState(plan.peak_lr, plan.warmup),
                      0, seed, {"total_steps": 0})


def prepare_init(plan: ExperimentPlan, cfg: ModelConfig, parent: Checkpoint | None) -> Checkpoint:
    """Initial checkpoint for ``plan``: fresh weights, or the parent's with the
    plan's schedule and (optionally) all non-parameter state restarted."""
    if plan.init is None:
        return fresh_checkpoint(cfg, plan)
    if parent is None:
        raise ValueError(f"plan {plan.name!r}: missing prerequisite checkpoint")
    if parent.config != cfg:
        raise ValueError(f"plan {plan.name!r}: checkpoint model config / vocabulary mismatch")
    if plan.init.reset_nonparameter:
        ckpt = reset_nonparameter_state(parent, plan.seed)
        ckpt.optimizer = OptimizerState(plan.peak_lr, plan.warmup)
    else:
        ckpt = parent.clone()
    ckpt.provenance["parent"] = plan.init.parent or plan.init.path
    return ckpt


def run_plan(plan: ExperimentPlan, cfg: ModelConfig, train_pairs, dev, vocab: Vocabulary,
             universe: Universe, parent: Checkpoint | None = None, save_steps: Sequence[int] = (),
             log_fn=None) -> RunResult:
    if parent is None and plan.init is not None and plan.init.path:
        parent = load_checkpoint(plan.init.path)
    if parent is not None and parent.config.vocab_size != len(vocab):
        raise ValueError(f"plan {plan.name!r}: checkpoint vocabulary size {parent.config.vocab_size} "
                         f"!= {len(vocab)}")
    ckpt = prepare_init(plan, cfg, parent)
    trainer = Trainer(plan, train_pairs, dev, vocab, universe, log_fn)
    return trainer.run(ckpt, save_steps)


# -- the plan matrix --------------------------------------------------------

@dataclass(frozen=True)
class MatrixConfig:
    scratch_steps: int = 1500
    continue_steps: int = 1000
    direct_steps: int = 1000
    domain_steps: int = 200
    eval_every: int = 250
    domain_eval_every: int = 50
    batch_size: int = 64
    peak_lr: float = 3e-3
    warmup: int = 200
    ft_peak_lr: float = 1.5e-3
    ft_warmup: int = 100
    domain_lr: float = 5e-4
    domain_warmup: int = 20
    selection_metric: str = "dev_bleu_all"
    seed: int = 0
    mid_fraction: float = MID_FRACTION
    domains: tuple[str, ...] = ("emea", "jrc", "tanzil")
    domain_directions: tuple[tuple[str, str], ...] = (("x1", "x2"), ("x2", "x1"))


SCRATCH_SCHEMES = {"B": "T-E", "ST-T": "ST-T", "S-T": "S-T", "T-T": "T-T"}


def domain_plan_name(base: str, domain: str, direction: tuple[str, str]) -> str:
    return f"FT[{base}/{domain}/{direction[0]}-{direction[1]}]"


def build_plan_matrix(base: MatrixConfig = MatrixConfig()) -> dict[str, ExperimentPlan]:
    """All plans keyed by name, in a dependency-respecting order.

    P, D and DP continue from B's mid checkpoint, P-D from P's mid
    checkpoint; D, DP and P-D run for the same total number of steps
    counted from B's mid checkpoint.
    """
    common = dict(eval_every=base.eval_every, batch_size=base.batch_size, seed=base.seed,
                  selection_metric=base.selection_metric)
    b_mid = round(base.mid_fraction * base.scratch_steps)
    plans: dict[str, ExperimentPlan] = {}
    for name, scheme in SCRATCH_SCHEMES.items():
        plans[name] = ExperimentPlan(name, scheme, "ex", base.scratch_steps, peak_lr=base.peak_lr,
                                     warmup=base.warmup, mid_step=b_mid, **common)
    p_mid = round(base.mid_fraction * base.continue_steps)
    plans["P"] = ExperimentPlan("P", "ST-T", "ex", base.continue_steps, init=Resume("B", "mid"),
                                peak_lr=base.peak_lr, warmup=base.warmup, mid_step=p_mid, **common)
    ft = dict(peak_lr=base.ft_peak_lr, warmup=base.ft_warmup, **common)
    plans["D"] = ExperimentPlan("D", "T-E", "mixed", base.direct_steps, init=Resume("B", "mid"), **ft)
    pd_steps = max(base.direct_steps - p_mid, 1)
    plans["P-D"] = ExperimentPlan("P-D", "ST-T", "mixed", pd_steps, init=Resume("P", "mid"), **ft)
    plans["DP"] = ExperimentPlan("DP", "ST-T", "mixed", base.direct_steps, init=Resume("B", "mid"), **ft)
    for parent, scheme in (("B", "T-E"), ("P", "ST-T")):
        for dom in base.domains:
            for d in base.domain_directions:
                name = domain_plan_name(parent, dom, d)
                plans[name] = ExperimentPlan(
                    name, scheme, f"domain/{dom}/{d[0]}-{d[1]}", base.domain_steps,
                    base.domain_eval_every, init=Resume(parent, "final"), selection_metric="dev_bleu_xy",
                    dev_sets=(f"domain/{dom}/{d[0]}-{d[1]}",), peak_lr=base.domain_lr,
                    warmup=base.domain_warmup, batch_size=base.batch_size, seed=base.seed)
    return plans


def core_plans(plans: Mapping[str, ExperimentPlan]) -> list[str]:
    return [k for k in ("B", "P", "P-D", "D", "DP") if k in plans]


def pick_parent(result: RunResult, at: str) -> Checkpoint:
    if at == "final":
        return result.final
    if at == "best":
        return result.best
    if at == "mid":
        mids = sorted(result.snapshots)
        if not mids:
            raise ValueError("parent run saved no mid checkpoint")
        return result.snapshots[mids[0]]
    raise ValueError(f"unknown resume point {at!r}")


def save_run(result: RunResult, out_dir: Path, plan: ExperimentPlan):
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.best, out_dir / "best.ckpt")
    save_checkpoint(result.final, out_dir / "final.ckpt")
    for s, c in result.snapshots.items():
        save_checkpoint(c, out_dir / f"step{s}.ckpt")
    result.curve.write_csv(out_dir / "curve.csv")
    (out_dir / "plan.json").write_text(json.dumps(plan.to_dict(), indent=1))
