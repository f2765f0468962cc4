"""Command line entry point: gen, filter, train, eval, compare, repro.

Every subcommand reads one RunConfig file (JSON, or TOML where a TOML parser
is available). Output goes under ``output_dir``; the environment variable
XYLAB_OUTPUT_DIR overrides it. Exit codes: 0 ok, 1 invalid config or
arguments, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .datapipe import (FilterConfig, dedup_against, filter_corpus, membership_detector, mix_for_direct_ft,
                       read_corpus, write_corpus)
from .evaluate import (Hypothesis, build_report, format_table, format_wins, generate, majority_detector,
                       off_target_rate)
from .langspec import LengthDist, SentencePair, Universe, build_universe, make_corpus
from .model import CheckpointError, ModelConfig, load_checkpoint
from .tagging import Vocabulary
from .train import (DEV_EX, DEV_XY, MatrixConfig, Resume, build_plan_matrix, domain_plan_name, run_plan,
                    save_run)

OUTPUT_ENV = "XYLAB_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


# -- config -----------------------------------------------------------------

@dataclass(frozen=True)
class UniverseSpec:
    n_languages: int = 5
    v_content: int = 64
    seed: int = 0
    reorder: bool = False
    zipf_s: float = 1.0
    length: LengthDist = LengthDist("uniform", 3, 8.0, 12)


@dataclass(frozen=True)
class CorpusSpec:
    pairs_per_direction: int = 2000
    direct_pairs_per_direction: int = 500
    dev_per_direction: int = 30
    test_per_direction: int = 50
    mix_cap: int = 500
    noise_per_kind: int = 5  # injected length/ratio/lid violations per training corpus


@dataclass(frozen=True)
class DomainSpec:
    names: tuple[str, ...] = ("emea", "jrc", "tanzil")
    directions: tuple[tuple[str, str], ...] = (("x1", "x2"), ("x2", "x1"))
    pairs_per_direction: int = 150
    dev_per_direction: int = 30
    test_per_direction: int = 50
    support_size: int = 16


@dataclass(frozen=True)
class EvalSpec:
    mode: str = "greedy"
    beam: int = 4
    alpha: float = 1.0
    resamples: int = 1000
    wide_margin: float = 10.0


@dataclass(frozen=True)
class RunConfig:
    output_dir: str = "xylab-out"
    seed: int = 0
    universe: UniverseSpec = UniverseSpec()
    corpus: CorpusSpec = CorpusSpec()
    domains: DomainSpec = DomainSpec()
    filter: FilterConfig = FilterConfig()
    model: dict = field(default_factory=lambda: dict(
        d_model=64, d_ff=256, n_heads=4, n_enc_layers=4, n_dec_layers=2, max_positions=64,
        dropout=0.1, label_smoothing=0.1, enc_no_residual=2))
    matrix: MatrixConfig = MatrixConfig()
    eval: EvalSpec = EvalSpec()

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def out(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _build(cls, doc: Any, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a table, got {type(doc).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        sub = NESTED.get((cls, name))
        try:
            kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else _tuplify(value)
        except ConfigError:
            raise
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


NESTED = {
    (RunConfig, "universe"): UniverseSpec,
    (RunConfig, "corpus"): CorpusSpec,
    (RunConfig, "domains"): DomainSpec,
    (RunConfig, "filter"): FilterConfig,
    (RunConfig, "matrix"): MatrixConfig,
    (RunConfig, "eval"): EvalSpec,
    (UniverseSpec, "length"): LengthDist,
}


def _check(cond: bool, where: str, msg: str):
    if not cond:
        raise ConfigError(f"{where}: {msg}")


def validate(cfg: RunConfig) -> RunConfig:
    u, c, d = cfg.universe, cfg.corpus, cfg.domains
    _check(u.n_languages >= 3, "universe.n_languages", f"need >= 3 languages, got {u.n_languages}")
    _check(u.v_content >= 2, "universe.v_content", f"need >= 2, got {u.v_content}")
    _check(u.zipf_s >= 0, "universe.zipf_s", "must be >= 0")
    try:
        u.length.validate()
    except ValueError as e:
        raise ConfigError(f"universe.length: {e}") from None
    for name in ("pairs_per_direction", "direct_pairs_per_direction", "dev_per_direction",
                 "test_per_direction", "mix_cap"):
        _check(getattr(c, name) >= 1, f"corpus.{name}", "must be >= 1")
    _check(c.noise_per_kind >= 0, "corpus.noise_per_kind", "must be >= 0")
    _check(c.noise_per_kind * 3 <= c.pairs_per_direction, "corpus.noise_per_kind", "too large for the corpus")
    codes = ["en"] + [f"x{i}" for i in range(1, u.n_languages)]
    for a, b in d.directions:
        _check(a in codes and b in codes and a != b, "domains.directions", f"unknown direction {a}->{b}")
    _check(len(set(d.names)) == len(d.names), "domains.names", "duplicate domain")
    _check(1 <= d.support_size * len(d.names) <= u.v_content, "domains.support_size",
           "domains need disjoint token supports inside v_content")
    _check(cfg.eval.mode in ("greedy", "beam"), "eval.mode", f"unknown mode {cfg.eval.mode!r}")
    _check(cfg.eval.resamples >= 100, "eval.resamples", "must be >= 100")
    try:
        model_config(cfg, vocab_size=16)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"model: {e}") from None
    _check(cfg.matrix.scratch_steps >= 1, "matrix.scratch_steps", "must be >= 1")
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return validate(RunConfig())
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {str(path)!r} does not exist")
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            try:
                import tomli as tomllib
            except ModuleNotFoundError:
                raise ConfigError("TOML configs need Python 3.11+ or the tomli package; use JSON") from None
        doc = tomllib.loads(text)
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    if "model" in doc and not isinstance(doc["model"], dict):
        raise ConfigError("model: expected a table")
    model = doc.pop("model", None)
    cfg = _build(RunConfig, doc, "config")
    if model is not None:
        cfg = replace(cfg, model={**RunConfig().model, **model})
    return validate(cfg)


def model_config(cfg: RunConfig, vocab_size: int) -> ModelConfig:
    extra = set(cfg.model) - {f.name for f in fields(ModelConfig)} | ({"vocab_size"} & set(cfg.model))
    if extra:
        raise ValueError(f"unknown model field(s) {', '.join(sorted(extra))}")
    return ModelConfig(vocab_size=vocab_size, **cfg.model)


# -- layout -----------------------------------------------------------------

class Layout:
    def __init__(self, root: Path):
        self.root = root

    universe = property(lambda s: s.root / "universe.json")
    vocab = property(lambda s: s.root / "vocab.json")
    data = property(lambda s: s.root / "data")
    runs = property(lambda s: s.root / "runs")
    curves = property(lambda s: s.root / "curves")
    reports = property(lambda s: s.root / "reports")

    def raw(self, name: str) -> Path:
        return self.data / "raw" / f"{name}.tsv"

    def clean(self, name: str) -> Path:
        return self.data / f"{name}.tsv"

    def run(self, plan: str) -> Path:
        return self.runs / plan.replace("/", "_")

    def require(self, path: Path) -> Path:
        if not path.exists():
            raise FileNotFoundError(f"missing prerequisite file {path}")
        return path


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _emit(event: dict, verbose: int):
    if verbose:
        print(json.dumps({"ts": round(time.time(), 3), **event}), file=sys.stderr, flush=True)


# -- gen --------------------------------------------------------------------

def domain_supports(cfg: RunConfig) -> dict[str, list[int]]:
    """Disjoint content-token supports, one per domain, drawn from a fixed shuffle."""
    rng = np.random.default_rng([cfg.seed, 77])
    order = rng.permutation(cfg.universe.v_content)
    k = cfg.domains.support_size
    return {name: sorted(int(t) for t in order[i * k:(i + 1) * k]) for i, name in enumerate(cfg.domains.names)}


def inject_noise(pairs: list[SentencePair], universe: Universe, per_kind: int, seed: int,
                 max_words: int, max_ratio: float) -> tuple[list[SentencePair], dict[str, int]]:
    """Corrupt ``per_kind`` pairs each with a length, a ratio and a LID violation."""
    if per_kind == 0:
        return list(pairs), {"length": 0, "ratio": 0, "lid": 0}
    rng = np.random.default_rng(seed)
    out = list(pairs)
    idx = rng.choice(len(out), size=3 * per_kind, replace=False)
    for j, i in enumerate(idx):
        p = out[i]
        kind = ("length", "ratio", "lid")[j // per_kind]
        if kind == "length":
            reps = max_words // len(p.src) + 1
            out[i] = SentencePair(p.src_lang, p.tgt_lang, p.src * reps, p.tgt * reps)
        elif kind == "ratio":
            reps = int(max_ratio * len(p.tgt) / len(p.src)) + 1
            out[i] = SentencePair(p.src_lang, p.tgt_lang, p.src * reps, p.tgt)
        else:
            other = next(c for c in universe.codes if c not in (p.src_lang, p.tgt_lang))
            foreign = universe[other].surface_offset + int(rng.integers(universe.v_content))
            out[i] = SentencePair(p.src_lang, p.tgt_lang, p.src, (foreign,) + p.tgt[1:])
    return out, {"length": per_kind, "ratio": per_kind, "lid": per_kind}


def cmd_gen(cfg: RunConfig, verbose: int = 0) -> dict:
    lay = Layout(cfg.out)
    u = cfg.universe
    universe = build_universe(u.n_languages, u.v_content, u.seed, u.reorder)
    vocab = Vocabulary.from_universe(universe)
    cc = cfg.corpus
    gen_kw = dict(length_dist=u.length, zipf_s=u.zipf_s)
    main = make_corpus(universe, universe.english_centric(), cc.pairs_per_direction, cfg.seed,
                       dev_per_direction=cc.dev_per_direction, test_per_direction=cc.test_per_direction,
                       **gen_kw)
    direct = make_corpus(universe, universe.direct(), cc.direct_pairs_per_direction, cfg.seed + 1,
                         dev_per_direction=1, test_per_direction=1, **gen_kw).train
    direct = dedup_against(direct, [main.dev, main.test])
    ex_noisy, injected = inject_noise(main.train, universe, cc.noise_per_kind, cfg.seed + 2,
                                      cfg.filter.max_words, cfg.filter.max_ratio)
    (lay.data / "raw").mkdir(parents=True, exist_ok=True)
    lay.universe.write_text(universe.to_json())
    lay.vocab.write_text(vocab.to_json())
    counts = {
        "train_ex": write_corpus(ex_noisy, lay.raw("train_ex")),
        "train_direct": write_corpus(direct, lay.raw("train_direct")),
        "dev": write_corpus(main.dev, lay.clean("dev")),
        "test": write_corpus(main.test, lay.clean("test")),
    }
    supports = domain_supports(cfg)
    dc = cfg.domains
    for k, (name, support) in enumerate(supports.items()):
        dom = make_corpus(universe, dc.directions, dc.pairs_per_direction, cfg.seed + 10 + k,
                          dev_per_direction=dc.dev_per_direction, test_per_direction=dc.test_per_direction,
                          eval_directions=dc.directions, support=support, **gen_kw)
        train = dedup_against(dom.train, [main.dev, main.test])
        counts[f"domain/{name}/train"] = write_corpus(train, lay.raw(f"domain_{name}_train"))
        counts[f"domain/{name}/dev"] = write_corpus(dom.dev, lay.clean(f"domain_{name}_dev"))
        counts[f"domain/{name}/test"] = write_corpus(dom.test, lay.clean(f"domain_{name}_test"))
    manifest = {"counts": counts, "injected_noise": injected, "domain_supports": supports}
    _write_json(lay.data / "manifest.json", manifest)
    _emit({"stage": "gen", **counts}, verbose)
    return manifest


# -- filter -----------------------------------------------------------------

def _load_universe(lay: Layout) -> tuple[Universe, Vocabulary]:
    universe = Universe.from_json(lay.require(lay.universe).read_text())
    vocab = Vocabulary.from_json(lay.require(lay.vocab).read_text())
    return universe, vocab


def cmd_filter(cfg: RunConfig, verbose: int = 0) -> dict:
    lay = Layout(cfg.out)
    universe, _ = _load_universe(lay)
    det = membership_detector(universe)
    tallies = {}
    raws = sorted((lay.data / "raw").glob("*.tsv")) if (lay.data / "raw").exists() else []
    if not raws:
        raise FileNotFoundError(f"missing prerequisite file {lay.raw('train_ex')}")
    for raw in raws:
        kept, tally = filter_corpus(read_corpus(raw), cfg.filter, det)
        write_corpus(kept, lay.clean(raw.stem))
        tallies[raw.stem] = {k: tally.get(k, 0) for k in ("kept", "malformed", "length", "ratio", "lid")}
    _write_json(lay.data / "filter_tally.json", tallies)
    _emit({"stage": "filter", **{k: v["kept"] for k, v in tallies.items()}}, verbose)
    return tallies


# -- train ------------------------------------------------------------------

def _split_dev(pairs: Sequence[SentencePair], universe: Universe) -> dict[str, list[SentencePair]]:
    ex = set(universe.english_centric())
    return {DEV_EX: [p for p in pairs if p.direction in ex], DEV_XY: [p for p in pairs if p.direction not in ex]}


class Workspace:
    """Lazily loaded corpora and plans for one output directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.lay = Layout(cfg.out)
        self.universe, self.vocab = _load_universe(self.lay)
        self.plans = build_plan_matrix(replace(cfg.matrix, domains=tuple(cfg.domains.names),
                                               domain_directions=tuple(cfg.domains.directions)))
        self.mcfg = model_config(cfg, len(self.vocab))
        self._cache: dict[str, list[SentencePair]] = {}

    def corpus(self, name: str) -> list[SentencePair]:
        if name not in self._cache:
            self._cache[name] = list(read_corpus(self.lay.require(self.lay.clean(name))))
        return self._cache[name]

    def train_data(self, data: str) -> list[SentencePair]:
        if data == "ex":
            return self.corpus("train_ex")
        if data == "mixed":
            return mix_for_direct_ft(self.corpus("train_ex"), self.corpus("train_direct"),
                                     self.cfg.corpus.mix_cap, self.cfg.seed)
        if data.startswith("domain/"):
            _, dom, d = data.split("/")
            src, tgt = d.split("-")
            return [p for p in self.corpus(f"domain_{dom}_train") if p.direction == (src, tgt)]
        raise ValueError(f"unknown data reference {data!r}")

    def dev_sets(self, plan) -> dict[str, list[SentencePair]]:
        out = _split_dev(self.corpus("dev"), self.universe)
        for name in plan.dev_sets:
            if name.startswith("domain/"):
                _, dom, d = name.split("/")
                src, tgt = d.split("-")
                out[name] = [p for p in self.corpus(f"domain_{dom}_dev") if p.direction == (src, tgt)]
        return out

    def test_set(self, data: str | None = None) -> list[SentencePair]:
        if data and data.startswith("domain/"):
            _, dom, d = data.split("/")
            src, tgt = d.split("-")
            return [p for p in self.corpus(f"domain_{dom}_test") if p.direction == (src, tgt)]
        return self.corpus("test")

    def parent_path(self, plan) -> Path | None:
        if plan.init is None:
            return None
        if plan.init.path:
            return Path(plan.init.path)
        parent = self.plans[plan.init.parent]
        d = self.lay.run(parent.name)
        if plan.init.at == "mid":
            return d / f"step{parent.mid}.ckpt"
        return d / f"{plan.init.at}.ckpt"


def cmd_train(cfg: RunConfig, plan_name: str, verbose: int = 0, ws: Workspace | None = None):
    ws = ws or Workspace(cfg)
    if plan_name not in ws.plans:
        raise ConfigError(f"unknown plan {plan_name!r}; choose from {', '.join(ws.plans)}")
    plan = ws.plans[plan_name]
    parent = None
    ppath = ws.parent_path(plan)
    if ppath is not None:
        parent = load_checkpoint(ws.lay.require(ppath), expected_config=ws.mcfg)
    children_need_mid = any(p.init is not None and p.init.parent == plan_name and p.init.at == "mid"
                            for p in ws.plans.values())
    save_steps = (plan.mid,) if children_need_mid else ()
    result = run_plan(plan, ws.mcfg, ws.train_data(plan.data), ws.dev_sets(plan), ws.vocab, ws.universe,
                      parent=parent, save_steps=save_steps,
                      log_fn=lambda e: _emit({k: v for k, v in e.items() if k != "elapsed"}, verbose))
    save_run(result, ws.lay.run(plan_name), plan)
    return result


# -- eval / compare ---------------------------------------------------------

ORACLE = "oracle"


def system_hypotheses(ws: Workspace, system: str, pairs: Sequence[SentencePair]) -> list[Hypothesis]:
    """Hypotheses from a checkpoint path, a plan name (its best checkpoint) or ``oracle``."""
    if system == ORACLE:
        return [Hypothesis(p.src_lang, p.tgt_lang, p.tgt, p.tgt) for p in pairs]
    path = Path(system)
    if not path.suffix == ".ckpt":
        path = ws.lay.run(system) / "best.ckpt"
    ckpt = load_checkpoint(ws.lay.require(path), expected_config=ws.mcfg)
    scheme = ckpt.provenance.get("scheme")
    if scheme is None:
        raise CheckpointError(f"{path}: checkpoint records no token scheme")
    e = ws.cfg.eval
    max_len = max(len(p.tgt) for p in pairs) + 4
    return generate(ckpt, pairs, scheme, ws.vocab, e.mode, e.beam, max_len, e.alpha)


def cmd_eval(cfg: RunConfig, system: str, split: str = "test", verbose: int = 0, ws=None) -> dict:
    ws = ws or Workspace(cfg)
    if split not in ("dev", "test"):
        raise ConfigError(f"unknown split {split!r}")
    pairs = ws.corpus(split)
    hyps = system_hypotheses(ws, system, pairs)
    from .evaluate import evaluate_hypotheses

    rep = evaluate_hypotheses(hyps, ws.universe)
    name = Path(system).stem if system.endswith(".ckpt") else system
    _write_json(ws.lay.reports / f"eval_{name.replace('/', '_')}_{split}.json", rep.to_dict())
    print(format_table({name: rep}))
    return rep.to_dict()


def cmd_compare(cfg: RunConfig, systems: Sequence[str], split: str = "test", verbose: int = 0, ws=None):
    ws = ws or Workspace(cfg)
    if len(systems) < 2:
        raise ConfigError("compare needs at least two systems")
    pairs = ws.corpus(split)
    hyps = {s: system_hypotheses(ws, s, pairs) for s in dict.fromkeys(systems)}
    if len(hyps) == 1:
        only = next(iter(hyps))
        hyps = {only: hyps[only], f"{only}'": hyps[only]}
    names = list(hyps)
    comp = build_report(hyps, ws.universe, baseline=names[0], resamples=cfg.eval.resamples, seed=cfg.seed)
    _write_json(ws.lay.reports / f"compare_{split}.json", comp.to_dict())
    print(format_table(comp.reports))
    print(format_wins(comp))
    return comp.to_dict()


# -- repro ------------------------------------------------------------------

FIGURES = {
    "fig2_scheme_curves.csv": ("B", "ST-T", "S-T", "T-T"),
    "fig3_continue_curves.csv": ("B", "P"),
    "fig4_direct_curves.csv": ("B", "P", "D", "P-D", "DP"),
}


def write_figure_csvs(results: dict, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    for fname, names in FIGURES.items():
        with open(out / fname, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["plan", "step", "total_step", "devset", "bleu", "off_target", "loss"])
            for n in names:
                if n not in results:
                    continue
                for r in results[n].curve.rows:
                    w.writerow([n, r.step, r.total_step, r.devset, f"{r.bleu:.6f}", f"{r.off_target:.6f}",
                                f"{r.loss:.6f}"])


def _group(rep, g):
    return rep.group_bleu.get(g, float("nan"))


def assess(ws: Workspace, results: dict, reports: dict, domain_scores: dict, tallies: dict,
           manifest: dict) -> dict[str, dict]:
    """Pass/fail per acceptance criterion that a pipeline run can measure."""
    m = ws.cfg.matrix
    out: dict[str, dict] = {}
    r = {k: reports[k] for k in ("B", "ST-T", "S-T", "T-T")}
    off = {k: v.group_off_target["X<=>Y"] for k, v in r.items()}
    xy = {k: _group(v, "X<=>Y") for k, v in r.items()}
    ex = {k: _group(v, "E<=>X") for k, v in r.items()}
    checks = {
        "a_offtarget_ratio": off["ST-T"] <= 0.5 * off["B"],
        "b_xy_stt_gt_te": xy["ST-T"] > xy["B"],
        "c_st_worst_xy": all(xy["S-T"] <= v for k, v in xy.items()),
        "d_ex_within_2": max(ex.values()) - min(ex.values()) <= 2.0,
    }
    out["3_scheme_ordering"] = {"pass": all(checks.values()), "checks": checks, "xy_off_target": off,
                                "xy_bleu": xy, "ex_bleu": ex}
    # resume recovery: compare against B's dev E<=>X BLEU at the resume point
    b, p = results["B"].curve, results["P"].curve
    b_mid = ws.plans["P"].init and ws.plans["B"].mid
    b_ref = b.value_at(DEV_EX, b_mid)
    window = 0.25 * m.scratch_steps
    regained = [s for s, v in p.metric(DEV_EX) if s <= window and v >= 0.95 * b_ref]
    b_final_xy = b.metric(DEV_XY)[-1][1]
    p_final_xy = p.metric(DEV_XY)[-1][1]
    checks = {"regain_95pct_within_25pct": bool(regained), "final_xy_gt_B": p_final_xy > b_final_xy}
    out["4_resume_recovery"] = {"pass": all(checks.values()), "checks": checks, "B_ex_at_resume": b_ref,
                                "first_regained_step": regained[0] if regained else None,
                                "P_final_xy": p_final_xy, "B_final_xy": b_final_xy}
    xy5 = {k: _group(reports[k], "X<=>Y") for k in ("B", "P", "D", "P-D", "DP")}
    ex5 = {k: _group(reports[k], "E<=>X") for k in ("B", "P", "D", "P-D", "DP")}
    margin = ws.cfg.eval.wide_margin
    checks = {
        "pd_ge_d": xy5["P-D"] >= xy5["D"],
        "pd_ge_dp": xy5["P-D"] >= xy5["DP"],
        "direct_beats_B_widely": all(xy5[k] - xy5["B"] >= margin for k in ("D", "P-D", "DP")),
        "P_best_ex": all(ex5["P"] >= v for v in ex5.values()),
    }
    out["5_direct_ft_ordering"] = {"pass": all(checks.values()), "checks": checks, "xy_bleu": xy5, "ex_bleu": ex5}
    # oracle and wrong-language renderings of the test set
    test = ws.corpus("test")
    det = majority_detector(ws.universe)
    oracle = [Hypothesis(p.src_lang, p.tgt_lang, p.tgt, p.tgt) for p in test]
    wrong = [Hypothesis(p.src_lang, p.tgt_lang, p.src, p.tgt) for p in test]
    o, w = off_target_rate(oracle, det), off_target_rate(wrong, det)
    out["6_off_target_exactness"] = {"pass": o == 0.0 and w == 1.0, "oracle": o, "wrong_language": w}
    inj = manifest["injected_noise"]
    got = tallies["train_ex"]
    again, _ = filter_corpus(ws.corpus("train_ex"), ws.cfg.filter, membership_detector(ws.universe))
    checks = {k: got[k] == inj[k] for k in ("length", "ratio", "lid")}
    checks["idempotent"] = again == ws.corpus("train_ex")
    out["8_filter_exactness"] = {"pass": all(checks.values()), "checks": checks, "tally": got, "injected": inj}
    cells = {}
    for dom in ws.cfg.domains.names:
        for d in ws.cfg.domains.directions:
            a = domain_scores[domain_plan_name("P", dom, d)]
            b_ = domain_scores[domain_plan_name("B", dom, d)]
            cells[f"{dom}/{d[0]}-{d[1]}"] = {"from_ST-T": a, "from_T-E": b_, "ok": a >= b_}
    wins = sum(c["ok"] for c in cells.values())
    need = -(-2 * len(cells) // 3)
    out["9_domain_ft"] = {"pass": wins >= need, "cells": cells, "wins": wins, "needed": need}
    return out


REPRO_ORDER = ("B", "ST-T", "S-T", "T-T", "P", "D", "P-D", "DP")


def cmd_repro(cfg: RunConfig, verbose: int = 0) -> int:
    stages = [("gen", lambda: cmd_gen(cfg, verbose)), ("filter", lambda: cmd_filter(cfg, verbose))]
    state: dict = {}
    for name, fn in stages:
        try:
            state[name] = fn()
        except Exception as e:
            raise StageError(name, e) from e
    ws = Workspace(cfg)
    results = {}
    order = list(REPRO_ORDER) + [n for n in ws.plans if n.startswith("FT[")]
    timing = {}
    for name in order:
        t0 = time.perf_counter()
        try:
            results[name] = cmd_train(cfg, name, verbose, ws)
        except Exception as e:
            raise StageError(f"train:{name}", e) from e
        timing[name] = round(time.perf_counter() - t0, 2)
    # wall-clock lives apart from metrics.json so that file stays a pure function of the config
    _write_json(ws.lay.reports / "timing.json", timing)
    try:
        from .evaluate import evaluate_hypotheses

        test = ws.corpus("test")
        reports = {}
        for name in REPRO_ORDER:
            hyps = system_hypotheses(ws, str(ws.lay.run(name) / "best.ckpt"), test)
            reports[name] = evaluate_hypotheses(hyps, ws.universe)
        domain_scores = {}
        for name in ws.plans:
            if name.startswith("FT["):
                pairs = ws.test_set(ws.plans[name].data)
                hyps = system_hypotheses(ws, str(ws.lay.run(name) / "best.ckpt"), pairs)
                domain_scores[name] = evaluate_hypotheses(hyps, ws.universe).group_bleu["X<=>Y"]
        write_figure_csvs(results, ws.lay.curves)
        crit = assess(ws, results, reports, domain_scores, state["filter"], state["gen"])
    except Exception as e:
        raise StageError("report", e) from e
    best_at = {k: results[k].best_total_step for k in REPRO_ORDER}
    metrics = {
        "systems": {k: v.to_dict() for k, v in reports.items()},
        "best_at": best_at,
        "domain_ft": domain_scores,
        "filter": state["filter"],
        "criteria": crit,
    }
    _write_json(ws.lay.reports / "metrics.json", metrics)
    table = format_table(reports, best_at=best_at)
    (ws.lay.reports / "table.txt").write_text(table + "\n")
    print(table)
    for key, c in crit.items():
        print(f"criterion {key}: {'PASS' if c['pass'] else 'FAIL'}")
    return 0 if all(c["pass"] for c in crit.values()) else 1


# -- main -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xylab", description=__doc__.splitlines()[0])
    ap.add_argument("-c", "--config", help="RunConfig file (.json or .toml); defaults when omitted")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="JSON log events on stderr")
    sub = ap.add_subparsers(dest="cmd", required=True)
    sub.add_parser("gen", help="build the universe and raw corpora")
    sub.add_parser("filter", help="filter raw training corpora")
    t = sub.add_parser("train", help="run one plan")
    t.add_argument("plan")
    e = sub.add_parser("eval", help="score a system on dev or test")
    e.add_argument("system", help="checkpoint path, plan name or 'oracle'")
    e.add_argument("--split", default="test")
    c = sub.add_parser("compare", help="paired bootstrap of systems against the first")
    c.add_argument("systems", nargs="+")
    c.add_argument("--split", default="test")
    sub.add_parser("repro", help="full pipeline and acceptance report")
    sub.add_parser("config", help="print the effective config as JSON")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        cfg = load_config(args.config)
        if args.cmd == "config":
            print(json.dumps(cfg.to_dict(), indent=1))
            return 0
        if args.cmd == "gen":
            cmd_gen(cfg, args.verbose)
        elif args.cmd == "filter":
            cmd_filter(cfg, args.verbose)
        elif args.cmd == "train":
            cmd_train(cfg, args.plan, args.verbose)
        elif args.cmd == "eval":
            cmd_eval(cfg, args.system, args.split, args.verbose)
        elif args.cmd == "compare":
            cmd_compare(cfg, args.systems, args.split, args.verbose)
        elif args.cmd == "repro":
            return 0 if cmd_repro(cfg, args.verbose) == 0 else 2
        return 0
    except ConfigError as e:
        print(f"xylab: config error: {e}", file=sys.stderr)
        return 1
    except StageError as e:
        print(f"xylab: {e}", file=sys.stderr)
        return 2
    except (OSError, CheckpointError, ValueError, KeyError) as e:
        print(f"xylab: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
