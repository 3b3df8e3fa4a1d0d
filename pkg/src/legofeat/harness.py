"""Synthetic task, WER metrics, and the modularity experiment runner.

The task: each vocabulary label owns a short acoustic template (2-4
frames of unit-normal features); an utterance is the concatenation of
its labels' templates plus Gaussian noise. Two domains differ by
template bank and label-length range. Everything is a pure function of
the configured seeds, so two runs of any experiment agree bit for bit.

The experiment suite trains the full stack twice (two model seeds) and
measures every consumer before and after swapping its frontend for the
retrained one: the modularity test. Reports mirror four patterns:
exporter depth ablation, downstream transducer stitching, cross-domain
downstream training, and deliberation over n-best versus exported
index features.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from . import pipeline as pl
from .appshell.config import RunConfig
from .appshell.counters import StepCounter
from .ctc import ctc_greedy, ctc_prefix_beam
from .lego import cost_report
from .numcore import ContractError

_DOMAIN_CODE = {"d1": 1, "d2": 2}
_SPLIT_CODE = {"train": 1, "test": 2}


# ---------------------------------------------------------------------------
# Data


class TemplateBank:
    """Per-label acoustic templates: label v -> [dur_v, d_in] matrix with
    dur_v in the configured range. A pure function of (task seed, domain,
    vocab, d_in): distinct domains get disjoint banks."""

    def __init__(self, task_seed: int, domain: str, vocab: int, d_in: int,
                 min_frames: int, max_frames: int):
        if domain not in _DOMAIN_CODE:
            raise ContractError(f"unknown domain {domain!r}")
        if not 1 <= min_frames <= max_frames:
            raise ContractError("template frame range must satisfy 1 <= min <= max")
        self.task_seed = task_seed
        self.domain = domain
        rng = np.random.default_rng(
            np.random.SeedSequence(task_seed, spawn_key=(_DOMAIN_CODE[domain],)))
        durations = rng.integers(min_frames, max_frames + 1, size=vocab)
        self.templates = {v + 1: rng.standard_normal((int(durations[v]), d_in))
                          for v in range(vocab)}

    def clean_frames(self, labels: Sequence[int]) -> np.ndarray:
        return np.concatenate([self.templates[int(v)] for v in labels], axis=0)


@dataclass(eq=False)
class Utterance:
    labels: tuple[int, ...]
    frames: np.ndarray
    domain: str


def _label_range(cfg: RunConfig, domain: str) -> tuple[int, int]:
    if domain == "d1":
        return cfg.d1_min_labels, cfg.d1_max_labels
    return cfg.d2_min_labels, cfg.d2_max_labels


def gen_dataset(cfg: RunConfig, domain: str, size: int, split: str,
                task_seed: int | None = None,
                noise_seed: int | None = None) -> list[Utterance]:
    """Deterministic synthetic dataset: labels uniform over [1, vocab]
    with per-domain length range; frames are concatenated templates plus
    sigma-scaled Gaussian noise."""
    if size < 1:
        raise ContractError("gen_dataset: size must be >= 1")
    if split not in _SPLIT_CODE:
        raise ContractError(f"gen_dataset: unknown split {split!r}")
    tseed = cfg.task_seed if task_seed is None else task_seed
    nseed = cfg.noise_seed if noise_seed is None else noise_seed
    bank = TemplateBank(tseed, domain, cfg.vocab, cfg.d_in,
                        cfg.template_min_frames, cfg.template_max_frames)
    dcode, scode = _DOMAIN_CODE[domain], _SPLIT_CODE[split]
    label_rng = np.random.default_rng(
        np.random.SeedSequence(tseed, spawn_key=(dcode, scode, 7)))
    noise_rng = np.random.default_rng(
        np.random.SeedSequence(nseed, spawn_key=(dcode, scode, 11)))
    lo, hi = _label_range(cfg, domain)
    out = []
    for _ in range(size):
        n_lab = int(label_rng.integers(lo, hi + 1))
        labels = tuple(int(x) for x in label_rng.integers(1, cfg.vocab + 1,
                                                          size=n_lab))
        clean = bank.clean_frames(labels)
        frames = clean + cfg.sigma * noise_rng.standard_normal(clean.shape)
        out.append(Utterance(labels, frames, domain))
    return out


# ---------------------------------------------------------------------------
# Metrics


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    """Levenshtein distance with unit costs."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1,
                           prev[j - 1] + (x != y)))
        prev = cur
    return prev[len(b)]


def wer(hyps: Sequence[Sequence[int]], refs: Sequence[Sequence[int]]) -> float:
    """Corpus WER percent: 100 * total edit distance / total reference
    length."""
    if len(hyps) != len(refs):
        raise ContractError(f"wer: {len(hyps)} hypotheses vs {len(refs)} references")
    total_ref = sum(len(r) for r in refs)
    if total_ref == 0:
        raise ContractError("wer: empty reference corpus")
    total_edit = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
    return 100.0 * total_edit / total_ref


def oracle_wer(nbests, refs: Sequence[Sequence[int]]) -> float:
    """Corpus WER when each utterance picks its closest-to-reference
    hypothesis. Accepts hypothesis objects with ``.labels`` or raw label
    sequences."""
    if len(nbests) != len(refs):
        raise ContractError("oracle_wer: count mismatch")
    total_ref = sum(len(r) for r in refs)
    if total_ref == 0:
        raise ContractError("oracle_wer: empty reference corpus")
    total = 0
    for nbest, ref in zip(nbests, refs):
        hyps = [list(getattr(h, "labels", h)) for h in nbest]
        if not hyps:
            raise ContractError("oracle_wer: empty hypothesis list")
        total += min(edit_distance(h, ref) for h in hyps)
    return 100.0 * total / total_ref


# ---------------------------------------------------------------------------
# Modularity protocol


@dataclass
class ModularityReport:
    """Before/after WER of one consumer under a frontend swap, both
    measured on the identical test set and decode settings."""
    variant: str
    downstream_id: str
    frontend_normal_id: str
    frontend_stitched_id: str
    wer_normal: float
    wer_stitched: float

    @property
    def gap(self) -> float:
        return self.wer_stitched - self.wer_normal

    def as_dict(self) -> dict:
        return {"variant": self.variant, "downstream_id": self.downstream_id,
                "frontend_normal_id": self.frontend_normal_id,
                "frontend_stitched_id": self.frontend_stitched_id,
                "wer_normal": self.wer_normal,
                "wer_stitched": self.wer_stitched, "gap": self.gap}


def frontend_id(frontend) -> str:
    """Stable short identifier from the digests of everything behind the
    frontend's interface."""
    if isinstance(frontend, tuple):
        return "+".join(frontend_id(f) for f in frontend if f is not None)
    parts = []
    for attr in ("base", "exporter", "first_pass"):
        model = getattr(frontend, attr, None)
        if model is not None:
            parts.append(model.digest())
    blob = "|".join([type(frontend).__name__] + parts).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def consumer_id(consumer) -> str:
    return consumer.digest()[:12]


def _decode(consumer, frontend, test_set: Sequence[Utterance]):
    frames = [u.frames for u in test_set]
    if isinstance(consumer, pl.DeliberationConsumer):
        if isinstance(frontend, tuple):
            text, audio = frontend
        else:
            text, audio = frontend, None
        return consumer.transcribe(text, frames, audio_frontend=audio)
    return consumer.transcribe(frontend, frames)


def evaluate(consumer, frontend, test_set: Sequence[Utterance],
             beam_size: int | None = None) -> dict:
    """Deterministic metrics for one consumer+frontend on one test set:
    ``wer`` and ``loss`` always; with a beam, 1-best ``wer`` plus
    ``oracle_wer``."""
    refs = [list(u.labels) for u in test_set]
    frames = [u.frames for u in test_set]
    if isinstance(consumer, pl.DeliberationConsumer):
        text, audio = frontend if isinstance(frontend, tuple) else (frontend, None)
        loss = consumer.eval_loss(text, frames, refs, audio_frontend=audio)
    else:
        loss = consumer.eval_loss(frontend, frames, refs)
    if beam_size is not None:
        nbests = consumer.transcribe(frontend, frames, beam_size=beam_size)
        one_best = [list(nb.best().labels) for nb in nbests]
        return {"wer": wer(one_best, refs),
                "oracle_wer": oracle_wer(nbests, refs), "loss": loss}
    hyps = _decode(consumer, frontend, test_set)
    return {"wer": wer(hyps, refs), "loss": loss}


def run_modularity_test(consumer, frontend_v1, frontend_v2,
                        test_set: Sequence[Utterance]) -> ModularityReport:
    """Evaluate, swap the frontend for an independently trained one,
    evaluate again. No parameters change anywhere."""
    refs = [list(u.labels) for u in test_set]
    wer_normal = wer(_decode(consumer, frontend_v1, test_set), refs)
    wer_stitched = wer(_decode(consumer, frontend_v2, test_set), refs)
    return ModularityReport(
        variant=type(consumer).__name__,
        downstream_id=consumer_id(consumer),
        frontend_normal_id=frontend_id(frontend_v1),
        frontend_stitched_id=frontend_id(frontend_v2),
        wer_normal=wer_normal, wer_stitched=wer_stitched)


# ---------------------------------------------------------------------------
# Trained stack (one seed triple)


@dataclass(frozen=True)
class SeedTriple:
    task: int
    noise: int
    model: int


REFERENCE_TRIPLES = (SeedTriple(1, 2, 3), SeedTriple(11, 12, 13),
                     SeedTriple(21, 22, 23))

# model-seed offsets per stage; +1000 marks the independently
# initialized v2 frontend stack used by the modularity tests
_V2 = 1000
_STAGE = {"base": 0, "exporter": 10, "exporter_depth2": 20, "first_pass": 30,
          "ds_d1": 40, "ds_d2": 50, "las": 60, "delib_text": 70,
          "delib_audio": 80}


class TrainedStack:
    """Everything one seed triple's experiments share: datasets, both
    frontend stacks (v1 and v2), consumers, and feature caches. All
    members build lazily on first use."""

    def __init__(self, cfg: RunConfig, triple: SeedTriple | None = None,
                 counter: StepCounter | None = None):
        cfg = RunConfig(**vars(cfg))
        if triple is not None:
            cfg.task_seed, cfg.noise_seed, cfg.model_seed = (
                triple.task, triple.noise, triple.model)
        self.cfg = cfg.validate()
        self.counter = counter if counter is not None else StepCounter()
        self._enc: dict = {}
        self._lego_idx: dict = {}
        self._nbest: dict = {}

    def _seed(self, stage: str, v2: bool = False) -> int:
        return self.cfg.model_seed + _STAGE[stage] + (_V2 if v2 else 0)

    # -- datasets

    @cached_property
    def train_d1(self) -> list[Utterance]:
        return gen_dataset(self.cfg, "d1", self.cfg.n_train_per_domain, "train")

    @cached_property
    def train_d2(self) -> list[Utterance]:
        return gen_dataset(self.cfg, "d2", self.cfg.n_train_per_domain, "train")

    @cached_property
    def train_mix(self) -> list[Utterance]:
        return self.train_d1 + self.train_d2

    @cached_property
    def test_d1(self) -> list[Utterance]:
        return gen_dataset(self.cfg, "d1", self.cfg.n_test, "test")

    @cached_property
    def test_d2(self) -> list[Utterance]:
        return gen_dataset(self.cfg, "d2", self.cfg.n_test, "test")

    def _dataset(self, key: str) -> list[Utterance]:
        return getattr(self, key)

    # -- stage 1

    def _train_base(self, v2: bool) -> pl.BaseModel:
        seed = self._seed("base", v2)
        with self.counter.timed("train_base"):
            model = pl.train_base(self.cfg, self.train_mix, model_seed=seed,
                                  sample_seed=seed + 7, counter=self.counter)
        model.freeze()
        return model

    @cached_property
    def base(self) -> pl.BaseModel:
        return self._train_base(v2=False)

    @cached_property
    def base_v2(self) -> pl.BaseModel:
        return self._train_base(v2=True)

    def enc_cache(self, v2: bool, dataset_key: str) -> list[np.ndarray]:
        key = (v2, dataset_key)
        if key not in self._enc:
            base = self.base_v2 if v2 else self.base
            with self.counter.timed("encode_dataset"):
                self._enc[key] = pl.encode_dataset(base, self._dataset(dataset_key))
        return self._enc[key]

    # -- stage 2

    def _train_exporter(self, v2: bool, blocks: int | None = None,
                        stage: str = "exporter") -> pl.ExporterModel:
        seed = self._seed(stage, v2)
        base = self.base_v2 if v2 else self.base
        with self.counter.timed("train_exporter"):
            return pl.train_exporter(self.cfg, base, self.train_mix,
                                     model_seed=seed, sample_seed=seed + 7,
                                     blocks=blocks, counter=self.counter,
                                     base_enc=self.enc_cache(v2, "train_mix"))

    @cached_property
    def exporter(self) -> pl.ExporterModel:
        model = self._train_exporter(v2=False)
        model.freeze()
        return model

    @cached_property
    def exporter_v2(self) -> pl.ExporterModel:
        model = self._train_exporter(v2=True)
        model.freeze()
        return model

    @cached_property
    def exporter_depth2(self) -> pl.ExporterModel:
        model = self._train_exporter(v2=False, blocks=2, stage="exporter_depth2")
        model.freeze()
        return model

    def _train_first_pass(self, v2: bool) -> pl.FirstPass:
        seed = self._seed("first_pass", v2)
        base = self.base_v2 if v2 else self.base
        with self.counter.timed("train_first_pass"):
            model = pl.train_first_pass(self.cfg, base, self.train_d1,
                                        model_seed=seed, sample_seed=seed + 7,
                                        counter=self.counter,
                                        base_enc=self.enc_cache(v2, "train_d1"))
        model.freeze()
        return model

    @cached_property
    def first_pass(self) -> pl.FirstPass:
        return self._train_first_pass(v2=False)

    @cached_property
    def first_pass_v2(self) -> pl.FirstPass:
        return self._train_first_pass(v2=True)

    # -- frontends

    @cached_property
    def cont(self) -> pl.ContinuousFrontend:
        return pl.ContinuousFrontend(self.base)

    @cached_property
    def cont_v2(self) -> pl.ContinuousFrontend:
        return pl.ContinuousFrontend(self.base_v2)

    @cached_property
    def lego(self) -> pl.LegoFrontend:
        return pl.LegoFrontend(self.base, self.exporter)

    @cached_property
    def lego_v2(self) -> pl.LegoFrontend:
        return pl.LegoFrontend(self.base_v2, self.exporter_v2)

    @cached_property
    def nbest(self) -> pl.NBestFrontend:
        return pl.NBestFrontend(self.base, self.first_pass, self.cfg.nbest_n)

    @cached_property
    def nbest_v2(self) -> pl.NBestFrontend:
        return pl.NBestFrontend(self.base_v2, self.first_pass_v2, self.cfg.nbest_n)

    def lego_cache(self, v2: bool, dataset_key: str) -> list[np.ndarray]:
        key = (v2, dataset_key)
        if key not in self._lego_idx:
            frontend = self.lego_v2 if v2 else self.lego
            with self.counter.timed("export_lego"):
                self._lego_idx[key] = pl.lego_dataset(frontend, self._dataset(dataset_key))
        return self._lego_idx[key]

    def nbest_cache(self, v2: bool, dataset_key: str) -> list[list[list[int]]]:
        key = (v2, dataset_key)
        if key not in self._nbest:
            frontend = self.nbest_v2 if v2 else self.nbest
            with self.counter.timed("first_pass_nbest"):
                self._nbest[key] = pl.nbest_dataset(frontend, self._dataset(dataset_key))
        return self._nbest[key]

    # -- consumers

    @cached_property
    def ds_d1(self) -> pl.TransducerConsumer:
        seed = self._seed("ds_d1")
        with self.counter.timed("train_downstream"):
            return pl.train_lego_transducer(
                self.cfg, self.lego, self.train_d1, model_seed=seed,
                sample_seed=seed + 7, counter=self.counter,
                cached_idx=self.lego_cache(False, "train_d1"))

    @cached_property
    def ds_d2(self) -> pl.TransducerConsumer:
        seed = self._seed("ds_d2")
        with self.counter.timed("train_downstream"):
            return pl.train_lego_transducer(
                self.cfg, self.lego, self.train_d2, model_seed=seed,
                sample_seed=seed + 7, counter=self.counter,
                cached_idx=self.lego_cache(False, "train_d2"))

    @cached_property
    def las(self) -> pl.AttentionConsumer:
        seed = self._seed("las")
        with self.counter.timed("train_attention"):
            return pl.train_lego_attention(
                self.cfg, self.lego, self.train_d1, model_seed=seed,
                sample_seed=seed + 7, counter=self.counter,
                cached_idx=self.lego_cache(False, "train_d1"))

    @cached_property
    def delib_text(self) -> pl.DeliberationConsumer:
        seed = self._seed("delib_text")
        with self.counter.timed("train_deliberation"):
            return pl.train_deliberation(
                self.cfg, self.nbest, self.train_d1, model_seed=seed,
                sample_seed=seed + 7, use_audio=False, counter=self.counter,
                cached_hyps=self.nbest_cache(False, "train_d1"))

    @cached_property
    def delib_audio(self) -> pl.DeliberationConsumer:
        seed = self._seed("delib_audio")
        with self.counter.timed("train_deliberation"):
            return pl.train_deliberation(
                self.cfg, self.nbest, self.train_d1, model_seed=seed,
                sample_seed=seed + 7, use_audio=True,
                audio_frontend=self.cont, counter=self.counter,
                cached_hyps=self.nbest_cache(False, "train_d1"),
                cached_audio=self.enc_cache(False, "train_d1"))

    def continuous_consumer(self) -> pl.ContinuousConsumer:
        return pl.ContinuousConsumer(self.base)


# ---------------------------------------------------------------------------
# Table analogues


def _ctc_log_probs(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    z = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    return logits - z


def run_table1(stack: TrainedStack) -> list[dict]:
    """Exporter depth ablation: decode the exporter's own per-frame
    classification output (greedy, prefix beam, beam oracle)."""
    cfg = stack.cfg
    refs = [list(u.labels) for u in stack.test_d1]
    rows = []
    for blocks, exporter in ((1, stack.exporter), (2, stack.exporter_depth2)):
        greedy_hyps, beam_one, beam_all = [], [], []
        for utt in stack.test_d1:
            lp = _ctc_log_probs(exporter.logits_exact(stack.base.encode(utt.frames)))
            greedy_hyps.append(ctc_greedy(lp))
            beam = ctc_prefix_beam(lp, cfg.beam_size)
            beam_one.append(list(beam[0][0]))
            beam_all.append([list(lab) for lab, _ in beam])
        rows.append({
            "exporter_blocks": blocks,
            "right_context_ms": stack.base.right_context_ms() + exporter.right_context_ms(),
            "greedy_wer": wer(greedy_hyps, refs),
            "beam_wer": wer(beam_one, refs),
            "oracle_wer": oracle_wer(beam_all, refs),
        })
    return rows


def run_table2(stack: TrainedStack) -> dict:
    """Downstream transducer modularity: continuous features break under
    a frontend swap, exported index features survive it."""
    continuous = run_modularity_test(stack.continuous_consumer(),
                                     stack.cont, stack.cont_v2, stack.test_d1)
    lego = run_modularity_test(stack.ds_d1, stack.lego, stack.lego_v2,
                               stack.test_d1)
    samples = _decode(stack.continuous_consumer(), stack.cont_v2,
                      stack.test_d1[:3])
    return {"continuous": continuous, "lego": lego,
            "stitched_continuous_samples": [
                {"ref": list(u.labels), "hyp": h}
                for u, h in zip(stack.test_d1[:3], samples)]}


def run_table3(stack: TrainedStack) -> dict:
    """Cross-domain downstream training: consumer trained on domain 2
    over a mixed-domain frontend, then the frontend swap."""
    report = run_modularity_test(stack.ds_d2, stack.lego, stack.lego_v2,
                                 stack.test_d2)
    if report.wer_normal > 0:
        relative = 100.0 * report.gap / report.wer_normal
    else:
        relative = 0.0 if report.wer_stitched == 0 else float("inf")
    return {"lego_d2": report, "relative_increase_pct": relative}


def run_table4(stack: TrainedStack) -> dict:
    """Deliberation comparison: n-best text, n-best plus audio
    attention, and attention over exported index features, each under
    the modularity test."""
    nbest_text = run_modularity_test(stack.delib_text, stack.nbest,
                                     stack.nbest_v2, stack.test_d1)
    nbest_audio = run_modularity_test(stack.delib_audio,
                                      (stack.nbest, stack.cont),
                                      (stack.nbest_v2, stack.cont_v2),
                                      stack.test_d1)
    lego_att = run_modularity_test(stack.las, stack.lego, stack.lego_v2,
                                   stack.test_d1)
    return {"nbest_text": nbest_text, "nbest_audio": nbest_audio,
            "lego_attention": lego_att,
            "audio_ablation_gap": nbest_text.wer_normal - nbest_audio.wer_normal}


def run_cost(cfg: RunConfig) -> dict:
    report = cost_report(cfg.cost_n, cfg.cost_u, cfg.cost_t, cfg.cost_k,
                         cfg.cost_e1, cfg.cost_e2)
    return report.as_dict()


# ---------------------------------------------------------------------------
# Suite


@dataclass
class ExperimentRecord:
    name: str
    seeds: dict
    metrics: dict = field(default_factory=dict)
    error: str | None = None

    def to_line(self) -> str:
        parts = [f"experiment={self.name}"]
        parts += [f"{k}={v}" for k, v in self.seeds.items()]
        if self.error is not None:
            parts.append(f"error={self.error!r}")
        parts += [f"{k}={_fmt(v)}" for k, v in sorted(_flatten(self.metrics).items())]
        return " ".join(parts)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple, dict)):
        return repr(v).replace(" ", "")
    return str(v)


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, ModularityReport):
            v = v.as_dict()
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass
class ReportBundle:
    records: list[ExperimentRecord]
    summary_text: str
    counters: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(r.error is None for r in self.records)

    def record(self, name: str) -> ExperimentRecord:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_text(self) -> str:
        return "".join(r.to_line() + "\n" for r in self.records)


def _summary(records: list[ExperimentRecord]) -> str:
    lines = []
    by_name = {r.name: r for r in records}

    def mod_line(label: str, rep) -> str:
        d = rep.as_dict() if isinstance(rep, ModularityReport) else rep
        return (f"  {label:<22} {d['wer_normal']:6.2f} -> {d['wer_stitched']:6.2f}"
                f"   (gap {d['gap']:+.2f})")

    r = by_name.get("table1")
    if r is not None:
        lines.append("exporter depth ablation, WER % (greedy / beam / beam oracle)")
        if r.error:
            lines.append(f"  FAILED: {r.error}")
        else:
            for row in r.metrics["rows"]:
                lines.append(f"  blocks={row['exporter_blocks']}  "
                             f"right={row['right_context_ms']:.0f}ms  "
                             f"greedy {row['greedy_wer']:5.2f}  "
                             f"beam {row['beam_wer']:5.2f}  "
                             f"oracle {row['oracle_wer']:5.2f}")
        lines.append("")
    r = by_name.get("table2")
    if r is not None:
        lines.append("downstream transducer modularity, WER % normal -> stitched")
        if r.error:
            lines.append(f"  FAILED: {r.error}")
        else:
            lines.append(mod_line("continuous features", r.metrics["continuous"]))
            lines.append(mod_line("exported indices", r.metrics["lego"]))
        lines.append("")
    r = by_name.get("table3")
    if r is not None:
        lines.append("cross-domain downstream (domain 2), WER % normal -> stitched")
        if r.error:
            lines.append(f"  FAILED: {r.error}")
        else:
            lines.append(mod_line("exported indices", r.metrics["lego_d2"]))
            lines.append(f"  relative increase: "
                         f"{r.metrics['relative_increase_pct']:.2f}%")
        lines.append("")
    r = by_name.get("table4")
    if r is not None:
        lines.append("deliberation variants, WER % normal -> stitched")
        if r.error:
            lines.append(f"  FAILED: {r.error}")
        else:
            lines.append(mod_line("n-best text", r.metrics["nbest_text"]))
            lines.append(mod_line("n-best + audio", r.metrics["nbest_audio"]))
            lines.append(mod_line("exported indices", r.metrics["lego_attention"]))
            lines.append(f"  audio ablation gap: "
                         f"{r.metrics['audio_ablation_gap']:+.2f}")
        lines.append("")
    r = by_name.get("cost")
    if r is not None:
        lines.append("first-pass cost accounting (production-scale constants)")
        if r.error:
            lines.append(f"  FAILED: {r.error}")
        else:
            m = r.metrics
            lines.append(f"  n-best rows {m['nbest_rows']} vs exported rows "
                         f"{m['lego_rows']}  (reduction {m['row_reduction_pct']:.2f}%)")
            lines.append(f"  embedding depths {m['nbest_depth']} vs {m['lego_depth']}")
            lines.append(f"  sequential steps: export {m['export_sequential_steps']}, "
                         f"first pass {m['first_pass_sequential_steps']}")
        lines.append("")
    return "\n".join(lines)


def run_experiment_suite(cfg: RunConfig, out_dir: str | None = None,
                         counter: StepCounter | None = None) -> ReportBundle:
    """Run the selected experiments for the configured seed triple. A
    sub-run failure is recorded as a failure marker, not raised."""
    counter = counter if counter is not None else StepCounter()
    selection = [s.strip() for s in cfg.experiments.split(",") if s.strip()]
    seeds = {"task_seed": cfg.task_seed, "noise_seed": cfg.noise_seed,
             "model_seed": cfg.model_seed}
    stack = TrainedStack(cfg, counter=counter)
    runners = {
        "table1": lambda: {"rows": run_table1(stack)},
        "table2": lambda: run_table2(stack),
        "table3": lambda: run_table3(stack),
        "table4": lambda: run_table4(stack),
        "cost": lambda: run_cost(cfg),
    }
    records = []
    for name in selection:
        if name not in runners:
            records.append(ExperimentRecord(name, seeds,
                                            error=f"unknown experiment {name!r}"))
            continue
        t0 = time.perf_counter()
        try:
            metrics = runners[name]()
            metrics["wall_seconds"] = time.perf_counter() - t0
            records.append(ExperimentRecord(name, seeds, metrics))
        except Exception as exc:
            records.append(ExperimentRecord(name, seeds, error=str(exc)))
    bundle = ReportBundle(records, _summary(records), counter.as_dict())
    if out_dir is not None:
        import os
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "records.txt"), "w", encoding="utf-8") as f:
            f.write(bundle.to_text())
        with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as f:
            f.write(bundle.summary_text)
        from .appshell.config import save_config
        save_config(os.path.join(out_dir, "config.txt"), cfg)
    return bundle
