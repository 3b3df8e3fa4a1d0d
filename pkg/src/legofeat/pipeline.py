"""Staged training and stitching.

Three stages, each freezing everything before it:

1. base: streaming encoder + transducer decoder, trained end to end.
2. exporter: a small encoder with a per-frame classification head on top
   of the frozen base encoder; its sorted top-K indices are the
   exported discrete features.
3. downstream consumers: models that read a frontend's output through a
   narrow schema (continuous frames, exported index rows, or n-best
   label lists) and never look behind it.

Because consumers only see the schema, a frontend can be swapped for a
retrained one ("stitching") without touching consumer weights; schema
mismatches fail loudly. All evaluation-time feature extraction runs on
the prefix-stable exact path, so exports are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .appshell import container
from .appshell.config import RunConfig
from .appshell.counters import StepCounter
from .ctc import ctc_loss
from .lego import LegoSequence, embed_nbest, export_lego, import_lego
from .nnet import (CrossAttention, EncoderStack, glorot,
                   stack_receptive_field, valid_mask)
from .numcore import Adam, ContractError, ParamStore, Tensor
from .transducer import NBestList, TransducerDecoder

_NEG_INF = -np.inf


class SchemaMismatchError(ContractError):
    """A consumer was wired to a frontend with a different output schema."""


@dataclass(frozen=True)
class FrontendSchema:
    kind: str
    shape: tuple[int, ...]


def _require_schema(got: FrontendSchema, want: FrontendSchema, who: str) -> None:
    if got != want:
        raise SchemaMismatchError(f"{who} expects {want}, got {got}")


def base_windows(cfg: RunConfig) -> list[tuple[int | None, int]]:
    return ([(cfg.left, 0)] * cfg.base_causal_blocks
            + [(cfg.left, cfg.context_right)] * cfg.base_context_blocks)


def exporter_windows(cfg: RunConfig, blocks: int | None = None) -> list[tuple[int | None, int]]:
    return [(cfg.left, cfg.context_right)] * (blocks or cfg.exporter_blocks)


def downstream_windows(cfg: RunConfig) -> list[tuple[int | None, int]]:
    # consumers stay causal so stitching never adds lookahead
    return [(cfg.left, 0)] * cfg.downstream_blocks


def pad_frames(arrs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(a) for a in arrs], dtype=np.int64)
    t_max = int(lengths.max())
    out = np.zeros((len(arrs), t_max) + arrs[0].shape[1:], dtype=np.float64)
    for i, a in enumerate(arrs):
        out[i, : len(a)] = a
    return out, lengths


def pad_indices(arrs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(a) for a in arrs], dtype=np.int64)
    t_max = int(lengths.max())
    out = np.zeros((len(arrs), t_max, arrs[0].shape[1]), dtype=np.int64)
    for i, a in enumerate(arrs):
        out[i, : len(a)] = a
    return out, lengths


# ---------------------------------------------------------------------------
# Stage 1: base model


class BaseModel:
    """Streaming encoder plus transducer decoder (the first pass)."""

    def __init__(self, cfg: RunConfig, seed: int):
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.encoder = EncoderStack(self.store, "enc", cfg.d_in, cfg.d_model,
                                    cfg.heads, base_windows(cfg), rng)
        self.decoder = TransducerDecoder(self.store, "dec", cfg.d_model,
                                         cfg.vocab, cfg.d_emb, cfg.d_state,
                                         cfg.d_joint, rng)

    def encode(self, frames: np.ndarray) -> np.ndarray:
        """One utterance, exact path: [T, d_in] -> [T, d_model]."""
        return self.encoder.forward_exact(frames)

    def loss(self, frames_pad: np.ndarray, lengths, targets) -> Tensor:
        enc = self.encoder.forward(Tensor(frames_pad), lengths)
        return self.decoder.loss(enc, lengths, targets)

    def right_context_ms(self) -> float:
        _, right = stack_receptive_field(self.encoder)
        return right * self.cfg.frame_ms

    def digest(self) -> str:
        return container.digest(dict(self.store.items()))

    def freeze(self) -> None:
        self.store.freeze_all()

    def save(self, path: str) -> None:
        container.save_checkpoint(path, dict(self.store.items()))

    @classmethod
    def load(cls, cfg: RunConfig, path: str) -> "BaseModel":
        model = cls(cfg, seed=0)
        _restore(model.store, container.load_checkpoint(path))
        return model


def _restore(store: ParamStore, entries: dict[str, np.ndarray]) -> None:
    names = store.names()
    if set(names) != set(entries):
        missing = set(names) - set(entries)
        extra = set(entries) - set(names)
        raise ContractError(
            f"checkpoint does not match model: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}")
    for name in names:
        t = store[name]
        arr = entries[name].astype(np.float64)
        if arr.shape != t.shape:
            raise ContractError(f"checkpoint entry {name}: shape {arr.shape}, "
                                f"model has {t.shape}")
        t.data = arr


# ---------------------------------------------------------------------------
# Stage 2: exporter


class ExporterModel:
    """Encoder blocks plus per-frame vocabulary head over frozen base
    features; its sorted top-K logit indices are the exported features."""

    def __init__(self, cfg: RunConfig, seed: int, blocks: int | None = None):
        self.cfg = cfg
        self.blocks = blocks or cfg.exporter_blocks
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.stack = EncoderStack(self.store, "exp", cfg.d_model, cfg.d_model,
                                  cfg.heads, exporter_windows(cfg, self.blocks), rng)
        self.store.add("head.w", glorot(rng, cfg.d_model, cfg.vocab + 1))
        self.store.add("head.b", np.zeros(cfg.vocab + 1))

    def logits_batch(self, base_enc: Tensor, lengths) -> Tensor:
        h = self.stack.forward(base_enc, lengths)
        return nc.add_bias(nc.matmul(h, self.store["head.w"]), self.store["head.b"])

    def logits_exact(self, base_enc: np.ndarray) -> np.ndarray:
        from .nnet import _rowdot
        h = self.stack.forward_exact(base_enc)
        return _rowdot(h, self.store["head.w"].data) + self.store["head.b"].data

    def export(self, base_enc: np.ndarray, k: int | None = None) -> LegoSequence:
        return export_lego(self.logits_exact(base_enc), k or self.cfg.k_top)

    def right_context_ms(self) -> float:
        _, right = stack_receptive_field(self.stack)
        return right * self.cfg.frame_ms

    def digest(self) -> str:
        return container.digest(dict(self.store.items()))

    def freeze(self) -> None:
        self.store.freeze_all()

    def save(self, path: str) -> None:
        container.save_checkpoint(path, dict(self.store.items()))

    @classmethod
    def load(cls, cfg: RunConfig, path: str, blocks: int | None = None) -> "ExporterModel":
        model = cls(cfg, seed=0, blocks=blocks)
        _restore(model.store, container.load_checkpoint(path))
        return model


class FirstPass:
    """Separate transducer decoder head on the frozen base encoder; its
    beam output is the n-best frontend's payload."""

    def __init__(self, cfg: RunConfig, seed: int):
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.decoder = TransducerDecoder(self.store, "fp", cfg.d_model,
                                         cfg.vocab, cfg.d_emb, cfg.d_state,
                                         cfg.d_joint, rng)

    def digest(self) -> str:
        return container.digest(dict(self.store.items()))

    def freeze(self) -> None:
        self.store.freeze_all()

    def save(self, path: str) -> None:
        container.save_checkpoint(path, dict(self.store.items()))

    @classmethod
    def load(cls, cfg: RunConfig, path: str) -> "FirstPass":
        model = cls(cfg, seed=0)
        _restore(model.store, container.load_checkpoint(path))
        return model


# ---------------------------------------------------------------------------
# Frontends


class ContinuousFrontend:
    """Raw base encoder frames: the non-modular interface."""

    def __init__(self, base: BaseModel):
        self.base = base
        self.schema = FrontendSchema("continuous", (base.cfg.d_model,))

    def features(self, frames: np.ndarray) -> np.ndarray:
        return self.base.encode(frames)


class LegoFrontend:
    """Exported sorted top-K index rows. Export is one frame-parallel
    map: an attached StepCounter records zero sequential steps."""

    def __init__(self, base: BaseModel, exporter: ExporterModel,
                 k: int | None = None):
        self.base = base
        self.exporter = exporter
        self.k = k or exporter.cfg.k_top
        self.schema = FrontendSchema("lego", (self.k, base.cfg.vocab + 1))
        self.counter: StepCounter | None = None

    def indices(self, frames: np.ndarray) -> np.ndarray:
        seq = self.exporter.export(self.base.encode(frames), self.k)
        if self.counter is not None:
            self.counter.add("export_sequential_steps", 0)
            self.counter.add("export_frame_maps", seq.t)
        return seq.indices


class NBestFrontend:
    """Top-n first-pass hypotheses (label lists). Decoding is serial in
    frames and emitted labels; an attached StepCounter records that."""

    def __init__(self, base: BaseModel, first_pass: FirstPass, n: int):
        self.base = base
        self.first_pass = first_pass
        self.n = n
        self.schema = FrontendSchema("nbest", (n, base.cfg.vocab))
        self.counter: StepCounter | None = None

    def hypotheses(self, frames: np.ndarray) -> list[list[int]]:
        enc = Tensor(self.base.encode(frames))
        nbest = self.first_pass.decoder.beam(
            enc, beam_size=self.n,
            max_symbols_per_frame=self.base.cfg.max_symbols_per_frame,
            max_labels=self.base.cfg.u_max)
        hyps = [list(h.labels) for h in nbest]
        if self.counter is not None:
            self.counter.add("first_pass_sequential_steps",
                             len(frames) + len(hyps[0]))
            self.counter.add("first_pass_emitted_tokens", len(hyps[0]))
        while len(hyps) < self.n:
            hyps.append([])
        return hyps[: self.n]


# ---------------------------------------------------------------------------
# Attention decoder head (shared by attention and deliberation consumers)


def sinusoid_positions(m: int, d: int) -> np.ndarray:
    """Fixed sin/cos position matrix [m, d]; pairs of dimensions share a
    geometric frequency ladder."""
    pos = np.arange(m, dtype=np.float64)[:, None]
    i = np.arange((d + 1) // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    out = np.zeros((m, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : d // 2])
    return out


class AttentionDecoderHead:
    """Label-synchronous decoder: a recurrent state queries one
    cross-attention per memory; state and contexts feed the output
    layer, and the attended context feeds back into the next state so
    the decoder knows where it last looked. Each memory is layer
    normalized (frozen upstream encoders have arbitrary scale) and then
    offset by fixed sinusoids so attention can address it by position.
    Class 0 is unused at the output, vocab+1 is the end symbol."""

    def __init__(self, store: ParamStore, prefix: str, vocab: int, d_emb: int,
                 d_state: int, memories: Sequence[tuple[str, int]], d_att: int,
                 rng: np.random.Generator):
        self.vocab = vocab
        self.eos = vocab + 1
        self.prefix = prefix
        self.store = store
        self.d_state = d_state
        self.attns = [(name, CrossAttention(store, f"{prefix}.att.{name}",
                                            d_state, d_mem, d_att, rng))
                      for name, d_mem in memories]
        for name, d_mem in memories:
            store.add(f"{prefix}.att.{name}.ln.g", np.ones(d_mem))
            store.add(f"{prefix}.att.{name}.ln.b", np.zeros(d_mem))
        d_ctx = d_att * len(self.attns)
        store.add(f"{prefix}.emb", glorot(rng, vocab + 1, d_emb))
        store.add(f"{prefix}.we", glorot(rng, d_emb, d_state))
        store.add(f"{prefix}.wh", glorot(rng, d_state, d_state))
        store.add(f"{prefix}.wc", glorot(rng, d_ctx, d_state))
        store.add(f"{prefix}.b", np.zeros(d_state))
        store.add(f"{prefix}.wout", glorot(rng, d_state + d_ctx, vocab + 2))
        store.add(f"{prefix}.bout", np.zeros(vocab + 2))

    def _p(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}.{name}"]

    def _initial_state(self, batch: int) -> Tensor:
        bos = np.zeros(batch, dtype=np.int64)
        pre = nc.matmul(nc.gather_rows(self._p("emb"), bos), self._p("we"))
        return nc.tanh(nc.add_bias(pre, self._p("b")))

    def _next_state(self, state: Tensor, ctx: Tensor,
                    tokens: np.ndarray) -> Tensor:
        pre = nc.add(nc.matmul(nc.gather_rows(self._p("emb"), tokens),
                               self._p("we")),
                     nc.add(nc.matmul(state, self._p("wh")),
                            nc.matmul(ctx, self._p("wc"))))
        return nc.tanh(nc.add_bias(pre, self._p("b")))

    def _contexts(self, state: Tensor, proj: list) -> Tensor:
        parts = [att.attend(state, keys, vals, mask)
                 for (_, att), (keys, vals, mask) in zip(self.attns, proj)]
        return parts[0] if len(parts) == 1 else nc.concat(parts, axis=1)

    def _step_logits(self, state: Tensor, ctx: Tensor) -> Tensor:
        feat = nc.concat([state, ctx], axis=1)
        return nc.add_bias(nc.matmul(feat, self._p("wout")), self._p("bout"))

    def _project(self, memories: Sequence[tuple[Tensor, np.ndarray]]) -> list:
        if len(memories) != len(self.attns):
            raise ContractError(
                f"{self.prefix}: expected {len(self.attns)} memories, "
                f"got {len(memories)}")
        proj = []
        for (name, att), (mem, mask) in zip(self.attns, memories):
            b, m, d = mem.shape
            mem = nc.layer_norm(mem, self._p(f"att.{name}.ln.g"),
                                self._p(f"att.{name}.ln.b"))
            pos = np.broadcast_to(sinusoid_positions(m, d), (b, m, d)).copy()
            mem = nc.add(mem, Tensor(pos))
            keys, vals = att.project_memory(mem)
            proj.append((keys, vals, mask))
        return proj

    def loss(self, memories: Sequence[tuple[Tensor, np.ndarray]], targets) -> Tensor:
        """Teacher-forced mean cross entropy per decoded symbol (labels
        then end-of-sequence)."""
        targets = [[int(x) for x in t] for t in targets]
        b = memories[0][0].shape[0]
        u_max = max((len(t) for t in targets), default=0)
        steps = u_max + 1
        tok_in = np.zeros((b, u_max), dtype=np.int64)
        tgt = np.zeros((b, steps), dtype=np.int64)
        valid = np.zeros((b, steps), dtype=bool)
        for i, t in enumerate(targets):
            tok_in[i, : len(t)] = t
            tgt[i, : len(t)] = t
            tgt[i, len(t)] = self.eos
            valid[i, : len(t) + 1] = True

        proj = self._project(memories)
        state = self._initial_state(b)
        logit_steps = []
        for j in range(steps):
            ctx = self._contexts(state, proj)
            logit_steps.append(self._step_logits(state, ctx))
            if j < steps - 1:
                state = self._next_state(state, ctx, tok_in[:, j])
        logits = nc.stack_steps(logit_steps, axis=1)
        lp = nc.log_softmax(logits, axis=-1)
        pick = np.zeros((b, steps, self.vocab + 2))
        bi = np.arange(b)[:, None]
        si = np.arange(steps)[None, :]
        pick[bi, si, tgt] = valid.astype(np.float64)
        return nc.scale(nc.sum_all(nc.mul(lp, Tensor(-pick))),
                        1.0 / max(valid.sum(), 1))

    def greedy_batch(self, memories: Sequence[tuple[Tensor, np.ndarray]],
                     max_len: int) -> list[list[int]]:
        b = memories[0][0].shape[0]
        proj = self._project(memories)
        state = self._initial_state(b)
        done = np.zeros(b, dtype=bool)
        out: list[list[int]] = [[] for _ in range(b)]
        for _ in range(max_len):
            ctx = self._contexts(state, proj)
            logits = self._step_logits(state, ctx).data.copy()
            logits[:, 0] = _NEG_INF
            tok = np.argmax(logits, axis=1)
            ended = tok == self.eos
            for i in np.nonzero(~done & ~ended)[0]:
                out[i].append(int(tok[i]))
            done |= ended
            if done.all():
                break
            feed = np.where(done | ended, 0, tok)
            state = self._next_state(state, ctx, feed)
        return out


# ---------------------------------------------------------------------------
# Consumers


class ContinuousConsumer:
    """The base model's own decoder, viewed as a consumer of continuous
    frontend frames (the non-modular baseline)."""

    def __init__(self, base: BaseModel):
        self.cfg = base.cfg
        self.decoder = base.decoder
        self.expected = FrontendSchema("continuous", (base.cfg.d_model,))
        self._store = base.store

    def digest(self) -> str:
        # identified by its decoder parameters (they live in the base store)
        return container.digest({n: t for n, t in self._store.items()
                                 if n.startswith("dec.")})

    def transcribe(self, frontend, utts_frames: Sequence[np.ndarray],
                   beam_size: int | None = None):
        _require_schema(frontend.schema, self.expected, "ContinuousConsumer")
        memories = [frontend.features(f) for f in utts_frames]
        return _transducer_decode(self.decoder, self.cfg, memories, beam_size)

    def eval_loss(self, frontend, utts_frames: Sequence[np.ndarray],
                  targets) -> float:
        _require_schema(frontend.schema, self.expected, "ContinuousConsumer")
        mem_pad, lengths = pad_frames([frontend.features(f) for f in utts_frames])
        return float(self.decoder.loss(Tensor(mem_pad), lengths, targets).data)


def _transducer_decode(decoder: TransducerDecoder, cfg: RunConfig,
                       memories: Sequence[np.ndarray],
                       beam_size: int | None):
    if beam_size is None:
        mem_pad, lengths = pad_frames(memories)
        return decoder.greedy_batch(
            Tensor(mem_pad), lengths,
            max_symbols_per_frame=cfg.max_symbols_per_frame,
            max_labels=cfg.u_max)
    return [decoder.beam(Tensor(m), beam_size,
                         max_symbols_per_frame=cfg.max_symbols_per_frame,
                         max_labels=cfg.u_max)
            for m in memories]


class TransducerConsumer:
    """Streaming consumer of exported index rows: re-embed, encode
    causally, decode with its own transducer."""

    def __init__(self, cfg: RunConfig, seed: int):
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.expected = FrontendSchema("lego", (cfg.k_top, cfg.vocab + 1))
        self.store.add("emb", glorot(rng, cfg.vocab + 1, cfg.e2))
        self.encoder = EncoderStack(self.store, "enc", cfg.k_top * cfg.e2,
                                    cfg.d_model, cfg.heads,
                                    downstream_windows(cfg), rng)
        self.decoder = TransducerDecoder(self.store, "dec", cfg.d_model,
                                         cfg.vocab, cfg.d_emb, cfg.d_state,
                                         cfg.d_joint, rng)

    def loss(self, idx_pad: np.ndarray, lengths, targets) -> Tensor:
        feats = import_lego(idx_pad, self.store["emb"])
        enc = self.encoder.forward(feats, lengths)
        return self.decoder.loss(enc, lengths, targets)

    def _memories(self, frontend, utts_frames) -> list[np.ndarray]:
        _require_schema(frontend.schema, self.expected, "TransducerConsumer")
        out = []
        for frames in utts_frames:
            idx = frontend.indices(frames)
            feats = import_lego(idx, self.store["emb"]).data
            out.append(self.encoder.forward_exact(feats))
        return out

    def transcribe(self, frontend, utts_frames: Sequence[np.ndarray],
                   beam_size: int | None = None):
        memories = self._memories(frontend, utts_frames)
        return _transducer_decode(self.decoder, self.cfg, memories, beam_size)

    def eval_loss(self, frontend, utts_frames: Sequence[np.ndarray],
                  targets) -> float:
        mem_pad, lengths = pad_frames(self._memories(frontend, utts_frames))
        return float(self.decoder.loss(Tensor(mem_pad), lengths, targets).data)

    def digest(self) -> str:
        return container.digest(dict(self.store.items()))

    def save(self, path: str) -> None:
        container.save_checkpoint(path, dict(self.store.items()))

    @classmethod
    def load(cls, cfg: RunConfig, path: str) -> "TransducerConsumer":
        model = cls(cfg, seed=0)
        _restore(model.store, container.load_checkpoint(path))
        return model


class AttentionConsumer:
    """Attention decoder over an encoded view of exported index rows."""

    def __init__(self, cfg: RunConfig, seed: int):
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.expected = FrontendSchema("lego", (cfg.k_top, cfg.vocab + 1))
        self.store.add("emb", glorot(rng, cfg.vocab + 1, cfg.e2))
        self.encoder = EncoderStack(self.store, "enc", cfg.k_top * cfg.e2,
                                    cfg.d_model, cfg.heads,
                                    downstream_windows(cfg), rng)
        self.head = AttentionDecoderHead(self.store, "head", cfg.vocab,
                                         cfg.d_emb, cfg.d_state,
                                         [("mem", cfg.d_model)], cfg.d_att, rng)

    def loss(self, idx_pad: np.ndarray, lengths, targets) -> Tensor:
        feats = import_lego(idx_pad, self.store["emb"])
        mem = self.encoder.forward(feats, lengths)
        mask = valid_mask(lengths, idx_pad.shape[1])
        return self.head.loss([(mem, mask)], targets)

    def transcribe(self, frontend, utts_frames: Sequence[np.ndarray]) -> list[list[int]]:
        # decoded one utterance at a time so batch composition cannot
        # influence any output
        _require_schema(frontend.schema, self.expected, "AttentionConsumer")
        out = []
        for frames in utts_frames:
            idx = frontend.indices(frames)
            feats = import_lego(idx, self.store["emb"]).data
            mem = self.encoder.forward_exact(feats)[None]
            mask = np.ones((1, mem.shape[1]), dtype=bool)
            out.extend(self.head.greedy_batch([(Tensor(mem), mask)],
                                              max_len=self.cfg.u_max + 1))
        return out

    def eval_loss(self, frontend, utts_frames: Sequence[np.ndarray],
                  targets) -> float:
        _require_schema(frontend.schema, self.expected, "AttentionConsumer")
        idx_pad, lengths = pad_indices([frontend.indices(f) for f in utts_frames])
        return float(self.loss(idx_pad, lengths, targets).data)

    def digest(self) -> str:
        return container.digest(dict(self.store.items()))

    def save(self, path: str) -> None:
        container.save_checkpoint(path, dict(self.store.items()))

    @classmethod
    def load(cls, cfg: RunConfig, path: str) -> "AttentionConsumer":
        model = cls(cfg, seed=0)
        _restore(model.store, container.load_checkpoint(path))
        return model


class DeliberationConsumer:
    """Attention decoder over flattened n-best tokens, optionally with a
    second attention over continuous frames (the classic tight coupling
    that stitching is expected to break)."""

    def __init__(self, cfg: RunConfig, seed: int, use_audio: bool):
        self.cfg = cfg
        self.use_audio = use_audio
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.expected_text = FrontendSchema("nbest", (cfg.nbest_n, cfg.vocab))
        self.expected_audio = FrontendSchema("continuous", (cfg.d_model,))
        self.store.add("tok", glorot(rng, cfg.vocab + 1, cfg.e1))
        self.store.add("rank", glorot(rng, cfg.nbest_n, cfg.e1))
        memories = [("text", cfg.e1)]
        if use_audio:
            memories.append(("audio", cfg.d_model))
        self.head = AttentionDecoderHead(self.store, "head", cfg.vocab,
                                         cfg.d_emb, cfg.d_state, memories,
                                         cfg.d_att, rng)

    def loss(self, hyps_batch, targets,
             audio_pad: np.ndarray | None = None,
             audio_lengths=None) -> Tensor:
        mem, mask = embed_nbest(hyps_batch, self.store["tok"],
                                self.store["rank"])
        memories = [(mem, mask)]
        if self.use_audio:
            if audio_pad is None:
                raise ContractError("deliberation: audio memory required")
            amask = valid_mask(audio_lengths, audio_pad.shape[1])
            memories.append((Tensor(audio_pad), amask))
        return self.head.loss(memories, targets)

    def transcribe_cached(self, hyps_list, audio_feats: Sequence[np.ndarray] | None = None
                          ) -> list[list[int]]:
        # decoded one utterance at a time so batch composition cannot
        # influence any output
        if self.use_audio and audio_feats is None:
            raise ContractError("deliberation: audio memory required")
        out = []
        for i, hyps in enumerate(hyps_list):
            mem, mask = embed_nbest([hyps], self.store["tok"],
                                    self.store["rank"])
            memories = [(mem, mask)]
            if self.use_audio:
                audio = np.asarray(audio_feats[i])[None]
                memories.append((Tensor(audio),
                                 np.ones((1, audio.shape[1]), dtype=bool)))
            out.extend(self.head.greedy_batch(memories,
                                              max_len=self.cfg.u_max + 1))
        return out

    def transcribe(self, text_frontend, utts_frames: Sequence[np.ndarray],
                   audio_frontend=None) -> list[list[int]]:
        _require_schema(text_frontend.schema, self.expected_text,
                        "DeliberationConsumer")
        hyps_list = [text_frontend.hypotheses(f) for f in utts_frames]
        audio_feats = None
        if self.use_audio:
            if audio_frontend is None:
                raise ContractError("deliberation: audio frontend required")
            _require_schema(audio_frontend.schema, self.expected_audio,
                            "DeliberationConsumer audio")
            audio_feats = [audio_frontend.features(f) for f in utts_frames]
        return self.transcribe_cached(hyps_list, audio_feats)

    def eval_loss(self, frontend, utts_frames: Sequence[np.ndarray],
                  targets, audio_frontend=None) -> float:
        _require_schema(frontend.schema, self.expected_text,
                        "DeliberationConsumer")
        hyps = [frontend.hypotheses(f) for f in utts_frames]
        if not self.use_audio:
            return float(self.loss(hyps, targets).data)
        _require_schema(audio_frontend.schema, self.expected_audio,
                        "DeliberationConsumer audio")
        audio_pad, lengths = pad_frames([audio_frontend.features(f)
                                         for f in utts_frames])
        return float(self.loss(hyps, targets, audio_pad, lengths).data)

    def digest(self) -> str:
        return container.digest(dict(self.store.items()))

    def save(self, path: str) -> None:
        container.save_checkpoint(path, dict(self.store.items()))

    @classmethod
    def load(cls, cfg: RunConfig, path: str,
             use_audio: bool) -> "DeliberationConsumer":
        model = cls(cfg, seed=0, use_audio=use_audio)
        _restore(model.store, container.load_checkpoint(path))
        return model


# ---------------------------------------------------------------------------
# Training


def run_steps(store: ParamStore, batch_loss: Callable[[int], Tensor],
              steps: int, lr: float, counter: StepCounter | None = None,
              what: str = "train") -> None:
    """Adam over ``steps`` minibatches; aborts on non-finite loss."""
    opt = Adam(store, lr=lr)
    for step in range(steps):
        with nc.trace():
            loss = batch_loss(step)
            grads = nc.backward(loss, store)
        lv = float(loss.data)
        if not np.isfinite(lv):
            raise ContractError(f"{what}: loss diverged at step {step}: {lv}")
        opt.step(grads)
        if counter is not None:
            counter.add(f"{what}_steps")


class _Sampler:
    def __init__(self, n: int, batch: int, seed: int):
        self.rng = np.random.default_rng(seed)
        self.n = n
        self.batch = min(batch, n)

    def draw(self) -> np.ndarray:
        return self.rng.choice(self.n, size=self.batch, replace=False)


def encode_dataset(base: BaseModel, utts) -> list[np.ndarray]:
    """Exact-path base encodings, one array per utterance."""
    return [base.encode(u.frames) for u in utts]


def train_base(cfg: RunConfig, train_set, model_seed: int, sample_seed: int,
               steps: int | None = None, counter: StepCounter | None = None
               ) -> BaseModel:
    model = BaseModel(cfg, seed=model_seed)
    sampler = _Sampler(len(train_set), cfg.batch_size, sample_seed)

    def batch_loss(_step: int) -> Tensor:
        pick = sampler.draw()
        frames, lengths = pad_frames([train_set[i].frames for i in pick])
        targets = [train_set[i].labels for i in pick]
        return model.loss(frames, lengths, targets)

    run_steps(model.store, batch_loss, steps or cfg.base_steps, cfg.lr,
              counter, "base")
    return model


def train_exporter(cfg: RunConfig, base: BaseModel, train_set,
                   model_seed: int, sample_seed: int,
                   steps: int | None = None, blocks: int | None = None,
                   counter: StepCounter | None = None,
                   base_enc: list[np.ndarray] | None = None) -> ExporterModel:
    """Stage 2: trains per-frame classification over the frozen base.
    The base must already be frozen; it is fingerprinted before and after
    to prove the stage touched nothing upstream."""
    if not base.store.frozen_names:
        base.freeze()
    before = base.digest()
    model = ExporterModel(cfg, seed=model_seed, blocks=blocks)
    enc = base_enc if base_enc is not None else encode_dataset(base, train_set)
    sampler = _Sampler(len(train_set), cfg.batch_size, sample_seed)

    def batch_loss(_step: int) -> Tensor:
        pick = sampler.draw()
        enc_pad, lengths = pad_frames([enc[i] for i in pick])
        targets = [train_set[i].labels for i in pick]
        logits = model.logits_batch(Tensor(enc_pad), lengths)
        return ctc_loss(logits, targets, lengths)

    run_steps(model.store, batch_loss, steps or cfg.exporter_steps, cfg.lr,
              counter, "exporter")
    if base.digest() != before:
        raise ContractError("exporter training modified frozen base parameters")
    return model


def train_first_pass(cfg: RunConfig, base: BaseModel, train_set,
                     model_seed: int, sample_seed: int,
                     steps: int | None = None,
                     counter: StepCounter | None = None,
                     base_enc: list[np.ndarray] | None = None) -> FirstPass:
    if not base.store.frozen_names:
        base.freeze()
    before = base.digest()
    model = FirstPass(cfg, seed=model_seed)
    enc = base_enc if base_enc is not None else encode_dataset(base, train_set)
    sampler = _Sampler(len(train_set), cfg.batch_size, sample_seed)

    def batch_loss(_step: int) -> Tensor:
        pick = sampler.draw()
        enc_pad, lengths = pad_frames([enc[i] for i in pick])
        targets = [train_set[i].labels for i in pick]
        return model.decoder.loss(Tensor(enc_pad), lengths, targets)

    run_steps(model.store, batch_loss, steps or cfg.first_pass_steps, cfg.lr,
              counter, "first_pass")
    if base.digest() != before:
        raise ContractError("first-pass training modified frozen base parameters")
    return model


def lego_dataset(frontend: LegoFrontend, utts) -> list[np.ndarray]:
    """Exported index rows for every utterance, computed once."""
    return [frontend.indices(u.frames) for u in utts]


def nbest_dataset(frontend: NBestFrontend, utts) -> list[list[list[int]]]:
    """First-pass n-best for every utterance, computed once."""
    return [frontend.hypotheses(u.frames) for u in utts]


def train_lego_transducer(cfg: RunConfig, frontend: LegoFrontend, train_set,
                          model_seed: int, sample_seed: int,
                          steps: int | None = None,
                          counter: StepCounter | None = None,
                          cached_idx: list[np.ndarray] | None = None
                          ) -> TransducerConsumer:
    model = TransducerConsumer(cfg, seed=model_seed)
    _require_schema(frontend.schema, model.expected, "train_lego_transducer")
    idx = cached_idx if cached_idx is not None else lego_dataset(frontend, train_set)
    sampler = _Sampler(len(train_set), cfg.batch_size, sample_seed)

    def batch_loss(_step: int) -> Tensor:
        pick = sampler.draw()
        idx_pad, lengths = pad_indices([idx[i] for i in pick])
        targets = [train_set[i].labels for i in pick]
        return model.loss(idx_pad, lengths, targets)

    run_steps(model.store, batch_loss, steps or cfg.downstream_steps, cfg.lr,
              counter, "downstream")
    return model


def train_lego_attention(cfg: RunConfig, frontend: LegoFrontend, train_set,
                         model_seed: int, sample_seed: int,
                         steps: int | None = None,
                         counter: StepCounter | None = None,
                         cached_idx: list[np.ndarray] | None = None
                         ) -> AttentionConsumer:
    model = AttentionConsumer(cfg, seed=model_seed)
    _require_schema(frontend.schema, model.expected, "train_lego_attention")
    idx = cached_idx if cached_idx is not None else lego_dataset(frontend, train_set)
    sampler = _Sampler(len(train_set), cfg.batch_size, sample_seed)

    def batch_loss(_step: int) -> Tensor:
        pick = sampler.draw()
        idx_pad, lengths = pad_indices([idx[i] for i in pick])
        targets = [train_set[i].labels for i in pick]
        return model.loss(idx_pad, lengths, targets)

    run_steps(model.store, batch_loss, steps or cfg.downstream_steps, cfg.lr,
              counter, "attention")
    return model


def train_deliberation(cfg: RunConfig, text_frontend: NBestFrontend, train_set,
                       model_seed: int, sample_seed: int, use_audio: bool,
                       audio_frontend: ContinuousFrontend | None = None,
                       steps: int | None = None,
                       counter: StepCounter | None = None,
                       cached_hyps: list[list[list[int]]] | None = None,
                       cached_audio: list[np.ndarray] | None = None
                       ) -> DeliberationConsumer:
    model = DeliberationConsumer(cfg, seed=model_seed, use_audio=use_audio)
    _require_schema(text_frontend.schema, model.expected_text,
                    "train_deliberation")
    hyps = cached_hyps if cached_hyps is not None else nbest_dataset(text_frontend, train_set)
    audio = None
    if use_audio:
        if audio_frontend is None and cached_audio is None:
            raise ContractError("train_deliberation: audio source required")
        if cached_audio is not None:
            audio = cached_audio
        else:
            _require_schema(audio_frontend.schema, model.expected_audio,
                            "train_deliberation audio")
            audio = [audio_frontend.features(u.frames) for u in train_set]
    sampler = _Sampler(len(train_set), cfg.batch_size, sample_seed)

    def batch_loss(_step: int) -> Tensor:
        pick = sampler.draw()
        targets = [train_set[i].labels for i in pick]
        hb = [hyps[i] for i in pick]
        if use_audio:
            audio_pad, lengths = pad_frames([audio[i] for i in pick])
            return model.loss(hb, targets, audio_pad, lengths)
        return model.loss(hb, targets)

    run_steps(model.store, batch_loss, steps or cfg.delib_steps, cfg.lr,
              counter, "deliberation")
    return model
