"""Discrete per-frame features: the sorted top-K index rows a frozen
frontend exports, and what consumers do with them.

A frame's feature is the list of its K highest-scoring vocabulary
entries (blank included), best first, ties broken toward the smaller
index. Rows depend only on their own frame, so export is order-stable,
cacheable, and needs no sequential decode. Consumers re-embed each index
with their own trainable table and concatenate along the feature axis,
giving a [T, K*E] continuous input whose row count is the frame count —
independent of how many hypotheses a first-pass decoder would emit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .appshell import container
from .numcore import ContractError, Tensor


@dataclass
class LegoSequence:
    """Per-frame top-K index matrix, shape [T, K], entries in
    0..vocab_plus_blank-1, each row descending by source score."""

    indices: np.ndarray
    vocab_plus_blank: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2:
            raise ContractError("LegoSequence: indices must be [T, K]")
        if self.indices.size and (
            self.indices.min() < 0 or self.indices.max() >= self.vocab_plus_blank
        ):
            raise ContractError("LegoSequence: index outside vocabulary")

    @property
    def t(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def export_lego(logits, k: int) -> LegoSequence:
    """Top-K indices of each frame's logits, best first.

    logits: [T, V+1] array or Tensor. Equal scores order by index, so the
    output is a pure function of the logit values. Row 0 of every frame
    is that frame's argmax.
    """
    arr = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError("export_lego: expected [T, V+1] logits")
    if not 1 <= k <= arr.shape[1]:
        raise ContractError(f"export_lego: k={k} outside 1..{arr.shape[1]}")
    order = np.argsort(-arr, axis=1, kind="stable")
    return LegoSequence(order[:, :k], vocab_plus_blank=arr.shape[1])


def import_lego(indices, table: Tensor) -> Tensor:
    """Re-embed exported indices with a consumer-owned table.

    indices: LegoSequence, [T, K] or [B, T, K] int array; table:
    [vocab_plus_blank, E]. Returns [T, K*E] (or [B, T, K*E]), the K
    embeddings of each frame concatenated in rank order. Traced:
    gradients flow into the table."""
    if isinstance(indices, LegoSequence):
        if indices.vocab_plus_blank != table.shape[0]:
            raise ContractError(
                f"import_lego: table has {table.shape[0]} rows, sequence wants "
                f"{indices.vocab_plus_blank}")
        idx = indices.indices
    else:
        idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim not in (2, 3):
        raise ContractError("import_lego: indices must be [T, K] or [B, T, K]")
    emb = nc.gather_rows(table, idx)  # [..., K, E]
    out_shape = idx.shape[:-1] + (idx.shape[-1] * table.shape[1],)
    return nc.reshape(emb, out_shape)


def embed_nbest(batch_hyps: Sequence[Sequence[Sequence[int]]], table: Tensor,
                rank_table: Tensor | None = None) -> tuple[Tensor, np.ndarray]:
    """Flatten each utterance's n-best label sequences into one token
    memory. Returns ([B, M, E] embeddings, [B, M] bool validity), where M
    is the longest flattened length; short rows are padded with index 0
    and masked out. With ``rank_table`` ([n, E]), each token additionally
    receives the embedding of its hypothesis' rank, so the consumer can
    tell which hypothesis a token came from. Traced through the tables."""
    flat = []
    rank_of = []
    for hyps in batch_hyps:
        flat.append([lab for hyp in hyps for lab in hyp])
        rank_of.append([r for r, hyp in enumerate(hyps) for _ in hyp])
    m = max((len(f) for f in flat), default=0)
    m = max(m, 1)
    b = len(batch_hyps)
    idx = np.zeros((b, m), dtype=np.int64)
    ranks = np.zeros((b, m), dtype=np.int64)
    mask = np.zeros((b, m), dtype=bool)
    for i, tokens in enumerate(flat):
        idx[i, : len(tokens)] = tokens
        ranks[i, : len(tokens)] = rank_of[i]
        mask[i, : len(tokens)] = True
    emb = nc.gather_rows(table, idx)
    if rank_table is not None:
        emb = nc.add(emb, nc.gather_rows(rank_table, ranks))
    return emb, mask


@dataclass(frozen=True)
class CostReport:
    """Memory-shape and scheduling arithmetic for one utterance."""

    nbest_rows: int
    lego_rows: int
    row_reduction_pct: float
    nbest_depth: int
    lego_depth: int
    export_sequential_steps: int
    first_pass_sequential_steps: int
    emitted_tokens: int

    def as_dict(self) -> dict[str, float]:
        return {
            "nbest_rows": self.nbest_rows,
            "lego_rows": self.lego_rows,
            "row_reduction_pct": round(self.row_reduction_pct, 2),
            "nbest_depth": self.nbest_depth,
            "lego_depth": self.lego_depth,
            "export_sequential_steps": self.export_sequential_steps,
            "first_pass_sequential_steps": self.first_pass_sequential_steps,
            "emitted_tokens": self.emitted_tokens,
        }


def cost_report(n: int, u_cap: int, t: int, k: int, e1: int, e2: int,
                emitted_tokens: int | None = None) -> CostReport:
    """Compare feeding a consumer n hypotheses of up to u_cap tokens
    (each embedded at e1) against t exported top-k rows (each re-embedded
    at k*e2). Export runs frame-parallel: zero sequential steps. A
    first-pass decode is serial in both frames and emitted tokens."""
    for name, v in (("n", n), ("u_cap", u_cap), ("t", t), ("k", k),
                    ("e1", e1), ("e2", e2)):
        if v < 1:
            raise ContractError(f"cost_report: {name} must be >= 1")
    emitted = u_cap if emitted_tokens is None else emitted_tokens
    if emitted < 0:
        raise ContractError("cost_report: emitted_tokens must be >= 0")
    return CostReport(
        nbest_rows=n * u_cap,
        lego_rows=t,
        row_reduction_pct=100.0 * (1.0 - t / (n * u_cap)),
        nbest_depth=e1,
        lego_depth=k * e2,
        export_sequential_steps=0,
        first_pass_sequential_steps=t + emitted,
        emitted_tokens=emitted,
    )


def save_lego(path: str, seq: LegoSequence) -> None:
    container.save_checkpoint(path, {
        "indices": seq.indices.astype(np.int32),
        "vocab_plus_blank": np.array([seq.vocab_plus_blank], dtype=np.int32),
    })


def load_lego(path: str) -> LegoSequence:
    entries = container.load_checkpoint(path)
    return LegoSequence(entries["indices"].astype(np.int64),
                        int(entries["vocab_plus_blank"][0]))
