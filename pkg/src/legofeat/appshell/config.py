"""Run configuration: one flat record that pins every knob an experiment
needs, parsed from ``key = value`` text files with command-line overrides.

Two runs with equal configs (seeds included) produce bit-identical
artifacts; reproducibility is part of the config's contract.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterable

from ..numcore import ContractError


@dataclass
class RunConfig:
    # task / data
    vocab: int = 16
    d_in: int = 8
    frame_ms: int = 60
    sigma: float = 0.3
    template_min_frames: int = 2
    template_max_frames: int = 4
    d1_min_labels: int = 3
    d1_max_labels: int = 10
    d2_min_labels: int = 5
    d2_max_labels: int = 14
    n_train_per_domain: int = 1536
    n_test: int = 96
    u_max: int = 16

    # model dimensions
    d_model: int = 32
    heads: int = 2
    d_emb: int = 16
    d_state: int = 32
    d_joint: int = 16
    d_att: int = 32
    k_top: int = 4
    e2: int = 8
    e1: int = 32
    attn_left: int = -1  # -1: unbounded lookback
    base_causal_blocks: int = 1
    base_context_blocks: int = 1
    context_right: int = 2
    exporter_blocks: int = 1
    downstream_blocks: int = 1  # importer depth, mirrors exporter depth

    # training
    batch_size: int = 16
    lr: float = 1e-3
    base_steps: int = 4500
    exporter_steps: int = 1500
    downstream_steps: int = 4000
    first_pass_steps: int = 1800
    delib_steps: int = 4000
    nbest_n: int = 4
    beam_size: int = 16
    max_symbols_per_frame: int = 4

    # experiment selection for the suite (comma list; empty runs nothing)
    experiments: str = "table1,table2,table3,table4,cost"

    # production-scale constants quoted by the cost report
    cost_n: int = 8
    cost_u: int = 120
    cost_t: int = 343
    cost_k: int = 12
    cost_e1: int = 384
    cost_e2: int = 32

    # seeds
    task_seed: int = 1
    noise_seed: int = 2
    model_seed: int = 3

    @property
    def left(self) -> int | None:
        return None if self.attn_left < 0 else self.attn_left

    def validate(self) -> "RunConfig":
        if self.vocab < 2:
            raise ContractError("config: vocab must be >= 2")
        if not 1 <= self.k_top <= self.vocab + 1:
            raise ContractError("config: k_top must be in 1..vocab+1")
        if self.d_model % self.heads != 0:
            raise ContractError("config: heads must divide d_model")
        for name in ("d_in", "d_model", "d_emb", "d_state", "d_joint", "d_att",
                     "e1", "e2", "batch_size", "u_max", "frame_ms"):
            if getattr(self, name) <= 0:
                raise ContractError(f"config: {name} must be positive")
        if self.d1_max_labels > self.u_max or self.d2_max_labels > self.u_max:
            raise ContractError("config: label lengths exceed u_max")
        if self.context_right < 0 or self.exporter_blocks < 1:
            raise ContractError("config: bad context settings")
        return self


def _coerce(name: str, ftype: type, raw: str):
    raw = raw.strip()
    try:
        if ftype is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return ftype(raw)
    except ValueError:
        raise ContractError(f"config: cannot parse {name}={raw!r} as {ftype.__name__}")


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines (# comments, blank lines ignored)."""
    cfg = RunConfig(**vars(base)) if base else RunConfig()
    ftypes = {f.name: f.type for f in fields(RunConfig)}
    pytypes = {"int": int, "float": float, "bool": bool, "str": str}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ContractError(f"config line {lineno}: expected key=value")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in ftypes:
            raise ContractError(f"config line {lineno}: unknown key {key!r}")
        ftype = ftypes[key]
        if isinstance(ftype, str):
            ftype = pytypes.get(ftype, str)
        setattr(cfg, key, _coerce(key, ftype, raw))
    return cfg


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read(), base)


def apply_overrides(cfg: RunConfig, pairs: Iterable[str]) -> RunConfig:
    """Apply ``key=value`` strings on top of an existing config."""
    return parse_config("\n".join(pairs), base=cfg)


def config_text(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(RunConfig))


def save_config(path: str, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(config_text(cfg))
