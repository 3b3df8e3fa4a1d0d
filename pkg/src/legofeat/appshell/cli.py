"""Command-line entry points.

Every subcommand reads an optional ``--config`` file, applies ``--set
key=value`` overrides, and works from the resulting RunConfig, so a run
is reproducible from its printed config alone. Model artifacts are
checkpoint containers; datasets are regenerated from seeds on demand.
"""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

import numpy as np

from .. import harness as hz
from .. import pipeline as pl
from ..lego import cost_report, save_lego
from ..numcore import ContractError
from .config import RunConfig, apply_overrides, config_text, load_config
from .container import CheckpointError
from .counters import StepCounter

_DOWNSTREAM_KINDS = ("transducer", "attention", "delib-text", "delib-audio",
                     "first-pass")


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors through exit codes instead of
    calling sys.exit itself."""

    def error(self, message):
        raise _UsageError(self, message)


class _UsageError(Exception):
    def __init__(self, parser: argparse.ArgumentParser, message: str):
        super().__init__(message)
        self.parser = parser


def _build_parser() -> _Parser:
    top = _Parser(prog="legofeat",
                  description="Train, export, stitch, and evaluate the "
                              "frozen-frontend pipeline at desk scale.")
    sub = top.add_subparsers(dest="command", metavar="COMMAND")

    def cmd(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", metavar="FILE",
                       help="key=value config file")
        p.add_argument("--set", metavar="KEY=VALUE", action="append",
                       default=[], dest="overrides",
                       help="override one config field (repeatable)")
        return p

    p = cmd("gen-data", "write one synthetic dataset to an .npz file")
    p.add_argument("--domain", choices=("d1", "d2"), default="d1")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--size", type=int, default=None,
                   help="utterance count (default: config)")
    p.add_argument("--out", required=True, metavar="FILE")

    p = cmd("train-base", "train the base model on mixed-domain data")
    p.add_argument("--out", required=True, metavar="FILE")

    p = cmd("train-exporter", "train an exporter above a frozen base")
    p.add_argument("--base", required=True, metavar="FILE")
    p.add_argument("--blocks", type=int, default=None,
                   help="exporter depth (default: config)")
    p.add_argument("--out", required=True, metavar="FILE")

    p = cmd("train-downstream", "train a consumer above frozen frontends")
    p.add_argument("--kind", choices=_DOWNSTREAM_KINDS, default="transducer")
    p.add_argument("--base", required=True, metavar="FILE")
    p.add_argument("--exporter", metavar="FILE",
                   help="exporter checkpoint (index consumers)")
    p.add_argument("--first-pass", metavar="FILE", dest="first_pass",
                   help="first-pass checkpoint (deliberation consumers)")
    p.add_argument("--domain", choices=("d1", "d2"), default="d1")
    p.add_argument("--out", required=True, metavar="FILE")

    p = cmd("export-lego", "export index rows for a dataset")
    p.add_argument("--base", required=True, metavar="FILE")
    p.add_argument("--exporter", required=True, metavar="FILE")
    p.add_argument("--domain", choices=("d1", "d2"), default="d1")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--utterance", type=int, default=0,
                   help="which utterance to write (default first)")
    p.add_argument("--out", required=True, metavar="FILE")

    for name, help_ in (("eval", "decode a consumer on its own frontend"),
                        ("stitch", "decode a consumer on a swapped-in "
                                   "frontend, zero-shot")):
        p = cmd(name, help_)
        p.add_argument("--kind", choices=_DOWNSTREAM_KINDS[:4],
                       default="transducer")
        p.add_argument("--downstream", required=True, metavar="FILE")
        p.add_argument("--base", required=True, metavar="FILE")
        p.add_argument("--exporter", metavar="FILE")
        p.add_argument("--first-pass", metavar="FILE", dest="first_pass")
        p.add_argument("--domain", choices=("d1", "d2"), default="d1")
        p.add_argument("--split", choices=("train", "test"), default="test")

    p = cmd("modtest", "train v1/v2 stacks and run one modularity test")
    p.add_argument("--kind",
                   choices=("continuous",) + _DOWNSTREAM_KINDS[:4],
                   default="transducer")

    p = cmd("suite", "run the configured experiments and write a report")
    p.add_argument("--seeds", metavar="TASK,NOISE,MODEL",
                   help="override the seed triple")
    p.add_argument("--out", metavar="DIR", default=None,
                   help="report directory (default: suite_<seeds>)")

    p = cmd("cost-report", "print the hypothesis-rows vs index-rows arithmetic")
    p.add_argument("--n", type=int, default=None, help="n-best size")
    p.add_argument("--u", type=int, default=None, help="hypothesis length cap")
    p.add_argument("--t", type=int, default=None, help="frame count")
    p.add_argument("--k", type=int, default=None, help="indices per frame")
    p.add_argument("--e1", type=int, default=None, help="token embedding width")
    p.add_argument("--e2", type=int, default=None, help="index embedding width")

    return top


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    return cfg.validate()


def _dataset(cfg: RunConfig, domain: str, split: str,
             size: int | None = None) -> list:
    if size is None:
        size = cfg.n_train_per_domain if split == "train" else cfg.n_test
    return hz.gen_dataset(cfg, domain, size, split)


def _cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    utts = _dataset(cfg, args.domain, args.split, args.size)
    frames = np.concatenate([u.frames for u in utts], axis=0)
    frame_lengths = np.array([len(u.frames) for u in utts], dtype=np.int64)
    labels = np.array([lab for u in utts for lab in u.labels], dtype=np.int64)
    label_lengths = np.array([len(u.labels) for u in utts], dtype=np.int64)
    np.savez(args.out, frames=frames, frame_lengths=frame_lengths,
             labels=labels, label_lengths=label_lengths)
    print(f"wrote {len(utts)} {args.domain}/{args.split} utterances "
          f"({frames.shape[0]} frames) to {args.out}")
    return 0


def _cmd_train_base(args) -> int:
    cfg = _load_cfg(args)
    train = _dataset(cfg, "d1", "train") + _dataset(cfg, "d2", "train")
    counter = StepCounter()
    model = pl.train_base(cfg, train, model_seed=cfg.model_seed,
                          sample_seed=cfg.model_seed + 7, counter=counter)
    model.save(args.out)
    print(f"base saved to {args.out}  digest {model.digest()[:16]}  "
          f"steps {counter.get('base_steps'):.0f}")
    return 0


def _cmd_train_exporter(args) -> int:
    cfg = _load_cfg(args)
    base = pl.BaseModel.load(cfg, args.base)
    base.freeze()
    train = _dataset(cfg, "d1", "train") + _dataset(cfg, "d2", "train")
    model = pl.train_exporter(cfg, base, train, model_seed=cfg.model_seed + 10,
                              sample_seed=cfg.model_seed + 17,
                              blocks=args.blocks)
    model.save(args.out)
    print(f"exporter saved to {args.out}  digest {model.digest()[:16]}")
    return 0


def _require(value, flag: str, kind: str):
    if value is None:
        raise ContractError(f"{kind} needs {flag}")
    return value


def _frontends(cfg: RunConfig, kind: str, args):
    """Build the frontend(s) a consumer kind decodes from."""
    base = pl.BaseModel.load(cfg, args.base)
    base.freeze()
    if kind in ("transducer", "attention"):
        exporter = pl.ExporterModel.load(
            cfg, _require(args.exporter, "--exporter", kind))
        return pl.LegoFrontend(base, exporter), None
    if kind in ("delib-text", "delib-audio"):
        fp = pl.FirstPass.load(
            cfg, _require(args.first_pass, "--first-pass", kind))
        text = pl.NBestFrontend(base, fp, cfg.nbest_n)
        audio = pl.ContinuousFrontend(base) if kind == "delib-audio" else None
        return text, audio
    return pl.ContinuousFrontend(base), None  # first-pass trains on these


def _cmd_train_downstream(args) -> int:
    cfg = _load_cfg(args)
    kind = args.kind
    train = _dataset(cfg, args.domain, "train")
    seed = cfg.model_seed + 40
    frontend, audio = _frontends(cfg, kind, args)
    if kind == "first-pass":
        model = pl.train_first_pass(cfg, frontend.base, train,
                                    model_seed=cfg.model_seed + 30,
                                    sample_seed=cfg.model_seed + 37)
    elif kind == "transducer":
        model = pl.train_lego_transducer(cfg, frontend, train,
                                         model_seed=seed,
                                         sample_seed=seed + 7)
    elif kind == "attention":
        model = pl.train_lego_attention(cfg, frontend, train,
                                        model_seed=seed, sample_seed=seed + 7)
    else:
        model = pl.train_deliberation(cfg, frontend, train, model_seed=seed,
                                      sample_seed=seed + 7,
                                      use_audio=audio is not None,
                                      audio_frontend=audio)
    model.save(args.out)
    print(f"{kind} consumer saved to {args.out}  digest {model.digest()[:16]}")
    return 0


def _cmd_export_lego(args) -> int:
    cfg = _load_cfg(args)
    base = pl.BaseModel.load(cfg, args.base)
    base.freeze()
    exporter = pl.ExporterModel.load(cfg, args.exporter)
    counter = StepCounter()
    frontend = pl.LegoFrontend(base, exporter)
    frontend.counter = counter
    utts = _dataset(cfg, args.domain, args.split, args.size)
    if not 0 <= args.utterance < len(utts):
        raise ContractError(f"export-lego: utterance {args.utterance} outside "
                            f"0..{len(utts) - 1}")
    seq = frontend.export(utts[args.utterance].frames)
    save_lego(args.out, seq)
    print(f"wrote [{seq.t}, {seq.k}] index rows to {args.out}  "
          f"sequential steps {counter.get('export_sequential_steps'):.0f}")
    return 0


def _load_consumer(cfg: RunConfig, kind: str, path: str):
    if kind == "transducer":
        return pl.TransducerConsumer.load(cfg, path)
    if kind == "attention":
        return pl.AttentionConsumer.load(cfg, path)
    return pl.DeliberationConsumer.load(cfg, path,
                                        use_audio=kind == "delib-audio")


def _cmd_eval(args, stitched: bool) -> int:
    cfg = _load_cfg(args)
    kind = args.kind
    consumer = _load_consumer(cfg, kind, args.downstream)
    frontend, audio = _frontends(cfg, kind, args)
    test = _dataset(cfg, args.domain, "test", None)
    if kind == "delib-audio":
        frontend = (frontend, audio)
    result = hz.evaluate(consumer, frontend, test)
    tag = "stitched" if stitched else "normal"
    extra = "".join(f"  {k} {v:.2f}" for k, v in result.items()
                    if k not in ("wer",))
    print(f"{kind} {tag} on {args.domain}/test: WER {result['wer']:.2f}%{extra}")
    return 0


def _cmd_modtest(args) -> int:
    cfg = _load_cfg(args)
    stack = hz.TrainedStack(cfg)
    kind = args.kind
    if kind == "continuous":
        report = hz.run_modularity_test(stack.continuous_consumer(),
                                        stack.cont, stack.cont_v2,
                                        stack.test_d1)
    elif kind == "transducer":
        report = hz.run_modularity_test(stack.ds_d1, stack.lego,
                                        stack.lego_v2, stack.test_d1)
    elif kind == "attention":
        report = hz.run_modularity_test(stack.las, stack.lego, stack.lego_v2,
                                        stack.test_d1)
    elif kind == "delib-text":
        report = hz.run_modularity_test(stack.delib_text, stack.nbest,
                                        stack.nbest_v2, stack.test_d1)
    else:
        report = hz.run_modularity_test(stack.delib_audio,
                                        (stack.nbest, stack.cont),
                                        (stack.nbest_v2, stack.cont_v2),
                                        stack.test_d1)
    for key, value in report.as_dict().items():
        print(f"{key} = {value}")
    return 0


def _cmd_suite(args) -> int:
    cfg = _load_cfg(args)
    if args.seeds:
        parts = args.seeds.split(",")
        if len(parts) != 3:
            raise ContractError("suite: --seeds wants TASK,NOISE,MODEL")
        try:
            cfg.task_seed, cfg.noise_seed, cfg.model_seed = map(int, parts)
        except ValueError:
            raise ContractError(f"suite: bad --seeds {args.seeds!r}")
    out = args.out or f"suite_t{cfg.task_seed}n{cfg.noise_seed}m{cfg.model_seed}"
    bundle = hz.run_experiment_suite(cfg, out_dir=out)
    print(bundle.to_text())
    print(f"report written to {out}/")
    return 0 if bundle.ok else 1


def _cmd_cost_report(args) -> int:
    cfg = _load_cfg(args)
    report = cost_report(n=args.n or cfg.cost_n, u_cap=args.u or cfg.cost_u,
                         t=args.t or cfg.cost_t, k=args.k or cfg.cost_k,
                         e1=args.e1 or cfg.cost_e1, e2=args.e2 or cfg.cost_e2)
    print(f"hypothesis rows {report.nbest_rows} (depth {report.nbest_depth})  "
          f"vs index rows {report.lego_rows} (depth {report.lego_depth})")
    print(f"row reduction {report.row_reduction_pct:.1f}%")
    print(f"export sequential steps {report.export_sequential_steps}; "
          f"first-pass sequential steps {report.first_pass_sequential_steps} "
          f"(>= {report.emitted_tokens} emitted tokens)")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-base": _cmd_train_base,
    "train-exporter": _cmd_train_exporter,
    "train-downstream": _cmd_train_downstream,
    "export-lego": _cmd_export_lego,
    "eval": lambda args: _cmd_eval(args, stitched=False),
    "stitch": lambda args: _cmd_eval(args, stitched=True),
    "modtest": _cmd_modtest,
    "suite": _cmd_suite,
    "cost-report": _cmd_cost_report,
}


def run_cli(argv: Sequence[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            print(f"{parser.prog}: a command is required", file=sys.stderr)
            return 2
        return _COMMANDS[args.command](args)
    except _UsageError as err:
        err.parser.print_usage(sys.stderr)
        print(f"{err.parser.prog}: {err}", file=sys.stderr)
        return 2
    except (ContractError, CheckpointError, OSError) as err:
        print(f"{parser.prog}: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
