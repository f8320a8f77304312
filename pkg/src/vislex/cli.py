"""Command-line interface.

Subcommands: gen-data, pretrain, finetune, eval, inspect-vd, bench,
gradcheck. Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as ds
from . import downstream as dw
from . import report
from .checkpoint import load_checkpoint
from .config import TrainConfig, load_config
from .errors import ConfigError, DataError, FormatError, NumericAbort, SamplingError, UsageError
from .train import bundle_to_state, run_bench, run_pretrain

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="vislex", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic image-caption corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=1000)
    p.add_argument("--val", type=int, default=100)
    p.add_argument("--test", type=int, default=200)

    p = sub.add_parser("pretrain", help="run the pre-training loop")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--ckpt", help="resume from this checkpoint")

    p = sub.add_parser("finetune", help="fine-tune a pre-trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--task", choices=("retrieval", "classify-color"), default="retrieval")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", help="retrieval recall@K on a held-out split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("inspect-vd", help="dump image patches per codebook index")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--index", type=int)
    p.add_argument("--top", type=int, default=8)

    p = sub.add_parser("bench", help="per-stage latency and sequence arithmetic")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--configs", type=int, default=5)
    return parser


def _cmd_gen_data(args) -> int:
    root = Path(args.out)
    offset = 0
    for split, n in (("train", args.train), ("val", args.val), ("test", args.test)):
        if n <= 0:
            continue
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, offset]))
        items = ds.generate(rng, n, id_offset=offset)
        ds.save_dataset(items, root / split)
        print(f"{split}: {n} images ({2 * n} caption pairs) -> {root / split}")
        offset += n
    return EXIT_OK


def _load_cfg(args, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, base=cfg)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "data", None):
        overrides["data_dir"] = args.data
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    return replace(cfg, **overrides).validate()


def _cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    resume = Path(args.ckpt) if args.ckpt else None
    run_dir = run_pretrain(cfg, resume_from=resume, log=print)
    print(f"run directory: {run_dir}")
    return EXIT_OK


def _cmd_finetune(args) -> int:
    state, ckpt_cfg = bundle_to_state(load_checkpoint(args.ckpt))
    # fine-tuning defaults to raw encoder features; a --config may override
    cfg = _load_cfg(args, base=replace(ckpt_cfg, use_vd=False))
    items = ds.load_dataset(Path(args.data) / "train")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.task == "retrieval":
        history = dw.finetune_retrieval(state.model, items, cfg, log=print)
        lines = ["epoch\tloss\tpair_acc"] + [
            f"{h['epoch']}\t{h['loss']:.6f}\t{h['pair_acc']:.6f}" for h in history
        ]
        (out_dir / "ft_retrieval.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        examples = dw.build_color_qa(items, dtype=state.model.dtype)
        head, history = dw.finetune_classify(
            state.model, examples, "single", len(dw.COLOR_CLASSES), cfg, log=print
        )
        lines = ["epoch\tloss\tacc"] + [
            f"{h['epoch']}\t{h['loss']:.6f}\t{h['acc']:.6f}" for h in history
        ]
        (out_dir / "ft_classify.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        for name, tensor in head.items():
            state.model.params[name] = tensor

    from .train import state_to_bundle
    from .checkpoint import save_checkpoint

    save_checkpoint(out_dir / "finetuned.bin", state_to_bundle(state, cfg))
    print(f"fine-tuned checkpoint: {out_dir / 'finetuned.bin'}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    state, cfg = bundle_to_state(load_checkpoint(args.ckpt))
    items = ds.load_dataset(Path(args.data) / args.split)
    eval_set = dw.make_eval_set(items, dtype=state.model.dtype)
    metrics = dw.eval_retrieval(state.model, eval_set, use_vd=cfg.use_vd)
    alt = dw.eval_retrieval(state.model, eval_set, use_vd=not cfg.use_vd)
    combined = dict(metrics)
    combined.update({f"alt_use_vd.{k}": v for k, v in alt.items()})
    dw.write_eval_report(combined, args.out)
    for key, value in metrics.items():
        print(f"{key}\t{value:.4f}")
    return EXIT_OK


def _cmd_inspect_vd(args) -> int:
    state, _cfg = bundle_to_state(load_checkpoint(args.ckpt))
    items = ds.load_dataset(Path(args.data) / args.split)
    result = dw.inspect_vd(
        state.model, items, args.out, index=args.index, top=args.top
    )
    print(f"dumped indices: {result['indices']}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    cfg = _load_cfg(args)
    result = run_bench(cfg, Path(args.ckpt), Path(args.out))
    for name, ms in result["stage_ms"].items():
        print(f"{name}\t{ms:.2f} ms")
    print(f"joint sequence length: {result['joint_length']}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .verify import run_suite

    results = run_suite(n_configs=args.configs)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:40s} max_rel_err={r.max_rel_err:.3e}")
        failed += 0 if r.passed else 1
    if failed:
        print(f"{failed} checks failed")
        return EXIT_NUMERIC
    print(f"all {len(results)} checks passed")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "inspect-vd": _cmd_inspect_vd,
    "bench": _cmd_bench,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataError, FormatError, SamplingError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
