"""Command-line entry points.

Exit codes: 0 success, 1 usage error (bad flags or flag values), 2 runtime
failure (missing/corrupt inputs, numeric divergence). All subcommands are
deterministic for a fixed --seed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .accounting import count_params_flops
from .adafactor import AdafactorHyper
from .checkpoint import load_checkpoint
from .errors import UsageError
from .fusion import (
    FusionConfig, decode_utterances, read_decodes, write_decodes,
)
from .model import MoeLmConfig
from .synthetic import gen_synthetic
from .tokenizer import Vocab, encode, read_corpus, train_wordpiece
from .trainer import train
from .wer import aggregate, emit_report, read_utt_file, report_from_json, wer

__all__ = ["main", "build_parser"]


def _kv_config(path: Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{ln}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _resolve(args, key: str, cast, default, file_cfg: dict[str, str]):
    """Flag value if given, else config-file value, else default."""
    flag = getattr(args, key)
    if flag is not None:
        return flag
    if key in file_cfg:
        raw = file_cfg[key]
        if cast is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise UsageError(f"config key {key}: not a boolean: {raw!r}")
        try:
            return cast(raw)
        except ValueError as exc:
            raise UsageError(f"config key {key}: {exc}") from exc
    return default


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def cmd_train_tokenizer(args) -> int:
    manifest = _require_file(args.manifest, "corpus manifest")
    if args.vocab_size < 5:
        raise UsageError("--vocab-size must be at least 5")
    sentences = [s for _, s in read_corpus(manifest)]
    vocab = train_wordpiece(sentences, args.vocab_size)
    vocab.save(args.output)
    print(f"wrote {vocab.size}-piece vocab to {args.output}")
    return 0


def cmd_train_lm(args) -> int:
    manifest = _require_file(args.manifest, "corpus manifest")
    vocab = Vocab.load(_require_file(args.vocab, "vocab file"))
    file_cfg = _kv_config(_require_file(args.config, "config file")) if args.config else {}

    def r(key, cast, default):
        return _resolve(args, key, cast, default, file_cfg)

    config = MoeLmConfig(
        num_layers=r("layers", int, 2),
        model_dim=r("dim", int, 64),
        num_heads=r("heads", int, 2),
        head_dim=r("head_dim", int, 32),
        ffn_multiplier=r("ffn_mult", int, 4),
        num_experts=r("experts", int, 4),
        experts_per_token=r("experts_per_token", int, 2),
        vocab_size=vocab.size,
        max_seq_len=r("max_seq_len", int, 128),
        aux_loss_weight=r("aux_loss_weight", float, 0.01),
        tied_embeddings=not r("untied", bool, False),
    )
    hyper = AdafactorHyper(
        learning_rate=r("lr", float, 0.05),
        warmup_steps=r("warmup", int, 100),
        lr_schedule=r("lr_schedule", str, "inverse_sqrt"),
    )
    steps = r("steps", int, 200)
    batch_size = r("batch_size", int, 8)
    packing_factor = r("packing_factor", int, 4)
    moe_impl = r("moe_impl", str, "sparse")
    seed = args.seed

    sentences = [
        encode(text, vocab, language_tag=loc)
        for loc, text in read_corpus(manifest)
    ]
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt, log = train(
        sentences, config, hyper, steps=steps, seed=seed,
        batch_size=batch_size, packing_factor=packing_factor,
        moe_impl=moe_impl, checkpoint_dir=out_dir,
    )
    log.write_csv(out_dir / "train_log.csv")
    first, last = log.steps[0], log.steps[-1]
    print(f"trained {last.step} steps: loss {first.loss:.4f} -> {last.loss:.4f}"
          + (" (plateau stop)" if log.stopped_early else ""))
    print(f"checkpoint written to {out_dir}")
    return 0


def cmd_decode(args) -> int:
    if args.lam < 0:
        raise UsageError("--lambda must be >= 0")
    if args.beam < 1:
        raise UsageError("--beam must be >= 1")
    if not 1 <= args.n_best <= args.beam:
        raise UsageError("--n-best must be in [1, beam]")
    vocab = Vocab.load(_require_file(args.vocab, "vocab file"))
    lattice_dir = _require_file(args.lattice_dir, "lattice directory")
    lm = load_checkpoint(_require_file(args.lm, "LM checkpoint")) if args.lm else None
    config = FusionConfig(
        lam=args.lam, beam_size=args.beam, n_best=args.n_best,
        max_len=args.max_len, length_normalize=args.length_normalize,
    )
    rows = decode_utterances(lattice_dir, lm, config, vocab)
    write_decodes(rows, args.output)
    print(f"decoded {len(rows)} utterances to {args.output}")
    return 0


def _read_hyps(path: Path, refs: dict[str, tuple[str, str]]) -> dict[str, tuple[str, str]]:
    """Accept either a 3-column utt file or a 5-column decode file."""
    first = ""
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            first = line
            break
    if first.count("\t") == 4:
        out = {}
        for row in read_decodes(path):
            if row.utt_id not in refs:
                raise ValueError(f"hypothesis for unknown utterance {row.utt_id!r}")
            out[row.utt_id] = (refs[row.utt_id][0], row.text)
        return out
    return read_utt_file(path)


def _evaluate(refs_path: Path, hyps_path: Path):
    refs = read_utt_file(refs_path)
    hyps = _read_hyps(hyps_path, refs)
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise ValueError(f"hypotheses missing for {len(missing)} utterances, "
                         f"first: {missing[0]!r}")
    extra = sorted(set(hyps) - set(refs))
    if extra:
        raise ValueError(f"hypotheses for unknown utterances, first: {extra[0]!r}")
    per_locale: dict[str, list] = {}
    for utt in sorted(refs):
        locale, ref_text = refs[utt]
        per_locale.setdefault(locale, []).append(wer(ref_text, hyps[utt][1]))
    return per_locale


def cmd_evaluate(args) -> int:
    refs_path = _require_file(args.refs, "reference file")
    hyps_path = _require_file(args.hyps, "hypothesis file")
    per_locale = _evaluate(refs_path, hyps_path)
    baseline = None
    if args.baseline:
        base_report = report_from_json(_require_file(args.baseline, "baseline report"))
        baseline = {loc: e.wer for loc, e in base_report.locales.items()}
    report = aggregate(per_locale, baseline=baseline,
                       baseline_name=args.baseline_name)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emit_report(report, out_dir / "report.csv", "csv")
    emit_report(report, out_dir / "report.json", "json")
    for loc in sorted(report.locales):
        e = report.locales[loc]
        extra = f"  (baseline {e.baseline_wer:.4f}, werr {e.werr:+.2%})" \
            if e.werr is not None else ""
        print(f"{loc}: wer {e.wer:.4f}{extra}")
    print(f"macro avg {report.macro_avg_wer:.4f}, micro avg {report.micro_avg_wer:.4f}")
    if report.improved is not None:
        print(f"improved {report.improved}, tied {report.tied}, "
              f"regressed {report.regressed}")
    return 0


def cmd_flops(args) -> int:
    config = MoeLmConfig(
        num_layers=args.layers, model_dim=args.dim, num_heads=args.heads,
        head_dim=args.head_dim, ffn_multiplier=args.ffn_mult,
        num_experts=args.experts, experts_per_token=args.experts_per_token,
        vocab_size=args.vocab_size, max_seq_len=args.max_seq_len,
    )
    report = count_params_flops(config, context_len=args.context_len)
    for line in report.lines():
        print(line)
    return 0


def cmd_sweep_lambda(args) -> int:
    try:
        values = [float(x) for x in args.values.split(",") if x.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"--values must be comma-separated floats: {exc}") from exc
    if not values or any(v < 0 for v in values):
        raise UsageError("--values needs at least one lambda, all >= 0")
    vocab = Vocab.load(_require_file(args.vocab, "vocab file"))
    lattice_dir = _require_file(args.lattice_dir, "lattice directory")
    refs_path = _require_file(args.refs, "reference file")
    lm = load_checkpoint(_require_file(args.lm, "LM checkpoint"))
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    lines = ["lambda,macro_wer,micro_wer"]
    best = None
    for lam in values:
        config = FusionConfig(lam=lam, beam_size=args.beam)
        rows = decode_utterances(lattice_dir, lm, config, vocab)
        hyp_path = out_dir / f"decodes_lambda{lam:g}.tsv"
        write_decodes(rows, hyp_path)
        per_locale = _evaluate(refs_path, hyp_path)
        report = aggregate(per_locale)
        lines.append(f"{lam:g},{report.macro_avg_wer:.17g},{report.micro_avg_wer:.17g}")
        print(f"lambda {lam:g}: macro wer {report.macro_avg_wer:.4f}, "
              f"micro wer {report.micro_avg_wer:.4f}")
        if best is None or report.micro_avg_wer < best[1]:
            best = (lam, report.micro_avg_wer)
    (out_dir / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"best lambda {best[0]:g} (micro wer {best[1]:.4f})")
    return 0


def cmd_gen_synthetic(args) -> int:
    paths = gen_synthetic(
        args.output_dir, seed=args.seed,
        sentences_per_locale=args.sentences,
        eval_per_locale=args.eval_utts,
        vocab_size=args.vocab_size,
    )
    print(f"synthetic task written under {paths.root}")
    print(f"  LM manifest:        {paths.lm_manifest}")
    print(f"  tokenizer manifest: {paths.tokenizer_manifest}")
    print(f"  vocab:              {paths.vocab}")
    print(f"  references:         {paths.refs}")
    print(f"  lattices:           {paths.lattice_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moefusion",
        description="Sparse MoE language model with shallow-fusion decoding.",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="reserved; this build is single-threaded")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-tokenizer", help="induce a wordpiece vocab")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("train-lm", help="train the MoE language model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    for flag, typ in [
        ("--layers", int), ("--dim", int), ("--heads", int), ("--head-dim", int),
        ("--ffn-mult", int), ("--experts", int), ("--experts-per-token", int),
        ("--max-seq-len", int), ("--aux-loss-weight", float),
        ("--lr", float), ("--warmup", int), ("--steps", int),
        ("--batch-size", int), ("--packing-factor", int),
    ]:
        p.add_argument(flag, type=typ, default=None)
    p.add_argument("--lr-schedule", choices=["inverse_sqrt", "constant"], default=None)
    p.add_argument("--moe-impl", choices=["sparse", "dense"], default=None)
    p.add_argument("--untied", action="store_const", const=True, default=None)
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("decode", help="shallow-fusion beam decode lattices")
    p.add_argument("--lattice-dir", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--lm", help="LM checkpoint directory (omit for no LM)")
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--beam", type=int, default=8)
    p.add_argument("--n-best", type=int, default=1)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--length-normalize", action="store_true")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="score hypotheses against references")
    p.add_argument("--refs", required=True)
    p.add_argument("--hyps", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--baseline", help="baseline report.json for WERR")
    p.add_argument("--baseline-name", default="baseline")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("flops", help="closed-form parameter and FLOP report")
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--dim", type=int, default=768)
    p.add_argument("--heads", type=int, default=12)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--ffn-mult", type=int, default=4)
    p.add_argument("--experts", type=int, default=64)
    p.add_argument("--experts-per-token", type=int, default=2)
    p.add_argument("--vocab-size", type=int, default=16384)
    p.add_argument("--max-seq-len", type=int, default=1024)
    p.add_argument("--context-len", type=int, default=None)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("sweep-lambda", help="decode+evaluate across LM weights")
    p.add_argument("--lattice-dir", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--values", required=True,
                   help="comma-separated lambdas, e.g. 0,0.1,0.2,0.3")
    p.add_argument("--beam", type=int, default=8)
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("gen-synthetic", help="write the synthetic decoding task")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sentences", type=int, default=400)
    p.add_argument("--eval-utts", type=int, default=30)
    p.add_argument("--vocab-size", type=int, default=512)
    p.set_defaults(func=cmd_gen_synthetic)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        return 2
    except Exception as exc:  # runtime failures map to exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
