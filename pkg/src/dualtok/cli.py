"""Command-line interface.

One composable verb per workflow: gen-synthetic, ingest, train, encode,
index, search, eval, sweep, bench, ablate. Every subcommand is a pure
function of its inputs, flags, and seed; only benchmark timing fields
(and eval's JSON timing block) vary across runs.

Exit codes: 0 success, 1 usage/domain error, 2 data or format error,
3 numeric error. Diagnostics go to stderr; data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

from .encoder import (EncoderConfig, encode_samples, init_params, load_checkpoint,
                      save_checkpoint)
from .engine import InferenceConfig, two_stage_search, exhaustive_search
from .errors import DataError, DomainError, NumericError
from .evaluation import (GroundTruth, benchmark, evaluate_retrieval,
                         queries_from_index, sweep, sweep_table_lines)
from .features import read_feature_file, read_jsonl, write_feature_file
from .index import build_index, load_index, save_index
from .losses import LossConfig
from .similarity import SimilarityMode
from .synthetic import SyntheticDataConfig, read_pairs, write_synthetic_dataset
from .training import TrainConfig, history_lines, train

MODES = ("global", "local", "mixed", "two-stage")
TASKS = ("global", "local", "joint")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage errors to 1
        raise _UsageError(message)


def _add_seed(p):
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default: 0)")


def _add_inference(p):
    p.add_argument("--mode", choices=MODES, default="two-stage",
                   help="search mode (default: two-stage)")
    p.add_argument("--k", type=int, default=100,
                   help="first-stage candidate count (default: 100)")
    p.add_argument("--theta", type=float, default=0.5,
                   help="mixing weight between global and token scores (default: 0.5)")


def _add_training(p):
    p.add_argument("--task", choices=TASKS, default="joint",
                   help="which similarity modes feed the loss (default: joint)")
    p.add_argument("--epochs", type=int, default=30, help="training epochs (default: 30)")
    p.add_argument("--batch-size", type=int, default=40, help="batch size (default: 40)")
    p.add_argument("--lr", type=float, default=1e-3,
                   help="learning rate (default: 1e-3 at desk scale)")
    p.add_argument("--delta", type=float, default=0.2,
                   help="ranking margin (default: 0.2)")
    p.add_argument("--sigma", type=float, default=0.3,
                   help="consistency slack; inf disables the term (default: 0.3)")
    p.add_argument("--grad-clip", type=float, default=None,
                   help="gradient norm clip (default: off; 5.0 is conventional)")
    p.add_argument("--num-layers", type=int, default=4,
                   help="encoder layers per branch (default: 4)")
    p.add_argument("--num-heads", type=int, default=4,
                   help="attention heads (default: 4)")
    p.add_argument("--model-dim", type=int, default=64,
                   help="transformer width (default: 64)")
    p.add_argument("--output-dim", type=int, default=64,
                   help="shared embedding dimension (default: 64)")


def build_parser() -> _Parser:
    parser = _Parser(prog="dualtok",
                     description="Two-stage cross-modal retrieval toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", help="write a planted-correspondence dataset")
    p.add_argument("--pairs", type=int, default=512, help="pair count (default: 512)")
    p.add_argument("--concepts", type=int, default=64,
                   help="latent concept count (default: 64)")
    p.add_argument("--concepts-per-sample", type=int, default=4,
                   help="concepts drawn per pair (default: 4)")
    p.add_argument("--tokens-per-sample", type=int, default=8,
                   help="tokens per sample (default: 8)")
    p.add_argument("--latent-dim", type=int, default=32,
                   help="latent concept dimension (default: 32)")
    p.add_argument("--image-dim", type=int, default=32,
                   help="image feature dimension before box columns (default: 32)")
    p.add_argument("--text-dim", type=int, default=32,
                   help="text feature dimension (default: 32)")
    p.add_argument("--noise-std", type=float, default=0.05,
                   help="additive noise scale (default: 0.05)")
    _add_seed(p)
    p.add_argument("--out-dir", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("ingest", help="convert JSON-lines features to binary")
    p.add_argument("--input", required=True, help="JSON-lines file ('-' for stdin)")
    p.add_argument("--output", required=True, help="binary feature file to write")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train the dual encoder")
    p.add_argument("--images", required=True, help="image feature file")
    p.add_argument("--texts", required=True, help="text feature file")
    p.add_argument("--gt", required=True, help="pairing file (image_id<TAB>text_id)")
    _add_training(p)
    _add_seed(p)
    p.add_argument("--out-dir", required=True,
                   help="directory for checkpoint.tgp and history.tsv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode features through a checkpoint")
    p.add_argument("--input", required=True, help="raw feature file")
    p.add_argument("--checkpoint", required=True, help="encoder checkpoint")
    p.add_argument("--output", required=True, help="encoded feature file to write")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("index", help="build a gallery index from encoded features")
    p.add_argument("--input", required=True, help="encoded feature file")
    p.add_argument("--output", required=True, help="index file to write")
    p.add_argument("--checkpoint", default=None,
                   help="checkpoint whose digest to stamp into the index")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="rank a gallery for each query sample")
    p.add_argument("--index", required=True, help="gallery index file")
    p.add_argument("--query", required=True, help="query feature file")
    _add_inference(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="recall metrics in both directions")
    p.add_argument("--image-index", required=True)
    p.add_argument("--text-index", required=True)
    p.add_argument("--gt", required=True, help="pairing file")
    _add_inference(p)
    p.add_argument("--format", choices=("tsv", "json"), default="tsv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="metrics across one hyperparameter")
    p.add_argument("--param", choices=("theta", "k", "sigma"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--image-index", help="needed for theta/k sweeps")
    p.add_argument("--text-index", help="needed for theta/k sweeps")
    p.add_argument("--gt", required=True, help="pairing file")
    _add_inference(p)
    p.add_argument("--images", help="raw image features (sigma sweeps retrain)")
    p.add_argument("--texts", help="raw text features (sigma sweeps retrain)")
    _add_training(p)
    _add_seed(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="wall-clock timing of the search modes")
    p.add_argument("--image-index", required=True)
    p.add_argument("--text-index", required=True)
    p.add_argument("--modes", default="global,local,mixed,two-stage",
                   help="comma-separated modes (default: all four)")
    p.add_argument("--queries", type=int, default=None,
                   help="limit queries per direction (default: all)")
    _add_inference(p)
    p.add_argument("--format", choices=("tsv", "json"), default="tsv")
    p.add_argument("--threads", type=int, default=1,
                   help="torch thread count, recorded in the report (default: 1)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="task-mode x loss-variant comparison table")
    p.add_argument("--images", required=True)
    p.add_argument("--texts", required=True)
    p.add_argument("--gt", required=True)
    _add_training(p)
    _add_inference(p)
    _add_seed(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def _read_features(path: str):
    with open(path, "rb") as f:
        return read_feature_file(f)


def _read_pairs(path: str):
    with open(path, "r", encoding="utf-8") as f:
        return read_pairs(f)


def _load_index(path: str):
    with open(path, "rb") as f:
        return load_index(f)


def _encoder_config(args, images, texts) -> EncoderConfig:
    if not images or not texts:
        raise DataError("training needs nonempty image and text feature files")
    return EncoderConfig(
        num_layers=args.num_layers, num_heads=args.num_heads,
        model_dim=args.model_dim, output_dim=args.output_dim,
        image_input_dim=images[0].token_dim, text_input_dim=texts[0].token_dim,
        seed=args.seed,
    )


def _train_config(args, sigma: float | None = None) -> TrainConfig:
    loss = LossConfig(delta=args.delta,
                      sigma=args.sigma if sigma is None else sigma)
    return TrainConfig(loss=loss, task=args.task, batch_size=args.batch_size,
                       epochs=args.epochs, learning_rate=args.lr, seed=args.seed,
                       grad_clip_norm=args.grad_clip)


def cmd_gen_synthetic(args) -> int:
    cfg = SyntheticDataConfig(
        num_pairs=args.pairs, num_concepts=args.concepts,
        concepts_per_sample=args.concepts_per_sample,
        tokens_per_sample=args.tokens_per_sample, latent_dim=args.latent_dim,
        image_feature_dim=args.image_dim, text_feature_dim=args.text_dim,
        noise_std=args.noise_std, seed=args.seed,
    )
    paths = write_synthetic_dataset(cfg, args.out_dir)
    for name in ("images", "texts", "pairs"):
        print(f"wrote {paths[name]}", file=sys.stderr)
    return 0


def cmd_ingest(args) -> int:
    if args.input == "-":
        samples = read_jsonl(sys.stdin)
    else:
        with open(args.input, "r", encoding="utf-8") as f:
            samples = read_jsonl(f)
    with open(args.output, "wb") as f:
        write_feature_file(samples, f)
    print(f"wrote {args.output} ({len(samples)} samples)", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    images = _read_features(args.images)
    texts = _read_features(args.texts)
    pairs = _read_pairs(args.gt)
    params = init_params(_encoder_config(args, images, texts))
    result = train(images, texts, pairs, params, _train_config(args))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "checkpoint.tgp", "wb") as f:
        save_checkpoint(result.params, f)
    lines = history_lines(result.history)
    (out / "history.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for line in lines:
        print(line)
    print(f"wrote {out / 'checkpoint.tgp'}", file=sys.stderr)
    return 0


def cmd_encode(args) -> int:
    with open(args.checkpoint, "rb") as f:
        params = load_checkpoint(f)
    samples = _read_features(args.input)
    encoded = encode_samples(samples, params)
    with open(args.output, "wb") as f:
        write_feature_file(encoded, f)
    print(f"wrote {args.output} ({len(encoded)} samples)", file=sys.stderr)
    return 0


def cmd_index(args) -> int:
    samples = _read_features(args.input)
    digest = bytes(32)
    if args.checkpoint is not None:
        digest = hashlib.sha256(Path(args.checkpoint).read_bytes()).digest()
    idx = build_index(samples, digest=digest)
    with open(args.output, "wb") as f:
        save_index(idx, f)
    print(f"wrote {args.output} ({idx.n} samples)", file=sys.stderr)
    return 0


def cmd_search(args) -> int:
    idx = _load_index(args.index)
    queries = _read_features(args.query)
    cfg = InferenceConfig(k=args.k, theta=args.theta)
    for q in queries:
        if args.mode == "two-stage":
            ranking = two_stage_search(q, idx, cfg)
        else:
            theta = args.theta if args.mode == "mixed" else 0.0
            ranking = exhaustive_search(q, idx, SimilarityMode(args.mode, theta))
        print(f"# query {q.id}")
        for e in ranking:
            print(f"{e.id}\t{e.score:.17g}\t{e.stage}")
    return 0


def cmd_eval(args) -> int:
    ii = _load_index(args.image_index)
    ti = _load_index(args.text_index)
    gt = GroundTruth.from_pairs(_read_pairs(args.gt))
    cfg = InferenceConfig(k=args.k, theta=args.theta)
    report = evaluate_retrieval(ii, ti, gt, cfg, args.mode)
    if args.format == "json":
        print(json.dumps(report.to_json_dict(), indent=2))
    else:
        print("\n".join(report.to_tsv_lines()))
    return 0


def cmd_sweep(args) -> int:
    try:
        values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError as err:
        raise DomainError(f"could not parse --values: {err}") from None
    gt = GroundTruth.from_pairs(_read_pairs(args.gt))
    cfg = InferenceConfig(k=args.k, theta=args.theta)

    retrain = None
    ii = ti = None
    if args.param == "sigma":
        if not args.images or not args.texts:
            raise DomainError("sigma sweeps need --images and --texts to retrain")
        images = _read_features(args.images)
        texts = _read_features(args.texts)
        pairs = _read_pairs(args.gt)
        enc_cfg = _encoder_config(args, images, texts)

        def retrain(sigma):
            result = train(images, texts, pairs, init_params(enc_cfg),
                           _train_config(args, sigma=float(sigma)))
            return (build_index(encode_samples(images, result.params)),
                    build_index(encode_samples(texts, result.params)))
    else:
        if not args.image_index or not args.text_index:
            raise DomainError(f"{args.param} sweeps need --image-index and --text-index")
        ii = _load_index(args.image_index)
        ti = _load_index(args.text_index)

    rows = sweep(args.param, values, image_index=ii, text_index=ti,
                 ground_truth=gt, cfg=cfg, mode=args.mode, retrain=retrain)
    print("\n".join(sweep_table_lines(args.param, rows)))
    return 0


def cmd_bench(args) -> int:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    ii = _load_index(args.image_index)
    ti = _load_index(args.text_index)
    cfg = InferenceConfig(k=args.k, theta=args.theta)
    image_queries = queries_from_index(ii, args.queries)
    text_queries = queries_from_index(ti, args.queries)
    report = benchmark(ii, ti, image_queries, text_queries, cfg, modes,
                       threads=args.threads)
    if args.format == "json":
        print(json.dumps(report.to_json_dict(), indent=2))
    else:
        print("\n".join(report.to_tsv_lines()))
    return 0


def cmd_ablate(args) -> int:
    images = _read_features(args.images)
    texts = _read_features(args.texts)
    pairs = _read_pairs(args.gt)
    gt = GroundTruth.from_pairs(pairs)
    enc_cfg = _encoder_config(args, images, texts)
    cfg = InferenceConfig(k=args.k, theta=args.theta)
    print("task\tloss_variant\tt2i_r@1\tt2i_r@5\tt2i_r@10\ti2t_r@1\ti2t_r@5\ti2t_r@10")
    for task in TASKS:
        for variant, sigma in (("consistency", args.sigma), ("triplet", float("inf"))):
            train_cfg = replace(_train_config(args, sigma=sigma), task=task)
            result = train(images, texts, pairs, init_params(enc_cfg), train_cfg)
            ii = build_index(encode_samples(images, result.params))
            ti = build_index(encode_samples(texts, result.params))
            rep = evaluate_retrieval(ii, ti, gt, cfg, "two-stage")
            t, i = rep.text_to_image, rep.image_to_text
            print(f"{task}\t{variant}\t{t.r1:.6f}\t{t.r5:.6f}\t{t.r10:.6f}"
                  f"\t{i.r1:.6f}\t{i.r5:.6f}\t{i.r10:.6f}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        print("run 'dualtok --help' for usage", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse -h/--help
        return int(exc.code or 0)
    if getattr(args, "command", None) is None:
        parser.print_help(sys.stderr)
        return 1
    if hasattr(args, "threads"):
        import torch
        torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except _UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except DomainError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (DataError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
