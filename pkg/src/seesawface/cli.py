"""``seesawface`` command line: summarize, cost, compare, train-toy, eval-pairs, export, import.

Exit codes: 0 on success, 1 when the operation fails (bad files, shape
mismatches), 2 for usage errors such as unknown model names.
"""
from __future__ import annotations

import argparse
import json
import logging
import shlex
import sys
from pathlib import Path


from . import datasets, serialization
from .analytics import compare_reports, count_model, human
from .architectures import (
    MODELS,
    ModelSpec,
    SpecError,
    build_model,
    get_spec,
    parse_spec,
    scale_spec,
    table_rows,
    with_block_options,
)
from .training import ArcFaceHead, TrainConfig, fit
from .verification import PairSet, evaluate_model, preprocess_batch


class UsageError(Exception):
    pass


def kv_line(**fields) -> str:
    """One structured record: space-separated ``key=value`` with shell-style quoting."""
    return " ".join(f"{k}={shlex.quote(str(v))}" for k, v in fields.items())


def _shape(s) -> str:
    c, h, w = s
    return f"{h}×{w}×{c}"


def describe_layer(layer, in_shape=None) -> str:
    if layer.kind == "stem_conv":
        return f"3×3 Conv{' /2' if layer.stride == 2 else ''} {layer.out_channels}"
    if layer.kind == "dw_conv":
        return f"3×3 DWconv {layer.out_channels}"
    if layer.kind == "head_conv":
        return f"1×1 Conv {layer.out_channels}"
    if layer.kind == "gdconv":
        k = f"{in_shape[1]}×{in_shape[2]} " if in_shape else ""
        return f"linear GD{k}Conv {layer.out_channels}"
    if layer.kind == "embedding_linear":
        return f"linear 1×1 Conv {layer.out_channels}"
    b = layer.block
    label = "RBlock" if b.residual else "Block"
    stride = " /2" if b.stride == 2 else ""
    parts = [f"1×1 Conv {b.expansion_channels}", f"3×3 DWconv{stride} {b.expansion_channels}",
             f"1×1 Conv Linear {b.out_channels}"]
    extras = [b.variant]
    if b.use_se:
        extras.append("SE")
    if b.skip_branch:
        extras.append("maxpool skip")
    return f"{label} {layer.repeat}× {{{'; '.join(parts)}}} [{', '.join(extras)}]"


def resolve_spec(args) -> ModelSpec:
    if getattr(args, "spec", None):
        try:
            spec = parse_spec(Path(args.spec).read_text())
        except OSError as e:
            raise UsageError(f"cannot read spec file: {e}") from None
    else:
        name = args.model
        if name not in MODELS:
            raise UsageError(f"unknown model {name!r}; known models: {', '.join(MODELS)}")
        spec = get_spec(name)
    variant = getattr(args, "variant", None)
    spec = with_block_options(
        spec,
        split_ratio=getattr(args, "split_ratio", None),
        use_se=getattr(args, "se", None),
        variant=f"seesaw_{variant}" if variant else None,
    )
    width = getattr(args, "width", None)
    size = getattr(args, "input_size", None)
    if width not in (None, 1.0) or size is not None:
        spec = scale_spec(spec, width or 1.0, size)
    return spec


def _emit(args, lines_text, records):
    if args.format == "structured":
        for r in records:
            print(kv_line(**r))
    else:
        for line in lines_text:
            print(line)


def cmd_summarize(args) -> int:
    spec = resolve_spec(args)
    rows = table_rows(spec)
    text = [f"# {spec.name}", f"{'Input':>12} | {'Operator':<60} | Output"]
    recs = []
    for i, r in enumerate(rows):
        op = describe_layer(r.layer, r.in_shape)
        text.append(f"{_shape(r.in_shape):>12} | {op:<60} | {_shape(r.out_shape)}")
        recs.append({"model": spec.name, "row": i, "input": _shape(r.in_shape).replace("×", "x"),
                     "operator": op.replace("×", "x"), "output": _shape(r.out_shape).replace("×", "x")})
    _emit(args, text, recs)
    return 0


def cmd_cost(args) -> int:
    spec = resolve_spec(args)
    rep = count_model(spec)
    text = [f"# {spec.name}", f"{'layer':<10} {'params':>10} {'MAdds':>12}"]
    recs = []
    for r in rep.records:
        text.append(f"{r.name:<10} {r.params:>10,d} {r.madds:>12,d}")
        recs.append({"model": spec.name, "layer": r.name, "params": r.params, "madds": r.madds})
    text.append(f"{'total':<10} {rep.total_params:>10,d} {rep.total_madds:>12,d}   "
                f"({human(rep.total_params)} params, {human(rep.total_madds)} MAdds)")
    text.append(f"prelu slopes: {rep.prelu_params:,d}; params without prelu: "
                f"{rep.params_without_prelu:,d}")
    text.append(f"rule: {rep.counting_rule}")
    recs.append({"model": spec.name, "total_params": rep.total_params,
                 "total_madds": rep.total_madds, "params_h": human(rep.total_params),
                 "madds_h": human(rep.total_madds), "prelu_params": rep.prelu_params})
    _emit(args, text, recs)
    return 0


def cmd_compare(args) -> int:
    specs = []
    for name in args.models:
        if name not in MODELS:
            raise UsageError(f"unknown model {name!r}; known models: {', '.join(MODELS)}")
        specs.append(resolve_spec(argparse.Namespace(**{**vars(args), "model": name, "spec": None})))
    a, b = (count_model(s) for s in specs)
    cmp = compare_reports(a, b)
    text = [f"# {cmp.model_a} vs {cmp.model_b}",
            f"{'layer':<10} {'params A':>10} {'params B':>10} {'MAdds A':>12} {'MAdds B':>12} {'dMAdds':>12}"]
    recs = []
    for r in cmp.rows:
        text.append(f"{r.name:<10} {r.params_a:>10,d} {r.params_b:>10,d} {r.madds_a:>12,d} "
                    f"{r.madds_b:>12,d} {r.madds_delta:>12,d}")
        recs.append({"layer": r.name, "params_a": r.params_a, "params_b": r.params_b,
                     "madds_a": r.madds_a, "madds_b": r.madds_b})
    t = cmp.total
    text.append(f"{'total':<10} {t.params_a:>10,d} {t.params_b:>10,d} {t.madds_a:>12,d} "
                f"{t.madds_b:>12,d} {t.madds_delta:>12,d}")
    text.append(f"MAdds ratio {cmp.madds_ratio:.3f}  params ratio {cmp.params_ratio:.3f}")
    recs.append({"model_a": cmp.model_a, "model_b": cmp.model_b, "total_params_a": t.params_a,
                 "total_params_b": t.params_b, "total_madds_a": t.madds_a,
                 "total_madds_b": t.madds_b, "madds_ratio": f"{cmp.madds_ratio:.4f}",
                 "params_ratio": f"{cmp.params_ratio:.4f}"})
    _emit(args, text, recs)
    return 0


def _load_identity_images(manifest: Path, size: int):
    files, labels = datasets.read_identity_manifest(manifest)
    if not files:
        raise ValueError(f"{manifest}: no images listed")
    images = preprocess_batch([datasets.read_image(f) for f in files], (size, size))
    return images, labels


def cmd_train_toy(args) -> int:
    manifest = Path(args.dataset)
    if not manifest.is_file():
        print(f"error: dataset manifest {manifest} not found", file=sys.stderr)
        return 1
    spec = resolve_spec(args)
    images, labels = _load_identity_images(manifest, spec.input_shape[1])
    decays = tuple(d for d in (9, 13, 15) if d < args.epochs)
    cfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, initial_lr=args.lr,
                      lr_decay_epochs=decays, seed=args.seed)
    model = build_model(spec, seed=args.seed)
    head = ArcFaceHead.create(int(labels.max()) + 1, spec.embedding_dim, seed=args.seed)
    out_dir = Path(args.out_dir)

    def report(rec):
        print(f"epoch {rec.epoch} lr {rec.lr:g} loss {rec.loss:.4f} acc {rec.accuracy:.4f}",
              flush=True)

    log = fit(model, images, labels, head, cfg, checkpoint_dir=out_dir, on_epoch=report)
    (out_dir / "train_log.json").write_text(json.dumps(
        [vars(r) for r in log.epochs], indent=2) + "\n")
    print(f"final accuracy {log.final_accuracy:.4f}; {len(log.checkpoints)} checkpoints in {out_dir}")
    return 0


def _spec_for_checkpoint(args, checkpoint: Path) -> ModelSpec:
    sidecar = checkpoint.with_suffix(".json")
    if not args.model_given and not args.spec and sidecar.is_file():
        return parse_spec(json.loads(sidecar.read_text())["spec"])
    return resolve_spec(args)


def _load_weights(model, path: Path) -> None:
    records = serialization.load(path)
    model.load_state_dict(records)


def cmd_eval_pairs(args) -> int:
    checkpoint, pairs_path = Path(args.checkpoint), Path(args.pairs)
    for p in (checkpoint, pairs_path):
        if not p.is_file():
            print(f"error: {p} not found", file=sys.stderr)
            return 1
    spec = _spec_for_checkpoint(args, checkpoint)
    model = build_model(spec, seed=0)
    _load_weights(model, checkpoint)
    pairs = datasets.read_pair_manifest(pairs_path)
    pairset = PairSet([(datasets.read_image(a), datasets.read_image(b), s) for a, b, s in pairs],
                      fold_count=args.folds)
    rep = evaluate_model(model, pairset)
    text = [f"accuracy {rep.accuracy:.3f}"]
    text += [f"fold {i} accuracy {a:.3f} threshold {t:.6f}"
             for i, (a, t) in enumerate(zip(rep.fold_accuracies, rep.thresholds))]
    recs = [{"accuracy": f"{rep.accuracy:.6f}", "pairs": len(pairset), "folds": args.folds}]
    recs += [{"fold": i, "accuracy": f"{a:.6f}", "threshold": f"{t:.6f}"}
             for i, (a, t) in enumerate(zip(rep.fold_accuracies, rep.thresholds))]
    _emit(args, text, recs)
    return 0


def cmd_export(args) -> int:
    spec = resolve_spec(args)
    model = build_model(spec, seed=args.seed)
    serialization.save(args.output, model.state_dict())
    print(f"wrote {len(model.state_dict())} records ({model.num_parameters():,d} parameters) "
          f"for {spec.name} to {args.output}")
    return 0


def cmd_import(args) -> int:
    checkpoint = Path(args.checkpoint)
    if not checkpoint.is_file():
        print(f"error: {checkpoint} not found", file=sys.stderr)
        return 1
    spec = _spec_for_checkpoint(args, checkpoint)
    model = build_model(spec, seed=0)
    _load_weights(model, checkpoint)
    print(f"loaded {spec.name}: {len(model.state_dict())} records, "
          f"{model.num_parameters():,d} parameters")
    if args.output:
        serialization.save(args.output, model.state_dict())
        print(f"re-exported to {args.output}")
    return 0


def cmd_make_synthetic(args) -> int:
    images, labels = datasets.synthetic_identities(
        args.identities, args.per_identity, args.size, seed=args.seed)
    manifest = datasets.write_identity_dataset(args.out_dir, images, labels)
    files, labels = datasets.read_identity_manifest(manifest)
    pairs = datasets.make_pairs(labels, args.pairs, seed=args.seed)
    pair_path = datasets.write_pair_manifest(Path(args.out_dir) / "pairs.txt", files, pairs)
    print(f"wrote {manifest} ({len(files)} images) and {pair_path} ({len(pairs)} pairs)")
    return 0


def _model_args(p, seed=True):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--model", default=None, help=f"one of: {', '.join(MODELS)}")
    g.add_argument("--spec", help="architecture text file")
    if seed:
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-ratio", type=float, default=None)
    p.add_argument("--se", dest="se", action="store_true", default=None)
    p.add_argument("--no-se", dest="se", action="store_false")
    p.add_argument("--variant", choices=("shuffle", "share"), default=None)
    p.add_argument("--format", choices=("text", "structured"), default="text")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seesawface", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summarize", help="layer table with input/output shapes")
    _model_args(p)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("cost", help="parameter and MAdds report")
    _model_args(p)
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("compare", help="cost deltas and ratio of two models")
    p.add_argument("models", nargs=2, metavar="MODEL")
    p.add_argument("--split-ratio", type=float, default=None)
    p.add_argument("--format", choices=("text", "structured"), default="text")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("train-toy", help="ArcFace training on a small identity dataset")
    _model_args(p)
    p.add_argument("--dataset", required=True, help="identity manifest (path,label per line)")
    p.add_argument("--epochs", type=int, default=16)
    p.add_argument("--batch-size", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--width", type=float, default=0.25)
    p.add_argument("--input-size", type=int, default=28)
    p.add_argument("--out-dir", default="checkpoints")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("eval-pairs", help="10-fold verification accuracy of a checkpoint")
    _model_args(p, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True, help="pair manifest (path_a,path_b,0|1 per line)")
    p.add_argument("--folds", type=int, default=10)
    p.set_defaults(func=cmd_eval_pairs)

    p = sub.add_parser("export", help="build a model from a seed and write SSFN weights")
    _model_args(p)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("import", help="load SSFN weights into a model (optionally re-export)")
    _model_args(p, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("make-synthetic", help="write a synthetic identity dataset and pair list")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--identities", type=int, default=20)
    p.add_argument("--per-identity", type=int, default=10)
    p.add_argument("--size", type=int, default=28)
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if hasattr(args, "model"):
        args.model_given = args.model is not None
        if args.model is None:
            args.model = "seesawfacenet-shuffle"
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, SpecError, serialization.FormatError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
