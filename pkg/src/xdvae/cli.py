"""Command-line pipeline: prepare | train | eval | ablate.

Every command writes a run manifest next to its outputs recording the exact
flags, input fingerprints and derived seeds, so artifacts can be reproduced
bit-for-bit. Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys

from . import __version__, data, evaluate, train as training
from .model import ModelConfig
from .nn import NumericError

SEED_LABELS = ("init", "shuffle", "eps", "loo-split", "cold-split", "cold-negatives")


class CliError(Exception):
    """Usage-level problem detected after argument parsing."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the documented contract is 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path, command, args, inputs, artifacts, config=None):
    manifest = {
        "tool": "xdvae",
        "version": __version__,
        "command": command,
        "argv": [f"{k}={v}" for k, v in sorted(vars(args).items()) if k != "func"],
        "inputs": {p: _sha256(p) for p in inputs},
        "config": config,
        "seed": getattr(args, "seed", None),
        "seed_labels": list(SEED_LABELS),
        "artifacts": artifacts,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _parse_int_list(text, flag):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"{flag} expects a comma-separated integer list") from None
    if not values:
        raise CliError(f"{flag} is empty")
    return values


def _parse_float_list(text, flag):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"{flag} expects a comma-separated float list") from None
    if not values:
        raise CliError(f"{flag} is empty")
    return values


def _parse_labels(text):
    return {v.strip() for v in text.split(",") if v.strip()}


def _summary_lines(bundle):
    lines = [f"users (shared): {bundle.m}"]
    for mat in (bundle.source, bundle.target):
        lines.append(
            f"{mat.domain}: items {mat.n_items}, interactions {mat.n_interactions}, "
            f"sparsity {100.0 * mat.sparsity():.2f}%"
        )
    return lines


# ---------------------------------------------------------------------------
# prepare


def cmd_prepare(args):
    source_labels = _parse_labels(args.source_labels)
    target_labels = _parse_labels(args.target_labels)
    if not source_labels or not target_labels:
        raise CliError("empty label set")
    overlap = source_labels & target_labels
    if overlap:
        raise CliError(f"source/target label sets overlap: {sorted(overlap)}")

    ratings = data.load_ratings(args.ratings, args.format)
    labels = data.load_item_labels(args.items, args.format)
    source, target = data.split_domains(ratings, labels, source_labels, target_labels)
    bundle = data.binarize_and_filter(
        source, target,
        threshold=args.min_rating,
        min_target_positives=args.min_target_positives,
    )
    bundle.provenance.update(
        source_labels=sorted(source_labels),
        target_labels=sorted(target_labels),
        seed=args.seed,
    )
    split, _ = data.build_loo_split(bundle, args.seed, policy=args.policy)
    if args.aux:
        vectors = data.load_aux_vectors(args.aux, expected_dim=args.aux_dim)
        data.attach_aux(bundle, vectors, expected_dim=args.aux_dim)
    data.save_bundle(bundle, args.out, split=split)
    manifest = _write_manifest(
        f"{args.out}.manifest.json", "prepare", args,
        inputs=[args.ratings, args.items] + ([args.aux] if args.aux else []),
        artifacts=[args.out],
    )
    for line in _summary_lines(bundle):
        print(line)
    print(f"bundle: {args.out}")
    print(f"manifest: {manifest}")
    return 0


# ---------------------------------------------------------------------------
# train


def _config_from_args(args, bundle):
    dims = tuple(_parse_int_list(args.dims, "--dims"))
    aux_dim = bundle.aux_vectors.shape[1] if bundle.aux_vectors is not None else None
    return ModelConfig(
        variant=args.variant,
        beta=args.beta,
        lambda_reg=args.lambda_reg,
        lr=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        latent_dim=args.latent_dim,
        enc_dims_source=dims,
        enc_dims_target=dims,
        seed=args.seed,
        aux_dim=aux_dim if args.variant == "aux" else None,
        aux_attach=args.aux_attach,
        cold_fraction=args.cold_fraction,
    ).validate()


def _training_view(bundle, split, config):
    """Rows actually trained on: LOO-held-out removed, or cold train users only."""
    if config.variant == "cold-start":
        cold = data.cold_start_split(bundle, config.cold_fraction, config.seed)
        return data.restrict_users(bundle, cold.train_users)
    if split is None:
        return bundle
    return data.training_bundle(bundle, split)


def cmd_train(args):
    bundle, split = data.load_bundle(args.bundle)
    config = _config_from_args(args, bundle)
    view = _training_view(bundle, split, config)
    model, history = training.train(view, config, early_stop=args.early_stop)
    training.save_checkpoint(model, args.out)
    history_path = args.history or f"{args.out}.history.json"
    history.save(history_path)
    manifest = _write_manifest(
        f"{args.out}.manifest.json", "train", args,
        inputs=[args.bundle],
        artifacts=[args.out, history_path],
        config=config.to_dict(),
    )
    final = history.epochs[-1].as_dict() if history.epochs else {}
    print(f"trained {config.variant!r} for {len(history.epochs)} epochs")
    for key, value in final.items():
        print(f"  {key}: {value:.6f}")
    if history.plateau_warning:
        print("warning: loss was still moving over the final epochs")
    print(f"checkpoint: {args.out}")
    print(f"manifest: {manifest}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args):
    ks = _parse_int_list(args.ks, "--ks")
    if any(k < 1 or k > 100 for k in ks):
        raise CliError("--ks values must be in 1..100")
    model, config = training.load_checkpoint(args.model)
    bundle, split = data.load_bundle(args.bundle)
    if bundle.source.n_items != model.n_source or bundle.target.n_items != model.n_target:
        raise data.DataError("bundle dimensions do not match the checkpoint")
    seed = args.seed if args.seed is not None else config.seed

    if args.protocol == "standard":
        if split is None:
            raise data.DataError("bundle carries no leave-one-out split")
        view = data.training_bundle(bundle, split)
        reports = [evaluate.evaluate(model, view, split, ks=ks)]
    elif args.protocol == "degrade":
        if split is None:
            raise data.DataError("bundle carries no leave-one-out split")
        fractions = _parse_float_list(args.fractions, "--fractions")
        view = data.training_bundle(bundle, split)
        reports = evaluate.evaluate_degraded(model, view, split, fractions, seed, ks=ks)
    elif args.protocol == "coldstart":
        cold = data.cold_start_split(bundle, config.cold_fraction, config.seed)
        reports = [evaluate.evaluate_cold_start(model, cold, bundle, ks=ks, seed=seed)]
    else:  # pragma: no cover - argparse choices guard this
        raise CliError(f"unknown protocol {args.protocol!r}")

    json_path, csv_path = f"{args.out}.json", f"{args.out}.csv"
    manifest_path = f"{args.out}.manifest.json"
    evaluate.write_reports_json(reports, json_path, manifest=manifest_path)
    evaluate.write_reports_csv(reports, csv_path, manifest=manifest_path)
    _write_manifest(
        manifest_path, "eval", args,
        inputs=[args.model, args.bundle],
        artifacts=[json_path, csv_path],
        config=config.to_dict(),
    )
    for r in reports:
        tag = f" {r.extra}" if r.extra else ""
        print(f"[{r.protocol}{tag}] " + "  ".join(
            f"HR@{k}={r.hr[k]:.4f} NDCG@{k}={r.ndcg[k]:.4f}" for k in r.ks
        ))
    print(f"metrics: {json_path} {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args):
    bundle, split = data.load_bundle(args.bundle)
    if split is None:
        raise data.DataError("bundle carries no leave-one-out split")
    ks = _parse_int_list(args.ks, "--ks")
    view = data.training_bundle(bundle, split)
    dims = tuple(_parse_int_list(args.dims, "--dims"))
    base = ModelConfig(
        variant="generic",
        beta=args.beta,
        lambda_reg=args.lambda_reg,
        lr=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        latent_dim=args.latent_dim,
        enc_dims_source=dims,
        enc_dims_target=dims,
        seed=args.seed,
    ).validate()

    reports = []
    if args.beta_sweep:
        betas = _parse_float_list(args.beta_sweep, "--beta-sweep")
        for beta in betas:
            cfg = ModelConfig.from_dict(base.to_dict())
            cfg.beta = beta
            model, _ = training.train(view, cfg)
            report = evaluate.evaluate(model, view, split, ks=ks)
            report.variant = f"generic-b{beta:g}"
            report.protocol = "beta-sweep"
            report.extra = {"beta": beta}
            reports.append(report)
    else:
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
        known = {"generic", "single", "single0", "merged", "merged0", "no-mmd"}
        bad = [v for v in variants if v.lower() not in known]
        if bad:
            raise CliError(f"unknown ablation variants: {bad}")
        results = training.run_variant_suite(view, base, variants)
        for name, (model, _) in results.items():
            report = evaluate.evaluate(model, view, split, ks=ks)
            report.variant = name
            report.protocol = "ablation"
            reports.append(report)

    json_path, csv_path = f"{args.out}.json", f"{args.out}.csv"
    manifest_path = f"{args.out}.manifest.json"
    evaluate.write_reports_json(reports, json_path, manifest=manifest_path)
    evaluate.write_reports_csv(reports, csv_path, manifest=manifest_path)
    _write_manifest(
        manifest_path, "ablate", args,
        inputs=[args.bundle],
        artifacts=[json_path, csv_path],
        config=base.to_dict(),
    )
    for r in reports:
        print(f"{r.variant}: " + "  ".join(
            f"HR@{k}={r.hr[k]:.4f} NDCG@{k}={r.ndcg[k]:.4f}" for k in r.ks
        ))
    print(f"table: {json_path} {csv_path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="xdvae", description=__doc__)
    parser.add_argument("--version", action="version", version=f"xdvae {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="ingest ratings and build a dataset bundle")
    p.add_argument("--ratings", required=True, help="ratings file")
    p.add_argument("--items", required=True, help="item-label file (genres/categories)")
    p.add_argument("--format", choices=("movielens-dat", "csv"), default="movielens-dat")
    p.add_argument("--source-labels", required=True, help="comma-separated label set")
    p.add_argument("--target-labels", required=True, help="comma-separated label set")
    p.add_argument("--min-rating", type=int, default=4)
    p.add_argument("--min-target-positives", type=int, default=2)
    p.add_argument("--policy", choices=("random", "latest"), default="random",
                   help="held-out selection policy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--aux", default=None, help="optional per-user auxiliary vectors csv")
    p.add_argument("--aux-dim", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--bundle", required=True)
    p.add_argument("--variant", default="generic",
                   choices=("generic", "single", "merged", "no-mmd", "cold-start", "aux"))
    p.add_argument("--beta", type=float, default=15.0)
    p.add_argument("--lambda-reg", type=float, default=1e-4)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--latent-dim", type=int, default=128)
    p.add_argument("--dims", default="256", help="hidden widths, e.g. '512,256'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--aux-attach", choices=("both", "source", "target"), default="both")
    p.add_argument("--cold-fraction", type=float, default=0.1)
    p.add_argument("--early-stop", action="store_true")
    p.add_argument("--history", default=None, help="history JSON path")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a protocol")
    p.add_argument("--model", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--ks", default="5,10,20,50")
    p.add_argument("--protocol", choices=("standard", "degrade", "coldstart"),
                   default="standard")
    p.add_argument("--fractions", default="1.0,0.75,0.5,0.25,0.0")
    p.add_argument("--seed", type=int, default=None,
                   help="protocol seed (defaults to the checkpoint seed)")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    p.add_argument("--bundle", required=True)
    p.add_argument("--variants", default="generic,single,single0,merged,merged0,no-mmd")
    p.add_argument("--beta-sweep", default=None, help="comma-separated betas")
    p.add_argument("--ks", default="5,10,20,50")
    p.add_argument("--beta", type=float, default=15.0)
    p.add_argument("--lambda-reg", type=float, default=1e-4)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--latent-dim", type=int, default=128)
    p.add_argument("--dims", default="256")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"xdvae: error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:  # DataError is a ValueError
        print(f"xdvae: data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"xdvae: numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
