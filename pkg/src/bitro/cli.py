"""Command-line entry point: ``bitro <command> [flags]``.

Every command writes its outputs plus ``run_record.json`` into ``--out``.
Failures print one ``error: <kind>: <message>`` line to stderr and exit
non-zero. Relative paths resolve against ``--workdir``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from bitro import __version__

log = logging.getLogger("bitro")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# shared helpers


def _version() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                              text=True, cwd=Path(__file__).parent, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"v{__version__}-g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _config_hash(args: argparse.Namespace) -> str:
    body = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "workdir")}
    return hashlib.sha256(json.dumps(body, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _path(args, value) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else Path(args.workdir) / p


def _out_dir(args) -> Path:
    out = _path(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _run_record(args, out: Path, outputs: list[Path], timings: dict, argv: list[str]) -> None:
    record = {
        "command": ["bitro", *argv],
        "config_hash": _config_hash(args),
        "seed": getattr(args, "seed", None),
        "version": _version(),
        "timings_s": timings,
        "outputs": sorted(str(p.relative_to(out)) if p.is_relative_to(out) else str(p) for p in outputs),
    }
    _write_json(out / "run_record.json", record)


def _write_history(path: Path, history: list[dict]) -> None:
    pd.DataFrame(history, columns=["epoch", "train_loss", "val_loss", "grad_norm"]).to_csv(
        path, sep="\t", index=False, float_format="%.17g", na_rep="nan")


def _train_config(args):
    from bitro.train.loop import TrainConfig

    return TrainConfig(lr=args.lr, epochs=args.epochs, patience=args.patience, clip=args.clip,
                       lam=args.lam, dropout=args.dropout, seed=args.seed, batch_size=args.batch_size)


def _samples(args, manifest):
    from bitro.ingest.manifest import load_manifest
    from bitro.pipeline import load_samples

    desc = load_manifest(_path(args, manifest))
    ids = args.samples.split(",") if getattr(args, "samples", None) else None
    if ids:
        unknown = sorted(set(ids) - set(desc.sample_ids))
        if unknown:
            raise UsageError(f"unknown sample id(s): {', '.join(unknown)}")
    return desc, load_samples(desc, ids)


def _arch(args) -> dict:
    return {"dim": args.dim, "gat_layers": args.gat_layers, "gat_heads": args.gat_heads,
            "k_neighbors": args.k_neighbors, "n_pos": args.n_pos, "trf_depth": args.trf_depth,
            "trf_heads": args.trf_heads}


def _softplus(args) -> bool | None:
    return False if args.no_softplus else None


def _write_phenotypes(path: Path, pre, samples) -> None:
    from bitro.ingest.tables import write_phenotypes

    rows = []
    for s in samples:
        labels = pre.labels(pre.cell_features(s.cells))
        if labels is not None:
            rows.extend(zip([s.id] * s.cells.n, s.cells.cell_ids.tolist(), labels.tolist()))
    write_phenotypes(path, rows)


def _write_norm_stats(path: Path, pre) -> bool:
    if pre.norm is None:
        return False
    pre.norm.write(path)
    return True


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> list[Path]:
    from bitro.synth import PlantedWorld, paired_tasks, simulate, write_dataset

    out = _out_dir(args)
    world = PlantedWorld(seed=args.seed, d=args.features, g=args.genes, k_types=args.types, noise=args.noise)
    if args.task == "paired":
        st, bulk = paired_tasks(world, args.n_samples, args.bulk_samples, args.spots, args.cells)
        return [write_dataset(out / "st", world, st), write_dataset(out / "bulk", world, bulk)]
    return [write_dataset(out, world, simulate(world, args.n_samples, args.spots, args.cells, args.task))]


def cmd_prep_stain(args) -> list[Path]:
    from bitro.stain import StainBasis, normalize_to_reference, read_png, reference_basis, write_png

    out = _out_dir(args)
    ref_path = _path(args, args.ref)
    if args.fit_ref:
        basis = reference_basis(read_png(_path(args, args.fit_ref)), args.lambda_sparse, args.iters)
        basis.write(ref_path)
    basis = StainBasis.read(ref_path)
    src = _path(args, args.input)
    tiles = sorted(src.glob("*.png"))
    if not tiles:
        raise FileNotFoundError(f"no .png tiles in {src}")
    outputs = []
    for tile in tiles:
        px = normalize_to_reference(read_png(tile), basis, lambda_sparse=args.lambda_sparse, iters=args.iters)
        write_png(out / tile.name, px)
        outputs.append(out / tile.name)
    return outputs


def cmd_prep_genes(args) -> list[Path]:
    from bitro.ingest.genes import NormStats, final_gene_set, select_hvgs, to_log1p
    from bitro.ingest.tables import ExpressionFrame, write_gene_list

    out = _out_dir(args)
    desc, samples = _samples(args, args.manifest)
    frames = {s.id: to_log1p(s.expr) for s in samples}
    hvg = select_hvgs(frames, args.n_bins, args.top_hvg, tuple(args.exclude_prefix))
    genes = final_gene_set(hvg.candidates, list(frames.values()), args.k, args.cap, hvg.best_z())
    write_gene_list(out / "genes.txt", genes)
    scores = hvg.best_z()
    pd.DataFrame({"gene": scores.index, "z": scores.values, "candidate": scores.index.isin(hvg.candidates),
                  "selected": scores.index.isin(genes)}).to_csv(out / "hvg_scores.tsv", sep="\t", index=False,
                                                                 float_format="%.17g")
    pooled = np.concatenate([f.select_genes(genes).values for f in frames.values()])
    NormStats.fit(ExpressionFrame([str(i) for i in range(len(pooled))], pooled, genes,
                                  space_tag="log1p")).write(out / "norm_stats.tsv")
    return [out / "genes.txt", out / "hvg_scores.tsv", out / "norm_stats.tsv"]


def cmd_train(args) -> list[Path]:
    from bitro.pipeline import train_from_scratch
    from bitro.train.params import save_checkpoint

    out = _out_dir(args)
    desc, samples = _samples(args, args.manifest)
    if args.task and args.task != desc.task:
        raise UsageError(f"--task {args.task} does not match manifest task {desc.task}")
    genes = desc.gene_list()
    result, pre = train_from_scratch(
        samples, _train_config(args), patch_px=desc.patch_px, genes=genes,
        normalize=not args.no_normalize, pca_dim=args.pca_dim or None, n_clusters=args.clusters,
        max_cells=args.max_cells, use_softplus=_softplus(args), val_frac=args.val_frac, arch=_arch(args),
        pca_mode=args.pca_mode,
        callback=lambda row: log.info("epoch %d val %.6g", row["epoch"], row["val_loss"]))
    save_checkpoint(out / "model.bitro", result.tree)
    _write_history(out / "history.tsv", result.history)
    outputs = [out / "model.bitro", out / "history.tsv", out / "phenotypes.tsv"]
    if _write_norm_stats(out / "norm_stats.tsv", pre):
        outputs.append(out / "norm_stats.tsv")
    _write_phenotypes(out / "phenotypes.tsv", pre, samples)
    _write_json(out / "summary.json", {
        "command": "train", "train_config": _train_config(args).to_dict(), "arch": _arch(args),
        "normalize": not args.no_normalize, "softplus": result.tree.header["use_softplus"],
        "pca_dim": args.pca_dim, "pca_mode": args.pca_mode, "clusters": args.clusters, "max_cells": args.max_cells,
        "val_frac": args.val_frac, "best_epoch": result.best_epoch, "best_val": result.best_val,
        "stopped_epoch": result.stopped_epoch, "samples": [s.id for s in samples], "n_genes": len(pre.genes)})
    outputs.append(out / "summary.json")
    return outputs


def cmd_finetune(args) -> list[Path]:
    from bitro.train.params import load_checkpoint, save_checkpoint
    from bitro.train.transfer import transfer

    out = _out_dir(args)
    base, base_adapter = load_checkpoint(_path(args, args.base))
    if base_adapter is not None:
        from bitro.train.lora import merge

        base = merge(base, base_adapter)
    desc, samples = _samples(args, args.manifest)
    targets = args.lora_targets.split(",") if args.lora_targets else None
    lora = not args.no_lora
    res = transfer(base, samples, _train_config(args), direction=args.direction, lora=lora,
                   genes=desc.gene_list(), patch_px=desc.patch_px, val_frac=args.val_frac,
                   rank=args.lora_rank, alpha=args.lora_alpha, targets=targets)
    outputs = [out / "model.bitro", out / "history.tsv", out / "summary.json"]
    if lora:
        save_checkpoint(out / "adapter.bitro", res.tree, res.adapter)
        outputs.append(out / "adapter.bitro")
    save_checkpoint(out / "model.bitro", res.merged())
    _write_history(out / "history.tsv", res.fit.history)
    _write_json(out / "summary.json", {
        "command": "finetune", "direction": args.direction, "lora": lora,
        "lora_rank": args.lora_rank if lora else None, "lora_alpha": args.lora_alpha if lora else None,
        "lora_targets": res.adapter.targets if lora else None,
        "fresh_gene_rows": int(res.fresh_rows.sum()), "train_config": _train_config(args).to_dict(),
        "best_epoch": res.fit.best_epoch, "best_val": res.fit.best_val, "stopped_epoch": res.fit.stopped_epoch})
    return outputs


def cmd_eval(args) -> list[Path]:
    from bitro.eval import EvalReport, run_protocol
    from bitro.model import model_config
    from bitro.pipeline import Preprocessor, arch_of, predict_samples, train_from_scratch, worker_count
    from bitro.train.lora import merge
    from bitro.train.params import load_checkpoint

    out = _out_dir(args)
    tree, adapter = load_checkpoint(_path(args, args.model))
    if adapter is not None:
        tree = merge(tree, adapter)
    desc, samples = _samples(args, args.manifest)
    cfg = model_config(tree)
    genes = cfg.genes
    meta = {"model": str(args.model), "manifest": str(args.manifest)}
    if args.protocol == "none":
        preds = predict_samples(tree, samples)
        reports = [EvalReport.from_predictions(p.unit_ids, genes, p.y_true, p.y_pred, fold=0) for p in preds]
        report = EvalReport.combine(reports, {"protocol": "none", "metric_space": "log1p", **meta})
    else:
        pre0 = Preprocessor.from_tree(tree)
        tc = _train_config(args)
        pca_dim = pre0.pca_dim
        n_clusters = 0 if pre0.centroids is None else len(pre0.centroids)

        def fit_fold(train, fold):
            res, _ = train_from_scratch(train, tc, patch_px=desc.patch_px, genes=genes,
                                        normalize=pre0.normalize, pca_dim=pca_dim, n_clusters=n_clusters,
                                        max_cells=pre0.max_cells, use_softplus=cfg.use_softplus,
                                        val_frac=args.val_frac, arch=arch_of(cfg), pca_mode=pre0.pca_mode)

            def _predict(test):
                preds = predict_samples(res.tree, test)
                return (sum((p.unit_ids for p in preds), []), genes,
                        np.concatenate([p.y_true for p in preds]), np.concatenate([p.y_pred for p in preds]))
            return _predict

        meta["train_config"] = tc.to_dict()
        report = run_protocol(samples, args.protocol, fit_fold, args.seed, worker_count(), meta)
    report.write(out)
    return [out / "eval_report.tsv", out / "summary.json"]


def cmd_deconvolve(args) -> list[Path]:
    from bitro.mil import deconvolve
    from bitro.model import model_config
    from bitro.pipeline import predict_samples
    from bitro.train.lora import merge
    from bitro.train.params import load_checkpoint

    out = _out_dir(args)
    tree, adapter = load_checkpoint(_path(args, args.model))
    if adapter is not None:
        tree = merge(tree, adapter)
    genes = model_config(tree).genes
    _, samples = _samples(args, args.manifest)
    outputs = []
    for p in predict_samples(tree, samples):
        counts = np.expm1(p.y_pred)  # deconvolution runs in count space so cells sum to the unit
        rows = []
        for bag, attn, y in zip(p.bags, p.attention, counts):
            cell = deconvolve(attn, y)
            frame = pd.DataFrame({"cell_id": bag.cell_ids, "unit_id": bag.unit_id,
                                  "x": bag.coords[:, 0], "y": bag.coords[:, 1]})
            rows.append(pd.concat([frame, pd.DataFrame(cell, columns=[f"g_{g}" for g in genes])], axis=1))
        (out / p.sample_id).mkdir(parents=True, exist_ok=True)
        path = out / p.sample_id / "cells_expr.tsv"
        pd.concat(rows, ignore_index=True).to_csv(path, sep="\t", index=False, float_format="%.17g")
        units = pd.DataFrame({"unit_id": p.unit_ids,
                              "x": p.unit_coords[:, 0] if p.unit_coords is not None else "",
                              "y": p.unit_coords[:, 1] if p.unit_coords is not None else ""})
        upath = out / p.sample_id / "pred_expr.tsv"
        pd.concat([units, pd.DataFrame(counts, columns=[f"g_{g}" for g in genes])], axis=1).to_csv(
            upath, sep="\t", index=False, float_format="%.17g")
        outputs += [path, upath]
    return outputs


# ---------------------------------------------------------------------------
# parser


def _add_common(p):
    p.add_argument("--workdir", default=".", help="base directory for relative paths (default: .)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")


def _add_training(p, lr_default=1e-4):
    from bitro.train.loop import CLIP_NORM, DEFAULT_LAMBDA, MAX_EPOCHS, PATIENCE

    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=lr_default, help=f"learning rate, one of 1e-3, 5e-4, 1e-4, 1e-5 (default: {lr_default:g})")
    g.add_argument("--epochs", type=int, default=MAX_EPOCHS, help=f"epoch cap (default: {MAX_EPOCHS})")
    g.add_argument("--patience", type=int, default=PATIENCE, help=f"early-stopping patience (default: {PATIENCE})")
    g.add_argument("--clip", type=float, default=CLIP_NORM, help=f"global gradient-norm clip (default: {CLIP_NORM})")
    g.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA,
                   help=f"cluster-loss weight; 0 disables it (default: {DEFAULT_LAMBDA})")
    g.add_argument("--dropout", type=float, default=0.0, help="dropout, one of 0, 0.1, 0.2 (default: 0)")
    g.add_argument("--batch-size", type=int, default=None, help="bags per step (default: 32 spot, 1 bulk)")
    g.add_argument("--val-frac", type=float, default=0.1, help="fraction of bags held out for validation (default: 0.1)")


def _add_model(p):
    g = p.add_argument_group("model")
    g.add_argument("--dim", type=int, default=128, help="model width (default: 128)")
    g.add_argument("--gat-layers", type=int, default=2, help="GAT layers (default: 2)")
    g.add_argument("--gat-heads", type=int, default=4, help="GAT heads (default: 4)")
    g.add_argument("--k-neighbors", type=int, default=8, help="kNN graph degree (default: 8)")
    g.add_argument("--n-pos", type=int, default=1024, help="positional bins per axis (default: 1024)")
    g.add_argument("--trf-depth", type=int, default=2, help="transformer blocks (default: 2)")
    g.add_argument("--trf-heads", type=int, default=4, help="transformer heads (default: 4)")
    g.add_argument("--pca-dim", type=int, default=128, help="PCA width for wider features; 0 skips PCA (default: 128)")
    g.add_argument("--pca-mode", choices=("shared", "per_sample"), default="shared",
                   help="one PCA basis for all training cells, or one per slide (default: shared)")
    g.add_argument("--clusters", type=int, default=8, help="k-means phenotypes (default: 8)")
    g.add_argument("--max-cells", type=int, default=4096, help="cell cap per bulk bag (default: 4096)")
    g.add_argument("--no-normalize", action="store_true", help="train on log1p targets instead of z-scores")
    g.add_argument("--no-softplus", action="store_true", help="linear readout even for log1p targets")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bitro", description="Gene expression from cell features and coordinates.")
    parser.add_argument("--version", action="version", version=f"bitro {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset with planted truth")
    _add_common(p)
    p.add_argument("--task", choices=("spot", "bulk", "paired"), default="spot", help="dataset kind (default: spot)")
    p.add_argument("--n-samples", type=int, default=6, help="samples (default: 6)")
    p.add_argument("--bulk-samples", type=int, default=6, help="bulk samples for --task paired (default: 6)")
    p.add_argument("--spots", type=int, default=64, help="spots per sample (default: 64)")
    p.add_argument("--cells", type=int, default=24, help="cells per spot (default: 24)")
    p.add_argument("--features", type=int, default=16, help="feature width (default: 16)")
    p.add_argument("--genes", type=int, default=32, help="genes (default: 32)")
    p.add_argument("--types", type=int, default=4, help="planted cell types (default: 4)")
    p.add_argument("--noise", type=float, default=0.1, help="expression noise scale (default: 0.1)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prep-stain", help="normalize PNG tiles to a reference stain basis")
    _add_common(p)
    p.add_argument("--ref", required=True, help="reference basis.tsv (written first when --fit-ref is given)")
    p.add_argument("--in", dest="input", required=True, help="directory of .png tiles")
    p.add_argument("--fit-ref", default=None, help="PNG to estimate the reference basis from (default: none, read --ref)")
    p.add_argument("--lambda-sparse", type=float, default=0.1, help="L1 weight on stain densities (default: 0.1)")
    p.add_argument("--iters", type=int, default=200, help="factorization iterations (default: 200)")
    p.set_defaults(func=cmd_prep_stain)

    p = sub.add_parser("prep-genes", help="select highly variable, highly expressed genes")
    _add_common(p)
    p.add_argument("--manifest", required=True, help="dataset manifest.json")
    p.add_argument("--samples", default=None, help="comma-separated training sample ids (default: all)")
    p.add_argument("--n-bins", type=int, default=20, help="mean-expression bins (default: 20)")
    p.add_argument("--top-hvg", type=int, default=2000, help="top genes per sample by dispersion (default: 2000)")
    p.add_argument("--k", type=int, default=1000, help="top-K by mean and by SD (default: 1000)")
    p.add_argument("--cap", type=int, default=None, help="keep at most this many genes by HVG score (default: no cap)")
    p.add_argument("--exclude-prefix", nargs="*", default=["MT-", "RPS", "RPL"],
                   help="gene-name prefixes to drop (default: MT- RPS RPL)")
    p.set_defaults(func=cmd_prep_genes)

    p = sub.add_parser("train", help="train a model from scratch")
    _add_common(p)
    p.add_argument("--manifest", required=True, help="dataset manifest.json")
    p.add_argument("--task", choices=("spot", "bulk"), default=None, help="expected task, checked against the manifest (default: the manifest task)")
    p.add_argument("--samples", default=None, help="comma-separated sample ids to train on (default: all)")
    _add_training(p)
    _add_model(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="transfer a checkpoint to another task")
    _add_common(p)
    p.add_argument("--base", required=True, help="pretrained model.bitro")
    p.add_argument("--manifest", required=True, help="target dataset manifest.json")
    p.add_argument("--samples", default=None, help="comma-separated sample ids to train on (default: all)")
    p.add_argument("--direction", choices=("st2bulk", "bulk2st"), required=True, help="transfer direction")
    p.add_argument("--lora-rank", type=int, default=8, help="adapter rank (default: 8)")
    p.add_argument("--lora-alpha", type=float, default=16.0, help="adapter scale numerator (default: 16)")
    p.add_argument("--lora-targets", default=None, help="comma-separated target tensors (default: attention, FFN, gene queries, readout)")
    p.add_argument("--no-lora", action="store_true", help="finetune all weights instead of adapters")
    _add_training(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="score a model or run a cross-validation protocol")
    _add_common(p)
    p.add_argument("--model", required=True, help="model.bitro")
    p.add_argument("--manifest", required=True, help="dataset manifest.json")
    p.add_argument("--samples", default=None, help="comma-separated sample ids (default: all)")
    p.add_argument("--protocol", choices=("none", "loo", "split_4_1", "spatial_5fold"), default="none",
                   help="none scores the model as is; others retrain its architecture per fold (default: none)")
    _add_training(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("deconvolve", help="per-cell expression from a trained model")
    _add_common(p)
    p.add_argument("--model", required=True, help="model.bitro")
    p.add_argument("--manifest", required=True, help="dataset manifest.json")
    p.add_argument("--samples", default=None, help="comma-separated sample ids (default: all)")
    p.set_defaults(func=cmd_deconvolve)
    return parser


def _error_kind(exc: BaseException) -> str:
    return type(exc).__name__


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {exc}".replace("\n", " "), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from threadpoolctl import threadpool_limits

    from bitro.pipeline import worker_count

    start = time.perf_counter()
    try:
        with threadpool_limits(limits=worker_count()):
            outputs = args.func(args)
        out = _path(args, args.out)
        _run_record(args, out, outputs, {"total": round(time.perf_counter() - start, 3)}, argv)
    except UsageError as exc:
        print(f"error: usage: {exc}".replace("\n", " "), file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # one parsable line per failure
        log.debug("failure", exc_info=True)
        print(f"error: {_error_kind(exc)}: {exc}".replace("\n", " "), file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
