"""Command-line entry point.

Exit status is 0 on success, 2 for usage and configuration errors, 1 for
anything that goes wrong while running.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as avs_io
from .ablation import VARIANTS, run_ablation, sweep
from .attribution import attach_cam_files, export_saliency, rank_nodes, sensitivities_from_weights
from .config import Config, dump_config, load_config
from .errors import ConfigError, SimGraphError
from .model import SimilarityModel, level_cams, pair_gates, pair_nodes, prepare
from .retrieval import DISTANCES, evaluate
from .synth import synthesize_dataset
from .training import fit, model_from_checkpoint


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, help="output directory or file")
    p.add_argument("--k-list", type=_int_list, help='Recall@K cutoffs, e.g. "1,2,4,8"')
    p.add_argument("--slice-rows", type=int, help="query rows per similarity slice")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simgraph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic feature dataset")
    _common(p)

    p = sub.add_parser("train", help="train on a manifest and write checkpoints")
    _common(p)
    p.add_argument("manifest", type=Path)

    p = sub.add_parser("eval", help="leave-one-out Recall@K on a manifest")
    _common(p)
    p.add_argument("manifest", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--distance", choices=DISTANCES, default="full")

    p = sub.add_parser("infer", help="print the dissimilarity of two samples")
    _common(p)
    p.add_argument("a", type=Path)
    p.add_argument("b", type=Path)
    p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("attribute", help="node attribution report and saliency maps for a pair")
    _common(p)
    p.add_argument("a", type=Path)
    p.add_argument("b", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--rank", default="reliability_then_value",
                   choices=("reliability", "node_value", "contribution", "reliability_then_value"))
    p.add_argument("--top", type=int, default=10, help="nodes kept in the report")

    p = sub.add_parser("edges", help="summarize an edge store or checkpoint")
    _common(p)
    p.add_argument("path", type=Path)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--top", type=int, default=5)

    for name, helptext in (("ablate", "ablation table as CSV"), ("sweep", "hyperparameter sweep as CSV")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--seeds", type=_int_list, default=(0, 1, 2))
        p.add_argument("--train-manifest", type=Path)
        p.add_argument("--test-manifest", type=Path)
        if name == "ablate":
            p.add_argument("--variants", default=",".join(VARIANTS))
        else:
            p.add_argument("--param", choices=("k", "r"), default="k")
            p.add_argument("--values", type=_int_list)
            p.add_argument("--distance", choices=DISTANCES, default="full")
    return parser


def _config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.k_list:
        changes["k_list"] = args.k_list
    if args.slice_rows is not None:
        changes["slice_rows"] = args.slice_rows
    return cfg.with_(**changes) if changes else cfg


def _model(args, cfg: Config, level_shapes) -> SimilarityModel:
    if getattr(args, "checkpoint", None):
        return model_from_checkpoint(avs_io.read_checkpoint(args.checkpoint))
    return SimilarityModel.initial(level_shapes, cfg.r, cfg.k, cfg.gamma, cfg.seed)


def _need_out(args) -> Path:
    if args.out is None:
        raise ConfigError(f"{args.command} needs --out")
    return args.out


def cmd_synth(args, cfg: Config) -> None:
    out = _need_out(args)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    spec = cfg.synth_spec()
    n_train = spec.n_classes // 2
    groups = {"train": [], "test": []}
    for p in synthesize_dataset(spec, cfg.seed):
        path = feat_dir / f"{p.sample_id}.avsf"
        avs_io.write_pyramid_file(path, p)
        entry = avs_io.ManifestEntry(p.sample_id, path, p.label)
        groups["train" if p.label < n_train else "test"].append(entry)
    for name, entries in groups.items():
        avs_io.write_manifest(out / f"{name}.csv", entries)
    avs_io.write_manifest(out / "manifest.csv", groups["train"] + groups["test"])
    (out / "config.txt").write_text(dump_config(cfg))
    print(f"wrote {sum(map(len, groups.values()))} samples to {out}")


def cmd_train(args, cfg: Config) -> None:
    out = _need_out(args)
    out.mkdir(parents=True, exist_ok=True)
    cache = prepare(avs_io.load_manifest(args.manifest))
    (out / "config.txt").write_text(dump_config(cfg))

    def log(epoch, state, metrics):
        avs_io.write_checkpoint(out / f"epoch_{epoch + 1:03d}.ckpt", state.checkpoint())
        parts = [f"epoch {epoch + 1:3d}", f"step {state.step}"]
        parts += [f"{k} {v:.4f}" for k, v in metrics.items() if isinstance(v, float)]
        print("  ".join(parts), flush=True)

    state = fit(cache, cfg, log=log)
    avs_io.write_checkpoint(out / "model.ckpt", state.checkpoint())
    print(f"checkpoint: {out / 'model.ckpt'}")


def cmd_eval(args, cfg: Config) -> None:
    cache = prepare(avs_io.load_manifest(args.manifest))
    model = _model(args, cfg, cache.level_shapes)
    result = evaluate(model, model.encode(cache), cfg.k_list, args.distance, cfg.slice_rows)
    print(result.table())
    text = json.dumps({"distance": args.distance, **result.as_dict()})
    print(text)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n")


def _pair(args, cfg):
    a, b = avs_io.read_pyramid_file(args.a), avs_io.read_pyramid_file(args.b)
    cache = prepare([a, b])
    model = _model(args, cfg, a.shapes)
    return cache, model


def cmd_infer(args, cfg: Config) -> None:
    cache, model = _pair(args, cfg)
    enc = model.encode(cache)
    d = model.row(enc, 0, enc, idx=np.array([1])).overall[0]
    print(repr(float(d)))


def cmd_attribute(args, cfg: Config) -> None:
    out = _need_out(args)
    cache, model = _pair(args, cfg)
    enc = model.encode(cache)
    idx = np.array([1])
    deltas = [d[0] for d in pair_nodes(enc, 0, enc, idx)]
    gates = [g[0] for g in pair_gates(enc, 0, enc, model.params, idx)[0]]
    sens = sensitivities_from_weights(gates, model.mixing())
    overall = float(model.row(enc, 0, enc, idx=idx).overall[0])
    report = rank_nodes(deltas, gates, sens, key=args.rank, top_n=min(args.top, len(deltas) * len(deltas[0])),
                        pair=tuple(cache.ids), overall=overall)
    cams = [level_cams(cache, model.projections, lvl) for lvl in range(1, model.n_levels + 1)]
    nodes = [(n.level, n.index) for n in report.nodes]
    files = export_saliency([c[0] for c in cams], [c[1] for c in cams], nodes, out / "saliency",
                            pair_name=f"{cache.ids[0]}__{cache.ids[1]}")
    files = {k: tuple(f"saliency/{f}" for f in v) for k, v in files.items()}
    report = attach_cam_files(report, files)
    report.write(out / "report.json")
    print(f"overall dissimilarity {overall:.6g}; report: {out / 'report.json'}")


def cmd_edges(args, cfg: Config) -> None:
    raw = args.path.read_bytes()
    if raw[:4] == avs_io.PARAM_MAGIC:
        store = avs_io.decode_checkpoint(raw).edges
    else:
        store = avs_io.decode_edges(raw)
    print(f"levels {store.n_levels}  r {store.r}  gamma {store.gamma}  updates {store.update_count}")
    for lvl in range(2, store.n_levels + 1):
        m = store.matrix(lvl)
        counts, edges = np.histogram(m, bins=args.bins)
        print(f"level {lvl} <- {lvl - 1}: min {m.min():.4f}  max {m.max():.4f}  mean {m.mean():.4f}")
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            print(f"  [{lo: .4f}, {hi: .4f})  {c}")
        flat = np.argsort(-m, axis=None, kind="stable")[:args.top]
        for f in flat:
            i, j = np.unravel_index(f, m.shape)
            print(f"  top  node {i} <- node {j}: {m[i, j]:.4f}")


def _dataset(args):
    if args.train_manifest is None and args.test_manifest is None:
        return None
    if args.train_manifest is None or args.test_manifest is None:
        raise ConfigError("give both --train-manifest and --test-manifest, or neither")
    return (prepare(avs_io.load_manifest(args.train_manifest)),
            prepare(avs_io.load_manifest(args.test_manifest)))


def _emit_csv(args, table) -> None:
    print(table.table(), file=sys.stderr)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        table.write_csv(args.out)
    else:
        sys.stdout.write(table.to_csv())


def cmd_ablate(args, cfg: Config) -> None:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    _emit_csv(args, run_ablation(cfg, variants, args.seeds, dataset=_dataset(args)))


def cmd_sweep(args, cfg: Config) -> None:
    table = sweep(cfg, args.param, args.values, args.seeds, distance=args.distance, dataset=_dataset(args))
    _emit_csv(args, table)


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
    "attribute": cmd_attribute, "edges": cmd_edges, "ablate": cmd_ablate, "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SimGraphError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
