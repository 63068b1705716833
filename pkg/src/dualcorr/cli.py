"""Command-line entry point: gen / init / refine / eval / ablate.

Every command is non-interactive, takes an optional INI config plus
``--set section.key=value`` overrides, writes its artifacts into an output
directory, and finishes with a ``manifest.json`` recording the resolved
config hash, the seed, and a sha256 per output file. Identical config and
seed reproduce every artifact byte for byte. On failure a machine-readable
error record goes to stderr and the exit code is nonzero. ``DUALCORR_LOG``
(the only environment knob) sets the log level.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .config import RunConfig, load_config
from .correspondence import SoftCorrespondence, load_corr, load_vertex_map, mle_map, save_corr, save_vertex_map
from .errors import DualcorrError, ValidationError
from .evaluation import AblationContext, ablation_run, error_curve, geodesic_error, mge_of, subset_label
from .geometry import Shape, knn_graph, load_shape, mesh_graph, save_shape
from .initiator import AugmentConfig, DescriptorNet, InitiatorConfig, infer_initial, train_initiator
from .losses import LossReport, LossWeights
from .refine import RefineConfig, refine
from .seeding import derive_seed
from .synthetic import make_pair

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, cfg: RunConfig, outputs):
    manifest = {
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.get("run", "seed"),
        "outputs": {name: _sha256(out_dir / name) for name in sorted(outputs)},
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _require(cfg: RunConfig, section: str, key: str) -> str:
    value = cfg.get(section, key)
    if not value:
        raise ValidationError(f"{section}.{key} is required for this command")
    return value


def _load_shape_checked(path: str) -> Shape:
    if not os.path.exists(path):
        raise ValidationError(f"shape file does not exist: {path}")
    return load_shape(path)


def _graph_for(cfg: RunConfig, shape: Shape):
    kind = cfg.get("graph", "kind")
    if kind == "mesh" or (kind == "auto" and shape.has_faces):
        return mesh_graph(shape)
    return knn_graph(shape, min(cfg.get("graph", "knn_k"), shape.n - 1))


def _aug_config(cfg: RunConfig) -> AugmentConfig:
    ini = cfg["initiator"]
    return AugmentConfig(
        rotate=ini["aug_rotate"],
        max_angle=ini["aug_max_rotation_deg"],
        scale_range=(ini["aug_scale_min"], ini["aug_scale_max"]),
        jitter_fraction=ini["aug_jitter_fraction"],
        translate_range=ini["aug_translate"],
    )


def _initiator_config(cfg: RunConfig) -> InitiatorConfig:
    return InitiatorConfig(widths=tuple(cfg.widths()),
                           epochs=cfg.get("initiator", "epochs"),
                           lr=cfg.get("initiator", "lr"),
                           knn_k=cfg.get("graph", "knn_k"))


def _refine_config(cfg: RunConfig, seed: int) -> RefineConfig:
    r = cfg["refine"]
    w = cfg["losses"]
    return RefineConfig(
        iterations=r["iterations"], inner_steps=r["inner_steps"],
        n_layers=r["layers"], k_neighbors=r["k_neighbors"], fusion=r["fusion"],
        weights=LossWeights(laplacian=w["laplacian"], sparsity=w["sparsity"],
                            anchor_scale=w["anchor_scale"], denoise=w["denoise"]),
        enabled=cfg.enabled_terms(), anchor_fraction=r["anchor_fraction"],
        lr=r["lr"], dnn1_hidden=r["dnn1_hidden"], dnn2_hidden=r["dnn2_hidden"],
        layer_norm=r["layer_norm"], freeze_anchors=r["freeze_anchors"],
        seed=seed)


def _load_pred_map(path: str) -> np.ndarray:
    """A predicted map from either a CORR matrix or a plain-text map file."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"CORR":
        return mle_map(load_corr(path))
    return load_vertex_map(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(cfg: RunConfig, out_dir: Path) -> list:
    pair = cfg["pair"]
    seed = cfg.get("run", "seed")
    source = None
    if pair["kind"] == "noisy-copy":
        source = _load_shape_checked(_require(cfg, "pair", "source"))
    src, tgt, gt = make_pair(
        pair["kind"], seed=seed, subdivisions=pair["subdivisions"],
        bend_angle=pair["bend_angle"], rings=pair["rings"],
        segments=pair["segments"], source=source,
        jitter_fraction=pair["jitter_fraction"], rotate=pair["rotate"],
        max_angle=pair["max_rotation_deg"],
        scale_range=(pair["scale_min"], pair["scale_max"]),
        translate_range=pair["translate_range"])
    save_shape(src, out_dir / "source.off")
    save_shape(tgt, out_dir / "target.off")
    save_vertex_map(gt, out_dir / "gt.txt")
    logger.info("generated %s pair: %s -> %s", pair["kind"], src, tgt)
    return ["source.off", "target.off", "gt.txt"]


def cmd_init(cfg: RunConfig, out_dir: Path) -> list:
    src = _load_shape_checked(_require(cfg, "paths", "source"))
    tgt = _load_shape_checked(_require(cfg, "paths", "target"))
    seed = derive_seed(cfg.get("run", "seed"), "initiator")
    net, history = train_initiator(src, _aug_config(cfg), _initiator_config(cfg),
                                   rng_seed=seed)
    p0 = infer_initial(src, tgt, net, knn_k=cfg.get("graph", "knn_k"))
    net.save(out_dir / "net.dnet")
    save_corr(p0, out_dir / "p0.corr")
    with open(out_dir / "train_loss.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(history):
            fh.write(f"{i},{v:.17g}\n")
    plotting.save_training_curve(history, out_dir / "train_loss.png")
    logger.info("trained %d epochs: loss %.4g -> %.4g", len(history),
                history[0], history[-1])
    return ["net.dnet", "p0.corr", "train_loss.csv", "train_loss.png"]


def cmd_refine(cfg: RunConfig, out_dir: Path) -> list:
    src = _load_shape_checked(_require(cfg, "paths", "source"))
    tgt = _load_shape_checked(_require(cfg, "paths", "target"))
    p0 = load_corr(_require(cfg, "paths", "corr"))
    sg, tg = _graph_for(cfg, src), _graph_for(cfg, tgt)
    rcfg = _refine_config(cfg, derive_seed(cfg.get("run", "seed"), "refine"))
    trace = refine(p0, src, tgt, sg, tg, rcfg)

    outputs = []
    rows = []
    with open(out_dir / "loss_log.csv", "w") as fh:
        fh.write("iteration,step," + LossReport.CSV_HEADER + "\n")
        for it, result in enumerate(trace.iterations):
            for step, rep in enumerate(result.reports):
                fh.write(f"{it},{step}," + rep.csv_row() + "\n")
                rows.append((it, step, rep.total))
    outputs.append("loss_log.csv")
    for it, result in enumerate(trace.iterations):
        name = f"step{it + 1}.corr"
        save_corr(result.corr, out_dir / name)
        outputs.append(name)
    final_map = mle_map(trace.matrices[-1])
    save_vertex_map(final_map, out_dir / "final_map.txt")
    outputs.append("final_map.txt")
    plotting.save_refine_losses(rows, out_dir / "loss_log.png")
    outputs.append("loss_log.png")
    return outputs


def cmd_eval(cfg: RunConfig, out_dir: Path) -> list:
    tgt = _load_shape_checked(_require(cfg, "paths", "target"))
    gt = load_vertex_map(_require(cfg, "paths", "gt"))
    pred = _load_pred_map(_require(cfg, "paths", "pred"))
    tg = _graph_for(cfg, tgt)
    summary = geodesic_error(pred, gt, tgt, tg)
    curve = error_curve(summary, cfg.thresholds())

    with open(out_dir / "errors.csv", "w") as fh:
        fh.write("vertex,error\n")
        for i, e in enumerate(summary.per_vertex):
            fh.write(f"{i},{e:.17g}\n")
    with open(out_dir / "curve.csv", "w") as fh:
        fh.write("threshold,fraction\n")
        for t, f in curve:
            fh.write(f"{t:.17g},{f:.17g}\n")
    meta = dict(summary.metadata)
    meta.update({"mge": summary.mge, "mean_error": summary.mean_error,
                 "sum_error": summary.sum_error, "area": summary.area,
                 "vertices": int(summary.per_vertex.size)})
    with open(out_dir / "eval_meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    plotting.save_error_curve(curve, out_dir / "curve.png", mge=summary.mge)
    logger.info("MGE %.4f (mean %.6f, sum %.4f)", summary.mge,
                summary.mean_error, summary.sum_error)
    print(f"MGE {summary.mge:.6g}")
    return ["errors.csv", "curve.csv", "eval_meta.json", "curve.png"]


def cmd_ablate(cfg: RunConfig, out_dir: Path) -> list:
    src = _load_shape_checked(_require(cfg, "paths", "source"))
    tgt = _load_shape_checked(_require(cfg, "paths", "target"))
    gt = load_vertex_map(_require(cfg, "paths", "gt"))
    sg, tg = _graph_for(cfg, src), _graph_for(cfg, tgt)
    root = cfg.get("run", "seed")

    p0_cache = {}

    def p0_for_seed(seed):
        if seed not in p0_cache:
            net, _ = train_initiator(src, _aug_config(cfg), _initiator_config(cfg),
                                     rng_seed=derive_seed(root, f"init{seed}"))
            p0_cache[seed] = infer_initial(src, tgt, net,
                                           knn_k=cfg.get("graph", "knn_k"))
        return p0_cache[seed]

    context = AblationContext(
        source_shape=src, target_shape=tgt, source_graph=sg, target_graph=tg,
        gt=gt, p0_for_seed=p0_for_seed,
        base_config=_refine_config(cfg, seed=0))
    rows = ablation_run(context, cfg.ablate_subsets(), cfg.ablate_seeds())

    with open(out_dir / "ablation.csv", "w") as fh:
        fh.write("subset,seeds,mge_mean,mge_median,per_seed\n")
        for label, n, mean, median, per_seed in rows:
            per = ";".join(f"{v:.17g}" for v in per_seed)
            fh.write(f"{label},{n},{mean:.17g},{median:.17g},{per}\n")
    plotting.save_ablation_bars(rows, out_dir / "ablation.png")
    for label, n, mean, median, _ in rows:
        print(f"{label}: median MGE {median:.6g} over {n} seeds")
    return ["ablation.csv", "ablation.png"]


COMMANDS = {
    "gen": cmd_gen,
    "init": cmd_init,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualcorr",
        description="dense soft-correspondence computation and refinement "
                    "between non-rigid shapes")
    parser.add_argument("command", choices=sorted(COMMANDS),
                        help="pipeline stage to run")
    parser.add_argument("--config", help="INI configuration file")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, help="override run.seed")
    parser.add_argument("--set", action="append", default=[], metavar="S.K=V",
                        dest="overrides",
                        help="override any config value (repeatable)")
    parser.add_argument("--source", help="override paths.source")
    parser.add_argument("--target", help="override paths.target")
    parser.add_argument("--gt", help="override paths.gt")
    parser.add_argument("--corr", help="override paths.corr")
    parser.add_argument("--pred", help="override paths.pred")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("DUALCORR_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    for key in ("source", "target", "gt", "corr", "pred"):
        value = getattr(args, key)
        if value is not None:
            overrides.append(f"paths.{key}={value}")
    try:
        cfg = load_config(args.config, overrides)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](cfg, out_dir)
        _write_manifest(out_dir, args.command, cfg, outputs)
    except (DualcorrError, OSError) as exc:
        record = {
            "error": type(exc).__name__,
            "module": type(exc).__module__,
            "command": args.command,
            "message": str(exc),
        }
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
