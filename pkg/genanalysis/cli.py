"""
Command-line interface.

    python -m genanalysis extract chair --out out/meshes
    python -m genanalysis correspond chair 0 3 --out out/pair
    python -m genanalysis variation chair 0 --out out/var
    python -m genanalysis path chair 0 3 --mode robust --out out/path
    python -m genanalysis coseg chair --out out/coseg
    python -m genanalysis eval out/coseg/labels.json out/coseg/truth.json [--out DIR]
    python -m genanalysis info chair

Results go to files under --out and a JSON summary on stdout; progress goes
to stderr. Exit codes: 0 success, 1 computation failure, 2 usage error.
"""

import argparse
import json
import os
import sys
from typing import Dict, List, Optional, Tuple

import numpy as np

from genanalysis.config import PipelineConfig, apply_overrides, load_config
from genanalysis.errors import ContractViolation, GenAnalysisError
from genanalysis.family import ShapeFamily, build_family
from genanalysis.generator import ground_truth_correspondence
from genanalysis.manifest import RunManifest, sha256_file, write_json_atomic
from genanalysis.matching import transfer_keypoints
from genanalysis.mesh_io import write_obj, write_ply
from genanalysis.meshing import SurfaceMesh
from genanalysis.pathopt import WeightScheme, path_weights
from genanalysis.pipeline import Pipeline, map_ordered
from genanalysis.coseg import evaluate_iou, per_shape_iou
from genanalysis.utils.logger import setup_logger
from genanalysis.utils.responses import EXIT_FAILURE, error_response, success_response

logger = setup_logger(__name__)

MANIFEST_NAME = "manifest.json"
EVAL_MANIFEST_NAME = "eval_manifest.json"


def _prepare(args) -> Tuple[ShapeFamily, PipelineConfig]:
    config = load_config(args.config)
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"runtime.seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"runtime.workers={args.workers}")
    config = apply_overrides(config, overrides)
    family = build_family(args.spec)
    return family, config


def _check_index(family: ShapeFamily, i: int) -> int:
    if not 0 <= i < len(family):
        raise ContractViolation(f"Shape index {i} out of range for family of {len(family)}", {"index": i})
    return i


def _finish(manifest: RunManifest, out: str, result: Dict, name: str = MANIFEST_NAME) -> int:
    manifest.add_metrics({k: v for k, v in result.items() if isinstance(v, (int, float))})
    path = manifest.write(os.path.join(out, name))
    result["manifest"] = os.path.abspath(path)
    return success_response(result)


def cmd_extract(args) -> int:
    family, config = _prepare(args)
    manifest = RunManifest.start("extract", family.source_text, config, spec=args.spec)
    pipeline = Pipeline(family, config)
    indices = list(range(len(family)))
    with manifest.stage("extract"):
        meshes: List[SurfaceMesh] = map_ordered(pipeline.mesh, indices, config.runtime.workers)
    for inst, mesh in zip(family, meshes):
        manifest.add_output(write_obj(mesh, os.path.join(args.out, f"{inst.id}.obj")))
    counts = [m.n_vertices for m in meshes]
    return _finish(manifest, args.out, {
        "shapes": len(meshes),
        "mean_vertices": float(np.mean(counts)),
        "min_vertices": int(np.min(counts)),
    })


def cmd_correspond(args) -> int:
    family, config = _prepare(args)
    i, j = _check_index(family, args.source), _check_index(family, args.target)
    manifest = RunManifest.start("correspond", family.source_text, config, source=i, target=j)
    pipeline = Pipeline(family, config)
    with manifest.stage("extract"):
        source_mesh, target_mesh = pipeline.mesh(i), pipeline.mesh(j)
    with manifest.stage("propagate"):
        corr = pipeline.correspond(i, j)
    with manifest.stage("evaluate"):
        truth = ground_truth_correspondence(
            family.generator, source_mesh.vertices, corr.z_source, corr.z_target,
            tie_tolerance=config.generator.tie_tolerance,
            surface_tolerance=config.generator.surface_tolerance,
            interface_band=config.generator.interface_band_edges * source_mesh.mean_edge_length,
        )
        error = np.linalg.norm(corr.targets - truth.points, axis=1) / target_mesh.bbox_diagonal
        clean = corr.matched & ~truth.excluded
        result = {
            "matched_fraction": float(corr.matched.mean()),
            "mean_weight": float(corr.weights[corr.matched].mean()) if corr.matched.any() else 0.0,
            "mean_error": float(error[clean].mean()) if clean.any() else float("nan"),
            "median_error": float(np.median(error[clean])) if clean.any() else float("nan"),
            "within_0.02": float(np.mean(error[clean] < 0.02)) if clean.any() else float("nan"),
        }
        if args.keypoints > 0:
            rng = np.random.default_rng(config.runtime.seed)
            ids = rng.choice(source_mesh.n_vertices, size=min(args.keypoints, source_mesh.n_vertices), replace=False)
            kp = transfer_keypoints(corr, ids, target_mesh, truth.points[ids], config.matching.pck_thresholds)
            result.update({f"pck@{t:g}": v for t, v in kp.pck.items()})

    records_path = os.path.join(args.out, "correspondences.json")
    manifest.add_output(write_json_atomic({"source": family[i].id, "target": family[j].id, "records": corr.to_records()}, records_path))
    manifest.add_output(write_ply(
        source_mesh, os.path.join(args.out, f"{family[i].id}_source.ply"),
        scalars={"distortion": corr.distortion, "weight": corr.weights, "error": error},
    ))
    targets = SurfaceMesh(corr.targets, source_mesh.faces)
    manifest.add_output(write_obj(targets, os.path.join(args.out, f"{family[i].id}_to_{family[j].id}.obj")))
    return _finish(manifest, args.out, result)


def cmd_variation(args) -> int:
    family, config = _prepare(args)
    i = _check_index(family, args.index)
    manifest = RunManifest.start("variation", family.source_text, config, index=i)
    pipeline = Pipeline(family, config)
    with manifest.stage("analysis"):
        pipeline.analysis(i)
    with manifest.stage("variation"):
        analysis = pipeline.variation(i)
    with manifest.stage("regularizer"):
        regularizer = pipeline.regularizer(i)
    modes, D = analysis.modes, analysis.distances
    inst = family[i]
    manifest.add_output(D.save(os.path.join(args.out, f"{inst.id}_distance.gad")))
    n = analysis.mesh.n_vertices
    shown = min(args.export_modes, modes.count)
    manifest.add_output(write_ply(
        analysis.mesh, os.path.join(args.out, f"{inst.id}_modes.ply"),
        vectors={f"mode{l}": modes.fields[:, l].reshape(n, 3) for l in range(shown)},
    ))
    manifest.add_output(write_json_atomic(
        {"eigenvalues": modes.eigenvalues, "weights": modes.weights},
        os.path.join(args.out, f"{inst.id}_modes.json"),
    ))
    return _finish(manifest, args.out, {
        "vertices": n,
        "modes": modes.count,
        "smallest_eigenvalue": float(modes.eigenvalues[0]),
        "max_G_block_condition": analysis.system.diagnostics()["max_G_block_condition"],
        "mean_distance": float(D.D.mean()),
        "regularizer": regularizer.value,
        "regularizer_directions": int(regularizer.directions.shape[0]),
    })


def _parse_weights(raw: Optional[str], family: ShapeFamily, i: int, j: int, config: PipelineConfig) -> Optional[np.ndarray]:
    if raw is None:
        return None
    if raw == "auto":
        z_s, z_t = family[i].latent, family[j].latent
        k = config.pathopt.intermediates
        latents = np.array([z_s + t * (z_t - z_s) for t in np.linspace(0.0, 1.0, k + 2)])
        others = np.delete(family.latents, i, axis=0)
        base = config.pathopt.base_weight
        scheme = WeightScheme.from_latents(z_s[None, :], others, base) if len(others) else WeightScheme(1.0, base)
        return path_weights(scheme, latents)
    try:
        return np.array([float(w) for w in raw.split(",")])
    except ValueError as e:
        raise ContractViolation(f"Weights must be comma-separated numbers or 'auto', got '{raw}'") from e


def cmd_path(args) -> int:
    family, config = _prepare(args)
    i, j = _check_index(family, args.source), _check_index(family, args.target)
    weights = _parse_weights(args.weights, family, i, j, config)
    manifest = RunManifest.start("path", family.source_text, config, source=i, target=j, mode=args.mode)
    pipeline = Pipeline(family, config)
    with manifest.stage("extract"):
        mesh = pipeline.mesh(i)
    with manifest.stage("optimize"):
        path = pipeline.path(i, j, mode=args.mode, weights=weights)
    for k, state in enumerate(path.states):
        manifest.add_output(write_obj(SurfaceMesh(state, mesh.faces), os.path.join(args.out, f"state_{k:02d}.obj")))
    manifest.add_output(write_json_atomic(path.to_manifest(), os.path.join(args.out, "path.json")))
    return _finish(manifest, args.out, {
        "energy": path.energy,
        "iterations": path.iterations,
        "converged": path.converged,
    })


def cmd_coseg(args) -> int:
    family, config = _prepare(args)
    manifest = RunManifest.start("coseg", family.source_text, config, spec=args.spec)
    pipeline = Pipeline(family, config)
    with manifest.stage("coseg"):
        result = pipeline.coseg()
    ids = [inst.id for inst in family]
    manifest.add_output(write_json_atomic(dict(zip(ids, result.labels)), os.path.join(args.out, "labels.json")))
    manifest.add_output(write_json_atomic(dict(zip(ids, result.truth)), os.path.join(args.out, "truth.json")))
    for k, inst in enumerate(family):
        mesh = pipeline.mesh(k)
        manifest.add_output(write_ply(mesh, os.path.join(args.out, f"{inst.id}_labels.ply"), labels=result.labels[k]))
    return _finish(manifest, args.out, {
        "clusters": result.clusters.n_clusters,
        "mean_iou": result.iou.mean,
        "mean_shape_iou": float(np.mean([r.mean for r in result.per_shape_iou])),
    })


def _read_labels(path: str) -> Dict[str, np.ndarray]:
    if not os.path.exists(path):
        raise GenAnalysisError(f"Label file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise GenAnalysisError(f"Could not parse {path}: {e}") from e
    if not isinstance(data, dict):
        raise GenAnalysisError(f"{path} must map shape ids to label lists")
    return {str(k): np.asarray(v, dtype=int) for k, v in data.items()}


def cmd_eval(args) -> int:
    manifest = RunManifest.start(
        "eval", labels=os.path.abspath(args.labels), truth=os.path.abspath(args.truth),
    )
    predicted, truth = _read_labels(args.labels), _read_labels(args.truth)
    manifest.parameters.update({
        "labels_sha256": sha256_file(args.labels),
        "truth_sha256": sha256_file(args.truth),
    })
    if set(predicted) != set(truth):
        raise ContractViolation("Label files cover different shapes", {
            "only_in_labels": sorted(set(predicted) - set(truth)),
            "only_in_truth": sorted(set(truth) - set(predicted)),
        })
    ids = sorted(predicted)
    pred, true = [predicted[k] for k in ids], [truth[k] for k in ids]
    with manifest.stage("evaluate"):
        family_iou = evaluate_iou(pred, true)
        shapes = per_shape_iou(pred, true)
    out = args.out or os.path.dirname(os.path.abspath(args.labels))
    return _finish(manifest, out, {
        "mean_iou": family_iou.mean,
        "per_part": family_iou.per_part,
        "mean_shape_iou": float(np.mean([r.mean for r in shapes])),
        "per_shape": {k: r.mean for k, r in zip(ids, shapes)},
    }, name=EVAL_MANIFEST_NAME)


def cmd_info(args) -> int:
    family = build_family(args.spec)
    return success_response(family.summary())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genanalysis", description="Joint shape analysis over implicit shape families")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_common(p: argparse.ArgumentParser, out: bool = True) -> argparse.ArgumentParser:
        p.add_argument("spec", help="Family spec path, bundled family name or JSON text")
        p.add_argument("--config", help="JSON or TOML config (default: $GENANALYSIS_CONFIG)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="Override a config value")
        p.add_argument("--seed", type=int, help="Override runtime.seed")
        p.add_argument("--workers", type=int, help="Override runtime.workers")
        if out:
            p.add_argument("--out", required=True, help="Output directory")
        return p

    p = with_common(sub.add_parser("extract", help="Extract a mesh for every shape"))
    p.set_defaults(handler=cmd_extract)

    p = with_common(sub.add_parser("correspond", help="Propagate correspondences between two shapes"))
    p.add_argument("source", type=int)
    p.add_argument("target", type=int)
    p.add_argument("--keypoints", type=int, default=0, help="Random keypoints scored by PCK")
    p.set_defaults(handler=cmd_correspond)

    p = with_common(sub.add_parser("variation", help="Variation modes and distance matrix of one shape"))
    p.add_argument("index", type=int)
    p.add_argument("--export-modes", type=int, default=5, help="Mode fields written to the PLY")
    p.set_defaults(handler=cmd_variation)

    p = with_common(sub.add_parser("path", help="Optimize an interpolation path between two shapes"))
    p.add_argument("source", type=int)
    p.add_argument("target", type=int)
    p.add_argument("--mode", choices=["l2", "robust"], default=None)
    p.add_argument("--weights", help="Comma-separated pair weights, or 'auto'")
    p.set_defaults(handler=cmd_path)

    p = with_common(sub.add_parser("coseg", help="Consistent segmentation of the whole family"))
    p.set_defaults(handler=cmd_coseg)

    p = sub.add_parser("eval", help="Mean IoU of predicted against ground-truth labels")
    p.add_argument("labels")
    p.add_argument("truth")
    p.add_argument("--out", help="Directory for the run manifest (default: next to the labels file)")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("info", help="Print the parsed family summary")
    p.add_argument("spec")
    p.set_defaults(handler=cmd_info)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.handler(args)
    except GenAnalysisError as e:
        logger.error(f"{args.command} failed: {e.message}")
        payload = e.to_dict()
        return error_response(payload["message"], EXIT_FAILURE, payload["details"], payload["type"])
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly")
        return error_response(str(e), EXIT_FAILURE, error_type=type(e).__name__)


if __name__ == "__main__":
    sys.exit(main())
