"""Command-line experiment runner.

    depthreid <command> [--config FILE] [--key=value ...]

Commands: ``extract``, ``evaluate``, ``transfer-train``, ``transfer-apply``,
``synth`` and ``verify``. Every config field (dotted for nested blocks, e.g.
``--transfer.eta=0.2``) can be overridden on the command line; values are
parsed as JSON when possible and kept as strings otherwise.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .covdesc import (
    DVCovDescriptor,
    between_voxel_covariance,
    ed_from_json,
    ed_to_json,
    extract_dvcov,
    extract_ed,
    within_voxel_covariance,
)
from .errors import DataFileError, DepthReidError, NumericalError
from .geometry import RigidMotion, depth_to_pointcloud, estimate_normals, random_rotation
from .io import (
    read_aux_manifest,
    read_dataset_manifest,
    read_depth_image,
    read_distance_csv,
    read_json,
    read_matrix_csv,
    read_ply,
    read_skeleton,
    write_aux_manifest,
    write_cmc_csv,
    write_dataset_manifest,
    write_distance_csv,
    write_json,
    write_matrix_csv,
    write_ply,
    write_skeleton,
)
from .recognition import MATCHERS, GALLERY_SIZE, Frame, cmc_evaluate, run_protocol
from .skeleton import skeleton_feature
from .spdmanifold import random_spd, eigen_geodesic_pair
from .synthbench import ReidSynthConfig, generate_paired_features, generate_transfer_benchmark, iter_frames
from .transfer import (
    KernelConfig,
    TransferHyperParams,
    TransferModel,
    fit_transfer,
    fuse_scores,
    transfer_distance_matrix,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

DEFAULT_CONFIG = {
    "manifest": None,
    "output": "depthreid_out",
    "descriptor": "ed+skl",
    "protocol": "single_shot",
    "trials": 10,
    "seed": 0,
    "gallery_group": None,
    "probe_group": None,
    "grid": {"rows": 6, "cols": 2},
    "k": 10,
    "eps_rel": 1e-6,
    "workers": 1,
    "transfer": {
        "aux": None,
        "model": None,
        "target": None,
        "beta": 10.0,
        "gamma1": 10.0,
        "gamma1p": 10.0,
        "gamma0": 1.0,
        "gamma0p": 1.0,
        "m": 700,
        "gamma_v": None,
        "gamma_d": None,
        "null_tol": 1e-10,
        "eta": 0.3,
        "etas": [0.0, 0.15, 0.3, 1.0],
    },
    "synth": {
        "persons": 10,
        "frames": 20,
        "max_yaw": 30.0,
        "noise_sigma": 2.0,
        "joint_noise": 5.0,
        "max_offset": 150.0,
        "density": 0.01,
        "aux_persons": 20,
        "aux_views": 8,
        "target_persons": 30,
        "target_views": 4,
        "corrupt_fraction": 0.2,
    },
    "verify": {"spd_pairs": 1000, "feature_sets": 200},
}

DESCRIPTORS = tuple(MATCHERS)
PROTOCOLS = tuple(GALLERY_SIZE)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(cfg: dict, key: str, value) -> None:
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise UsageError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for k, v in update.items():
        if k not in base:
            raise UsageError(f"unknown config key {prefix + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, prefix + k + ".")
        else:
            base[k] = v


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        data = read_json(path)
        if not isinstance(data, dict):
            raise UsageError(f"config {path} must be a JSON object")
        _merge(cfg, data)
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise UsageError(f"expected --key=value, got {item!r}")
        key, value = item[2:].split("=", 1)
        _set_dotted(cfg, key, _parse_value(value))
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["descriptor"] not in DESCRIPTORS:
        raise UsageError(f"descriptor must be one of {', '.join(DESCRIPTORS)}, got {cfg['descriptor']!r}")
    if cfg["protocol"] not in PROTOCOLS:
        raise UsageError(f"protocol must be one of {', '.join(PROTOCOLS)}, got {cfg['protocol']!r}")
    for key in ("trials", "seed", "k", "workers"):
        if not isinstance(cfg[key], int) or isinstance(cfg[key], bool):
            raise UsageError(f"{key} must be an integer")
    if cfg["trials"] < 1 or cfg["workers"] < 1:
        raise UsageError("trials and workers must be at least 1")
    t = cfg["transfer"]
    for eta in [t["eta"], *t["etas"]]:
        if not (isinstance(eta, (int, float)) and 0.0 <= eta <= 1.0):
            raise UsageError(f"eta values must lie in [0, 1], got {eta!r}")


def _require_path(cfg_value, name: str) -> Path:
    if not cfg_value:
        raise UsageError(f"config field {name!r} is required for this command")
    p = Path(cfg_value)
    if not p.exists():
        raise DataFileError(f"{name} path {p} does not exist")
    return p


def _echo(cfg: dict, command: str) -> None:
    """Write the resolved config next to the outputs so the run can be replayed."""
    write_json(Path(cfg["output"]) / f"{command}_config.json", cfg)


# ---------------------------------------------------------------------------
# extract


def _descriptor_path(out: Path, person: str, group: str, index: int) -> Path:
    return out / "descriptors" / person / group / f"{index:05d}.json"


def _extraction_params(cfg: dict) -> dict:
    return {"rows": cfg["grid"]["rows"], "cols": cfg["grid"]["cols"], "k": cfg["k"], "eps_rel": cfg["eps_rel"]}


def _up_to_date(target: Path, sources: list, params: dict) -> bool:
    if not target.exists():
        return False
    mtime = target.stat().st_mtime
    if any(s.stat().st_mtime > mtime for s in sources):
        return False
    try:
        return read_json(target).get("params") == params
    except DataFileError:
        return False


def _extract_one(entry, target: Path, params: dict) -> None:
    if entry.skeleton is None:
        raise DataFileError(f"frame {entry.person}/{entry.group}/{entry.index} has no skeleton")
    cloud = read_ply(entry.cloud) if entry.cloud is not None else depth_to_pointcloud(read_depth_image(entry.depth))
    joints = read_skeleton(entry.skeleton)
    cloud = estimate_normals(cloud, params["k"])
    d = extract_dvcov(cloud, joints, params["rows"], params["cols"], params["eps_rel"])
    write_json(target, {
        "person": entry.person,
        "group": entry.group,
        "index": entry.index,
        "params": params,
        "dvcov": d.to_json(),
        "ed": ed_to_json(extract_ed(d)),
        "skl": [float(v) for v in skeleton_feature(joints)],
    })


def _extract_task(args):
    entry, target, params = args
    try:
        _extract_one(entry, target, params)
        return None
    except (DepthReidError, OSError) as exc:
        return {"file": str(entry.cloud or entry.depth), "skeleton": str(entry.skeleton), "error": f"{type(exc).__name__}: {exc}"}


def cmd_extract(cfg: dict) -> int:
    manifest = _require_path(cfg["manifest"], "manifest")
    out = Path(cfg["output"])
    entries = read_dataset_manifest(manifest)
    if not entries:
        raise DataFileError(f"{manifest} lists no frames")
    params = _extraction_params(cfg)
    tasks, skipped = [], 0
    for e in entries:
        target = _descriptor_path(out, e.person, e.group, e.index)
        sources = [p for p in (e.cloud, e.depth, e.skeleton) if p is not None and p.exists()]
        if _up_to_date(target, sources, params):
            skipped += 1
        else:
            tasks.append((e, target, params))

    if cfg["workers"] > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(cfg["workers"]) as pool:
            results = list(pool.map(_extract_task, tasks))
    else:
        results = [_extract_task(t) for t in tasks]
    failures = [r for r in results if r is not None]

    report = {
        "frames": len(entries),
        "extracted": len(tasks) - len(failures),
        "skipped_up_to_date": skipped,
        "failed": len(failures),
        "errors": failures,
    }
    write_json(out / "extract_report.json", report)
    _echo(cfg, "extract")
    print(f"extract: {report['extracted']} written, {skipped} up to date, {len(failures)} failed")
    for f in failures:
        print(f"  failed: {f['file']}: {f['error']}", file=sys.stderr)
    if len(failures) > 0.5 * len(entries):
        print("extract: more than half of the frames failed", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def load_frames(cfg: dict) -> list:
    out = Path(cfg["output"])
    params = _extraction_params(cfg)
    frames, missing = [], []
    for e in read_dataset_manifest(_require_path(cfg["manifest"], "manifest")):
        path = _descriptor_path(out, e.person, e.group, e.index)
        if not path.exists():
            missing.append(str(path))
            continue
        data = read_json(path)
        if data.get("params") != params:
            missing.append(f"{path} (extracted with different parameters)")
            continue
        frames.append(Frame(
            e.person, e.group, e.index,
            ed=ed_from_json(data["ed"]),
            skl=np.array(data["skl"], dtype=float),
            dvcov=DVCovDescriptor.from_json(data["dvcov"]),
        ))
    if missing:
        raise DataFileError(
            f"{len(missing)} descriptor file(s) missing or stale, e.g. {missing[0]}; "
            "run `depthreid extract` with the same config first"
        )
    return frames


def _run_tag(cfg: dict) -> str:
    return f"{cfg['descriptor'].replace('+', '_')}_{cfg['protocol']}"


def cmd_evaluate(cfg: dict) -> int:
    frames = load_frames(cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = run_protocol(
            frames, cfg["protocol"], cfg["descriptor"], cfg["trials"], cfg["seed"],
            cfg["gallery_group"], cfg["probe_group"],
        )
    out = Path(cfg["output"])
    tag = _run_tag(cfg)
    mean = result.mean
    write_cmc_csv(out / f"cmc_{tag}.csv", mean)
    write_json(out / f"results_{tag}.json", {
        "descriptor": cfg["descriptor"],
        "protocol": cfg["protocol"],
        "seed": cfg["seed"],
        "trials": cfg["trials"],
        "mean_curve": [float(v) for v in mean],
        "rank1": float(mean[0]),
        "curves": [[float(v) for v in c] for c in result.curves],
        "warnings": sorted({str(w.message) for w in caught}),
        "config": cfg,
    })
    _echo(cfg, "evaluate")
    print(f"evaluate: {cfg['descriptor']} {cfg['protocol']} rank-1 {mean[0]:.4f} over {cfg['trials']} trials")
    return EXIT_OK


# ---------------------------------------------------------------------------
# transfer


def _hyper(cfg: dict) -> TransferHyperParams:
    t = cfg["transfer"]
    return TransferHyperParams(t["beta"], t["gamma1"], t["gamma1p"], t["gamma0"], t["gamma0p"], int(t["m"]))


def _model_path(cfg: dict) -> Path:
    return Path(cfg["transfer"]["model"] or Path(cfg["output"]) / "transfer_model.json")


def cmd_transfer_train(cfg: dict) -> int:
    t = cfg["transfer"]
    aux = read_aux_manifest(_require_path(t["aux"], "transfer.aux"))
    kc = None
    if t["gamma_v"] is not None or t["gamma_d"] is not None:
        auto = KernelConfig.from_data(aux)
        kc = KernelConfig(t["gamma_v"] or auto.gamma_v, t["gamma_d"] or auto.gamma_d)
    model = fit_transfer(aux, _hyper(cfg), kc, null_tol=t["null_tol"])
    path = _model_path(cfg)
    write_json(path, model.to_json())
    _echo(cfg, "transfer-train")
    d = model.diagnostics
    print(f"transfer-train: N={d['n_samples']} classes={d['n_classes']} m={d['m']} "
          f"max relative residual {d['max_relative_residual']:.2e}, "
          f"orthonormality error {d['max_orthonormality_error']:.2e} -> {path}")
    return EXIT_OK


def _read_target(path: Path) -> dict:
    """``{"gallery_visual": csv, "probe_visual": csv, "rgb_distances": csv}``, paths relative to the file."""
    data = read_json(path)
    base = path.resolve().parent
    try:
        files = {k: base / data[k] for k in ("gallery_visual", "probe_visual", "rgb_distances")}
    except (KeyError, TypeError) as exc:
        raise DataFileError(f"{path}: malformed target manifest ({exc})") from None
    _, g = read_matrix_csv(files["gallery_visual"])
    _, p = read_matrix_csv(files["probe_visual"])
    probe_ids, gallery_ids, rgb = read_distance_csv(files["rgb_distances"])
    if rgb.shape != (len(p), len(g)):
        raise DataFileError(
            f"RGB distance matrix is {rgb.shape[0]} probes x {rgb.shape[1]} gallery but the target has "
            f"{len(p)} probe and {len(g)} gallery feature rows"
        )
    return {"gallery": g, "probe": p, "rgb": rgb, "gallery_ids": gallery_ids, "probe_ids": probe_ids}


def cmd_transfer_apply(cfg: dict) -> int:
    t = cfg["transfer"]
    model_path = _model_path(cfg)
    if not model_path.exists():
        raise DataFileError(f"model {model_path} does not exist; run `depthreid transfer-train` first")
    model = TransferModel.from_json(read_json(model_path))
    target = _read_target(_require_path(t["target"], "transfer.target"))
    if target["gallery"].shape[1] != model.anchors.shape[1]:
        raise DataFileError(
            f"target visual features have {target['gallery'].shape[1]} dimensions, model expects {model.anchors.shape[1]}"
        )
    dist_d = transfer_distance_matrix(model, target["probe"], target["gallery"])
    rgb = target["rgb"]
    rgb_mean = float(rgb.mean())
    d_mean = float(model.diagnostics.get("depth_norm_mean") or dist_d.mean())

    out = Path(cfg["output"])
    etas = sorted({float(e) for e in [*t["etas"], t["eta"]]})
    summary = {"rgb_norm_mean": rgb_mean, "depth_norm_mean": d_mean, "eta": float(t["eta"]), "rank1": {}, "curves": {}}
    for eta in etas:
        fused = fuse_scores(rgb, dist_d, eta, rgb_mean, d_mean)
        curve = cmc_evaluate(fused, target["gallery_ids"], target["probe_ids"])
        write_cmc_csv(out / f"cmc_eta_{eta:g}.csv", curve)
        summary["rank1"][f"{eta:g}"] = float(curve[0])
        summary["curves"][f"{eta:g}"] = [float(v) for v in curve]
        if eta == float(t["eta"]):
            write_distance_csv(out / "fused_distances.csv", fused, target["probe_ids"], target["gallery_ids"])
    write_distance_csv(out / "depth_distances.csv", dist_d, target["probe_ids"], target["gallery_ids"])
    summary["config"] = cfg
    write_json(out / "transfer_apply_results.json", summary)
    _echo(cfg, "transfer-apply")
    print("transfer-apply: rank-1 " + ", ".join(f"eta={k}: {v:.4f}" for k, v in summary["rank1"].items()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth


def cmd_synth(cfg: dict) -> int:
    s = cfg["synth"]
    out = Path(cfg["output"])
    sc = ReidSynthConfig(
        persons=s["persons"], frames=s["frames"], max_yaw=s["max_yaw"], noise_sigma=s["noise_sigma"],
        joint_noise=s["joint_noise"], max_offset=s["max_offset"], density=s["density"], seed=cfg["seed"],
    )
    persons: dict = {}
    for person, t, cloud, joints in iter_frames(sc):
        stem = Path("frames") / person / f"{t:05d}"
        write_ply(out / stem.with_suffix(".ply"), cloud)
        write_skeleton(out / f"{stem}_skeleton.json", joints)
        persons.setdefault(person, {"all": []})["all"].append(
            {"cloud": str(stem.with_suffix(".ply")), "skeleton": f"{stem}_skeleton.json"}
        )
    write_dataset_manifest(out / "manifest.json", persons)

    aux = generate_paired_features(s["aux_persons"], s["aux_views"], seed=cfg["seed"] + 1)
    write_aux_manifest(out / "aux.json", aux, {"source": "synthetic paired latent embeddings"})
    bench = generate_transfer_benchmark(s["target_persons"], s["target_views"], seed=cfg["seed"],
                                        corrupt_fraction=s["corrupt_fraction"])
    write_matrix_csv(out / "target_gallery_visual.csv", bench.gallery_visual)
    write_matrix_csv(out / "target_probe_visual.csv", bench.probe_visual)
    write_distance_csv(out / "target_rgb_distances.csv", bench.rgb_distances,
                       [f"t{p:03d}" for p in bench.probe_labels], [f"t{g:03d}" for g in bench.gallery_labels])
    write_json(out / "target.json", {
        "gallery_visual": "target_gallery_visual.csv",
        "probe_visual": "target_probe_visual.csv",
        "rgb_distances": "target_rgb_distances.csv",
    })
    _echo(cfg, "synth")
    n = sum(len(v["all"]) for v in persons.values())
    print(f"synth: {len(persons)} persons, {n} frames, auxiliary set of {len(aux)} pairs -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def eigen_geodesic_deviation(n_pairs: int, seed: int) -> float:
    """Max of ``|lhs - rhs| / max(1, rhs)`` over random SPD(6) pairs with condition number at most 1e4."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        lhs, rhs = eigen_geodesic_pair(random_spd(rng), random_spd(rng))
        worst = max(worst, abs(lhs - rhs) / max(1.0, rhs))
    return worst


def rotation_deviation(n_sets: int, seed: int) -> float:
    """Max relative change of covariance spectra under random rigid motions of 6-D feature sets."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_sets):
        m, n = rng.integers(3, 60, size=2)
        P = rng.normal(scale=100.0, size=(m, 3)) + rng.normal(scale=500.0, size=3)
        Q = rng.normal(scale=100.0, size=(n, 3)) + rng.normal(scale=500.0, size=3)
        NP = rng.standard_normal((m, 3))
        NQ = rng.standard_normal((n, 3))
        FP = np.hstack([P, NP / np.linalg.norm(NP, axis=1, keepdims=True)])
        FQ = np.hstack([Q, NQ / np.linalg.norm(NQ, axis=1, keepdims=True)])
        motion = RigidMotion(random_rotation(rng), random_rotation(rng), rng.normal(scale=1000.0, size=3))
        GP, GQ = motion.apply_features(FP), motion.apply_features(FQ)
        for a, b in (
            (within_voxel_covariance(FP), within_voxel_covariance(GP)),
            (between_voxel_covariance(FP, FQ), between_voxel_covariance(GP, GQ)),
        ):
            wa, wb = np.linalg.eigvalsh(a), np.linalg.eigvalsh(b)
            worst = max(worst, float(np.max(np.abs(wa - wb)) / np.max(np.abs(wa))))
    return worst


def cmd_verify(cfg: dict) -> int:
    v = cfg["verify"]
    eg = eigen_geodesic_deviation(v["spd_pairs"], cfg["seed"])
    rot = rotation_deviation(v["feature_sets"], cfg["seed"])
    ok1, ok2 = eg <= 1e-8, rot <= 1e-8
    print(f"eigen-depth vs geodesic: max deviation {eg:.3e} over {v['spd_pairs']} pairs [{'ok' if ok1 else 'FAIL'}]")
    print(f"rotation invariance: max relative deviation {rot:.3e} over {v['feature_sets']} sets [{'ok' if ok2 else 'FAIL'}]")
    return EXIT_OK if ok1 and ok2 else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# entry point

COMMANDS = {
    "extract": cmd_extract,
    "evaluate": cmd_evaluate,
    "transfer-train": cmd_transfer_train,
    "transfer-apply": cmd_transfer_apply,
    "synth": cmd_synth,
    "verify": cmd_verify,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="depthreid", allow_abbrev=False,
                     description="Depth-based person re-identification experiments.",
                     epilog="Any config field can be overridden with --key=value (dotted for nested fields).")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, rest)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"depthreid: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"depthreid: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DepthReidError as exc:
        print(f"depthreid: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
