"""Command-line pipeline: gen | train | retrieve | register | blend | eval | pipeline.

One JSON config drives the full pipeline; every stage also runs standalone
with explicit paths so intermediate artifacts (checkpoints, pair lists,
transforms) can be reused. Logs are line-delimited JSON on stderr, the
human summary goes to stdout. Exit codes: 0 success, 2 configuration
error, 3 stage failure.

A pipeline run owns its output directory (lockfile); completed stages are
skipped on rerun when their input hash is unchanged.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import __version__
from .blending import blend_render
from .bundle_adjust import AgentDataset, TrainConfig, bundle_adjust, gauge_align, history_to_csv
from .dataset import (
    SceneSpec,
    default_scene_spec,
    generate_dataset,
    load_agent,
    load_png,
    psnr,
    save_png,
    ssim,
    true_relative_transform,
)
from .errors import ConfigError, FieldFuseError, StageFailure
from .field import MlpField, load_field, save_field
from .geometry import Pose, pose_error
from .registration import (
    Frame2ModelConfig,
    frame2model_pairwise,
    jittered_query_poses,
    model2model_refine,
    select_candidate,
)
from .rendering import Camera, RenderConfig, render_image
from .retrieval import coview_pairs

REPORT_SCHEMA_VERSION = 1
TRANSFORM_SCHEMA_VERSION = 1


def log_event(stage: str, event: str, **fields) -> None:
    record = {"ts": round(time.time(), 3), "stage": stage, "event": event}
    record.update(fields)
    print(json.dumps(record, sort_keys=True), file=sys.stderr, flush=True)


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"missing file: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}")


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sha256_update_file(h, path) -> None:
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)


def content_hash(config_part, paths=()) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(config_part, sort_keys=True).encode())
    for path in paths:
        h.update(str(path).encode())
        if os.path.isfile(path):
            _sha256_update_file(h, path)
        elif os.path.isdir(path):
            for root, _dirs, files in sorted(os.walk(path)):
                if "_truth" in root:
                    continue
                for name in sorted(files):
                    h.update(name.encode())
                    _sha256_update_file(h, os.path.join(root, name))
    return h.hexdigest()


def stage_is_current(out_dir, stage: str, input_hash: str) -> bool:
    manifest = os.path.join(out_dir, f"{stage}.manifest.json")
    if not os.path.exists(manifest):
        return False
    try:
        return _read_json(manifest).get("input_hash") == input_hash
    except ConfigError:
        return False


def mark_stage_done(out_dir, stage: str, input_hash: str, outputs) -> None:
    _write_json(
        os.path.join(out_dir, f"{stage}.manifest.json"),
        {"stage": stage, "input_hash": input_hash, "outputs": list(outputs)},
    )


@dataclass
class PipelineConfig:
    """Everything one pipeline run needs, loadable from a single JSON file."""

    seed: int = 0
    scene: SceneSpec | None = None
    dataset_dir: str | None = None
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    frame2model: Frame2ModelConfig = dc_field(default_factory=Frame2ModelConfig)
    retrieval_top_n: int = 5
    eval_views: int = 4
    blend_outputs: list = dc_field(default_factory=list)

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        d = dict(d)
        scene = SceneSpec.from_dict(d["scene"]) if "scene" in d else None
        return PipelineConfig(
            seed=int(d.get("seed", 0)),
            scene=scene,
            dataset_dir=d.get("dataset_dir"),
            train=TrainConfig.from_dict(d["train"]) if "train" in d else TrainConfig(),
            frame2model=Frame2ModelConfig.from_dict(d["frame2model"])
            if "frame2model" in d
            else Frame2ModelConfig(),
            retrieval_top_n=int(d.get("retrieval_top_n", 5)),
            eval_views=int(d.get("eval_views", 4)),
            blend_outputs=list(d.get("blend_outputs", [])),
        )

    @staticmethod
    def load(path) -> "PipelineConfig":
        cfg = PipelineConfig.from_dict(_read_json(path))
        cfg.validate(base_dir=os.path.dirname(os.path.abspath(path)))
        return cfg

    def validate(self, base_dir=".") -> None:
        if self.scene is None and self.dataset_dir is None:
            raise ConfigError("config needs either a scene spec or a dataset_dir")
        if self.scene is not None:
            try:
                self.scene.validate()
            except FieldFuseError as exc:
                raise ConfigError(f"invalid scene: {exc}")
            if len(self.scene.agents) < 2:
                raise ConfigError("registration pipeline needs at least 2 agents")
        if self.dataset_dir is not None:
            path = os.path.join(base_dir, self.dataset_dir)
            if not os.path.isdir(path):
                raise ConfigError(f"dataset_dir does not exist: {path}")
            self.dataset_dir = path


def _agent_dirs(dataset_root) -> list:
    dirs = [
        os.path.join(dataset_root, name)
        for name in sorted(os.listdir(dataset_root))
        if os.path.isfile(os.path.join(dataset_root, name, "intrinsics.json"))
    ]
    if len(dirs) < 2:
        raise StageFailure(f"need at least two agent directories under {dataset_root}")
    return dirs


def _train_agent(dataset: AgentDataset, cfg: TrainConfig, ckpt_path, poses_path, csv_path):
    params, poses, history = bundle_adjust(dataset, cfg)
    save_field(
        ckpt_path,
        params,
        render=cfg.render.to_dict(),
        metadata={"agent_id": dataset.agent_id, "seed": cfg.seed, "package": __version__},
    )
    _write_json(poses_path, [{"file": f"{k:04d}", "pose": p.to_flat()} for k, p in enumerate(poses)])
    with open(csv_path, "w") as fh:
        fh.write(history_to_csv(history))
    return params, poses, history


def _load_refined_poses(path) -> list:
    return [Pose.from_flat(e["pose"]) for e in _read_json(path)]


def run_pipeline(cfg: PipelineConfig, out_dir, seed=None) -> dict:
    """Execute gen -> train -> retrieve -> register -> blend -> eval.

    Returns the report dict (also written to <out_dir>/report.json). Any
    stage error raises StageFailure; completed artifacts stay on disk.
    """
    if seed is not None:
        cfg.seed = int(seed)
    os.makedirs(out_dir, exist_ok=True)
    lock_path = os.path.join(out_dir, ".lock")
    try:
        lock_fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageFailure(
            f"output directory is locked by another run: {lock_path} (remove it if stale)"
        )
    os.write(lock_fd, str(os.getpid()).encode())
    os.close(lock_fd)
    try:
        return _run_pipeline_locked(cfg, out_dir)
    finally:
        os.unlink(lock_path)


def _run_pipeline_locked(cfg: PipelineConfig, out_dir) -> dict:
    timings = {}
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "package_version": __version__,
        "seed": cfg.seed,
        "stages": timings,
        "metrics": {},
    }

    def timed(stage, fn):
        log_event(stage, "start")
        t0 = time.perf_counter()
        try:
            result = fn()
        except FieldFuseError:
            raise
        except Exception as exc:
            log_event(stage, "error", error=str(exc))
            raise StageFailure(f"stage {stage} failed: {exc}") from exc
        timings[stage] = round(time.perf_counter() - t0, 3)
        log_event(stage, "done", seconds=timings[stage])
        return result

    # --- gen ---------------------------------------------------------
    if cfg.scene is not None:
        dataset_root = os.path.join(out_dir, "dataset")
        spec_dict = cfg.scene.to_dict()
        spec_dict["seed"] = cfg.seed
        scene = SceneSpec.from_dict(spec_dict)
        gen_hash = content_hash(spec_dict)
        if not stage_is_current(out_dir, "gen", gen_hash):
            timed("gen", lambda: generate_dataset(scene, dataset_root))
            mark_stage_done(out_dir, "gen", gen_hash, [dataset_root])
        else:
            log_event("gen", "skipped", reason="inputs unchanged")
    else:
        dataset_root = cfg.dataset_dir

    agent_dirs = _agent_dirs(dataset_root)[:2]
    agents = [load_agent(d) for d in agent_dirs]

    # --- train -------------------------------------------------------
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    ckpts, refined_poses = [], []
    for k, (agent, agent_dir) in enumerate(zip(agents, agent_dirs)):
        train_cfg = TrainConfig.from_dict(cfg.train.to_dict())
        train_cfg.seed = cfg.seed + k
        ckpt_path = os.path.join(ckpt_dir, f"{agent.agent_id}.field")
        poses_path = os.path.join(ckpt_dir, f"{agent.agent_id}_poses.json")
        csv_path = os.path.join(ckpt_dir, f"{agent.agent_id}_loss.csv")
        stage = f"train_{agent.agent_id}"
        train_hash = content_hash(train_cfg.to_dict(), [agent_dir])
        if not stage_is_current(out_dir, stage, train_hash):
            timed(stage, lambda a=agent, c=train_cfg, p=ckpt_path, q=poses_path, r=csv_path:
                  _train_agent(a, c, p, q, r))
            mark_stage_done(out_dir, stage, train_hash, [ckpt_path, poses_path, csv_path])
        else:
            log_event(stage, "skipped", reason="inputs unchanged")
        ckpts.append(ckpt_path)
        refined_poses.append(_load_refined_poses(poses_path))

    # --- retrieve ----------------------------------------------------
    pairs_path = os.path.join(out_dir, "pairs.json")
    retrieve_hash = content_hash({"top_n": cfg.retrieval_top_n, "seed": cfg.seed}, agent_dirs)
    if not stage_is_current(out_dir, "retrieve", retrieve_hash):
        def _retrieve():
            pairs = coview_pairs(agents[0], agents[1], top_n=cfg.retrieval_top_n,
                                 seed=cfg.seed)
            _write_json(pairs_path, {
                "agent_i": agents[0].agent_id,
                "agent_j": agents[1].agent_id,
                "pairs": [[int(a), int(b), float(d)] for a, b, d in pairs],
            })
        timed("retrieve", _retrieve)
        mark_stage_done(out_dir, "retrieve", retrieve_hash, [pairs_path])
    else:
        log_event("retrieve", "skipped", reason="inputs unchanged")

    # --- register ----------------------------------------------------
    transform_path = os.path.join(out_dir, "transform.json")
    f2m_cfg = Frame2ModelConfig.from_dict(cfg.frame2model.to_dict())
    f2m_cfg.seed = cfg.seed
    register_hash = content_hash(f2m_cfg.to_dict(), ckpts + [pairs_path])
    if not stage_is_current(out_dir, "register", register_hash):
        def _register():
            register_pair(
                ckpts[0], ckpts[1], agents[0], agents[1],
                refined_poses[0], refined_poses[1],
                _read_json(pairs_path)["pairs"], f2m_cfg, transform_path,
            )
        timed("register", _register)
        mark_stage_done(out_dir, "register", register_hash, [transform_path])
    else:
        log_event("register", "skipped", reason="inputs unchanged")
    transform = _read_json(transform_path)
    report["metrics"]["registration"] = {
        "consistency_residual": transform["consistency_residual"],
        "photometric_residual": transform["photometric_residual"],
        "n_candidates": transform["n_candidates"],
        "n_skipped": transform["n_skipped"],
    }

    # --- blend + eval ------------------------------------------------
    def _evaluate():
        return evaluate_run(cfg, out_dir, agent_dirs, agents, refined_poses, ckpts,
                            transform_path)
    report["metrics"].update(timed("eval", _evaluate))

    report_path = os.path.join(out_dir, "report.json")
    _write_json(report_path, report)
    log_event("pipeline", "report", path=report_path)
    return report


def register_pair(ckpt_i, ckpt_j, dataset_i, dataset_j, poses_i, poses_j,
                  pairs, cfg: Frame2ModelConfig, out_path) -> dict:
    """Full registration of two trained fields; writes transform.json."""
    bundle_i = load_field(ckpt_i)
    bundle_j = load_field(ckpt_j)
    field_i = MlpField(bundle_i.params)
    field_j = MlpField(bundle_j.params)
    render_i = RenderConfig.from_dict(bundle_i.render)
    render_j = RenderConfig.from_dict(bundle_j.render)
    ds_i = AgentDataset(dataset_i.agent_id, dataset_i.images, list(poses_i), dataset_i.camera)
    ds_j = AgentDataset(dataset_j.agent_id, dataset_j.images, list(poses_j), dataset_j.camera)

    results, skipped = frame2model_pairwise(
        field_i, field_j, ds_i, ds_j, pairs, render_i, render_j, cfg
    )
    best = select_candidate(results, n_skipped=skipped)
    extent = render_i.far - render_i.near
    queries = jittered_query_poses(
        [ds_i.poses[k] for k, _t, _d in pairs[:2]], extent=extent, seed=cfg.seed
    )
    refined = model2model_refine(
        field_i, field_j, best.transform, queries, ds_i.camera, render_i, render_j, cfg
    )
    payload = {
        "schema_version": TRANSFORM_SCHEMA_VERSION,
        "agent_i": dataset_i.agent_id,
        "agent_j": dataset_j.agent_id,
        "t_ji": refined.to_flat(),
        "t_ji_initial": best.transform.to_flat(),
        "consistency_residual": best.consistency,
        "photometric_residual": best.photometric,
        "selected_pair": list(best.pair),
        "n_candidates": best.n_candidates,
        "n_skipped": best.n_skipped,
        "per_pair": [
            {
                "pair": list(r.pair),
                "consistency": r.consistency,
                "photometric": r.photometric,
                "t_ji": r.t_ji.to_flat(),
                "t_ij": r.t_ij.to_flat(),
            }
            for r in results
        ],
    }
    _write_json(out_path, payload)
    return payload


def evaluate_run(cfg, out_dir, agent_dirs, agents, refined_poses, ckpts, transform_path) -> dict:
    """Pose error vs sealed truth plus image metrics on the overlap views."""
    transform = _read_json(transform_path)
    t_ji = Pose.from_flat(transform["t_ji"])
    metrics = {}

    truth_i = os.path.join(agent_dirs[0], "_truth", "truth.json")
    truth_j = os.path.join(agent_dirs[1], "_truth", "truth.json")
    if os.path.exists(truth_i) and os.path.exists(truth_j):
        t_true = true_relative_transform(agent_dirs[0], agent_dirs[1])
        err = pose_error(t_ji, t_true)
        err_initial = pose_error(Pose.from_flat(transform["t_ji_initial"]), t_true)
        metrics["transform_error"] = {
            "rotation_deg": err.rotation_deg,
            "translation": err.translation,
            "rotation_deg_before_refine": err_initial.rotation_deg,
            "translation_before_refine": err_initial.translation,
        }

    # gauge-aligned drift of the refined poses against the dataset poses
    refinement = {}
    for agent, refined in zip(agents, refined_poses):
        _g, errors = gauge_align(refined, agent.poses)
        refinement[agent.agent_id] = {
            "mean_rotation_deg": float(np.mean([e.rotation_deg for e in errors])),
            "mean_translation": float(np.mean([e.translation for e in errors])),
        }
    metrics["pose_refinement"] = refinement

    bundle_i = load_field(ckpts[0])
    bundle_j = load_field(ckpts[1])
    field_i = MlpField(bundle_i.params)
    field_j = MlpField(bundle_j.params)
    render_i = RenderConfig.from_dict(bundle_i.render)
    render_j = RenderConfig.from_dict(bundle_j.render)

    pairs = _read_json(os.path.join(out_dir, "pairs.json"))["pairs"]
    seen = []
    for k, _t, _d in pairs:
        if k not in seen:
            seen.append(k)
    view_ids = seen[: cfg.eval_views]
    blend_dir = os.path.join(out_dir, "blend")
    os.makedirs(blend_dir, exist_ok=True)
    rows = []
    for k in view_ids:
        pose = refined_poses[0][k]
        cam = agents[0].camera.with_pose(pose)
        truth_img = agents[0].images[k]
        img_i = render_image(field_i, cam, render_i)
        img_j = render_image(field_j, cam.with_pose(t_ji.compose(pose)), render_j)
        img_b = blend_render(field_i, field_j, t_ji, cam, render_i, render_j)
        save_png(os.path.join(blend_dir, f"view{k:04d}_blend.png"), img_b)
        rows.append(
            {
                "view": int(k),
                "psnr_i": psnr(img_i, truth_img),
                "psnr_j": psnr(img_j, truth_img),
                "psnr_blend": psnr(img_b, truth_img),
                "ssim_i": ssim(img_i, truth_img),
                "ssim_j": ssim(img_j, truth_img),
                "ssim_blend": ssim(img_b, truth_img),
            }
        )
    metrics["views"] = rows
    if rows:
        metrics["blending"] = {
            "psnr_i": float(np.mean([r["psnr_i"] for r in rows])),
            "psnr_j": float(np.mean([r["psnr_j"] for r in rows])),
            "psnr_blend": float(np.mean([r["psnr_blend"] for r in rows])),
        }
    return metrics


# ---------------------------------------------------------------------------
# subcommand entry points


def cmd_gen(args) -> int:
    if args.write_default_spec:
        default_scene_spec(seed=args.seed).save(args.write_default_spec)
        print(f"wrote default scene spec to {args.write_default_spec}")
        if args.spec is None:
            return 0
    if args.spec is None:
        raise ConfigError("gen needs --spec (or --write-default-spec)")
    spec = SceneSpec.from_dict(_read_json(args.spec))
    if args.seed is not None:
        spec.seed = args.seed
    try:
        spec.validate()
    except FieldFuseError as exc:
        raise ConfigError(f"invalid scene spec: {exc}")
    dirs = generate_dataset(spec, args.out)
    for d in dirs:
        log_event("gen", "agent_done", dir=d)
    print(f"generated {len(dirs)} agents under {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_dict(_read_json(args.config))
    if args.seed is not None:
        cfg.seed = args.seed
    dataset = load_agent(args.dataset)
    t0 = time.perf_counter()
    _train_agent(dataset, cfg, args.out, args.poses_out,
                 args.history_out or (os.path.splitext(args.out)[0] + "_loss.csv"))
    print(f"trained {dataset.agent_id}: {cfg.iterations} iterations "
          f"in {time.perf_counter() - t0:.1f}s -> {args.out}")
    return 0


def cmd_retrieve(args) -> int:
    ds_a = load_agent(args.agents[0])
    ds_b = load_agent(args.agents[1])
    pairs = coview_pairs(ds_a, ds_b, top_n=args.top, seed=args.seed or 0)
    _write_json(args.out, {
        "agent_i": ds_a.agent_id,
        "agent_j": ds_b.agent_id,
        "pairs": [[int(a), int(b), float(d)] for a, b, d in pairs],
    })
    print(f"{len(pairs)} co-view pairs -> {args.out}")
    return 0


def cmd_register(args) -> int:
    cfg = (
        Frame2ModelConfig.from_dict(_read_json(args.config))
        if args.config
        else Frame2ModelConfig()
    )
    if args.seed is not None:
        cfg.seed = args.seed
    ds_i = load_agent(args.dataset_i)
    ds_j = load_agent(args.dataset_j)
    poses_i = _load_refined_poses(args.poses_i) if args.poses_i else ds_i.poses
    poses_j = _load_refined_poses(args.poses_j) if args.poses_j else ds_j.poses
    pairs = _read_json(args.pairs)["pairs"]
    payload = register_pair(args.field_i, args.field_j, ds_i, ds_j,
                            poses_i, poses_j, pairs, cfg, args.out)
    print(
        f"registered: consistency {payload['consistency_residual']:.5f} "
        f"over {payload['n_candidates']} candidates -> {args.out}"
    )
    return 0


def cmd_blend(args) -> int:
    bundle_i = load_field(args.field_i)
    bundle_j = load_field(args.field_j)
    cam_spec = _read_json(args.camera)
    camera = Camera(
        fx=cam_spec["fx"], fy=cam_spec["fy"], cx=cam_spec["cx"], cy=cam_spec["cy"],
        width=int(cam_spec["width"]), height=int(cam_spec["height"]),
        pose=Pose.from_flat(cam_spec["pose"]),
    )
    t_ji = Pose.from_flat(_read_json(args.transform)["t_ji"])
    image = blend_render(
        MlpField(bundle_i.params), MlpField(bundle_j.params), t_ji, camera,
        RenderConfig.from_dict(bundle_i.render), RenderConfig.from_dict(bundle_j.render),
    )
    save_png(args.out, image)
    print(f"blended render -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    pred = _read_json(args.pred)
    root = args.truth
    dir_i = os.path.join(root, pred["agent_i"])
    dir_j = os.path.join(root, pred["agent_j"])
    for d in (dir_i, dir_j):
        if not os.path.isdir(os.path.join(d, "_truth")):
            raise ConfigError(f"no sealed truth under {d}")
    t_true = true_relative_transform(dir_i, dir_j)
    err = pose_error(Pose.from_flat(pred["t_ji"]), t_true)
    payload = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "rotation_error_deg": err.rotation_deg,
        "translation_error": err.translation,
        "consistency_residual": pred["consistency_residual"],
    }
    _write_json(args.report, payload)
    print(
        f"transform error: {err.rotation_deg:.4f} deg / {err.translation:.4f} units "
        f"-> {args.report}"
    )
    return 0


def cmd_pipeline(args) -> int:
    cfg = PipelineConfig.load(args.config)
    report = run_pipeline(cfg, args.out, seed=args.seed)
    reg = report["metrics"].get("registration", {})
    line = f"pipeline done: consistency {reg.get('consistency_residual', float('nan')):.5f}"
    err = report["metrics"].get("transform_error")
    if err:
        line += (
            f", transform error {err['rotation_deg']:.4f} deg / "
            f"{err['translation']:.4f} units"
        )
    blend = report["metrics"].get("blending")
    if blend:
        line += (
            f", PSNR i/j/blend = {blend['psnr_i']:.2f}/{blend['psnr_j']:.2f}/"
            f"{blend['psnr_blend']:.2f} dB"
        )
    print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fieldfuse",
        description="register and blend independently trained radiance fields",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic multi-agent dataset")
    p.add_argument("--spec", help="scene spec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--write-default-spec", metavar="PATH",
                   help="write the built-in desk-scale spec and exit if no --spec")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="bundle-adjust one agent")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", required=True, help="TrainConfig JSON")
    p.add_argument("--out", required=True, help="checkpoint path (.field)")
    p.add_argument("--poses-out", required=True)
    p.add_argument("--history-out")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("retrieve", help="co-view pair retrieval between two agents")
    p.add_argument("--agents", nargs=2, required=True)
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_retrieve)

    p = sub.add_parser("register", help="estimate the transform between two fields")
    p.add_argument("--field-i", required=True)
    p.add_argument("--field-j", required=True)
    p.add_argument("--dataset-i", required=True)
    p.add_argument("--dataset-j", required=True)
    p.add_argument("--poses-i", help="refined poses JSON (defaults to dataset poses)")
    p.add_argument("--poses-j")
    p.add_argument("--pairs", required=True)
    p.add_argument("--config", help="Frame2ModelConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_register)

    p = sub.add_parser("blend", help="render a blended image")
    p.add_argument("--field-i", required=True)
    p.add_argument("--field-j", required=True)
    p.add_argument("--transform", required=True)
    p.add_argument("--camera", required=True, help="camera JSON (intrinsics + pose)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_blend)

    p = sub.add_parser("eval", help="score a transform against sealed truth")
    p.add_argument("--pred", required=True, help="transform.json")
    p.add_argument("--truth", required=True, help="dataset root with agent/_truth dirs")
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        log_event("cli", "config_error", error=str(exc))
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FieldFuseError as exc:
        log_event("cli", "stage_error", error=str(exc))
        print(f"stage failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
