"""Command-line pipeline driver.

Subcommands: simulate (write a synthetic dataset), track (run the filter),
eval (score a trajectory against truth), render (debug views), gradcheck
(analytic-vs-finite-difference suite), bench (kernel backend benchmark).
Exit codes: 0 success, 1 validation error, 2 threshold failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio, gradcheck, kernels, metrics, pbd, splat, synth, tracker
from .model import SceneValidationError, validate_scene


def _load_scene(path: str | None, args) -> synth.Scene:
    if path is None:
        return synth.preset_scene(
            n_nodes=args.nodes, width=args.width, height=args.height, n_cameras=args.cameras
        )
    manifest = json.loads(Path(path).read_text())
    rope = manifest["rope"]
    scene = synth.preset_scene(
        n_nodes=rope["n_nodes"],
        rope_length=rope["segment_rest_length"] * (rope["n_nodes"] - 1),
        rope_mass=rope["mass"],
        rope_diameter=rope["diameter"],
        width=args.width,
        height=args.height,
        n_cameras=manifest.get("n_cameras", args.cameras),
    )
    ph = manifest.get("physics")
    if ph:
        scene = replace(
            scene,
            physics=replace(
                scene.physics,
                gravity=ph.get("gravity", scene.physics.gravity),
                friction_coefficient=ph.get(
                    "friction_coefficient", scene.physics.friction_coefficient
                ),
                dt=ph.get("dt", scene.physics.dt),
                constraint_iterations=ph.get(
                    "constraint_iterations", scene.physics.constraint_iterations
                ),
                damping=ph.get("damping", scene.physics.damping),
                smoothness=ph.get("smoothness", scene.physics.smoothness),
            ),
        )
    sp = manifest.get("splat")
    if sp:
        scene = replace(
            scene,
            splat_config=replace(
                scene.splat_config,
                gaussians_per_segment=sp.get(
                    "gaussians_per_segment", scene.splat_config.gaussians_per_segment
                ),
                opacity=sp.get("opacity", scene.splat_config.opacity),
                colors=np.asarray(sp["color"]) if sp.get("color") else scene.splat_config.colors,
            ),
        )
    return scene


def _load_script(name: str, chain0) -> synth.MotionScript:
    if name in synth.PRESET_SCRIPTS:
        return synth.preset_script(name, chain0)
    data = json.loads(Path(name).read_text())
    waypoints = np.asarray(data["waypoints"], dtype=np.float64)
    return synth.MotionScript(
        name=data.get("name", Path(name).stem),
        times=waypoints[:, 0],
        waypoints=waypoints[:, 1:4],
        grasp_node_hint=data.get("grasp_node_hint"),
    )


def cmd_simulate(args) -> int:
    scene = _load_scene(args.scene, args)
    validate_scene(scene.chain0, scene.cameras, scene.physics)
    script = _load_script(args.script, scene.chain0)
    states, gripper = synth.generate_ground_truth(
        scene.chain0, script, scene.physics, substeps=args.substeps
    )
    framesets = synth.render_dataset(
        states, scene.cameras, scene.chain0, scene.splat_config,
        noise_std=args.noise, seed=args.seed,
    )
    out = Path(args.out)
    dataio.save_dataset(
        out,
        scene,
        states,
        gripper,
        framesets,
        generation={
            "script": script.name,
            "noise_std": args.noise,
            "seed": args.seed,
            "substeps": args.substeps,
        },
    )
    dataio.save_run_manifest(out, {"command": "simulate", **vars(args)})
    worst = max(
        pbd.max_length_violation(s, scene.chain0.segment_rest_length) for s in states
    ) / scene.chain0.segment_rest_length
    print(
        f"wrote {states.shape[0]} steps x {len(scene.cameras)} cameras to {out} "
        f"(max length violation {worst * 100:.3f}%)"
    )
    return 0


def cmd_track(args) -> int:
    dataset = dataio.load_dataset(args.data)
    opt = tracker.OptimizerConfig(
        learning_rate=args.lr,
        iterations=args.iters,
        momentum=args.momentum,
        convergence_tol=args.tol,
        mask_loss=args.mask_loss,
    )
    physics = dataset.physics
    if args.perturb_physics != 1.0:
        physics = replace(
            physics, friction_coefficient=physics.friction_coefficient * args.perturb_physics
        )
    result = tracker.track(
        dataset,
        opt=opt,
        physics=physics,
        splat_config=dataset.tracker_splat_config(),
        predict_only=args.predict_only,
        threads=args.threads,
    )
    out = Path(args.out)
    dataio.save_trajectory(out, result)
    dataio.save_run_manifest(
        out, {"command": "track", "kernel_backend": kernels.BACKEND, **vars(args)}
    )
    total_s = float(np.sum(result.millis)) / 1e3
    rate = (result.estimates.shape[0] - 1) / total_s if total_s > 0 else float("inf")
    print(
        f"tracked {result.estimates.shape[0]} steps -> {out} "
        f"({rate:.2f} steps/s, backend {kernels.BACKEND})"
    )
    return 0


def cmd_eval(args) -> int:
    dataset = dataio.load_dataset(args.data)
    if dataset.truth is None:
        raise dataio.DatasetError(f"{args.data}: truth.csv required for evaluation")
    result = dataio.load_trajectory(args.traj)
    if result.estimates.shape[0] != dataset.truth.shape[0]:
        raise dataio.DatasetError(
            f"trajectory has {result.estimates.shape[0]} steps, truth has "
            f"{dataset.truth.shape[0]}"
        )
    baseline_mean = None
    if args.baseline:
        baseline = dataio.load_trajectory(args.baseline)
        baseline_mean = float(
            np.mean(
                [
                    metrics.mean_node_error(baseline.estimates[t], dataset.truth[t])
                    for t in range(dataset.truth.shape[0])
                ]
            )
        )
    grasped = pbd.find_grasped_node(dataset.truth[0], dataset.gripper.positions[0])
    rep = metrics.report(
        result.estimates,
        dataset.truth,
        result.losses,
        result.millis,
        result.timestamps,
        dataset.rope["segment_rest_length"],
        grasped_index=grasped,
        baseline_mean_error=baseline_mean,
    )
    out = Path(args.out)
    dataio.save_report(out, rep)
    dataio.save_run_manifest(out.parent, {"command": "eval", **vars(args)})
    print(json.dumps(rep.summary, indent=2))
    if args.max_mean_error is not None and rep.summary["mean_node_error"] > args.max_mean_error:
        print(
            f"FAIL: mean node error {rep.summary['mean_node_error']:.6f} m "
            f"> {args.max_mean_error} m"
        )
        return 2
    if args.max_tip_error is not None and rep.summary["max_tip_error"] > args.max_tip_error:
        print(
            f"FAIL: max tip error {rep.summary['max_tip_error']:.6f} m "
            f"> {args.max_tip_error} m"
        )
        return 2
    return 0


def cmd_render(args) -> int:
    dataset = dataio.load_dataset(args.data)
    if args.state == "truth":
        if dataset.truth is None:
            raise dataio.DatasetError(f"{args.data}: no truth.csv to render")
        positions = dataset.truth[args.step]
    else:
        if args.traj is None:
            raise dataio.DatasetError("--state traj requires --traj <dir>")
        result = dataio.load_trajectory(args.traj)
        positions = result.estimates[args.step]
    chain0 = dataset.initial_chain()
    splats = synth.ground_truth_splats(positions, chain0, dataset.splat_config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    for k, cam in enumerate(dataset.cameras):
        frame = splat.render(splats, cam, camera_index=k)
        dataio.save_image(out.with_name(f"{out.stem}_cam{k}{out.suffix or '.png'}"), frame.pixels)
    print(f"rendered step {args.step} ({args.state}) to {out.parent}")
    return 0


def cmd_gradcheck(args) -> int:
    result = gradcheck.run(
        n_scenes=args.scenes, seed=args.seed, h=args.h, raw=args.raw, verbose=True
    )
    print(
        f"worst relative error {result.worst_rel:.3e} "
        f"(over {result.n_large} components), worst absolute error "
        f"{result.worst_abs:.3e} (over {result.n_small} small components)"
    )
    if not result.passed:
        print("FAIL: gradient check outside tolerance (rel 1e-3 / abs 1e-6)")
        return 2
    print("PASS")
    return 0


def cmd_bench(args) -> int:
    from .benchmark import run_benchmark

    run_benchmark(repeats=args.repeats)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ropetrack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--scene", default=None, help="scene manifest JSON; omit for the preset")
    p.add_argument("--script", required=True, help="drag | lift | cross | waypoint JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0, help="pixel noise stddev")
    p.add_argument("--substeps", type=int, default=20)
    p.add_argument("--nodes", type=int, default=30)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--cameras", type=int, default=3)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", help="run the tracking filter over a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--mask-loss", action="store_true")
    p.add_argument("--predict-only", action="store_true")
    p.add_argument("--perturb-physics", type=float, default=1.0,
                   help="scale the tracker's friction coefficient")
    p.add_argument("--threads", type=int, default=1, help="camera worker threads; 0 = auto")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score a trajectory against dataset truth")
    p.add_argument("--data", required=True)
    p.add_argument("--traj", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", default=None, help="trajectory dir for the reduction ratio")
    p.add_argument("--max-mean-error", type=float, default=None)
    p.add_argument("--max-tip-error", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render the K camera views of one step")
    p.add_argument("--data", required=True)
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--state", choices=["truth", "traj"], required=True)
    p.add_argument("--traj", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--raw", action="store_true",
                   help="finite differences of the unfrozen loss (noisy near cutoffs)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="compare kernel backends")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SceneValidationError, dataio.DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
