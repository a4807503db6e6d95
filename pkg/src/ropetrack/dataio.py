"""Dataset, trajectory and report files.

Dataset directory layout:

    scene.json                  rope, physics, splat and camera metadata
    cameras/cam_<k>.txt         3x4 projection (row-major), then "W H"
    gripper.csv                 t,x,y,z per coarse step
    frames/cam_<k>/<step>.png   8-bit RGB observations
    masks/cam_<k>/<step>.png    8-bit binary object masks
    truth.csv                   t,node,x,y,z (synthetic data only)

All text numbers carry 17 significant digits so round trips are exact to
double precision; images quantize to 8 bits (at most 1/255 per channel),
which is part of the observation model.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .metrics import EvalReport
from .model import CameraModel, Frame, FrameSet, GripperLog, NodeChain, PhysicsParams, SplatConfig
from .synth import Scene
from .tracker import TrackResult


class DatasetError(ValueError):
    pass


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _frame_name(step: int) -> str:
    return f"{step:06d}.png"


def save_image(path: Path, image: np.ndarray) -> None:
    data = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def load_image(path: Path) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing image file: {path}")
    with Image.open(path) as img:
        data = np.asarray(img.convert("RGB"), dtype=np.float64)
    return data / 255.0


def save_mask(path: Path, mask: np.ndarray) -> None:
    data = (np.asarray(mask, dtype=bool) * np.uint8(255)).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def load_mask(path: Path) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing mask file: {path}")
    with Image.open(path) as img:
        data = np.asarray(img.convert("L"))
    return data > 127


def _save_camera(path: Path, camera: CameraModel) -> None:
    rows = [" ".join(_fmt(v) for v in camera.projection[r]) for r in range(3)]
    rows.append(f"{camera.width} {camera.height}")
    path.write_text("\n".join(rows) + "\n")


def _load_camera(path: Path, background) -> CameraModel:
    if not path.exists():
        raise DatasetError(f"missing camera file: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if len(lines) != 4:
        raise DatasetError(f"{path}: expected 3 matrix rows plus 'W H', got {len(lines)} lines")
    matrix = np.array([[float(v) for v in ln.split()] for ln in lines[:3]])
    if matrix.shape != (3, 4):
        raise DatasetError(f"{path}: projection matrix is {matrix.shape}, expected (3, 4)")
    w, h = (int(v) for v in lines[3].split())
    return CameraModel(projection=matrix, width=w, height=h, background_color=background)


def save_dataset(
    path,
    scene: Scene,
    states: np.ndarray,
    gripper: GripperLog,
    framesets,
    generation: dict | None = None,
) -> None:
    """Write a complete synthetic dataset directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    states = np.asarray(states, dtype=np.float64)
    n_steps = states.shape[0]
    if len(gripper) != n_steps:
        raise DatasetError(
            f"gripper log has {len(gripper)} rows but there are {n_steps} states"
        )
    if len(framesets) != n_steps:
        raise DatasetError(
            f"{len(framesets)} frame sets for {n_steps} states"
        )

    chain0 = scene.chain0
    manifest = {
        "rope": {
            "n_nodes": chain0.n_nodes,
            "segment_rest_length": chain0.segment_rest_length,
            "diameter": scene.splat_config.rope_diameter,
            "mass": scene.rope_mass,
        },
        "physics": {
            "gravity": scene.physics.gravity,
            "friction_coefficient": scene.physics.friction_coefficient,
            "dt": scene.physics.dt,
            "constraint_iterations": scene.physics.constraint_iterations,
            "damping": scene.physics.damping,
            "smoothness": scene.physics.smoothness,
        },
        "splat": {
            "gaussians_per_segment": scene.splat_config.gaussians_per_segment,
            "opacity": scene.splat_config.opacity,
            "color": list(np.asarray(scene.splat_config.colors).reshape(-1, 3)[0])
            if scene.splat_config.colors is not None
            else None,
        },
        "background_colors": [list(c.background_color) for c in scene.cameras],
        "n_cameras": len(scene.cameras),
        "n_steps": n_steps,
    }
    if generation is not None:
        manifest["generation"] = generation
    (path / "scene.json").write_text(json.dumps(manifest, indent=2) + "\n")

    cam_dir = path / "cameras"
    cam_dir.mkdir(exist_ok=True)
    for k, cam in enumerate(scene.cameras):
        _save_camera(cam_dir / f"cam_{k}.txt", cam)

    with open(path / "gripper.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "x", "y", "z"])
        for t, p in zip(gripper.timestamps, gripper.positions):
            writer.writerow([_fmt(t), _fmt(p[0]), _fmt(p[1]), _fmt(p[2])])

    with open(path / "truth.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "node", "x", "y", "z"])
        for s in range(n_steps):
            t = gripper.timestamps[s]
            for i in range(states.shape[1]):
                writer.writerow(
                    [_fmt(t), i, _fmt(states[s, i, 0]), _fmt(states[s, i, 1]), _fmt(states[s, i, 2])]
                )

    for k in range(len(scene.cameras)):
        (path / "frames" / f"cam_{k}").mkdir(parents=True, exist_ok=True)
        (path / "masks" / f"cam_{k}").mkdir(parents=True, exist_ok=True)
    for s, fs in enumerate(framesets):
        for k, frame in enumerate(fs.frames):
            save_image(path / "frames" / f"cam_{k}" / _frame_name(s), frame.pixels)
            save_mask(path / "masks" / f"cam_{k}" / _frame_name(s), fs.masks[k])


@dataclass
class Dataset:
    """Loaded dataset handle; frames are read lazily per step."""

    path: Path
    n_steps: int
    cameras: tuple[CameraModel, ...]
    gripper: GripperLog
    physics: PhysicsParams
    splat_config: SplatConfig  # generator config, including the true color
    rope: dict
    truth: np.ndarray | None  # (S, N, 3)

    @property
    def timestamps(self) -> np.ndarray:
        return self.gripper.timestamps

    def initial_chain(self) -> NodeChain:
        if self.truth is None:
            raise DatasetError(
                f"{self.path}: no truth.csv; tracking needs the initial chain"
            )
        return NodeChain(
            self.truth[0], self.rope["segment_rest_length"], self.rope["mass"] / self.rope["n_nodes"]
        )

    def tracker_splat_config(self) -> SplatConfig:
        """Generator splat config with the color withheld (the tracker fits
        its own from the masked first frames)."""
        return replace(self.splat_config, colors=None)

    def frameset(self, step: int) -> FrameSet:
        frames = []
        masks = []
        t = float(self.gripper.timestamps[step])
        for k, cam in enumerate(self.cameras):
            pixels = load_image(self.path / "frames" / f"cam_{k}" / _frame_name(step))
            if pixels.shape != (cam.height, cam.width, 3):
                raise DatasetError(
                    f"frame cam_{k}/{_frame_name(step)} has shape {pixels.shape}, "
                    f"camera expects ({cam.height}, {cam.width}, 3)"
                )
            frames.append(Frame(pixels=pixels, camera_index=k, timestamp=t))
            masks.append(load_mask(self.path / "masks" / f"cam_{k}" / _frame_name(step)))
        return FrameSet(frames=tuple(frames), masks=tuple(masks))


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest_path = path / "scene.json"
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())

    ph = manifest["physics"]
    physics = PhysicsParams(
        gravity=ph["gravity"],
        friction_coefficient=ph["friction_coefficient"],
        dt=ph["dt"],
        constraint_iterations=ph["constraint_iterations"],
        damping=ph["damping"],
        smoothness=ph["smoothness"],
    )
    sp = manifest["splat"]
    splat_config = SplatConfig(
        gaussians_per_segment=sp["gaussians_per_segment"],
        rope_diameter=manifest["rope"]["diameter"],
        opacity=sp["opacity"],
        colors=np.asarray(sp["color"]) if sp.get("color") is not None else None,
    )

    backgrounds = manifest["background_colors"]
    cameras = tuple(
        _load_camera(path / "cameras" / f"cam_{k}.txt", np.asarray(backgrounds[k]))
        for k in range(manifest["n_cameras"])
    )

    gripper_path = path / "gripper.csv"
    if not gripper_path.exists():
        raise DatasetError(f"missing gripper log: {gripper_path}")
    times, positions = [], []
    with open(gripper_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["t", "x", "y", "z"]:
            raise DatasetError(f"{gripper_path}: bad header {header}")
        for row in reader:
            times.append(float(row[0]))
            positions.append([float(v) for v in row[1:4]])
    times = np.asarray(times)
    if times.size >= 2 and not np.all(np.diff(times) > 0):
        raise DatasetError(f"{gripper_path}: timestamps are not strictly increasing")
    gripper = GripperLog(timestamps=times, positions=np.asarray(positions))

    n_steps = int(manifest["n_steps"])
    if len(gripper) != n_steps:
        raise DatasetError(
            f"gripper.csv has {len(gripper)} rows but scene.json declares {n_steps} steps"
        )
    frame_dir = path / "frames" / "cam_0"
    n_frames = len(list(frame_dir.glob("*.png"))) if frame_dir.exists() else 0
    if n_frames != n_steps:
        raise DatasetError(
            f"found {n_frames} frames for cam_0 but gripper.csv has {n_steps} rows"
        )

    truth = None
    truth_path = path / "truth.csv"
    if truth_path.exists():
        truth = _load_node_csv(truth_path, n_steps, manifest["rope"]["n_nodes"], gripper.timestamps)

    return Dataset(
        path=path,
        n_steps=n_steps,
        cameras=cameras,
        gripper=gripper,
        physics=physics,
        splat_config=splat_config,
        rope=manifest["rope"],
        truth=truth,
    )


def _load_node_csv(path: Path, n_steps: int, n_nodes: int, timestamps) -> np.ndarray:
    data = np.zeros((n_steps, n_nodes, 3))
    seen = np.zeros((n_steps, n_nodes), dtype=bool)
    t_index = {round(float(t), 9): i for i, t in enumerate(timestamps)}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader, None)
        for line_no, row in enumerate(reader, start=2):
            try:
                t = round(float(row[0]), 9)
                node = int(row[1])
                xyz = [float(v) for v in row[2:5]]
                if len(row) != 5:
                    raise ValueError("wrong column count")
            except (ValueError, IndexError) as exc:
                raise DatasetError(f"{path}: malformed row at line {line_no}: {exc}") from exc
            if t not in t_index:
                raise DatasetError(f"{path}: line {line_no}: unknown timestamp {row[0]}")
            if not (0 <= node < n_nodes):
                raise DatasetError(f"{path}: line {line_no}: node {node} out of range")
            data[t_index[t], node] = xyz
            seen[t_index[t], node] = True
    if not np.all(seen):
        s, i = np.argwhere(~seen)[0]
        raise DatasetError(f"{path}: missing row for step {s}, node {i}")
    return data


# ---------------------------------------------------------------------------
# trajectories and reports


def save_trajectory(path, result: TrackResult) -> None:
    """Write estimates.csv (t,node,x,y,z) and losses.csv (t,loss,iters,millis)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    est = result.estimates
    with open(path / "estimates.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "node", "x", "y", "z"])
        for s in range(est.shape[0]):
            for i in range(est.shape[1]):
                writer.writerow(
                    [
                        _fmt(result.timestamps[s]),
                        i,
                        _fmt(est[s, i, 0]),
                        _fmt(est[s, i, 1]),
                        _fmt(est[s, i, 2]),
                    ]
                )
    with open(path / "losses.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "loss", "iters", "millis"])
        for s in range(est.shape[0]):
            writer.writerow(
                [
                    _fmt(result.timestamps[s]),
                    _fmt(result.losses[s]),
                    int(result.iterations[s]),
                    _fmt(result.millis[s]),
                ]
            )


def load_trajectory(path) -> TrackResult:
    path = Path(path)
    est_path = path / "estimates.csv"
    if not est_path.exists():
        raise DatasetError(f"missing trajectory file: {est_path}")
    rows = []
    with open(est_path, newline="") as f:
        reader = csv.reader(f)
        next(reader, None)
        for line_no, row in enumerate(reader, start=2):
            try:
                if len(row) != 5:
                    raise ValueError("wrong column count")
                rows.append((float(row[0]), int(row[1]), *(float(v) for v in row[2:5])))
            except (ValueError, IndexError) as exc:
                raise DatasetError(
                    f"{est_path}: malformed row at line {line_no}: {exc}"
                ) from exc
    times = sorted({r[0] for r in rows})
    n_nodes = max(r[1] for r in rows) + 1
    t_index = {t: i for i, t in enumerate(times)}
    estimates = np.zeros((len(times), n_nodes, 3))
    for t, node, x, y, z in rows:
        estimates[t_index[t], node] = (x, y, z)

    losses = np.zeros(len(times))
    iters = np.zeros(len(times), dtype=np.int64)
    millis = np.zeros(len(times))
    loss_path = path / "losses.csv"
    if loss_path.exists():
        with open(loss_path, newline="") as f:
            reader = csv.reader(f)
            next(reader, None)
            for line_no, row in enumerate(reader, start=2):
                try:
                    t = float(row[0])
                    losses[t_index[t]] = float(row[1])
                    iters[t_index[t]] = int(row[2])
                    millis[t_index[t]] = float(row[3])
                except (ValueError, IndexError, KeyError) as exc:
                    raise DatasetError(
                        f"{loss_path}: malformed row at line {line_no}: {exc}"
                    ) from exc
    return TrackResult(
        timestamps=np.asarray(times),
        estimates=estimates,
        losses=losses,
        iterations=iters,
        millis=millis,
    )


def save_report(path, rep: EvalReport) -> None:
    """Write the per-step metric table as CSV and the summary as JSON next
    to it (<out>.summary.json)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["t", "mean_node_error", "tip_error", "max_length_violation", "loss", "millis"]
        )
        for i in range(rep.timestamps.shape[0]):
            writer.writerow(
                [
                    _fmt(rep.timestamps[i]),
                    _fmt(rep.mean_errors[i]),
                    _fmt(rep.tip_errors[i]),
                    _fmt(rep.max_violations[i]),
                    _fmt(rep.losses[i]),
                    _fmt(rep.millis[i]),
                ]
            )
    summary_path = path.with_name(path.name + ".summary.json")
    summary_path.write_text(json.dumps(rep.summary, indent=2) + "\n")


def save_run_manifest(out_dir, config: dict) -> None:
    """Echo the fully resolved configuration beside a command's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(json.dumps(config, indent=2, default=str) + "\n")
