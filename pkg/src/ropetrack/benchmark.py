"""Benchmark the compiled rasterization kernels against the pure-numpy
fallback on a preset-scale scene (3 cameras at 640x480, 30 nodes, 3
Gaussians per segment)."""

from __future__ import annotations

import time

import numpy as np

from . import splat, synth
from .kernels import _rasterize_py


def _load_backends():
    backends = [("python", _rasterize_py)]
    try:
        from .kernels import _rasterize_cy

        backends.insert(0, ("cython", _rasterize_cy))
    except ImportError:
        pass
    return backends


def _prepare_case():
    scene = synth.preset_scene()
    script = synth.preset_script("lift", scene.chain0)
    states, _ = synth.generate_ground_truth(scene.chain0, script, scene.physics, substeps=2)
    chain = scene.chain0.with_positions(states[len(states) // 2])
    splats = splat.build_splats(chain, scene.splat_config)

    cases = []
    for cam in scene.cameras:
        batch = splat.project_splats(splats.means, splats.sigma_world, cam)
        observed, _, _ = splat.oracle_render_arrays(splats, cam)
        args = (
            batch.mean2d,
            batch.conic,
            np.ascontiguousarray(splats.opacities[batch.ids]),
            np.ascontiguousarray(splats.colors[batch.ids]),
            batch.rects,
            batch.tile_start,
            batch.tile_items,
            batch.tiles_x,
            batch.tiles_y,
            cam.width,
            cam.height,
            np.ascontiguousarray(cam.background_color),
        )
        mask = np.ones((cam.height, cam.width), dtype=np.uint8)
        cases.append((args, np.ascontiguousarray(observed), mask))
    return cases


def _time(fn, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_benchmark(repeats: int = 5) -> dict:
    cases = _prepare_case()
    backends = _load_backends()
    results: dict = {}
    print(f"{'backend':<8} {'forward ms':>12} {'loss ms':>12} {'backward ms':>12}")
    for name, impl in backends:
        fwd = _time(
            lambda: [impl.forward_image(*args) for args, _, _ in cases], repeats
        )
        loss = _time(
            lambda: [
                impl.loss_forward(*args, obs, mask) for args, obs, mask in cases
            ],
            repeats,
        )
        bwd = _time(
            lambda: [
                impl.loss_backward(*args, obs, mask, 1.0) for args, obs, mask in cases
            ],
            repeats,
        )
        results[name] = {"forward_s": fwd, "loss_s": loss, "backward_s": bwd}
        print(f"{name:<8} {fwd * 1e3:>12.3f} {loss * 1e3:>12.3f} {bwd * 1e3:>12.3f}")
    if "cython" in results and "python" in results:
        for key in ("forward_s", "loss_s", "backward_s"):
            ratio = results["python"][key] / results["cython"][key]
            print(f"speedup {key[:-2]}: {ratio:.1f}x")
    return results


if __name__ == "__main__":
    run_benchmark()
