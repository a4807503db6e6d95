import numpy as np
import pytest

from ropetrack.model import (
    CameraModel,
    Frame,
    FrameSet,
    GripperLog,
    NodeChain,
    PhysicsParams,
    SceneValidationError,
    SplatConfig,
    validate_scene,
    validate_splat_config,
)


def simple_camera(width=64, height=48):
    projection = np.array(
        [
            [60.0, 0.0, width / 2, 0.0],
            [0.0, 60.0, height / 2, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ]
    )
    return CameraModel(
        projection=projection,
        width=width,
        height=height,
        background_color=np.array([0.1, 0.1, 0.1]),
    )


def test_minimal_valid_scene():
    chain = NodeChain(np.array([[0.0, 0.0, 0.0], [0.02, 0.0, 0.0]]), 0.02, 0.001)
    desc = validate_scene(chain, [simple_camera()], PhysicsParams())
    assert desc.chain is chain
    assert len(desc.cameras) == 1


def test_nan_coordinate_error_names_node():
    positions = np.zeros((4, 3))
    positions[2, 1] = np.nan
    chain = NodeChain(positions, 0.02, 0.001)
    with pytest.raises(SceneValidationError) as exc:
        validate_scene(chain, [simple_camera()], PhysicsParams())
    assert "node 2" in str(exc.value)


def test_zero_dt_error_names_params():
    chain = NodeChain(np.array([[0.0, 0.0, 0.0], [0.02, 0.0, 0.0]]), 0.02, 0.001)
    with pytest.raises(SceneValidationError) as exc:
        validate_scene(chain, [simple_camera()], PhysicsParams(dt=0.0))
    assert "params.dt" in str(exc.value)


def test_violations_aggregate():
    positions = np.zeros((3, 3))
    positions[1, 0] = np.inf
    chain = NodeChain(positions, -1.0, 0.001)
    with pytest.raises(SceneValidationError) as exc:
        validate_scene(chain, [simple_camera()], PhysicsParams(dt=0.0))
    message = str(exc.value)
    assert "node 1" in message
    assert "segment_rest_length" in message
    assert "params.dt" in message
    assert len(exc.value.violations) >= 3


def test_chain_requires_two_nodes():
    with pytest.raises(ValueError):
        NodeChain(np.zeros((1, 3)), 0.02, 0.001)


def test_chain_positions_immutable():
    chain = NodeChain(np.zeros((2, 3)), 0.02, 0.001)
    with pytest.raises(ValueError):
        chain.positions[0, 0] = 1.0


def test_gripper_log_monotone_timestamps():
    with pytest.raises(ValueError):
        GripperLog(np.array([0.0, 0.0]), np.zeros((2, 3)))


def test_gripper_action_is_position_difference():
    log = GripperLog(np.array([0.0, 0.1, 0.2]), np.array([[0.0, 0, 0], [0.5, 0, 0], [0.7, 0.1, 0]]))
    assert np.allclose(log.action(0), [0.0, 0.0, 0.0])
    assert np.allclose(log.action(1), [0.5, 0.0, 0.0])
    assert np.allclose(log.action(2), [0.2, 0.1, 0.0])


def test_frame_set_camera_index_mismatch():
    frame = Frame(np.zeros((4, 4, 3)), camera_index=1, timestamp=0.0)
    with pytest.raises(ValueError):
        FrameSet(frames=(frame,))


def test_frame_shape_check():
    with pytest.raises(ValueError):
        Frame(np.zeros((4, 4)), camera_index=0, timestamp=0.0)


def test_splat_config_validation():
    assert validate_splat_config(SplatConfig()) == []
    assert validate_splat_config(SplatConfig(gaussians_per_segment=0))
    assert validate_splat_config(SplatConfig(rope_diameter=0.0))
    assert validate_splat_config(SplatConfig(opacity=0.0))
    assert validate_splat_config(SplatConfig(opacity=1.5))


def test_camera_background_range_checked():
    cam = simple_camera()
    bad = CameraModel(cam.projection, cam.width, cam.height, np.array([1.5, 0.0, 0.0]))
    chain = NodeChain(np.array([[0.0, 0.0, 0.0], [0.02, 0.0, 0.0]]), 0.02, 0.001)
    with pytest.raises(SceneValidationError) as exc:
        validate_scene(chain, [bad], PhysicsParams())
    assert "background_color" in str(exc.value)
