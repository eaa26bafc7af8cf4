import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import PENDULUM_URDF, TWO_LINK_URDF
from gradgap.model import (
    LengthMismatch,
    ParseError,
    UnsupportedStructure,
    default_params,
    flatten,
    load_urdf,
    param_groups,
    param_names,
    parse_urdf,
    rpy_to_matrix,
    unflatten,
)


def test_desk_arm_has_six_joints_and_seven_links(desk):
    assert desk.actuated_joint_count == 6
    assert desk.link_count == 7
    assert desk.n_params == 3 + 7 + 2 * 6 + 3 * 7 == 43
    assert not desk.warnings


def test_param_layout_and_names(desk):
    groups = param_groups(desk)
    assert [g.stop - g.start for g in groups.values()] == [3, 7, 6, 6, 21]
    names = param_names(desk)
    assert len(names) == 43 and len(set(names)) == 43
    assert names[:3] == ["gravity.x", "gravity.y", "gravity.z"]


def test_default_params_read_from_urdf(two_link):
    p = default_params(two_link)
    assert p.gravity == (0.0, 0.0, -9.81)
    assert p.masses == (0.0, 1.3, 0.7)
    assert p.force_pd == (1.0, 1.0)
    assert p.inertias[1] == (0.004, 0.031, 0.029)


@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=43, max_size=43))
@settings(max_examples=30, deadline=None)
def test_flatten_unflatten_round_trip(values):
    from gradgap.model import desk_arm

    m = desk_arm()
    assert np.array_equal(flatten(unflatten(m, values)), np.array(values))


def test_unflatten_rejects_wrong_length(desk):
    with pytest.raises(LengthMismatch, match="43"):
        unflatten(desk, np.zeros(42))


def test_load_urdf_from_file(tmp_path):
    f = tmp_path / "p.urdf"
    f.write_text(PENDULUM_URDF)
    m = load_urdf(f)
    assert m.name == "pendulum" and m.actuated_joint_count == 1


def test_joints_are_reordered_into_chain_order():
    a, b = TWO_LINK_URDF.index("<joint"), TWO_LINK_URDF.index("</robot>")
    joints = TWO_LINK_URDF[a:b]
    j1_end = joints.index("</joint>") + len("</joint>")
    swapped = TWO_LINK_URDF[:a] + joints[j1_end:] + joints[:j1_end] + "</robot>"
    m = parse_urdf(swapped)
    assert [j.name for j in m.joints] == ["shoulder", "elbow"]
    assert any("reordered" in w for w in m.warnings)


def test_ignored_tags_and_dropped_off_diagonals_are_reported():
    text = PENDULUM_URDF.replace('ixy="0"', 'ixy="0.001"').replace("</robot>", "<gazebo/></robot>")
    m = parse_urdf(text)
    assert any("gazebo" in w for w in m.warnings)
    assert any("off-diagonal" in w for w in m.warnings)


@pytest.mark.parametrize(
    "edit, error, match",
    [
        (lambda t: t.replace("</robot>", ""), ParseError, "malformed"),
        (lambda t: t.replace('type="revolute"', 'type="prismatic"'), UnsupportedStructure, "prismatic"),
        (lambda t: t.replace('<mass value="1.0"/>', '<mass value="-1"/>'), ParseError, "negative mass"),
        (lambda t: t.replace('<mass value="1.0"/>', '<mass value="heavy"/>'), ParseError, "not a number"),
        (lambda t: t.replace('<child link="arm"/>', '<child link="nope"/>'), ParseError, "unknown link"),
        (lambda t: t.replace('<axis xyz="0 1 0"/>', '<axis xyz="0 0 0"/>'), ParseError, "zero axis"),
        (lambda t: t.replace('<limit effort="10" lower="-3" upper="3" velocity="5"/>', ""), ParseError, "limit"),
        (lambda t: t.replace("<robot", "<robat").replace("</robot>", "</robat>"), ParseError, "expected <robot>"),
    ],
)
def test_malformed_urdf_errors(edit, error, match):
    with pytest.raises(error, match=match):
        parse_urdf(edit(PENDULUM_URDF))


def test_branching_tree_is_rejected():
    extra = """<link name="other"/><joint name="j2" type="revolute"><parent link="base"/><child link="other"/>
    <axis xyz="0 0 1"/><limit effort="1"/></joint></robot>"""
    with pytest.raises(UnsupportedStructure, match="serial"):
        parse_urdf(PENDULUM_URDF.replace("</robot>", extra))


def test_rpy_matrix_is_a_rotation():
    R = rpy_to_matrix((0.3, -0.7, 1.9))
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-14)
    assert np.linalg.det(R) == pytest.approx(1.0)
    # pure yaw
    c, s = np.cos(0.5), np.sin(0.5)
    assert np.allclose(rpy_to_matrix((0, 0, 0.5)), [[c, -s, 0], [s, c, 0], [0, 0, 1]])
