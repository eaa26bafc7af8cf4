import numpy as np
import pytest

from gradgap.model import desk_arm, parse_urdf

# single revolute joint about y, centre of mass 0.25 m out along x
PENDULUM_URDF = """<robot name="pendulum">
  <link name="base"/>
  <link name="arm">
    <inertial><origin xyz="0.25 0 0"/><mass value="1.0"/>
      <inertia ixx="0.01" iyy="0.02" izz="0.02" ixy="0" ixz="0" iyz="0"/></inertial>
  </link>
  <joint name="hinge" type="revolute">
    <parent link="base"/><child link="arm"/><axis xyz="0 1 0"/>
    <limit effort="10" lower="-3" upper="3" velocity="5"/>
  </joint>
</robot>"""

# planar two-link arm, both joints about y; link lengths 0.5 and 0.4
TWO_LINK_URDF = """<robot name="two_link">
  <link name="base"/>
  <link name="upper">
    <inertial><origin xyz="0.2 0 0"/><mass value="1.3"/>
      <inertia ixx="0.004" iyy="0.031" izz="0.029" ixy="0" ixz="0" iyz="0"/></inertial>
  </link>
  <link name="lower">
    <inertial><origin xyz="0.15 0 0"/><mass value="0.7"/>
      <inertia ixx="0.002" iyy="0.012" izz="0.011" ixy="0" ixz="0" iyz="0"/></inertial>
  </link>
  <joint name="shoulder" type="revolute">
    <parent link="base"/><child link="upper"/><axis xyz="0 1 0"/>
    <limit effort="20" lower="-3" upper="3" velocity="5"/>
  </joint>
  <joint name="elbow" type="revolute">
    <parent link="upper"/><child link="lower"/><origin xyz="0.5 0 0"/><axis xyz="0 1 0"/>
    <limit effort="20" lower="-3" upper="3" velocity="5"/>
  </joint>
</robot>"""

# unit inertia about z, no gravity effect: a double integrator
BAR_URDF = """<robot name="bar">
  <link name="base"/>
  <link name="bar">
    <inertial><origin xyz="0 0 0"/><mass value="1"/>
      <inertia ixx="1" iyy="1" izz="1" ixy="0" ixz="0" iyz="0"/></inertial>
  </link>
  <joint name="j" type="revolute">
    <parent link="base"/><child link="bar"/><axis xyz="0 0 1"/>
    <limit effort="100" lower="-10" upper="10" velocity="1"/>
  </joint>
</robot>"""


@pytest.fixture(scope="session")
def desk():
    return desk_arm()


@pytest.fixture(scope="session")
def pendulum():
    return parse_urdf(PENDULUM_URDF)


@pytest.fixture(scope="session")
def two_link():
    return parse_urdf(TWO_LINK_URDF)


@pytest.fixture(scope="session")
def bar():
    return parse_urdf(BAR_URDF)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
