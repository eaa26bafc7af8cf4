"""Serial-chain robot description parsed from a URDF subset, and the flat
optimisable parameter vector."""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "ModelError",
    "ParseError",
    "UnsupportedStructure",
    "LengthMismatch",
    "Link",
    "Joint",
    "RobotModel",
    "SimParams",
    "parse_urdf",
    "load_urdf",
    "default_params",
    "flatten",
    "unflatten",
    "param_names",
    "param_groups",
    "rpy_to_matrix",
    "DEFAULT_GRAVITY",
]

DEFAULT_GRAVITY = (0.0, 0.0, -9.81)


class ModelError(Exception):
    pass


class ParseError(ModelError):
    pass


class UnsupportedStructure(ModelError):
    pass


class LengthMismatch(ModelError, ValueError):
    pass


def rpy_to_matrix(rpy) -> np.ndarray:
    """Rotation for URDF roll/pitch/yaw (fixed-axis X, then Y, then Z)."""
    r, p, y = rpy
    cr, sr = math.cos(r), math.sin(r)
    cp, sp = math.cos(p), math.sin(p)
    cy, sy = math.cos(y), math.sin(y)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


@dataclass(frozen=True)
class Link:
    name: str
    mass: float = 0.0
    com: tuple = (0.0, 0.0, 0.0)
    com_rpy: tuple = (0.0, 0.0, 0.0)
    inertia_diag: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.mass < 0:
            raise ParseError(f"link {self.name!r}: negative mass {self.mass}")
        if any(v < 0 for v in self.inertia_diag):
            raise ParseError(f"link {self.name!r}: negative inertia {self.inertia_diag}")


@dataclass(frozen=True)
class Joint:
    name: str
    kind: str
    parent: str
    child: str
    axis: tuple = (1.0, 0.0, 0.0)
    origin_xyz: tuple = (0.0, 0.0, 0.0)
    origin_rpy: tuple = (0.0, 0.0, 0.0)
    damping: float = 0.0
    effort_limit: float = math.inf
    position_limits: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("revolute", "fixed"):
            raise UnsupportedStructure(f"joint {self.name!r}: unsupported type {self.kind!r}")
        if self.kind == "revolute":
            n = math.sqrt(sum(a * a for a in self.axis))
            if abs(n - 1.0) > 1e-9:
                raise ParseError(f"joint {self.name!r}: axis {self.axis} is not unit length")
            if not self.effort_limit > 0:
                raise ParseError(f"joint {self.name!r}: effort limit must be positive")
            if self.damping < 0:
                raise ParseError(f"joint {self.name!r}: negative damping")

    @property
    def actuated(self) -> bool:
        return self.kind == "revolute"


@dataclass(frozen=True)
class RobotModel:
    """A serial chain: ``links[0]`` is the world-fixed base and ``joints[i]``
    connects ``links[i]`` to ``links[i + 1]``."""

    name: str
    links: tuple
    joints: tuple
    warnings: tuple = field(default=(), compare=False)

    @property
    def link_count(self) -> int:
        return len(self.links)

    @property
    def actuated_joints(self) -> tuple:
        return tuple(j for j in self.joints if j.actuated)

    @property
    def actuated_joint_count(self) -> int:
        return sum(1 for j in self.joints if j.actuated)

    L = link_count
    J = actuated_joint_count

    @property
    def n_params(self) -> int:
        L, J = self.link_count, self.actuated_joint_count
        return 3 + L + 2 * J + 3 * L

    @property
    def effort_limits(self) -> np.ndarray:
        return np.array([j.effort_limit for j in self.actuated_joints])

    @cached_property
    def tree(self):
        # imported lazily: dynamics depends on model, not the other way round
        from .dynamics import compile_tree

        return compile_tree(self)


@dataclass(frozen=True)
class SimParams:
    """Optimisable simulation parameters.

    Entries may be floats or any differentiable scalar; fields are tuples so an
    instance is immutable.  Flat layout:
    ``[gravity(3) | masses(L) | damping(J) | force_pd(J) | inertias(3L)]``.
    """

    gravity: tuple
    masses: tuple
    damping: tuple
    force_pd: tuple
    inertias: tuple  # L tuples of (xx, yy, zz)

    def flatten(self) -> np.ndarray:
        return flatten(self)

    def as_list(self) -> list:
        out = list(self.gravity) + list(self.masses) + list(self.damping) + list(self.force_pd)
        for row in self.inertias:
            out.extend(row)
        return out

    def __eq__(self, other):
        if not isinstance(other, SimParams):
            return NotImplemented
        a, b = self.as_list(), other.as_list()
        return len(a) == len(b) and all(x == y for x, y in zip(a, b))

    def __hash__(self):
        return hash(tuple(float(x) for x in self.as_list()))


def _floats(text, n, what):
    try:
        vals = tuple(float(t) for t in text.split())
    except ValueError as exc:
        raise ParseError(f"{what}: cannot parse {text!r}") from exc
    if len(vals) != n:
        raise ParseError(f"{what}: expected {n} numbers, got {text!r}")
    return vals


def _attr_float(el, name, what, default=None):
    raw = el.get(name)
    if raw is None:
        if default is None:
            raise ParseError(f"{what}: missing attribute {name!r}")
        return default
    try:
        return float(raw)
    except ValueError as exc:
        raise ParseError(f"{what}: attribute {name}={raw!r} is not a number") from exc


def _origin(el, what):
    o = el.find("origin")
    if o is None:
        return (0.0, 0.0, 0.0), (0.0, 0.0, 0.0)
    xyz = _floats(o.get("xyz", "0 0 0"), 3, f"{what} origin xyz")
    rpy = _floats(o.get("rpy", "0 0 0"), 3, f"{what} origin rpy")
    return xyz, rpy


_LINK_TAGS = {"inertial", "visual", "collision"}
_INERTIAL_TAGS = {"origin", "mass", "inertia"}
_JOINT_TAGS = {"origin", "parent", "child", "axis", "limit", "dynamics"}
_ROBOT_TAGS = {"link", "joint", "material"}


def _parse_link(el, warnings):
    name = el.get("name")
    if not name:
        raise ParseError("link without a name")
    for child in el:
        if child.tag not in _LINK_TAGS:
            warnings.append(f"link {name!r}: ignored tag <{child.tag}>")
    inertial = el.find("inertial")
    if inertial is None:
        return Link(name)
    for child in inertial:
        if child.tag not in _INERTIAL_TAGS:
            warnings.append(f"link {name!r}: ignored inertial tag <{child.tag}>")
    mass_el = inertial.find("mass")
    if mass_el is None:
        raise ParseError(f"link {name!r}: <inertial> without <mass>")
    mass = _attr_float(mass_el, "value", f"link {name!r} mass")
    com, com_rpy = _origin(inertial, f"link {name!r} inertial")
    diag = (0.0, 0.0, 0.0)
    inertia_el = inertial.find("inertia")
    if inertia_el is not None:
        what = f"link {name!r} inertia"
        diag = tuple(_attr_float(inertia_el, k, what) for k in ("ixx", "iyy", "izz"))
        off = [_attr_float(inertia_el, k, what, 0.0) for k in ("ixy", "ixz", "iyz")]
        if any(v != 0.0 for v in off):
            warnings.append(f"link {name!r}: off-diagonal inertia {off} dropped")
    return Link(name, mass, com, com_rpy, diag)


def _parse_joint(el, warnings):
    name = el.get("name")
    if not name:
        raise ParseError("joint without a name")
    kind = el.get("type")
    if kind is None:
        raise ParseError(f"joint {name!r}: missing type")
    if kind not in ("revolute", "fixed"):
        raise UnsupportedStructure(f"joint {name!r}: type {kind!r} is not supported (revolute or fixed only)")
    for child in el:
        if child.tag not in _JOINT_TAGS:
            warnings.append(f"joint {name!r}: ignored tag <{child.tag}>")
    parent, child = el.find("parent"), el.find("child")
    if parent is None or parent.get("link") is None:
        raise ParseError(f"joint {name!r}: missing <parent link=...>")
    if child is None or child.get("link") is None:
        raise ParseError(f"joint {name!r}: missing <child link=...>")
    xyz, rpy = _origin(el, f"joint {name!r}")
    kw = dict(origin_xyz=xyz, origin_rpy=rpy)
    if kind == "revolute":
        axis_el = el.find("axis")
        axis = _floats(axis_el.get("xyz", "1 0 0"), 3, f"joint {name!r} axis") if axis_el is not None else (1.0, 0.0, 0.0)
        n = math.sqrt(sum(a * a for a in axis))
        if n == 0:
            raise ParseError(f"joint {name!r}: zero axis")
        if abs(n - 1.0) > 1e-6:
            warnings.append(f"joint {name!r}: axis {axis} normalised")
        axis = tuple(a / n for a in axis)
        limit = el.find("limit")
        if limit is None:
            raise ParseError(f"joint {name!r}: revolute joint without <limit>")
        effort = _attr_float(limit, "effort", f"joint {name!r} limit")
        lo, hi = limit.get("lower"), limit.get("upper")
        plim = None
        if lo is not None or hi is not None:
            plim = (
                _attr_float(limit, "lower", f"joint {name!r} limit", -math.inf),
                _attr_float(limit, "upper", f"joint {name!r} limit", math.inf),
            )
        dyn = el.find("dynamics")
        damping = _attr_float(dyn, "damping", f"joint {name!r} dynamics", 0.0) if dyn is not None else 0.0
        kw.update(axis=axis, damping=damping, effort_limit=effort, position_limits=plim)
    return Joint(name, kind, parent.get("link"), child.get("link"), **kw)


def parse_urdf(text: str) -> RobotModel:
    """Parse URDF text into a :class:`RobotModel`.

    Ignored tags are listed in ``model.warnings``.
    """
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise ParseError(f"malformed XML: {exc}") from exc
    if root.tag != "robot":
        raise ParseError(f"root element is <{root.tag}>, expected <robot>")
    warnings: list[str] = []
    for child in root:
        if child.tag not in _ROBOT_TAGS:
            warnings.append(f"robot: ignored tag <{child.tag}>")
    links = {}
    for el in root.findall("link"):
        link = _parse_link(el, warnings)
        if link.name in links:
            raise ParseError(f"duplicate link {link.name!r}")
        links[link.name] = link
    joints = [_parse_joint(el, warnings) for el in root.findall("joint")]
    if not links:
        raise ParseError("no links")

    by_parent: dict[str, list[Joint]] = {}
    children = set()
    for j in joints:
        for ln in (j.parent, j.child):
            if ln not in links:
                raise ParseError(f"joint {j.name!r} references unknown link {ln!r}")
        if j.child in children:
            raise UnsupportedStructure(f"link {j.child!r} has more than one parent")
        children.add(j.child)
        by_parent.setdefault(j.parent, []).append(j)
    for parent, js in by_parent.items():
        if len(js) > 1:
            raise UnsupportedStructure(
                f"link {parent!r} has {len(js)} children ({', '.join(j.name for j in js)}); only serial chains are supported"
            )
    roots = [n for n in links if n not in children]
    if len(roots) != 1:
        raise UnsupportedStructure(f"expected exactly one root link, found {roots}")

    chain_links = [links[roots[0]]]
    chain_joints = []
    cur = roots[0]
    while cur in by_parent:
        j = by_parent[cur][0]
        chain_joints.append(j)
        chain_links.append(links[j.child])
        cur = j.child
    if len(chain_links) != len(links):
        stray = sorted(set(links) - {ln.name for ln in chain_links})
        raise UnsupportedStructure(f"links not connected to the chain: {stray}")
    if [j.name for j in chain_joints] != [j.name for j in joints]:
        warnings.append("joints reordered from file order to chain order")
    return RobotModel(root.get("name", ""), tuple(chain_links), tuple(chain_joints), tuple(warnings))


def load_urdf(path) -> RobotModel:
    return parse_urdf(Path(path).read_text())


def default_params(model: RobotModel) -> SimParams:
    return SimParams(
        gravity=DEFAULT_GRAVITY,
        masses=tuple(float(ln.mass) for ln in model.links),
        damping=tuple(float(j.damping) for j in model.actuated_joints),
        force_pd=(1.0,) * model.actuated_joint_count,
        inertias=tuple(tuple(float(v) for v in ln.inertia_diag) for ln in model.links),
    )


def flatten(params: SimParams) -> np.ndarray:
    return np.array(params.as_list(), dtype=float)


def unflatten(model: RobotModel, vector) -> SimParams:
    """Inverse of :func:`flatten`.  Elements are kept as given, so a list of
    tape variables yields differentiable parameters."""
    vec = list(vector)
    L, J = model.link_count, model.actuated_joint_count
    if len(vec) != model.n_params:
        raise LengthMismatch(f"expected {model.n_params} parameters (3+L+2J+3L with L={L}, J={J}), got {len(vec)}")
    if isinstance(vector, np.ndarray):
        vec = [float(v) for v in vec]
    i = 0
    gravity = tuple(vec[0:3])
    i = 3
    masses = tuple(vec[i : i + L])
    i += L
    damping = tuple(vec[i : i + J])
    i += J
    force_pd = tuple(vec[i : i + J])
    i += J
    inertias = tuple(tuple(vec[i + 3 * k : i + 3 * k + 3]) for k in range(L))
    return SimParams(gravity, masses, damping, force_pd, inertias)


def param_groups(model: RobotModel) -> dict[str, slice]:
    L, J = model.link_count, model.actuated_joint_count
    return {
        "gravity": slice(0, 3),
        "masses": slice(3, 3 + L),
        "damping": slice(3 + L, 3 + L + J),
        "force_pd": slice(3 + L + J, 3 + L + 2 * J),
        "inertias": slice(3 + L + 2 * J, 3 + 4 * L + 2 * J),
    }


def param_names(model: RobotModel) -> list[str]:
    names = [f"gravity.{a}" for a in "xyz"]
    names += [f"mass.{ln.name}" for ln in model.links]
    names += [f"damping.{j.name}" for j in model.actuated_joints]
    names += [f"force_pd.{j.name}" for j in model.actuated_joints]
    for ln in model.links:
        names += [f"inertia.{ln.name}.{a}" for a in ("xx", "yy", "zz")]
    return names


def desk_arm() -> RobotModel:
    """The bundled six-joint desk arm."""
    from importlib.resources import files

    return parse_urdf(files("gradgap.data").joinpath("desk_arm.urdf").read_text())
