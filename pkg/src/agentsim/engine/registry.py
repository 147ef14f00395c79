"""Registries for agent kinds and behaviors.

Tags are small integers that travel on the wire. Tag 0 is reserved for the
delta-encoding placeholder, so no kind or behavior may use it.
"""

from __future__ import annotations

from dataclasses import dataclass


class UnknownTagError(KeyError):
    pass


@dataclass(frozen=True)
class AgentKind:
    tag: int
    name: str
    volumetric: bool
    # per-kind integer state carried on the wire, subset of ("state", "age")
    fields: tuple[str, ...]


@dataclass(frozen=True)
class BehaviorKind:
    tag: int
    name: str
    bit: int


_KINDS: dict[int, AgentKind] = {}
_KINDS_BY_NAME: dict[str, AgentKind] = {}
_BEHAVIORS: dict[int, BehaviorKind] = {}
_BEHAVIORS_BY_NAME: dict[str, BehaviorKind] = {}


def register_kind(tag: int, name: str, *, volumetric: bool = True, fields: tuple[str, ...] = ()) -> AgentKind:
    if tag <= 0:
        raise ValueError("kind tag 0 is reserved")
    existing = _KINDS.get(tag)
    kind = AgentKind(tag, name, volumetric, tuple(fields))
    if existing is not None and existing != kind:
        raise ValueError(f"kind tag {tag} already registered as {existing.name}")
    _KINDS[tag] = kind
    _KINDS_BY_NAME[name] = kind
    return kind


def register_behavior(tag: int, name: str) -> BehaviorKind:
    if tag <= 0:
        raise ValueError("behavior tag 0 is reserved")
    existing = _BEHAVIORS.get(tag)
    if existing is not None:
        if existing.name != name:
            raise ValueError(f"behavior tag {tag} already registered as {existing.name}")
        return existing
    bit = len(_BEHAVIORS)
    if bit >= 32:
        raise ValueError("at most 32 behavior kinds fit in the behavior mask")
    beh = BehaviorKind(tag, name, bit)
    _BEHAVIORS[tag] = beh
    _BEHAVIORS_BY_NAME[name] = beh
    return beh


def kind(tag_or_name) -> AgentKind:
    table = _KINDS_BY_NAME if isinstance(tag_or_name, str) else _KINDS
    try:
        return table[tag_or_name]
    except KeyError:
        raise UnknownTagError(f"unregistered agent kind {tag_or_name!r}") from None


def behavior(tag_or_name) -> BehaviorKind:
    table = _BEHAVIORS_BY_NAME if isinstance(tag_or_name, str) else _BEHAVIORS
    try:
        return table[tag_or_name]
    except KeyError:
        raise UnknownTagError(f"unregistered behavior {tag_or_name!r}") from None


def is_kind(tag: int) -> bool:
    return tag in _KINDS


def is_behavior(tag: int) -> bool:
    return tag in _BEHAVIORS


# Built-in kinds and behaviors used by the presets.
CELL = register_kind(1, "Cell", fields=("age",))
PERSON = register_kind(2, "Person", volumetric=False, fields=("state",))
TUMOR_CELL = register_kind(3, "TumorCell", fields=("age",))
SOMA_CELL = register_kind(4, "SomaCell", fields=("state",))

GROW_DIVIDE = register_behavior(16, "GrowDivide")
INFECTION = register_behavior(17, "Infection")
RECOVERY = register_behavior(18, "Recovery")
RANDOM_MOVEMENT = register_behavior(19, "RandomMovement")
TUMOR_BEHAVIOR = register_behavior(20, "TumorBehavior")
SECRETION = register_behavior(21, "Secretion")
CHEMOTAXIS = register_behavior(22, "Chemotaxis")
