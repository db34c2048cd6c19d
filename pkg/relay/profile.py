"""
Profile scripts and layer descriptions.

A profile script (``*.p2l``) lists the probe points and the hardware counters to sample. A layer description
(``*.layers``) groups traced functions into named layers for attribution. Both are line-oriented::

    probe vfs_read entry,exit depth=1
    hw cycles instructions
    layer vfs = ksys_read, vfs_read
"""
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from lark import Lark, Token, Tree
from lark.exceptions import UnexpectedInput

from .trace import MAX_NAME_BYTES, RelayError

PROBE_POINTS_PER_DEPTH = (2, 6, 8, 9, 12, 13, 14, 15)
MIN_DEPTH = 1
MAX_DEPTH = 8
HW_EVENTS = ("cycles", "instructions")
PROBE_SITES = ("entry", "exit", "entry,exit")

IRQ_LAYER = "irq"
SCHED_LAYER = "sched"
WAIT_LAYER = "io"
INTERFERENCE_LAYERS = (IRQ_LAYER, SCHED_LAYER)

PROFILES_DIR = Path(__file__).parent / "profiles"
DEFAULT_PROFILE_PATH = PROFILES_DIR / "default.p2l"
DEFAULT_LAYERS_PATH = PROFILES_DIR / "default.layers"

_GRAMMAR = r"""
start: _NL? (_stmt _NL)* _stmt?

_stmt: probe | layer | hw

probe: "probe" NAME SITES DEPTH
layer: "layer" NAME "=" NAME ("," NAME)* DEPTH?
hw: "hw" NAME+

SITES: /entry,exit|entry|exit/
DEPTH: /depth[ \t]*=[ \t]*-?[0-9]+/
NAME: /[A-Za-z_][A-Za-z0-9_.$]*/
COMMENT: /#[^\n]*/
_NL: /(\r?\n[\t ]*(#[^\n]*)?)+/

%import common.WS_INLINE
%ignore WS_INLINE
%ignore COMMENT
"""

_parser = Lark(_GRAMMAR, parser="lalr")


class ConfigError(RelayError):
    """Raised for invalid profile scripts or layer descriptions, carrying the 1-based line when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.message = message
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


class ProbeDepth(IntEnum):
    """Probe depth knob. Deeper levels activate more probe points."""

    L1 = 1
    L2 = 2
    L3 = 3
    L4 = 4
    L5 = 5
    L6 = 6
    L7 = 7
    L8 = 8

    @classmethod
    def parse(cls, value: Union["ProbeDepth", int, str]) -> "ProbeDepth":
        """Accepts a ProbeDepth, an int or a string like ``"L3"`` or ``"3"``."""
        number = value
        if isinstance(value, str):
            text = value.strip().upper()
            text = text[1:] if text.startswith("L") else text
            if not text.isdigit():
                raise ConfigError(f"Invalid probe depth {value!r}, expected L1..L8")
            number = int(text)
        try:
            return cls(int(number))
        except ValueError:
            raise ConfigError(f"Invalid probe depth {value!r}, expected L1..L8") from None

    @property
    def point_count(self) -> int:
        """Probe points active at this level in the shipped read-path profile."""
        return PROBE_POINTS_PER_DEPTH[self.value - 1]

    def __str__(self) -> str:
        return f"L{self.value}"


@dataclass(frozen=True)
class Probe:
    function: str
    at: str
    depth: int
    line: Optional[int] = field(default=None, compare=False, repr=False)

    @property
    def entry(self) -> bool:
        return "entry" in self.at

    @property
    def exit(self) -> bool:
        return "exit" in self.at


@dataclass(frozen=True)
class ProfileDescription:
    probes: Tuple[Probe, ...] = ()
    hw_events: Tuple[str, ...] = ()

    def functions(self) -> List[str]:
        return [probe.function for probe in self.probes]

    def probe(self, function: str) -> Optional[Probe]:
        return next((probe for probe in self.probes if probe.function == function), None)


@dataclass(frozen=True)
class Layer:
    name: str
    functions: Tuple[str, ...]
    depth: Optional[int] = None
    line: Optional[int] = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class LayerDescription:
    """Ordered layers plus the fixed interference (irq, sched) and wait (io) buckets."""

    layers: Tuple[Layer, ...] = ()
    _by_function: Dict[str, str] = field(default_factory=dict, init=False, compare=False, repr=False)

    def __post_init__(self):
        by_function = {function: layer.name for layer in self.layers for function in layer.functions}
        object.__setattr__(self, "_by_function", by_function)

    @property
    def interference(self) -> Tuple[str, ...]:
        return INTERFERENCE_LAYERS

    @property
    def wait(self) -> str:
        return WAIT_LAYER

    def names(self) -> Tuple[str, ...]:
        return tuple(layer.name for layer in self.layers)

    def layer(self, name: str) -> Optional[Layer]:
        return next((layer for layer in self.layers if layer.name == name), None)

    def functions(self) -> List[str]:
        return list(self._by_function)

    def layer_of(self, function: str) -> Optional[str]:
        return self._by_function.get(function)


def layer_of(ld: LayerDescription, function: str) -> Optional[str]:
    """
    Looks up the layer a traced function belongs to.

    Args:
        ld: The layer description.
        function: Function name (the interned name behind a FunctionId).

    Returns:
        The layer name, or None for functions outside every layer.
    """
    return ld.layer_of(function)


def _parse(text: str, kind: str) -> List[Tree]:
    try:
        tree = _parser.parse(text if text.endswith("\n") else text + "\n")
    except UnexpectedInput as exc:
        line = exc.line if getattr(exc, "line", -1) and exc.line > 0 else None
        raise ConfigError(f"syntax error in {kind} at column {getattr(exc, 'column', '?')}", line) from None
    return tree.children


def _depth_of(token: Token) -> int:
    depth = int(token.split("=", 1)[1].strip())
    if not MIN_DEPTH <= depth <= MAX_DEPTH:
        raise ConfigError(f"depth={depth} outside {MIN_DEPTH}..{MAX_DEPTH}", token.line)
    return depth


def _check_function_name(token: Token) -> str:
    if len(str(token).encode("utf-8")) > MAX_NAME_BYTES:
        raise ConfigError(f"function name longer than {MAX_NAME_BYTES} bytes", token.line)
    return str(token)


def parse_profile_script(text: str) -> ProfileDescription:
    """
    Parses a profile script.

    Args:
        text: The document, one ``probe`` or ``hw`` statement per line, ``#`` comments allowed.

    Returns:
        The ProfileDescription, probes in document order.
    """
    probes: List[Probe] = []
    hw_events: List[str] = []
    seen: Dict[str, int] = {}
    for stmt in _parse(text, "profile script"):
        first = stmt.children[0]
        if stmt.data == "probe":
            name, sites, depth = stmt.children
            function = _check_function_name(name)
            if function in seen:
                raise ConfigError(f"duplicate probe {function} (first at line {seen[function]})", name.line)
            seen[function] = name.line
            probes.append(Probe(function, str(sites), _depth_of(depth), line=name.line))
        elif stmt.data == "hw":
            for event in stmt.children:
                if event not in HW_EVENTS:
                    raise ConfigError(f"unknown hardware event {event}, expected one of {HW_EVENTS}", event.line)
                if event in hw_events:
                    raise ConfigError(f"duplicate hardware event {event}", event.line)
                hw_events.append(str(event))
        else:
            raise ConfigError(f"{stmt.data} statement not allowed in a profile script", first.line)
    return ProfileDescription(tuple(probes), tuple(hw_events))


def parse_layer_description(text: str) -> LayerDescription:
    """
    Parses a layer description.

    Args:
        text: The document, one ``layer`` statement per line, ``#`` comments allowed.

    Returns:
        The LayerDescription, layers in document order.
    """
    layers: List[Layer] = []
    owner: Dict[str, str] = {}
    for stmt in _parse(text, "layer description"):
        first = stmt.children[0]
        if stmt.data != "layer":
            raise ConfigError(f"{stmt.data} statement not allowed in a layer description", first.line)
        tokens = list(stmt.children)
        depth = _depth_of(tokens.pop()) if tokens[-1].type == "DEPTH" else None
        name, members = str(tokens[0]), tokens[1:]
        if name in INTERFERENCE_LAYERS:
            raise ConfigError(f"layer name {name} is reserved", first.line)
        if any(layer.name == name for layer in layers):
            raise ConfigError(f"duplicate layer {name}", first.line)
        functions = []
        for member in members:
            function = _check_function_name(member)
            if function in owner:
                raise ConfigError(f"function {function} already belongs to layer {owner[function]}", member.line)
            owner[function] = name
            functions.append(function)
        layers.append(Layer(name, tuple(functions), depth, line=first.line))
    return LayerDescription(tuple(layers))


def serialize_profile(pd: ProfileDescription) -> str:
    """Canonical text of a profile script; parsing it yields an equal ProfileDescription."""
    lines = [f"probe {probe.function} {probe.at} depth={probe.depth}" for probe in pd.probes]
    if pd.hw_events:
        lines.append("hw " + " ".join(pd.hw_events))
    return "".join(line + "\n" for line in lines)


def serialize_layers(ld: LayerDescription) -> str:
    """Canonical text of a layer description; parsing it yields an equal LayerDescription."""
    lines = []
    for layer in ld.layers:
        line = f"layer {layer.name} = {', '.join(layer.functions)}"
        if layer.depth is not None:
            line += f" depth={layer.depth}"
        lines.append(line)
    return "".join(line + "\n" for line in lines)


def probes_at_depth(pd: ProfileDescription, level: Union[ProbeDepth, int, str]) -> ProfileDescription:
    """
    Restricts a profile to the probes active at a probe depth.

    Args:
        pd: The full profile.
        level: Probe depth L1..L8.

    Returns:
        The profile holding only probes whose depth rank is at or below ``level``.
    """
    level = ProbeDepth.parse(level)
    return ProfileDescription(tuple(probe for probe in pd.probes if probe.depth <= level), pd.hw_events)


def link(pd: ProfileDescription, ld: LayerDescription) -> LayerDescription:
    """
    Checks that every probed function has a layer and resolves missing layer depth ranks.

    A layer without an explicit ``depth=`` takes the smallest depth rank among its probed members.

    Returns:
        The layer description with every depth rank filled in.
    """
    for probe in pd.probes:
        if ld.layer_of(probe.function) is None:
            raise ConfigError(f"probed function {probe.function} has no layer", probe.line)
    depths = {probe.function: probe.depth for probe in pd.probes}
    layers = []
    for layer in ld.layers:
        depth = layer.depth
        if depth is None:
            depth = min((depths[f] for f in layer.functions if f in depths), default=MIN_DEPTH)
        layers.append(Layer(layer.name, layer.functions, depth, line=layer.line))
    return LayerDescription(tuple(layers))


def load_profile(path: Optional[Path] = None) -> ProfileDescription:
    path = Path(path) if path else DEFAULT_PROFILE_PATH
    logging.debug(f"Loading profile script {path}")
    return parse_profile_script(path.read_text(encoding="utf-8"))


def load_layers(path: Optional[Path] = None) -> LayerDescription:
    path = Path(path) if path else DEFAULT_LAYERS_PATH
    logging.debug(f"Loading layer description {path}")
    return parse_layer_description(path.read_text(encoding="utf-8"))


@lru_cache(maxsize=None)
def default_profile() -> ProfileDescription:
    return load_profile(DEFAULT_PROFILE_PATH)


@lru_cache(maxsize=None)
def default_layers() -> LayerDescription:
    return link(default_profile(), load_layers(DEFAULT_LAYERS_PATH))
