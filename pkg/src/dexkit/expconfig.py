"""Layered experiment configuration: single inheritance with field overrides.

Each node is a JSON document::

    {"name": "cogact_exp", "parent": "base_exp",
     "sections": {"optimizer": {"lr": 5e-05}, "model": {"tokenizer": {"max_len": 64}}}}

Resolution walks from the root ancestor down to the requested node. Nested
maps deep-merge; lists and scalars are replaced wholesale. Every leaf keeps
the name of the node that last set it.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from dexkit import canonical
from dexkit.errors import DexkitError, ExternalError, UsageError

SECTIONS = ("trainer", "data", "optimizer", "model", "inference", "action", "tokenizer")
CLI_SOURCE = "cli"


class ConfigError(DexkitError):
    code = "ConfigError"


class UnknownParent(ConfigError):
    code = "UnknownParent"


class UnknownNode(UsageError):
    code = "UnknownNode"


class CycleDetected(ConfigError):
    code = "CycleDetected"

    def __init__(self, path: list[str]) -> None:
        super().__init__("inheritance cycle: " + " -> ".join(path))
        self.path = path


class UnknownSection(ConfigError):
    code = "UnknownSection"


class BadOverride(UsageError):
    code = "BadOverride"


@dataclass(frozen=True)
class ConfigNode:
    name: str
    parent: str | None = None
    sections: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        unknown = sorted(set(self.sections) - set(SECTIONS))
        if unknown:
            raise UnknownSection(f"node {self.name!r} has unknown sections {unknown}; allowed: {list(SECTIONS)}")
        for sec, body in self.sections.items():
            if not isinstance(body, Mapping):
                raise ConfigError(f"node {self.name!r}: section {sec!r} must be an object")

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> ConfigNode:
        if not isinstance(obj, Mapping) or not isinstance(obj.get("name"), str):
            raise ConfigError("config node needs a string 'name'")
        parent = obj.get("parent")
        if parent is not None and not isinstance(parent, str):
            raise ConfigError(f"node {obj['name']!r}: parent must be a string or null")
        extra = sorted(set(obj) - {"name", "parent", "sections"})
        if extra:
            raise ConfigError(f"node {obj['name']!r}: unexpected top-level keys {extra}")
        return cls(name=obj["name"], parent=parent, sections=copy.deepcopy(dict(obj.get("sections", {}))))

    def to_json(self) -> dict[str, Any]:
        return {"name": self.name, "parent": self.parent, "sections": copy.deepcopy(dict(self.sections))}

    def dumps(self) -> str:
        return canonical.dumps(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> ConfigNode:
        try:
            return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ExternalError(f"cannot read {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


@dataclass(frozen=True)
class ResolvedConfig:
    name: str
    chain: tuple[str, ...]  # base first
    sections: dict[str, dict[str, Any]]
    provenance: dict[str, str]  # dotted leaf path -> node name (or "cli")

    def section(self, name: str) -> dict[str, Any]:
        return self.sections.get(name, {})

    def get(self, dotted: str, default: Any = None) -> Any:
        cur: Any = self.sections
        for part in dotted.split("."):
            if not isinstance(cur, Mapping) or part not in cur:
                return default
            cur = cur[part]
        return cur

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "chain": list(self.chain),
            "sections": self.sections,
            "provenance": dict(sorted(self.provenance.items())),
        }


def _merge(dst: dict[str, Any], src: Mapping[str, Any], source: str, prov: dict[str, str], prefix: str) -> None:
    for key, value in src.items():
        path = f"{prefix}.{key}"
        if isinstance(value, Mapping) and isinstance(dst.get(key), dict):
            _merge(dst[key], value, source, prov, path)
        else:
            # Replacing a subtree drops the provenance of everything under it.
            for stale in [p for p in prov if p.startswith(path + ".")]:
                del prov[stale]
            if isinstance(value, Mapping):
                dst[key] = {}
                _merge(dst[key], value, source, prov, path)
            else:
                dst[key] = copy.deepcopy(value)
                prov[path] = source
                continue
        # An empty map is itself a leaf; a non-empty one is described by its leaves.
        if dst[key]:
            prov.pop(path, None)
        else:
            prov[path] = source


def inheritance_chain(root_name: str, nodes: Mapping[str, ConfigNode]) -> list[str]:
    """Node names from the base ancestor down to ``root_name``."""
    if root_name not in nodes:
        raise UnknownNode(f"no config node named {root_name!r}; known: {sorted(nodes)}")
    chain = [root_name]
    seen = {root_name}
    node = nodes[root_name]
    while node.parent is not None:
        if node.parent in seen:
            cycle = chain[chain.index(node.parent):] + [node.parent]
            raise CycleDetected(cycle)
        if node.parent not in nodes:
            raise UnknownParent(f"node {node.name!r} inherits from unknown {node.parent!r}")
        chain.append(node.parent)
        seen.add(node.parent)
        node = nodes[node.parent]
    return chain[::-1]


def _index(nodes: Iterable[ConfigNode] | Mapping[str, ConfigNode]) -> dict[str, ConfigNode]:
    if isinstance(nodes, Mapping):
        return dict(nodes)
    out: dict[str, ConfigNode] = {}
    for n in nodes:
        if n.name in out and out[n.name] != n:
            raise ConfigError(f"two different nodes are named {n.name!r}")
        out[n.name] = n
    return out


def resolve_config(
    root_name: str,
    nodes: Iterable[ConfigNode] | Mapping[str, ConfigNode],
    overrides: Mapping[str, Any] | None = None,
) -> ResolvedConfig:
    """Resolve ``root_name`` through its parents; ``overrides`` (dotted keys) apply last as ``cli``."""
    index = _index(nodes)
    chain = inheritance_chain(root_name, index)
    sections: dict[str, Any] = {}
    prov: dict[str, str] = {}
    for name in chain:
        for sec, body in index[name].sections.items():
            _merge(sections, {sec: body}, name, prov, "")
    if overrides:
        for dotted, value in overrides.items():
            parts = dotted.split(".")
            if len(parts) < 2 or not all(parts):
                raise BadOverride(f"override key {dotted!r} must look like section.key")
            if parts[0] not in SECTIONS:
                raise UnknownSection(f"override targets unknown section {parts[0]!r}")
            nested: Any = value
            for part in reversed(parts):
                nested = {part: nested}
            _merge(sections, nested, CLI_SOURCE, prov, "")
    return ResolvedConfig(
        name=root_name,
        chain=tuple(chain),
        sections=sections,
        provenance={k.lstrip("."): v for k, v in prov.items()},
    )


def parse_override(text: str) -> tuple[str, Any]:
    """``section.key=value``; the value is read as JSON when it parses, else kept as a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise BadOverride(f"override {text!r} must look like section.key=value")
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key.strip(), value


def load_nodes(directory: str | Path) -> dict[str, ConfigNode]:
    """Every ``*.json`` in ``directory`` that looks like a config node."""
    nodes: dict[str, ConfigNode] = {}
    for path in sorted(Path(directory).glob("*.json")):
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            continue
        if isinstance(obj, dict) and "name" in obj and "sections" in obj:
            node = ConfigNode.from_json(obj)
            if node.name in nodes:
                raise ConfigError(f"{path}: duplicate node name {node.name!r}")
            nodes[node.name] = node
    return nodes


def resolve_file(path: str | Path, overrides: Mapping[str, Any] | None = None) -> ResolvedConfig:
    """Resolve the node in ``path``; parents are looked up among its sibling files."""
    path = Path(path)
    leaf = ConfigNode.load(path)
    nodes = load_nodes(path.parent)
    nodes[leaf.name] = leaf
    return resolve_config(leaf.name, nodes, overrides)
