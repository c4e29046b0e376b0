"""Factory registration keyed by (kind, name).

Registration happens at startup; after :meth:`FactoryRegistry.freeze` the
registry is read-only and safe to share between threads.
"""

from __future__ import annotations

import threading
from typing import Any, Callable

from dexkit.errors import DexkitError, UsageError

KINDS = ("policy_backend", "trainer_stub", "dataset_reader")


class DuplicateRegistration(DexkitError):
    code = "DuplicateRegistration"


class UnknownFactory(UsageError):
    code = "UnknownFactory"


class RegistryFrozen(DexkitError):
    code = "RegistryFrozen"


class FactoryRegistry:
    def __init__(self) -> None:
        self._entries: dict[tuple[str, str], Any] = {}
        self._frozen = False

    def register(self, kind: str, name: str, descriptor: Any) -> None:
        if kind not in KINDS:
            raise UnknownFactory(f"unknown factory kind {kind!r}; expected one of {list(KINDS)}")
        if self._frozen:
            raise RegistryFrozen(f"cannot register {kind}/{name}: registry is frozen")
        if (kind, name) in self._entries:
            raise DuplicateRegistration(f"{kind} {name!r} is already registered")
        self._entries[(kind, name)] = descriptor

    def lookup(self, kind: str, name: str) -> Any:
        try:
            return self._entries[(kind, name)]
        except KeyError:
            known = self.names(kind)
            raise UnknownFactory(f"no {kind} named {name!r}; registered: {known}") from None

    def names(self, kind: str) -> list[str]:
        return sorted(n for k, n in self._entries if k == kind)

    def freeze(self) -> None:
        self._frozen = True

    @property
    def frozen(self) -> bool:
        return self._frozen

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._entries


def register_factory(registry: FactoryRegistry, kind: str, name: str, descriptor: Any) -> None:
    registry.register(kind, name, descriptor)


def factory(registry: FactoryRegistry, kind: str, name: str) -> Callable[[Any], Any]:
    """Decorator form of :meth:`FactoryRegistry.register`."""

    def deco(obj: Any) -> Any:
        registry.register(kind, name, obj)
        return obj

    return deco


_default: FactoryRegistry | None = None
_default_lock = threading.Lock()


def default_registry() -> FactoryRegistry:
    """The process-wide registry holding the built-in backends, trainer and reader."""
    global _default
    with _default_lock:
        if _default is None:
            from dexkit import tasks
            from dexkit.serve import backends

            reg = FactoryRegistry()
            backends.register_builtins(reg)
            tasks.register_builtins(reg)
            reg.freeze()
            _default = reg
        return _default
