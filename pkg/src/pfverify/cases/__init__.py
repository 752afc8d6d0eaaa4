"""Bundled desk-scale grid cases."""

from __future__ import annotations

from importlib import resources

from ..grid import Network, parse_case

BUNDLED = ("case2", "case14")


def case_text(name: str) -> str:
    if name not in BUNDLED:
        raise KeyError(f"unknown bundled case {name!r}; available: {BUNDLED}")
    return resources.files(__package__).joinpath(f"{name}.m").read_text()


def load_case(name: str) -> Network:
    return parse_case(case_text(name), name=name)
