"""Access to the bundled data files."""

from importlib import resources


def read_text(name: str) -> str:
    return resources.files("somno").joinpath("data", name).read_text(encoding="utf-8")
