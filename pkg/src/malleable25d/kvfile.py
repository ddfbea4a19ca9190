"""Flat key-value text files (TOML subset) used for cameras, rfield params and configs."""
from __future__ import annotations

import os

import tomli
import tomli_w


def read_kv(path) -> dict:
    with open(path, "rb") as fh:
        return flatten(tomli.load(fh))


def write_kv(path, values: dict) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        tomli_w.dump(nest(values), fh)
    os.replace(tmp, path)


def flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


def nest(flat: dict) -> dict:
    tree: dict = {}
    for key, value in flat.items():
        node = tree
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return tree
