"""Discrete architectures and their JSON form."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

GENOTYPE_VERSION = 1


@dataclass(frozen=True)
class CellSpec:
    op: str
    s: int
    chi: int

    @property
    def c_out(self) -> int:
        return self.s * self.chi


@dataclass(frozen=True)
class BranchSpec:
    final_rate: int
    cells: tuple[CellSpec, ...]

    @property
    def rates(self) -> tuple[int, ...]:
        return tuple(c.s for c in self.cells)


@dataclass(frozen=True)
class Genotype:
    branches: tuple[BranchSpec, ...]
    shared_prefix_len: int = 0
    provenance: str = field(default="", compare=False)

    @property
    def head_rates(self) -> tuple[int, ...]:
        return tuple(b.final_rate for b in self.branches)

    def with_provenance(self, tag: str) -> "Genotype":
        return replace(self, provenance=tag)

    def to_dict(self) -> dict:
        doc = {
            "version": GENOTYPE_VERSION,
            "branches": [
                {
                    "cells": [{"op": c.op, "s": c.s, "chi": c.chi} for c in b.cells],
                    "final_rate": b.final_rate,
                }
                for b in self.branches
            ],
            "shared_prefix_len": self.shared_prefix_len,
            "head": {"rates": list(self.head_rates)},
        }
        if self.provenance:
            doc["provenance"] = self.provenance
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "Genotype":
        if doc.get("version") != GENOTYPE_VERSION:
            raise ValueError(f"unsupported genotype version {doc.get('version')!r}")
        branches = tuple(
            BranchSpec(int(b["final_rate"]), tuple(_cell_from_dict(c) for c in b["cells"]))
            for b in doc["branches"]
        )
        g = cls(branches, int(doc.get("shared_prefix_len", 0)), str(doc.get("provenance", "")))
        head = doc.get("head", {}).get("rates")
        if head is not None and tuple(head) != g.head_rates:
            raise ValueError(f"head rates {head} do not match branch final rates {g.head_rates}")
        return g

    @classmethod
    def from_json(cls, text: str) -> "Genotype":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "Genotype":
        return cls.from_json(Path(path).read_text())


def _cell_from_dict(doc: dict) -> CellSpec:
    cell = CellSpec(str(doc["op"]), int(doc["s"]), int(doc["chi"]))
    if "c_out" in doc and int(doc["c_out"]) != cell.c_out:
        raise ValueError(f"c_out {doc['c_out']} does not equal s*chi = {cell.c_out} for {cell}")
    return cell


def shared_prefix_length(a: BranchSpec, b: BranchSpec) -> int:
    n = 0
    for x, y in zip(a.cells, b.cells):
        if x != y:
            break
        n += 1
    return n


def cell_transitions(branch: BranchSpec, base_rate: int) -> list[str]:
    """'same' or 'stride2' for each cell, relative to its predecessor (stem for the first)."""
    out, prev = [], base_rate
    for c in branch.cells:
        out.append("stride2" if c.s == 2 * prev else "same")
        prev = c.s
    return out
