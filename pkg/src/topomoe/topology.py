"""Electrode topology: montage unification and hierarchical position embeddings.

Electrode names from the 10-20 / 10-10 placement standards are mapped onto
a fixed (region, intra-region, absolute) coordinate grid of R regions with
up to E electrodes each.  The mapping lives in versioned table files under
``tables/``: one line per electrode, ``NAME<TAB>REGION<TAB>INTRA_INDEX``,
with a ``#topology-v1 R=<r> E=<e>`` header.  Midline electrodes go to the
region of their lettered lobe (Fz -> frontal, Cz -> central, ...).

Every electrode at absolute position j satisfies the index law
``j == region * E + intra``; unoccupied slots are padding and carry a
validity mask of False downstream.
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .nn import Module, parameter
from .tensor import Tensor

REGION_NAMES = ("frontal", "central", "temporal", "parietal", "occipital")

STANDARDS = ("ten_twenty", "ten_ten")


@dataclass(frozen=True)
class TopologyMap:
    """Name -> (region, intra, absolute) assignment for one montage."""

    regions: int
    per_region: int
    entries: dict[str, tuple[int, int, int]]

    @property
    def slots(self) -> int:
        return self.regions * self.per_region

    @property
    def padding_slots(self) -> frozenset[int]:
        occupied = {i_abs for _, _, i_abs in self.entries.values()}
        return frozenset(set(range(self.slots)) - occupied)

    def validate(self) -> None:
        seen: dict[int, str] = {}
        for name, (i_region, i_intra, i_abs) in self.entries.items():
            if not (0 <= i_region < self.regions and 0 <= i_intra < self.per_region):
                raise ValidationError(
                    f"electrode {name}: indices ({i_region},{i_intra}) out of "
                    f"bounds for R={self.regions}, E={self.per_region}")
            if i_abs != i_region * self.per_region + i_intra:
                raise ValidationError(
                    f"electrode {name}: absolute index {i_abs} != "
                    f"{i_region}*{self.per_region}+{i_intra}")
            if i_abs in seen:
                raise ValidationError(
                    f"electrodes {seen[i_abs]} and {name} share absolute index {i_abs}")
            seen[i_abs] = name

    def names_in_order(self) -> list[str]:
        """L entries, '' for padding slots."""
        by_abs = {i_abs: name for name, (_, _, i_abs) in self.entries.items()}
        return [by_abs.get(i, "") for i in range(self.slots)]


def _parse_table(text: str, source: str) -> tuple[int, int, dict[str, tuple[int, int]]]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#topology-v1"):
        raise ValidationError(f"{source}: missing '#topology-v1' header")
    header = lines[0].split()
    try:
        fields = dict(part.split("=") for part in header[1:])
        regions, per_region = int(fields["R"]), int(fields["E"])
    except (ValueError, KeyError) as exc:
        raise ValidationError(f"{source}: malformed header {lines[0]!r}") from exc
    rows: dict[str, tuple[int, int]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValidationError(f"{source}:{lineno}: expected NAME<TAB>REGION<TAB>INDEX")
        name, region, intra = parts
        if region not in REGION_NAMES:
            raise ValidationError(f"{source}:{lineno}: unknown region {region!r}")
        if name in rows:
            raise ValidationError(f"{source}:{lineno}: duplicate electrode {name}")
        rows[name] = (REGION_NAMES.index(region), int(intra))
    return regions, per_region, rows


def load_standard_table(standard: str) -> tuple[int, int, dict[str, tuple[int, int]]]:
    if standard not in STANDARDS:
        raise ValidationError(f"unknown montage standard {standard!r}; choose from {STANDARDS}")
    text = resources.files("topomoe").joinpath(f"tables/{standard}.topo").read_text()
    return _parse_table(text, f"{standard}.topo")


def build_topology(names: list[str], standard: str = "ten_ten") -> TopologyMap:
    """Assign each electrode name its (region, intra, absolute) coordinates."""
    if not names:
        raise ValidationError("build_topology: no electrode names given")
    regions, per_region, rows = load_standard_table(standard)
    entries: dict[str, tuple[int, int, int]] = {}
    for name in names:
        if name not in rows:
            near = difflib.get_close_matches(name, rows.keys(), n=3)
            raise ValidationError(
                f"unknown electrode {name!r} for standard {standard}; nearest known: {near}")
        i_region, i_intra = rows[name]
        entries[name] = (i_region, i_intra, i_region * per_region + i_intra)
    topo = TopologyMap(regions=regions, per_region=per_region, entries=entries)
    topo.validate()
    return topo


def generate_indices(batch: int, slots: int, regions: int, per_region: int
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-position region / intra-region / absolute indices, (B, L) each.

    Position j maps to region floor(j / E), intra-region j mod E, and
    absolute index j, replicated across the batch.
    """
    if slots != regions * per_region:
        raise ValidationError(f"sequence length {slots} != regions {regions} x {per_region}")
    j = np.arange(slots)
    i_region = np.broadcast_to(j // per_region, (batch, slots)).copy()
    i_intra = np.broadcast_to(j % per_region, (batch, slots)).copy()
    i_abs = np.broadcast_to(j, (batch, slots)).copy()
    return i_region, i_intra, i_abs


class TopologicalEmbedding(Module):
    """Three learnable address tables added onto the fused features.

    With ``enabled=False`` the tables are zero and frozen (no gradient),
    which reduces the output to h_fused + h_raw exactly; the ablation
    configuration.
    """

    def __init__(self, regions: int, per_region: int, dim: int,
                 rng: np.random.Generator, enabled: bool = True):
        self.enabled = enabled
        slots = regions * per_region
        if enabled:
            self.region_table = parameter(rng.normal(0.0, 0.02, size=(regions, dim)))
            self.intra_table = parameter(rng.normal(0.0, 0.02, size=(per_region, dim)))
            self.abs_table = parameter(rng.normal(0.0, 0.02, size=(slots, dim)))
        else:
            self.region_table = Tensor(np.zeros((regions, dim)))
            self.intra_table = Tensor(np.zeros((per_region, dim)))
            self.abs_table = Tensor(np.zeros((slots, dim)))

    def __call__(self, h_fused: Tensor, h_raw: Tensor,
                 indices: tuple[np.ndarray, np.ndarray, np.ndarray]) -> Tensor:
        i_region, i_intra, i_abs = indices
        out = T.add(h_fused, h_raw)
        out = T.add(out, T.embedding(self.region_table, i_region))
        out = T.add(out, T.embedding(self.intra_table, i_intra))
        out = T.add(out, T.embedding(self.abs_table, i_abs))
        return out
