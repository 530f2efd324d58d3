"""Atomic structures, dataset records, and periodic geometry queries.

Two input formats are supported: extended XYZ (one frame per molecule, target
properties as key=value pairs on the comment line) and a JSON-lines crystal
format (one object per line with ``lattice``, ``species`` and either
``frac_coords`` or ``cart_coords``). All coordinates are Cartesian Angstrom
internally; ``image_displacements`` enumerates interatomic distances across
periodic images out to a cutoff.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .elements import MAX_Z, atomic_number, symbol_for
from .errors import DataError, ParseError

_DET_EPS = 1e-8


@dataclass(frozen=True)
class PropertyInfo:
    """Reporting unit and extensivity of a supported target property.

    Extensive targets (total energies) scale with system size and default to a
    summed readout with atom-count aware normalization; intensive targets
    default to an averaged readout with plain normalization.
    """

    unit: str
    extensive: bool


PROPERTY_REGISTRY: dict[str, PropertyInfo] = {
    "epsilon_homo": PropertyInfo("meV", False),
    "epsilon_lumo": PropertyInfo("meV", False),
    "delta_epsilon": PropertyInfo("meV", False),
    "zpve": PropertyInfo("meV", False),
    "mu": PropertyInfo("Debye", False),
    "alpha": PropertyInfo("Bohr^3", False),
    "r2": PropertyInfo("Bohr^2", False),
    "U0": PropertyInfo("meV", True),
    "U": PropertyInfo("meV", True),
    "H": PropertyInfo("meV", True),
    "G": PropertyInfo("meV", True),
    "Cv": PropertyInfo("cal/mol K", True),
    "formation_energy_per_atom": PropertyInfo("meV/atom", False),
}

# Common spellings seen in dataset exports, mapped onto registry names.
PROPERTY_ALIASES = {
    "homo": "epsilon_homo",
    "lumo": "epsilon_lumo",
    "gap": "delta_epsilon",
    "u0": "U0",
    "u": "U",
    "h": "H",
    "g": "G",
    "cv": "Cv",
    "zpve": "zpve",
    "mu": "mu",
    "alpha": "alpha",
    "r2": "r2",
    "e_form": "formation_energy_per_atom",
    "formation_energy": "formation_energy_per_atom",
    "delta_e": "formation_energy_per_atom",
}


def canonical_property(name: str) -> str | None:
    """Resolve a raw key to a registry property name, or None if unknown."""
    if name in PROPERTY_REGISTRY:
        return name
    return PROPERTY_ALIASES.get(name.lower())


@dataclass(frozen=True)
class AtomicStructure:
    """Atomic species and Cartesian positions, optionally with a periodic cell.

    ``cell`` rows are lattice vectors in Angstrom. ``periodic`` is true iff a
    cell is present.
    """

    species: np.ndarray
    positions: np.ndarray
    cell: np.ndarray | None = None

    def __post_init__(self):
        species = np.asarray(self.species, dtype=np.int64)
        positions = np.asarray(self.positions, dtype=np.float64)
        object.__setattr__(self, "species", species)
        object.__setattr__(self, "positions", positions)
        if species.ndim != 1 or len(species) < 1:
            raise DataError("structure needs at least one atom")
        if positions.shape != (len(species), 3):
            raise DataError(
                f"positions shape {positions.shape} does not match {len(species)} species"
            )
        if np.any(species < 1) or np.any(species > MAX_Z):
            raise DataError("atomic numbers must be in 1..%d" % MAX_Z)
        if not np.isfinite(positions).all():
            raise DataError("non-finite coordinate in structure")
        if self.cell is not None:
            cell = np.asarray(self.cell, dtype=np.float64)
            object.__setattr__(self, "cell", cell)
            if cell.shape != (3, 3):
                raise DataError(f"cell must be 3x3, got {cell.shape}")
            if not np.isfinite(cell).all():
                raise DataError("non-finite cell entry")
            if abs(np.linalg.det(cell)) <= _DET_EPS:
                raise DataError("singular cell")

    @property
    def periodic(self) -> bool:
        return self.cell is not None

    @property
    def n_atoms(self) -> int:
        return len(self.species)

    def symbols(self) -> list[str]:
        return [symbol_for(int(z)) for z in self.species]


@dataclass(frozen=True)
class DatasetRecord:
    """A structure with target properties and a stable identifier."""

    structure: AtomicStructure
    targets: dict[str, float] = field(default_factory=dict)
    units: dict[str, str] = field(default_factory=dict)
    id: str = ""

    def __post_init__(self):
        for name, value in self.targets.items():
            if name not in PROPERTY_REGISTRY:
                raise DataError(f"unknown target property {name!r}")
            if not math.isfinite(value):
                raise DataError(f"non-finite target {name!r} in record {self.id!r}")
        units = dict(self.units)
        for name in self.targets:
            units.setdefault(name, PROPERTY_REGISTRY[name].unit)
        object.__setattr__(self, "units", units)


def _parse_comment_targets(line: str) -> tuple[dict[str, float], str | None]:
    """Extract registry-known key=value targets and an optional id."""
    targets: dict[str, float] = {}
    record_id = None
    for token in line.split():
        if "=" not in token:
            continue
        key, _, raw = token.partition("=")
        if key in ("id", "name"):
            record_id = raw.strip('"')
            continue
        prop = canonical_property(key)
        if prop is None:
            continue
        try:
            targets[prop] = float(raw)
        except ValueError:
            continue
    return targets, record_id


def parse_xyz(text: str) -> list[DatasetRecord]:
    """Parse concatenated extended-XYZ frames into dataset records.

    Each frame is an atom count line, a key=value comment line, then one
    ``Symbol x y z`` line per atom. Targets are read from the comment line;
    structures are non-periodic. Errors name the offending line number.
    """
    lines = text.splitlines()
    records: list[DatasetRecord] = []
    i = 0
    frame = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        lineno = i + 1
        try:
            count = int(lines[i].strip())
        except ValueError:
            raise ParseError(f"line {lineno}: expected atom count, got {lines[i]!r}")
        if count < 1:
            raise ParseError(f"line {lineno}: atom count must be positive")
        if i + 1 >= len(lines):
            raise ParseError(f"line {lineno + 1}: missing comment line")
        targets, record_id = _parse_comment_targets(lines[i + 1])
        species = []
        positions = []
        for j in range(count):
            k = i + 2 + j
            if k >= len(lines):
                raise ParseError(
                    f"line {len(lines) + 1}: frame truncated, expected {count} atoms"
                )
            parts = lines[k].split()
            if len(parts) < 4:
                raise ParseError(f"line {k + 1}: expected 'Symbol x y z'")
            try:
                z = atomic_number(parts[0])
            except DataError as exc:
                raise ParseError(f"line {k + 1}: {exc}") from None
            try:
                xyz = [float(p) for p in parts[1:4]]
            except ValueError:
                raise ParseError(f"line {k + 1}: non-numeric coordinate")
            species.append(z)
            positions.append(xyz)
        structure = AtomicStructure(np.array(species), np.array(positions))
        records.append(
            DatasetRecord(structure, targets, id=record_id or f"frame{frame}")
        )
        i += 2 + count
        frame += 1
    return records


def parse_crystal_json(text: str) -> list[DatasetRecord]:
    """Parse a JSON-lines crystal export into periodic dataset records.

    Each line is an object with ``lattice`` (3x3 rows), ``species`` (symbols
    or atomic numbers) and ``frac_coords`` or ``cart_coords``. Fractional
    coordinates are converted through the cell. ``targets`` may be absent
    (record kept with an empty target map, usable for inference).
    """
    records: list[DatasetRecord] = []
    for n, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        label = f"record {n + 1}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{label}: invalid JSON ({exc.msg})") from None
        record_id = str(obj.get("id", f"line{n + 1}"))
        label = f"{label} (id={record_id})"
        try:
            lattice = np.asarray(obj["lattice"], dtype=np.float64)
        except (KeyError, ValueError):
            raise ParseError(f"{label}: missing or malformed lattice")
        if lattice.shape != (3, 3):
            raise ParseError(f"{label}: lattice must be 3x3")
        if abs(np.linalg.det(lattice)) <= _DET_EPS:
            raise ParseError(f"{label}: singular cell")
        raw_species = obj.get("species")
        if not raw_species:
            raise ParseError(f"{label}: missing species")
        try:
            species = [
                s if isinstance(s, int) else atomic_number(s) for s in raw_species
            ]
        except DataError as exc:
            raise ParseError(f"{label}: {exc}") from None
        if "frac_coords" in obj:
            frac = np.asarray(obj["frac_coords"], dtype=np.float64)
            if frac.shape != (len(species), 3):
                raise ParseError(f"{label}: frac_coords shape mismatch")
            positions = frac @ lattice
        elif "cart_coords" in obj:
            positions = np.asarray(obj["cart_coords"], dtype=np.float64)
            if positions.shape != (len(species), 3):
                raise ParseError(f"{label}: cart_coords shape mismatch")
        else:
            raise ParseError(f"{label}: needs frac_coords or cart_coords")
        targets = {}
        units = {}
        for key, value in (obj.get("targets") or {}).items():
            prop = canonical_property(key)
            if prop is None:
                continue
            if isinstance(value, dict):
                targets[prop] = float(value["value"])
                if "unit" in value:
                    units[prop] = str(value["unit"])
            else:
                targets[prop] = float(value)
        try:
            structure = AtomicStructure(np.array(species), positions, lattice)
            records.append(DatasetRecord(structure, targets, units, record_id))
        except DataError as exc:
            raise ParseError(f"{label}: {exc}") from None
    return records


def record_to_dict(record: DatasetRecord) -> dict:
    st = record.structure
    return {
        "id": record.id,
        "species": [int(z) for z in st.species],
        "positions": st.positions.tolist(),
        "cell": st.cell.tolist() if st.cell is not None else None,
        "targets": record.targets,
        "units": record.units,
    }


def record_from_dict(obj: dict) -> DatasetRecord:
    cell = obj.get("cell")
    structure = AtomicStructure(
        np.array(obj["species"]),
        np.array(obj["positions"]),
        np.array(cell) if cell is not None else None,
    )
    return DatasetRecord(
        structure, dict(obj.get("targets", {})), dict(obj.get("units", {})), obj["id"]
    )


def save_records(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_dict(record)) + "\n")


def load_records(path) -> list[DatasetRecord]:
    with open(path, encoding="utf-8") as fh:
        return [record_from_dict(json.loads(line)) for line in fh if line.strip()]


@dataclass(frozen=True)
class ImagePairs:
    """Ordered atom pairs within a cutoff, including periodic images.

    Row i relates center atom ``center[i]`` to the image of ``neighbor[i]``
    displaced by ``offset[i]`` cell vectors; ``distance[i]`` is
    ``|p_neighbor + offset @ cell - p_center|``.
    """

    center: np.ndarray
    neighbor: np.ndarray
    offset: np.ndarray
    distance: np.ndarray

    def __len__(self) -> int:
        return len(self.center)

    def as_tuples(self) -> list[tuple[int, int, tuple[int, int, int], float]]:
        return [
            (int(v), int(w), tuple(int(o) for o in off), float(d))
            for v, w, off, d in zip(self.center, self.neighbor, self.offset, self.distance)
        ]


def perpendicular_widths(cell: np.ndarray) -> np.ndarray:
    """Distance between opposite cell faces along each lattice direction."""
    volume = abs(np.linalg.det(cell))
    widths = np.empty(3)
    for i in range(3):
        cross = np.cross(cell[(i + 1) % 3], cell[(i + 2) % 3])
        widths[i] = volume / np.linalg.norm(cross)
    return widths


def _offset_bounds(structure: AtomicStructure, r_max: float) -> list[int]:
    # Using perpendicular widths keeps the bound valid for skewed cells where
    # naive rounding against lattice vector lengths undercounts images.
    cell = structure.cell
    volume = abs(np.linalg.det(cell))
    bounds = []
    for i in range(3):
        cross = np.cross(cell[(i + 1) % 3], cell[(i + 2) % 3])
        normal = cross / np.linalg.norm(cross)
        width = volume / np.linalg.norm(cross)
        proj = structure.positions @ normal
        span = proj.max() - proj.min()
        bounds.append(int(math.floor((r_max + span) / width + 1e-12)))
    return bounds


def _sorted_pairs(center, neighbor, offset, distance) -> ImagePairs:
    order = np.lexsort((offset[:, 2], offset[:, 1], offset[:, 0], neighbor, center))
    return ImagePairs(
        center[order], neighbor[order], offset[order], distance[order]
    )


def _pairs_direct(structure: AtomicStructure, r_max: float, bounds) -> ImagePairs:
    pos = structure.positions
    n = structure.n_atoms
    centers, neighbors, offsets, distances = [], [], [], []
    offset_list = (
        [(0, 0, 0)]
        if not structure.periodic
        else list(
            itertools.product(*(range(-b, b + 1) for b in bounds))
        )
    )
    for off in offset_list:
        shift = (np.array(off, dtype=np.float64) @ structure.cell) if structure.periodic else 0.0
        diff = pos[None, :, :] + shift - pos[:, None, :]
        dist = np.linalg.norm(diff, axis=-1)
        mask = (dist > 0.0) & (dist <= r_max)
        if off == (0, 0, 0):
            np.fill_diagonal(mask, False)
        v, w = np.nonzero(mask)
        if len(v) == 0:
            continue
        centers.append(v)
        neighbors.append(w)
        offsets.append(np.tile(np.array(off, dtype=np.int32), (len(v), 1)))
        distances.append(dist[v, w])
    if not centers:
        empty = np.zeros(0, dtype=np.int64)
        return ImagePairs(empty, empty.copy(), np.zeros((0, 3), dtype=np.int32), np.zeros(0))
    return _sorted_pairs(
        np.concatenate(centers),
        np.concatenate(neighbors),
        np.concatenate(offsets),
        np.concatenate(distances),
    )


def _pairs_cell_list(structure: AtomicStructure, r_max: float, bounds) -> ImagePairs:
    """Cell-list binning over the extended (atom, image) point set."""
    pos = structure.positions
    n = structure.n_atoms
    if structure.periodic:
        offs = np.array(
            list(itertools.product(*(range(-b, b + 1) for b in bounds))),
            dtype=np.int32,
        )
        shifts = offs.astype(np.float64) @ structure.cell
        ext_pos = (pos[None, :, :] + shifts[:, None, :]).reshape(-1, 3)
        ext_atom = np.tile(np.arange(n), len(offs))
        ext_off = np.repeat(offs, n, axis=0)
    else:
        ext_pos = pos
        ext_atom = np.arange(n)
        ext_off = np.zeros((n, 3), dtype=np.int32)

    bin_size = r_max * (1.0 + 1e-9)
    origin = ext_pos.min(axis=0)
    bin_idx = np.floor((ext_pos - origin) / bin_size).astype(np.int64)
    buckets: dict[tuple[int, int, int], list[int]] = {}
    for i, b in enumerate(map(tuple, bin_idx)):
        buckets.setdefault(b, []).append(i)

    neighborhood = list(itertools.product((-1, 0, 1), repeat=3))
    centers, neighbors, offsets, distances = [], [], [], []
    center_bins = np.floor((pos - origin) / bin_size).astype(np.int64)
    for v in range(n):
        bx, by, bz = center_bins[v]
        cand: list[int] = []
        for dx, dy, dz in neighborhood:
            cand.extend(buckets.get((bx + dx, by + dy, bz + dz), ()))
        if not cand:
            continue
        cand = np.array(cand)
        diff = ext_pos[cand] - pos[v]
        dist = np.linalg.norm(diff, axis=-1)
        keep = (dist > 0.0) & (dist <= r_max)
        self_zero = (ext_atom[cand] == v) & np.all(ext_off[cand] == 0, axis=1)
        keep &= ~self_zero
        if not keep.any():
            continue
        sel = cand[keep]
        centers.append(np.full(len(sel), v, dtype=np.int64))
        neighbors.append(ext_atom[sel])
        offsets.append(ext_off[sel])
        distances.append(dist[keep])
    if not centers:
        empty = np.zeros(0, dtype=np.int64)
        return ImagePairs(empty, empty.copy(), np.zeros((0, 3), dtype=np.int32), np.zeros(0))
    return _sorted_pairs(
        np.concatenate(centers),
        np.concatenate(neighbors),
        np.concatenate(offsets),
        np.concatenate(distances),
    )


# Above this many (atom, image) points the binned path wins over the direct
# vectorized scan.
_CELL_LIST_THRESHOLD = 4096


def image_displacements(
    structure: AtomicStructure, r_max: float, method: str = "auto"
) -> ImagePairs:
    """Every ordered (center, neighbor, offset) pair with 0 < distance <= r_max.

    Self-images (same atom, nonzero offset) are included; the self-pair at
    zero offset is always excluded. Output rows are sorted by
    (center, neighbor, offset) so results are deterministic across methods.
    """
    if not r_max > 0:
        raise ValueError(f"r_max must be positive, got {r_max}")
    bounds = _offset_bounds(structure, r_max) if structure.periodic else [0, 0, 0]
    n_points = structure.n_atoms * math.prod(2 * b + 1 for b in bounds)
    if method == "auto":
        method = "cell_list" if n_points > _CELL_LIST_THRESHOLD else "direct"
    if method == "direct":
        return _pairs_direct(structure, r_max, bounds)
    if method == "cell_list":
        return _pairs_cell_list(structure, r_max, bounds)
    raise ValueError(f"unknown method {method!r}")
