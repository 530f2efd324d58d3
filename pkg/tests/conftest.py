"""Shared synthetic-structure generators and the acceptance report hook."""

from __future__ import annotations

import math

import numpy as np
import pytest

from edgenet import AtomicStructure, DatasetRecord, image_displacements


def random_molecule(rng, n_min=4, n_max=10, species=(1, 6, 7, 8, 9)) -> AtomicStructure:
    """Grow a random blob of atoms with chemistry-like spacing (1.0..1.6 A)."""
    n = int(rng.integers(n_min, n_max + 1))
    positions = [np.zeros(3)]
    while len(positions) < n:
        base = positions[int(rng.integers(0, len(positions)))]
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        candidate = base + direction * rng.uniform(1.0, 1.6)
        if min(np.linalg.norm(candidate - p) for p in positions) > 0.85:
            positions.append(candidate)
    return AtomicStructure(
        rng.choice(species, size=n), np.array(positions)
    )


def _pair_coefficient(z1: int, z2: int) -> float:
    return 0.4 + 0.25 * ((z1 * 7 + z2 * 3) % 5) + 0.1 * ((z1 * z2) % 3)


def synthetic_energy(structure: AtomicStructure, cutoff: float = 4.0) -> float:
    """Smooth species-pair dependent target used by toy training runs."""
    pos = structure.positions
    z = structure.species
    total = 0.12 * structure.n_atoms
    for i in range(structure.n_atoms):
        for j in range(i + 1, structure.n_atoms):
            d = float(np.linalg.norm(pos[i] - pos[j]))
            if d < cutoff:
                total += _pair_coefficient(int(z[i]), int(z[j])) * math.exp(-((d - 1.3) ** 2))
    return total


def molecule_record(rng, idx: int) -> DatasetRecord:
    structure = random_molecule(rng)
    return DatasetRecord(
        structure, {"U0": synthetic_energy(structure)}, id=f"mol{idx:05d}"
    )


def lattice_from_parameters(a, b, c, alpha, beta, gamma) -> np.ndarray:
    """Cell matrix (rows are lattice vectors) from lengths and angles in degrees."""
    alpha, beta, gamma = (math.radians(x) for x in (alpha, beta, gamma))
    v1 = np.array([a, 0.0, 0.0])
    v2 = np.array([b * math.cos(gamma), b * math.sin(gamma), 0.0])
    cx = c * math.cos(beta)
    cy = c * (math.cos(alpha) - math.cos(beta) * math.cos(gamma)) / math.sin(gamma)
    cz = math.sqrt(max(c * c - cx * cx - cy * cy, 1e-12))
    return np.array([v1, v2, [cx, cy, cz]])


def random_crystal(
    rng,
    n_min=1,
    n_max=6,
    length_range=(2.8, 5.5),
    angle_range=(60.0, 120.0),
    min_separation=0.9,
    species=(3, 8, 13, 26, 29),
) -> AtomicStructure:
    """Random periodic structure with a skewed cell and no overlapping images."""
    for _ in range(200):
        lengths = rng.uniform(*length_range, size=3)
        angles = rng.uniform(*angle_range, size=3)
        try:
            cell = lattice_from_parameters(*lengths, *angles)
        except ValueError:
            continue
        if abs(np.linalg.det(cell)) < 1.0:
            continue
        n = int(rng.integers(n_min, n_max + 1))
        frac = rng.uniform(0.0, 1.0, size=(n, 3))
        structure = AtomicStructure(rng.choice(species, size=n), frac @ cell, cell)
        close = image_displacements(structure, min_separation)
        if len(close) == 0:
            return structure
    raise RuntimeError("could not generate a crystal with the requested separation")


@pytest.hookimpl
def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = {}
    for status in ("passed", "failed", "skipped"):
        for rep in terminalreporter.stats.get(status, []):
            if "test_acceptance" in rep.nodeid and rep.when in ("call", "setup"):
                name = rep.nodeid.split("::")[-1]
                rows[name] = "PASS" if status == "passed" else status.upper()
    if rows:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name in sorted(rows):
            terminalreporter.write_line(f"{rows[name]:8s} {name}")
