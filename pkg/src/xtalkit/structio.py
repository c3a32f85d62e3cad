"""Structure records, VASP-5 POSCAR reading/writing and line-oriented dataset manifests.

Conventions used everywhere in this package:
  * lattice rows are the cell vectors (row-vector convention), so
    cartesian = fractional @ lattice
  * atomic numbers run 1..118 and are stored as plain ints
  * all coordinates are Cartesian angstroms once parsed
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

# ---- element table ----------------------------------------------------------

ELEMENTS = (
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr",
    "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb",
    "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm",
    "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds",
    "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
)

SYMBOL_TO_Z = {sym: z for z, sym in enumerate(ELEMENTS, start=1)}


def symbol_of(z: int) -> str:
    if not 1 <= z <= 118:
        raise ValueError(f"atomic number {z} outside 1..118")
    return ELEMENTS[z - 1]


def z_of(symbol: str) -> int:
    try:
        return SYMBOL_TO_Z[symbol]
    except KeyError:
        raise ValueError(f"unknown element symbol {symbol!r}") from None


class PoscarError(ValueError):
    """Raised for malformed POSCAR content; message names the offending line."""


# ---- structure record -------------------------------------------------------

@dataclass
class AtomicSystem:
    """One molecule or crystal.

    numbers:   (N,) int atomic numbers, 1..118
    positions: (N, 3) float Cartesian coordinates, angstrom
    lattice:   (3, 3) float rows = cell vectors, or None for a molecule
    labels:    free-form per-system metadata (targets, tags, ...)
    """

    numbers: np.ndarray
    positions: np.ndarray
    lattice: np.ndarray | None = None
    labels: dict = field(default_factory=dict)

    def __init__(self, numbers, positions, lattice=None, labels=None, validate=True):
        self.numbers = np.asarray(numbers, dtype=int).reshape(-1)
        self.positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        self.lattice = None if lattice is None else np.asarray(lattice, dtype=float).reshape(3, 3)
        self.labels = {} if labels is None else dict(labels)
        if validate:
            self._check()

    def _check(self):
        n = self.numbers.shape[0]
        if n < 1:
            raise ValueError("system needs at least one atom")
        if self.positions.shape != (n, 3):
            raise ValueError(f"positions shape {self.positions.shape} does not match {n} atoms")
        bad = [int(z) for z in self.numbers if not 1 <= z <= 118]
        if bad:
            raise ValueError(f"atomic numbers outside 1..118: {bad}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite coordinates")
        if self.lattice is not None:
            if not np.all(np.isfinite(self.lattice)):
                raise ValueError("non-finite lattice")
            det = float(np.linalg.det(self.lattice))
            if det <= 0.0:
                raise ValueError(f"lattice determinant must be positive, got {det:.6g}")

    @property
    def n_atoms(self) -> int:
        return int(self.numbers.shape[0])

    @property
    def is_periodic(self) -> bool:
        return self.lattice is not None

    def symbols(self) -> list[str]:
        return [symbol_of(int(z)) for z in self.numbers]

    def copy(self) -> "AtomicSystem":
        return AtomicSystem(
            self.numbers.copy(),
            self.positions.copy(),
            None if self.lattice is None else self.lattice.copy(),
            dict(self.labels),
            validate=False,
        )


# ---- POSCAR -----------------------------------------------------------------

def _floats(tokens, count, lineno, what):
    if len(tokens) < count:
        raise PoscarError(f"line {lineno}: expected {count} numbers for {what}, got {len(tokens)}")
    try:
        return [float(t) for t in tokens[:count]]
    except ValueError as e:
        raise PoscarError(f"line {lineno}: bad number in {what}: {e}") from None


def parse_poscar(text: str) -> AtomicSystem:
    """Parse VASP-5 POSCAR text (comment, scale, lattice, symbols, counts, mode, coords).

    The universal scale multiplies the lattice rows and, in Cartesian mode, the
    coordinates as well. Direct coordinates are converted via frac @ lattice.
    Selective-dynamics and velocity blocks are rejected. Errors carry 1-based
    line numbers.
    """
    lines = text.splitlines()
    if len(lines) < 8:
        raise PoscarError(f"line {len(lines)}: truncated POSCAR, need at least 8 lines")

    comment = lines[0].strip()

    tok = lines[1].split()
    if not tok:
        raise PoscarError("line 2: missing scale factor")
    try:
        scale = float(tok[0])
    except ValueError:
        raise PoscarError(f"line 2: scale factor {tok[0]!r} is not a number") from None
    if scale <= 0.0:
        raise PoscarError(f"line 2: scale factor must be positive, got {scale:g}")

    lattice = np.empty((3, 3))
    for k in range(3):
        lattice[k] = _floats(lines[2 + k].split(), 3, 3 + k, "lattice row")
    lattice *= scale

    symbols = lines[5].split()
    if not symbols:
        raise PoscarError("line 6: missing species symbols")
    if all(s.lstrip("+-").isdigit() for s in symbols):
        raise PoscarError("line 6: species line holds counts; symbol line required (VASP-4 layout not supported)")
    zs = []
    for s in symbols:
        if s not in SYMBOL_TO_Z:
            raise PoscarError(f"line 6: unknown element symbol {s!r}")
        zs.append(SYMBOL_TO_Z[s])

    count_tok = lines[6].split()
    if len(count_tok) != len(symbols):
        raise PoscarError(f"line 7: {len(count_tok)} counts for {len(symbols)} species")
    try:
        counts = [int(t) for t in count_tok]
    except ValueError:
        raise PoscarError("line 7: counts must be integers") from None
    if any(c < 1 for c in counts):
        raise PoscarError("line 7: counts must be >= 1")

    mode_line = lines[7].strip()
    if not mode_line:
        raise PoscarError("line 8: missing coordinate mode")
    lead = mode_line[0].lower()
    if lead == "s":
        raise PoscarError("line 8: selective dynamics not supported")
    if lead == "d":
        cartesian = False
    elif lead in ("c", "k"):
        cartesian = True
    else:
        raise PoscarError(f"line 8: unrecognized coordinate mode {mode_line!r}")

    n = sum(counts)
    if len(lines) < 8 + n:
        raise PoscarError(f"line {len(lines)}: expected {n} coordinate lines, file ends early")
    coords = np.empty((n, 3))
    for i in range(n):
        lineno = 9 + i
        raw = lines[8 + i].split()
        vals = _floats(raw, 3, lineno, "coordinates")
        extra = raw[3:]
        if any(t.upper() in ("T", "F") for t in extra):
            raise PoscarError(f"line {lineno}: selective dynamics flags not supported")
        coords[i] = vals

    for j in range(8 + n, len(lines)):
        if lines[j].strip():
            raise PoscarError(f"line {j + 1}: trailing block (velocities or predictor data) not supported")

    if cartesian:
        positions = coords * scale
    else:
        positions = coords @ lattice

    numbers = np.concatenate([np.full(c, z, dtype=int) for z, c in zip(zs, counts)])
    return AtomicSystem(numbers, positions, lattice, labels={"comment": comment} if comment else {})


def write_poscar(system: AtomicSystem, cartesian: bool = False, comment: str | None = None) -> str:
    """Serialize a periodic system as VASP-5 POSCAR text with 16 significant digits.

    The species line is written as maximal runs of equal species so the atom
    order round-trips exactly; a symbol may therefore appear more than once.
    """
    if system.lattice is None:
        raise ValueError("POSCAR requires a lattice; molecule given")

    def fmt(x: float) -> str:
        return f"{x:.16g}"

    def row(v) -> str:
        return "  " + "  ".join(f"{x:>22.16g}" for x in v)

    out = [comment if comment is not None else str(system.labels.get("comment", "generated by xtalkit"))]
    out.append("1.0")
    for k in range(3):
        out.append(row(system.lattice[k]))

    runs: list[tuple[int, int]] = []
    for z in system.numbers:
        z = int(z)
        if runs and runs[-1][0] == z:
            runs[-1] = (z, runs[-1][1] + 1)
        else:
            runs.append((z, 1))
    out.append("  " + "  ".join(symbol_of(z) for z, _ in runs))
    out.append("  " + "  ".join(str(c) for _, c in runs))

    if cartesian:
        out.append("Cartesian")
        coords = system.positions
    else:
        out.append("Direct")
        coords = system.positions @ np.linalg.inv(system.lattice)
    for i in range(system.n_atoms):
        out.append(row(coords[i]))
    return "\n".join(out) + "\n"


def read_poscar_file(path: str | os.PathLike) -> AtomicSystem:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_poscar(fh.read())


def write_poscar_file(system: AtomicSystem, path: str | os.PathLike,
                      cartesian: bool = False, comment: str | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(write_poscar(system, cartesian=cartesian, comment=comment))


# ---- dataset manifest -------------------------------------------------------

@dataclass
class ManifestRecord:
    path: str
    tag: str
    labels: dict

    def load(self) -> AtomicSystem:
        system = read_poscar_file(self.path)
        system.labels.update(self.labels)
        system.labels["tag"] = self.tag
        return system


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def load_all(self) -> list[AtomicSystem]:
        return [r.load() for r in self.records]


def _parse_label_value(raw: str):
    if "," in raw:
        try:
            return np.array([float(p) for p in raw.split(",") if p != ""])
        except ValueError:
            return raw
    try:
        return float(raw)
    except ValueError:
        return raw


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Read a line-oriented manifest: `<structure-path> <tag> [key=value ...]` per line.

    Blank lines and `#` comments are skipped. Paths are resolved relative to the
    manifest location. Duplicate structure paths are an error. Numeric values
    (and comma-separated numeric lists) are parsed; everything else stays a string.
    """
    base = os.path.dirname(os.path.abspath(path))
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) < 2:
                raise ValueError(f"{path}: line {lineno}: need `<path> <tag> [key=value ...]`")
            rel, tag = parts[0], parts[1]
            full = rel if os.path.isabs(rel) else os.path.join(base, rel)
            if full in seen:
                raise ValueError(f"{path}: line {lineno}: duplicate record for {rel!r}")
            seen.add(full)
            labels = {}
            for kv in parts[2:]:
                if "=" not in kv:
                    raise ValueError(f"{path}: line {lineno}: expected key=value, got {kv!r}")
                key, raw = kv.split("=", 1)
                labels[key] = _parse_label_value(raw)
            records.append(ManifestRecord(full, tag, labels))
    return DatasetManifest(records)
