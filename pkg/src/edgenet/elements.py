"""Element symbol table for atomic numbers 1..103."""

from .errors import DataError

SYMBOLS = (
    "H", "He",
    "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar",
    "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr",
    "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd",
    "In", "Sn", "Sb", "Te", "I", "Xe",
    "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy",
    "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt",
    "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn",
    "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf",
    "Es", "Fm", "Md", "No", "Lr",
)

MAX_Z = len(SYMBOLS)

_Z_BY_SYMBOL = {sym: z for z, sym in enumerate(SYMBOLS, start=1)}

# He, Ne, Ar, Kr, Xe: the set used by the noble-gas dataset filter.
NOBLE_GAS_NUMBERS = frozenset((2, 10, 18, 36, 54))


def atomic_number(symbol: str) -> int:
    try:
        return _Z_BY_SYMBOL[symbol]
    except KeyError:
        raise DataError(f"unknown element symbol {symbol!r}") from None


def symbol_for(z: int) -> str:
    if not 1 <= z <= MAX_Z:
        raise DataError(f"atomic number {z} outside supported range 1..{MAX_Z}")
    return SYMBOLS[z - 1]
