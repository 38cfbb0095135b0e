"""Functional models of approximate radix-4 Booth multipliers.

The family implemented here combines two orthogonal knobs on an 8x8
signed multiplier: *perforation* (drop the P least-significant partial
products) and *asymmetric rounding* (round the multiplicand to a
per-row bit position before forming each surviving partial product).
Exact multiplication and externally measured lookup tables are handled
through the same interface, so everything downstream only ever sees a
256x256 product table plus an energy number.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TABLE_ENTRIES = 256 * 256
TABLE_BYTES_I32 = TABLE_ENTRIES * 4
TABLE_BYTES_U16 = TABLE_ENTRIES * 2

# Fixed base cost of the proxy energy model: Booth encoders and the part
# of the accumulation tree that perforation/rounding cannot remove.
ENERGY_BASE_COST = 0.25


class MultiplierError(ValueError):
    """Bad multiplier id, schedule, or table file."""


def booth_digits(b: int, n: int = 8) -> list[int]:
    """Radix-4 recode of an n-bit two's-complement operand.

    Returns n/2 digits in {-2,-1,0,+1,+2} such that
    sum(d[j] * 4**j) == b.  Digit j is -2*b[2j+1] + b[2j] + b[2j-1]
    with b[-1] == 0.
    """
    u = b & ((1 << n) - 1)
    digits = []
    for j in range(n // 2):
        b1 = (u >> (2 * j + 1)) & 1
        b0 = (u >> (2 * j)) & 1
        bm = (u >> (2 * j - 1)) & 1 if j > 0 else 0
        digits.append(-2 * b1 + b0 + bm)
    return digits


def round_operand(a: int, r: int) -> int:
    """Round a signed operand at bit position r, reported at original scale.

    Keeps bits r and up, adds the dropped bit r-1 as a rounding carry,
    then rescales by 2**r.  r == 0 is the identity (the rounding bit
    below bit 0 is defined as 0).
    """
    if r == 0:
        return a
    return ((a >> r) + ((a >> (r - 1)) & 1)) << r


def _schedule_from_big_r(p: int, big_r: int, n: int) -> tuple[int, ...]:
    # Heaviest rounding on the least-significant surviving row, two bits
    # lighter per row of increasing significance.
    return tuple(
        max(0, big_r - 2 * (j - p)) if j >= p else 0 for j in range(n // 2)
    )


@dataclass(frozen=True)
class MultiplierSpec:
    """Identity of one multiplier: exact, perforated/rounded, or imported."""

    kind: str  # "exact" | "roup" | "lut"
    n: int = 8
    p: int = 0
    r: tuple[int, ...] = (0, 0, 0, 0)
    table_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("exact", "roup", "lut"):
            raise MultiplierError(f"unknown multiplier kind {self.kind!r}")
        if self.n <= 0 or self.n % 2 != 0:
            raise MultiplierError(f"bitwidth must be even and positive, got {self.n}")
        if not (0 <= self.p <= self.n // 2):
            raise MultiplierError(f"perforation P={self.p} outside [0, {self.n // 2}]")
        if len(self.r) != self.n // 2:
            raise MultiplierError(
                f"rounding schedule needs {self.n // 2} entries, got {len(self.r)}"
            )
        for j, rj in enumerate(self.r):
            if not (0 <= rj <= self.n - 1):
                raise MultiplierError(f"r[{j}]={rj} outside [0, {self.n - 1}]")
        # Perforated rows never contribute; normalize their schedule
        # entries to 0 so equality and round-tripping are well defined.
        norm = tuple(rj if j >= self.p else 0 for j, rj in enumerate(self.r))
        object.__setattr__(self, "r", norm)
        if self.kind == "lut" and not self.table_path:
            raise MultiplierError("lut spec needs a table path")

    @classmethod
    def exact(cls, n: int = 8) -> "MultiplierSpec":
        return cls(kind="exact", n=n, r=(0,) * (n // 2))

    @classmethod
    def roup(
        cls,
        p: int = 0,
        r: tuple[int, ...] | None = None,
        big_r: int | None = None,
        n: int = 8,
    ) -> "MultiplierSpec":
        if r is not None and big_r is not None:
            raise MultiplierError("give either an explicit schedule or R, not both")
        if r is None:
            r = _schedule_from_big_r(p, big_r or 0, n)
        return cls(kind="roup", n=n, p=p, r=tuple(r))

    @classmethod
    def external(cls, path: str) -> "MultiplierSpec":
        return cls(kind="lut", table_path=str(path))

    @property
    def id(self) -> str:
        return format_multiplier_id(self)

    def __str__(self) -> str:
        return self.id


def format_multiplier_id(spec: MultiplierSpec) -> str:
    if spec.kind == "exact":
        return "exact"
    if spec.kind == "lut":
        return f"lut:{spec.table_path}"
    # Prefer the compact two-knob form when the schedule matches it.
    big_r = spec.r[spec.p] if spec.p < spec.n // 2 else 0
    if spec.r == _schedule_from_big_r(spec.p, big_r, spec.n):
        return f"roup:P={spec.p},R={big_r}"
    return f"roup:P={spec.p},r=" + "-".join(str(rj) for rj in spec.r)


_ROUP_R_RE = re.compile(r"^roup:P=(\d+),R=(\d+)$")
_ROUP_SCHED_RE = re.compile(r"^roup:P=(\d+),r=(\d+(?:-\d+)*)$")

GRAMMAR = "exact | roup:P=<int>,R=<int> | roup:P=<int>,r=<i>-<i>-<i>-<i> | lut:<path>"


def parse_multiplier_id(text: str) -> MultiplierSpec:
    """Parse a multiplier id; the grammar is in ``GRAMMAR``."""
    text = text.strip()
    if text == "exact":
        return MultiplierSpec.exact()
    if text.startswith("lut:"):
        path = text[4:]
        if not path:
            raise MultiplierError(f"empty lut path; grammar: {GRAMMAR}")
        return MultiplierSpec.external(path)
    m = _ROUP_R_RE.match(text)
    if m:
        return MultiplierSpec.roup(p=int(m.group(1)), big_r=int(m.group(2)))
    m = _ROUP_SCHED_RE.match(text)
    if m:
        sched = tuple(int(x) for x in m.group(2).split("-"))
        return MultiplierSpec.roup(p=int(m.group(1)), r=sched)
    raise MultiplierError(f"cannot parse multiplier id {text!r}; grammar: {GRAMMAR}")


def roup_multiply(a: int, b: int, spec: MultiplierSpec) -> int:
    """One product through the perforated/rounded Booth pipeline.

    Accumulates the surviving partial products
    round_operand(a, r[j]) * digit_j(b) * 4**j for j in [P, n/2).
    """
    if spec.kind == "exact":
        return a * b
    if spec.kind != "roup":
        raise MultiplierError("roup_multiply needs an exact or roup spec")
    digits = booth_digits(b, spec.n)
    total = 0
    for j in range(spec.p, spec.n // 2):
        total += round_operand(a, spec.r[j]) * digits[j] * 4**j
    return total


@dataclass(frozen=True)
class MultTable:
    """Immutable 256x256 signed product table plus its energy.

    products[a + 128, b + 128] is the table's answer for a*b with both
    operands signed 8-bit.
    """

    spec: MultiplierSpec
    products: np.ndarray  # (256, 256) int32, read-only
    energy: float

    def __post_init__(self):
        if self.products.shape != (256, 256):
            raise MultiplierError("product table must be 256x256")
        self.products.setflags(write=False)
        if self.energy < 0:
            raise MultiplierError("energy must be nonnegative")

    def product(self, a: int, b: int) -> int:
        return int(self.products[a + 128, b + 128])


@dataclass(frozen=True)
class ErrorProfile:
    mred: float
    mae: float
    max_abs_err: int
    error_rate: float


_OPERANDS = np.arange(-128, 128, dtype=np.int64)


def _roup_products(spec: MultiplierSpec) -> np.ndarray:
    """Vectorized table fill; row = first operand (rounded), col = second."""
    u = _OPERANDS & 0xFF
    prod = np.zeros((256, 256), dtype=np.int64)
    for j in range(spec.p, spec.n // 2):
        rj = spec.r[j]
        if rj == 0:
            ra = _OPERANDS
        else:
            ra = ((_OPERANDS >> rj) + ((_OPERANDS >> (rj - 1)) & 1)) << rj
        b1 = (u >> (2 * j + 1)) & 1
        b0 = (u >> (2 * j)) & 1
        bm = (u >> (2 * j - 1)) & 1 if j > 0 else np.zeros_like(u)
        digits = -2 * b1 + b0 + bm
        prod += np.outer(ra, digits) * 4**j
    return prod.astype(np.int32)


def load_table_file(path: str | Path) -> np.ndarray:
    """Read an external product table.

    Accepts 65 536 little-endian int32 entries (signed 8x8), or 65 536
    little-endian uint16 entries (unsigned 8x8 imports, operands offset
    by +128 under the signed indexing convention).
    """
    raw = Path(path).read_bytes()
    if len(raw) == TABLE_BYTES_I32:
        vals = np.frombuffer(raw, dtype="<i4")
    elif len(raw) == TABLE_BYTES_U16:
        vals = np.frombuffer(raw, dtype="<u2").astype(np.int32)
    else:
        raise MultiplierError(
            f"table file {path}: expected {TABLE_BYTES_I32} or {TABLE_BYTES_U16} "
            f"bytes, got unexpected end at byte offset {len(raw)}"
        )
    return vals.astype(np.int32).reshape(256, 256)


def energy_of(
    spec: MultiplierSpec,
    energy_table: dict[str, float] | None = None,
) -> float:
    """Normalized energy of one multiplier (exact = 1.0).

    Without a measured table the proxy model is
    base + (1 - base) * active_bits / total_bits, where a row's active
    bits are the n - r[j] unrounded multiplicand bits and perforated
    rows contribute none.
    """
    if energy_table is not None and spec.id in energy_table:
        return float(energy_table[spec.id])
    if spec.kind == "exact":
        return 1.0
    if spec.kind == "lut":
        raise MultiplierError(
            f"no energy-table entry for {spec.id}; external tables need one"
        )
    total_bits = (spec.n // 2) * spec.n
    active_bits = sum(spec.n - spec.r[j] for j in range(spec.p, spec.n // 2))
    return ENERGY_BASE_COST + (1.0 - ENERGY_BASE_COST) * active_bits / total_bits


def build_table(
    spec: MultiplierSpec,
    energy_table: dict[str, float] | None = None,
) -> MultTable:
    """Materialize the full product table for one spec."""
    if spec.kind == "lut":
        products = load_table_file(spec.table_path)
    elif spec.kind == "exact":
        products = np.outer(_OPERANDS, _OPERANDS).astype(np.int32)
    else:
        products = _roup_products(spec)
    return MultTable(spec=spec, products=products, energy=energy_of(spec, energy_table))


_EXACT_PRODUCTS = np.outer(_OPERANDS, _OPERANDS)


def characterize(table: MultTable) -> ErrorProfile:
    """Exhaustive error metrics against exact products, all 65 536 pairs."""
    diff = table.products.astype(np.int64) - _EXACT_PRODUCTS
    adiff = np.abs(diff)
    denom = np.maximum(1, np.abs(_EXACT_PRODUCTS))
    return ErrorProfile(
        mred=float((adiff / denom).mean()),
        mae=float(adiff.mean()),
        max_abs_err=int(adiff.max()),
        error_rate=float((diff != 0).mean()),
    )


def load_energy_table(path: str | Path) -> dict[str, float]:
    """Parse an ``id value`` per-line energy map; '#' starts a comment."""
    table: dict[str, float] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.rsplit(None, 1)
        if len(parts) != 2:
            raise MultiplierError(f"{path}:{lineno}: expected 'id value'")
        mult_id, value = parts
        try:
            energy = float(value)
        except ValueError:
            raise MultiplierError(f"{path}:{lineno}: bad energy value {value!r}")
        if energy < 0:
            raise MultiplierError(f"{path}:{lineno}: energy must be nonnegative")
        table[mult_id] = energy
    return table


def _pick_preset(target: float, bound: float | None = None) -> MultiplierSpec:
    # Enumerate the small (P, R) grid once and take the proxy energy
    # closest to the target, respecting a hard upper bound when given.
    # Exact energy ties go to the member with more perforation: dropping
    # a whole partial product leaves room for weight tuning to recover
    # accuracy, which pure rounding of the activation operand does not.
    best_key = None
    best_spec = None
    for p in range(0, 4):
        for big_r in range(0, 8):
            spec = MultiplierSpec.roup(p=p, big_r=big_r)
            e = energy_of(spec)
            if bound is not None and e > bound:
                continue
            key = (abs(e - target), -p, big_r)
            if best_key is None or key < best_key:
                best_key, best_spec = key, spec
    assert best_spec is not None
    return best_spec


# Named presets of increasing approximation strength.  The "low" and
# "medium" ones are calibrated to give at least 10% / 20% energy savings
# under the proxy model; "high" targets a clearly aggressive 0.65.
ROUP_L = _pick_preset(0.90, bound=0.90)
ROUP_M = _pick_preset(0.80, bound=0.80)
ROUP_H = _pick_preset(0.65)

PRESETS: dict[str, MultiplierSpec] = {
    "ROUP_L": ROUP_L,
    "ROUP_M": ROUP_M,
    "ROUP_H": ROUP_H,
}


def resolve_multiplier_id(text: str) -> MultiplierSpec:
    """parse_multiplier_id plus the ROUP_L/M/H preset aliases."""
    alias = text.strip().upper()
    if alias in PRESETS:
        return PRESETS[alias]
    return parse_multiplier_id(text)
