"""Two-file volume bundles, case directories, and dataset enumeration.

A volume bundle is a pair of files sharing a base name: a UTF-8 JSON header
``<name>.json`` and a raw payload ``<name>.raw`` holding C-order,
little-endian IEEE-754 float32 values. Axis order is fixed to [T,]Z,Y,X.

A case directory holds one bundle per member: ``cbf``, ``cbv``, ``mtt``,
``tmax`` are required, ``cta4d``, ``dwi`` and ``mask`` are optional. A
dataset root is a directory of case directories (one per case id), plus a
plain-text split file assigning case ids to train/val/test roles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CaseValidationError, VolumeFormatError

SUPPORTED_DTYPES = ("float32",)
SUPPORTED_BYTE_ORDERS = ("little-endian",)

REQUIRED_MAPS = ("cbf", "cbv", "mtt", "tmax")
OPTIONAL_MEMBERS = ("cta4d", "dwi", "mask")

HEADER_SUFFIX = ".json"
RAW_SUFFIX = ".raw"


@dataclass(frozen=True)
class VolumeHeader:
    """Header of a volume bundle: dims in [T,]Z,Y,X order, spacing in Z,Y,X mm."""

    dims: tuple[int, ...]
    spacing_mm: tuple[float, float, float]
    dtype: str = "float32"
    byte_order: str = "little-endian"

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        if len(self.dims) not in (3, 4):
            raise VolumeFormatError(f"dims must have length 3 or 4, got {self.dims}")
        if any(d < 1 for d in self.dims):
            raise VolumeFormatError(f"all dims must be >= 1, got {self.dims}")
        if len(self.spacing_mm) != 3:
            raise VolumeFormatError(f"spacing_mm must have length 3, got {self.spacing_mm}")
        if any(not (s > 0) for s in self.spacing_mm):
            raise VolumeFormatError(f"all spacing values must be > 0, got {self.spacing_mm}")
        if self.dtype not in SUPPORTED_DTYPES:
            raise VolumeFormatError(f"unsupported dtype {self.dtype!r}")
        if self.byte_order not in SUPPORTED_BYTE_ORDERS:
            raise VolumeFormatError(f"unsupported byte order {self.byte_order!r}")

    @property
    def n_values(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n

    @property
    def n_bytes(self) -> int:
        return self.n_values * 4


def _bundle_base(path) -> Path:
    path = Path(path)
    if path.suffix in (HEADER_SUFFIX, RAW_SUFFIX):
        return path.with_suffix("")
    return path


def write_volume(path, header: VolumeHeader, data: np.ndarray) -> None:
    """Write ``<path>.json`` + ``<path>.raw``; inverted exactly by read_volume.

    Rejects data whose shape disagrees with the header or that contains
    non-finite values.
    """
    data = np.asarray(data)
    if tuple(data.shape) != header.dims:
        raise VolumeFormatError(
            f"data shape {tuple(data.shape)} does not match header dims {header.dims}"
        )
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError("data contains non-finite values (NaN or Inf)")
    base = _bundle_base(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(data, dtype="<f4")
    header_doc = {
        "dims": list(header.dims),
        "spacing_mm": list(header.spacing_mm),
        "dtype": header.dtype,
        "byte_order": header.byte_order,
    }
    base.with_suffix(HEADER_SUFFIX).write_text(
        json.dumps(header_doc, indent=2) + "\n", encoding="utf-8"
    )
    base.with_suffix(RAW_SUFFIX).write_bytes(payload.tobytes(order="C"))


def read_volume(path) -> tuple[VolumeHeader, np.ndarray]:
    """Read a volume bundle back as (header, float32 array)."""
    base = _bundle_base(path)
    header_path = base.with_suffix(HEADER_SUFFIX)
    raw_path = base.with_suffix(RAW_SUFFIX)
    if not header_path.is_file():
        raise VolumeFormatError(f"missing header file {header_path}")
    if not raw_path.is_file():
        raise VolumeFormatError(f"missing payload file {raw_path}")
    try:
        doc = json.loads(header_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise VolumeFormatError(f"malformed header {header_path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise VolumeFormatError(f"malformed header {header_path}: not a JSON object")
    try:
        header = VolumeHeader(
            dims=tuple(doc["dims"]),
            spacing_mm=tuple(doc["spacing_mm"]),
            dtype=doc.get("dtype", "float32"),
            byte_order=doc.get("byte_order", "little-endian"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"malformed header {header_path}: {exc}") from exc
    payload = raw_path.read_bytes()
    if len(payload) != header.n_bytes:
        raise VolumeFormatError(
            f"payload size mismatch for {raw_path}: expected {header.n_bytes} bytes "
            f"for dims {header.dims}, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(header.dims)
    return header, data.copy()


def volume_exists(path) -> bool:
    base = _bundle_base(path)
    return base.with_suffix(HEADER_SUFFIX).is_file() and base.with_suffix(RAW_SUFFIX).is_file()


@dataclass
class CaseRecord:
    """One case: four perfusion maps plus optional raw CTA, DWI and lesion mask.

    All present volumes share the same spatial dims (Z,Y,X) and spacing.
    """

    case_id: str
    cbf: np.ndarray
    cbv: np.ndarray
    mtt: np.ndarray
    tmax: np.ndarray
    spacing_mm: tuple[float, float, float]
    cta: np.ndarray | None = None
    dwi: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.validate()

    def validate(self) -> None:
        shape = tuple(self.cbf.shape)
        if len(shape) != 3:
            raise CaseValidationError(f"{self.case_id}: perfusion maps must be 3D, got {shape}")
        for name in ("cbv", "mtt", "tmax"):
            vol = getattr(self, name)
            if tuple(vol.shape) != shape:
                raise CaseValidationError(
                    f"{self.case_id}: {name} shape {tuple(vol.shape)} != cbf shape {shape}"
                )
        for name in ("dwi", "mask"):
            vol = getattr(self, name)
            if vol is not None and tuple(vol.shape) != shape:
                raise CaseValidationError(
                    f"{self.case_id}: {name} shape {tuple(vol.shape)} != cbf shape {shape}"
                )
        if self.cta is not None:
            if self.cta.ndim != 4 or tuple(self.cta.shape[1:]) != shape:
                raise CaseValidationError(
                    f"{self.case_id}: cta4d shape {tuple(self.cta.shape)} incompatible "
                    f"with spatial dims {shape}"
                )
        if self.mask is not None:
            values = np.unique(self.mask)
            if not np.all(np.isin(values, (0.0, 1.0))):
                raise CaseValidationError(
                    f"{self.case_id}: mask contains values outside {{0, 1}}"
                )

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.cbf.shape)

    def perfusion_maps(self) -> np.ndarray:
        """Stack the four maps into a (4,Z,Y,X) array in cbf,cbv,mtt,tmax order."""
        return np.stack([self.cbf, self.cbv, self.mtt, self.tmax], axis=0)


def save_case(case_dir, record: CaseRecord) -> None:
    """Write a case directory; load_case inverts it."""
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    spacing = record.spacing_mm

    def _write(name, data):
        write_volume(case_dir / name, VolumeHeader(tuple(data.shape), spacing), data)

    for name in REQUIRED_MAPS:
        _write(name, getattr(record, name))
    if record.cta is not None:
        _write("cta4d", record.cta)
    if record.dwi is not None:
        _write("dwi", record.dwi)
    if record.mask is not None:
        _write("mask", record.mask.astype(np.float32))


def load_case(case_dir) -> CaseRecord:
    """Read a case directory into a validated CaseRecord."""
    case_dir = Path(case_dir)
    if not case_dir.is_dir():
        raise CaseValidationError(f"case directory {case_dir} does not exist")
    volumes = {}
    spacing = None
    for name in REQUIRED_MAPS:
        if not volume_exists(case_dir / name):
            raise CaseValidationError(f"{case_dir.name}: missing required map {name!r}")
        header, data = read_volume(case_dir / name)
        volumes[name] = data
        if spacing is None:
            spacing = header.spacing_mm
        elif header.spacing_mm != spacing:
            raise CaseValidationError(
                f"{case_dir.name}: spacing of {name} {header.spacing_mm} != {spacing}"
            )
    for name in OPTIONAL_MEMBERS:
        if volume_exists(case_dir / name):
            header, data = read_volume(case_dir / name)
            volumes[name] = data
            if header.spacing_mm != spacing:
                raise CaseValidationError(
                    f"{case_dir.name}: spacing of {name} {header.spacing_mm} != {spacing}"
                )
    return CaseRecord(
        case_id=case_dir.name,
        cbf=volumes["cbf"],
        cbv=volumes["cbv"],
        mtt=volumes["mtt"],
        tmax=volumes["tmax"],
        spacing_mm=spacing,
        cta=volumes.get("cta4d"),
        dwi=volumes.get("dwi"),
        mask=volumes.get("mask"),
    )


def list_case_ids(dataset_root) -> list[str]:
    """Case ids under a dataset root, sorted; a case is any subdirectory with a cbf bundle."""
    root = Path(dataset_root)
    if not root.is_dir():
        raise CaseValidationError(f"dataset root {root} does not exist")
    ids = [p.name for p in sorted(root.iterdir()) if p.is_dir() and volume_exists(p / "cbf")]
    return ids


SPLIT_ROLES = ("train", "val", "test")


def write_split(path, assignment: dict[str, str]) -> None:
    """Write a split file: one ``<case_id> <role>`` line per case."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{case_id} {role}" for case_id, role in assignment.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_split(path) -> dict[str, list[str]]:
    """Read a split file into {role: [case ids]} with roles train/val/test."""
    path = Path(path)
    if not path.is_file():
        raise CaseValidationError(f"split file {path} does not exist")
    split: dict[str, list[str]] = {role: [] for role in SPLIT_ROLES}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in SPLIT_ROLES:
            raise CaseValidationError(
                f"{path}:{lineno}: expected '<case_id> <train|val|test>', got {line!r}"
            )
        split[parts[1]].append(parts[0])
    return split
