"""
On-disk formats: raw arrays, event files, sample directories, manifests,
checkpoints, metric reports, CSV training logs and PPM images.
"""
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from rpeflow.errors import ContractError, DataError
from rpeflow.eventkit import EVENT_DTYPE, EventStream
from rpeflow.geometry import CameraIntrinsics
from rpeflow.sample import Sample

PathLike = Union[str, Path]

EVENT_MAGIC = b"EVT1"
EVENT_HEADER_DTYPE = np.dtype([("magic", "S4"), ("width", "<u2"), ("height", "<u2"), ("reserved", "<f8")])
MANIFEST_FILE = "manifest.json"
CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_BLOB = "weights.bin"
CHECKPOINT_FORMAT = "rpeflow-checkpoint"
CSV_COLUMNS = ("iter", "L", "L_task", "L_feat", "EPE2D_train")
_BLOB_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _write_bytes(path: Path, data: bytes) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}")
    return path


def _read_bytes(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}")


def write_json(path: PathLike, payload: Any) -> Path:
    text = json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    return _write_bytes(Path(path), text.encode("utf-8"))


def read_json(path: PathLike) -> Any:
    try:
        return json.loads(_read_bytes(Path(path)).decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}")


# -- raw arrays ------------------------------------------------------------


def write_array(path: PathLike, array: np.ndarray, dtype: str) -> Path:
    """Write ``array`` as raw little-endian ``dtype`` (e.g. "<f4", "u1")."""
    return _write_bytes(Path(path), np.ascontiguousarray(array, dtype=dtype).tobytes())


def read_array(path: PathLike, dtype: str, shape: Sequence[int]) -> np.ndarray:
    raw = _read_bytes(Path(path))
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise DataError(f"{path} holds {len(raw)} bytes, expected {expected} for shape {tuple(shape)}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


# -- events ----------------------------------------------------------------


def write_events(path: PathLike, stream: EventStream) -> Path:
    """16-byte header (magic, u16 W, u16 H, f64 0) followed by packed 13-byte records."""
    header = np.zeros(1, dtype=EVENT_HEADER_DTYPE)
    header["magic"] = EVENT_MAGIC
    header["width"] = stream.width
    header["height"] = stream.height
    return _write_bytes(Path(path), header.tobytes() + np.ascontiguousarray(stream.events, EVENT_DTYPE).tobytes())


def read_events(path: PathLike, t0: float = 0.0, t1: float = 1.0) -> EventStream:
    raw = _read_bytes(Path(path))
    hsize = EVENT_HEADER_DTYPE.itemsize
    if len(raw) < hsize:
        raise DataError(f"{path} is too short for an event header")
    header = np.frombuffer(raw[:hsize], dtype=EVENT_HEADER_DTYPE)[0]
    if header["magic"] != EVENT_MAGIC:
        raise DataError(f"{path} is not an event file (magic {header['magic']!r})")
    body = raw[hsize:]
    if len(body) % EVENT_DTYPE.itemsize:
        raise DataError(f"{path} has a truncated event record")
    events = np.frombuffer(body, dtype=EVENT_DTYPE).copy()
    return EventStream(events, t0, t1, int(header["width"]), int(header["height"]))


# -- samples ---------------------------------------------------------------


def write_sample(directory: PathLike, sample: Sample) -> Path:
    """
    Write one sample directory.

    Layout: meta.json, rgb0.f32, rgb1.f32, pc0.f32, pc1.f32, sf_gt.f32,
    of_gt.f32, occ2d.u8, occ3d.u8, valid.u8, events.evt.
    """
    d = Path(directory)
    cam = sample.cam
    meta = {
        "width": sample.width,
        "height": sample.height,
        "f": cam.f,
        "cx": cam.cx,
        "cy": cam.cy,
        "num_points": sample.num_points,
        "num_points_pc1": len(sample.pc1),
        "t0": sample.events.t0,
        "t1": sample.events.t1,
        "num_events": len(sample.events),
        **sample.meta,
    }
    write_json(d / "meta.json", meta)
    write_array(d / "rgb0.f32", sample.rgb0, "<f4")
    write_array(d / "rgb1.f32", sample.rgb1, "<f4")
    write_array(d / "pc0.f32", sample.pc0, "<f4")
    write_array(d / "pc1.f32", sample.pc1, "<f4")
    write_array(d / "sf_gt.f32", sample.sceneflow, "<f4")
    write_array(d / "of_gt.f32", sample.flow, "<f4")
    write_array(d / "occ2d.u8", sample.occ2d, "u1")
    write_array(d / "occ3d.u8", sample.occ3d, "u1")
    write_array(d / "valid.u8", sample.valid, "u1")
    write_events(d / "events.evt", sample.events)
    return d


def read_sample(directory: PathLike) -> Sample:
    d = Path(directory)
    meta = read_json(d / "meta.json")
    h, w, n, m = meta["height"], meta["width"], meta["num_points"], meta["num_points_pc1"]

    def f32(name, shape):
        return read_array(d / name, "<f4", shape).astype(np.float64)

    def mask(name, shape):
        return read_array(d / name, "u1", shape).astype(bool)

    known = {"width", "height", "f", "cx", "cy", "num_points", "num_points_pc1", "t0", "t1", "num_events"}
    return Sample(
        rgb0=f32("rgb0.f32", (h, w)),
        rgb1=f32("rgb1.f32", (h, w)),
        pc0=f32("pc0.f32", (n, 3)),
        pc1=f32("pc1.f32", (m, 3)),
        events=read_events(d / "events.evt", meta["t0"], meta["t1"]),
        flow=f32("of_gt.f32", (h, w, 2)),
        sceneflow=f32("sf_gt.f32", (n, 3)),
        valid=mask("valid.u8", (h, w)),
        occ2d=mask("occ2d.u8", (h, w)),
        occ3d=mask("occ3d.u8", (n,)),
        cam=CameraIntrinsics(f=meta["f"], cx=meta["cx"], cy=meta["cy"], width=w, height=h),
        meta={k: v for k, v in meta.items() if k not in known},
    )


def write_manifest(directory: PathLike, manifest: Dict[str, Any]) -> Path:
    return write_json(Path(directory) / MANIFEST_FILE, manifest)


def read_manifest(directory: PathLike) -> Dict[str, Any]:
    path = Path(directory) / MANIFEST_FILE
    if not path.exists():
        raise DataError(f"no dataset manifest at {path}")
    manifest = read_json(path)
    if "splits" not in manifest:
        raise DataError(f"{path} has no splits")
    return manifest


def load_split(directory: PathLike, split: str) -> List[Sample]:
    """Read every sample of ``split`` in manifest order."""
    manifest = read_manifest(directory)
    if split not in manifest["splits"]:
        raise DataError(f"dataset has no split {split!r}; available: {sorted(manifest['splits'])}")
    names = manifest["splits"][split]
    if not names:
        raise DataError(f"split {split!r} is empty")
    return [read_sample(Path(directory) / name) for name in names]


# -- checkpoints -----------------------------------------------------------


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    step: int = 0
    dtype: str = "float32"
    # lowest logged loss of the run so far; None before the first iteration
    best_loss: Optional[float] = None


def save_checkpoint(directory: PathLike, checkpoint: Checkpoint) -> Path:
    """
    Write ``manifest.json`` (names, shapes, byte offsets, dtype, config, step, best loss) and one raw blob.
    """
    if checkpoint.dtype not in _BLOB_DTYPES:
        raise ContractError(f"unsupported checkpoint dtype {checkpoint.dtype}")
    blob_dtype = _BLOB_DTYPES[checkpoint.dtype]
    entries, chunks, offset = [], [], 0
    for group, arrays in (("param", checkpoint.params), ("optim", checkpoint.optimizer)):
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype=blob_dtype).tobytes()
            entries.append({"name": name, "group": group, "shape": list(np.shape(arr)), "offset": offset})
            chunks.append(data)
            offset += len(data)
    d = Path(directory)
    _write_bytes(d / CHECKPOINT_BLOB, b"".join(chunks))
    write_json(d / CHECKPOINT_MANIFEST, {
        "format": CHECKPOINT_FORMAT,
        "dtype": checkpoint.dtype,
        "step": checkpoint.step,
        "best_loss": checkpoint.best_loss,
        "config": checkpoint.config,
        "tensors": entries,
    })
    return d


def load_checkpoint(directory: PathLike) -> Checkpoint:
    d = Path(directory)
    manifest = read_json(d / CHECKPOINT_MANIFEST)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{d} is not a checkpoint directory")
    dtype = manifest["dtype"]
    if dtype not in _BLOB_DTYPES:
        raise DataError(f"{d} uses unsupported dtype {dtype}")
    blob = _read_bytes(d / CHECKPOINT_BLOB)
    params, optim = {}, {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = entry["offset"]
        end = start + count * np.dtype(_BLOB_DTYPES[dtype]).itemsize
        if end > len(blob):
            raise DataError(f"{d / CHECKPOINT_BLOB} is truncated at {entry['name']}")
        arr = np.frombuffer(blob[start:end], dtype=_BLOB_DTYPES[dtype]).reshape(shape).copy()
        (params if entry["group"] == "param" else optim)[entry["name"]] = arr
    return Checkpoint(params, optim, manifest.get("config", {}), int(manifest.get("step", 0)), dtype,
                      manifest.get("best_loss"))


# -- reports ---------------------------------------------------------------


def format_table(rows: Sequence[Dict[str, Any]], columns: Sequence[str], precision: int = 4) -> str:
    """Aligned plain-text table; floats printed with ``precision`` decimals."""
    def cell(v):
        return f"{v:.{precision}f}" if isinstance(v, float) else str(v)

    body = [[cell(row.get(c, "")) for c in columns] for row in rows]
    widths = [max([len(c)] + [len(r[i]) for r in body]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in body)
    return "\n".join(lines) + "\n"


def write_text(path: PathLike, text: str) -> Path:
    return _write_bytes(Path(path), text.encode("utf-8"))


class TrainLog:
    """CSV log with columns iter, L, L_task, L_feat, EPE2D_train."""

    def __init__(self, path: PathLike, append: bool = False):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            fresh = not (append and self.path.exists())
            self._file = open(self.path, "w" if fresh else "a", newline="", encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot open {self.path}: {exc}")
        self._writer = csv.writer(self._file)
        if fresh:
            self._writer.writerow(CSV_COLUMNS)

    def append(self, iteration: int, loss: float, loss_task: float, loss_feat: float, epe2d: float) -> None:
        self._writer.writerow([iteration, repr(loss), repr(loss_task), repr(loss_feat), repr(epe2d)])
        self._file.flush()

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "TrainLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_train_log(path: PathLike) -> List[Dict[str, float]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}")


# -- images ----------------------------------------------------------------


def write_ppm(path: PathLike, image: np.ndarray) -> Path:
    """Binary P6 image from an H×W×3 uint8 array."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise DataError(f"PPM needs an H×W×3 uint8 image, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    return _write_bytes(Path(path), f"P6\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_ppm(path: PathLike) -> np.ndarray:
    raw = _read_bytes(Path(path))
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise DataError(f"{path} is not a binary PPM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3).copy()
