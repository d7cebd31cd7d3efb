"""Network specs, weight ingestion, dataset readers, and input packing.

Formats:

* network config — JSON: ``{"name", "input": {channels, height, width},
  "timesteps", "layers": [...]}``; layer entries are documented in the
  README and validated structurally here (shape composition included).
* weight CSVs — ``layer<i>_weight.csv`` / ``layer<i>_bias.csv``, decimal
  text, row-major, one row per output channel (conv) or neuron (fc).
  ``i`` counts weight-bearing units in network order; a residual block
  occupies consecutive indices: main conv1, main conv2, then the shortcut
  conv when the block changes shape.  Missing bias files mean zero bias.
* IDX — big-endian, magic 0x00000803 (images) / 0x00000801 (labels).
* SPKF v1 — per-timestep frame tensors:
  ASCII header line ``SPKF v1 T c h w count\\n``, then
  count*T*c*h*w little-endian float32 values, then count label bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, FormatError, ValidationError
from .layers import Geometry

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SPKF_MAGIC = "SPKF"
SPKF_VERSION = "v1"


# --------------------------------------------------------------------------
# network specs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LifSettings:
    scale: float = 1.0
    tau: float = 0.25
    threshold: float = 0.5
    degree: int = 50


@dataclass(frozen=True)
class LayerEntry:
    kind: str                      # conv | avgpool | fc | residual
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    n_in: int = 0
    n_out: int = 0
    lif: LifSettings | None = None
    lif_mid: LifSettings | None = None   # residual only: after main conv1
    lif_out: LifSettings | None = None   # residual only: after the join


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input: Geometry
    timesteps: int
    entries: tuple[LayerEntry, ...]
    geometries: tuple[Geometry, ...] = field(default=())  # after each entry

    @property
    def output_size(self) -> int:
        return self.geometries[-1].flat if self.entries else self.input.flat


def _parse_lif(obj, where: str) -> LifSettings:
    if not isinstance(obj, dict):
        raise ValidationError(f"{where}: lif settings must be an object")
    known = {"scale", "tau", "threshold", "degree"}
    bad = set(obj) - known
    if bad:
        raise ValidationError(f"{where}: unknown lif keys {sorted(bad)}")
    s = LifSettings(
        scale=float(obj.get("scale", 1.0)),
        tau=float(obj.get("tau", 0.25)),
        threshold=float(obj.get("threshold", 0.5)),
        degree=int(obj.get("degree", 50)),
    )
    if s.scale <= 0:
        raise ValidationError(f"{where}: lif scale must be positive")
    if not 0.0 < s.tau < 1.0:
        raise ValidationError(f"{where}: lif tau must lie in (0,1)")
    return s


def _require_int(obj, key: str, where: str, minimum: int = 1) -> int:
    if key not in obj:
        raise ValidationError(f"{where}: missing required key {key!r}")
    v = obj[key]
    if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
        raise ValidationError(f"{where}: {key} must be an integer >= {minimum}")
    return v


def parse_network(config_text: str) -> NetworkSpec:
    """Parse and validate a network config; raises ValidationError with the
    offending layer index on any structural or shape-composition problem."""
    try:
        doc = json.loads(config_text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"network config is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ValidationError("network config must be a JSON object")
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        raise ValidationError("network config needs a non-empty name")
    inp = doc.get("input")
    if not isinstance(inp, dict):
        raise ValidationError("network config needs an input shape object")
    geom = Geometry(_require_int(inp, "channels", "input"),
                    _require_int(inp, "height", "input"),
                    _require_int(inp, "width", "input"))
    timesteps = _require_int(doc, "timesteps", "config")
    layers = doc.get("layers")
    if not isinstance(layers, list):
        raise ValidationError("network config needs a layers array")

    entries: list[LayerEntry] = []
    geoms: list[Geometry] = []
    cur = geom
    for i, obj in enumerate(layers):
        where = f"layer {i}"
        if not isinstance(obj, dict) or "type" not in obj:
            raise ValidationError(f"{where}: each layer needs a type")
        kind = obj["type"]
        if kind == "conv":
            out_ch = _require_int(obj, "out_ch", where)
            k = _require_int(obj, "kernel", where)
            stride = _require_int(obj, "stride", where)
            padding = _require_int(obj, "padding", where, minimum=0)
            in_ch = obj.get("in_ch", cur.c)
            if in_ch != cur.c:
                raise ValidationError(
                    f"{where}: in_ch {in_ch} does not match incoming "
                    f"channels {cur.c}")
            h = (cur.h + 2 * padding - k) // stride + 1
            w = (cur.w + 2 * padding - k) // stride + 1
            if h < 1 or w < 1 or cur.h + 2 * padding < k:
                raise ValidationError(f"{where}: kernel does not fit input")
            lif = _parse_lif(obj["lif"], where) if "lif" in obj else None
            entries.append(LayerEntry("conv", in_ch=in_ch, out_ch=out_ch,
                                      kernel=k, stride=stride,
                                      padding=padding, lif=lif))
            cur = Geometry(out_ch, h, w)
        elif kind == "avgpool":
            k = _require_int(obj, "kernel", where)
            stride = _require_int(obj, "stride", where)
            if obj.get("padding", 0) != 0:
                raise ValidationError(f"{where}: pooling padding unsupported")
            h = (cur.h - k) // stride + 1
            w = (cur.w - k) // stride + 1
            if h < 1 or w < 1 or cur.h < k or cur.w < k:
                raise ValidationError(f"{where}: pool window does not fit")
            lif = _parse_lif(obj["lif"], where) if "lif" in obj else None
            entries.append(LayerEntry("avgpool", in_ch=cur.c, out_ch=cur.c,
                                      kernel=k, stride=stride, lif=lif))
            cur = Geometry(cur.c, h, w)
        elif kind == "fc":
            n_out = _require_int(obj, "out", where)
            n_in = obj.get("in", cur.flat)
            if n_in != cur.flat:
                raise ValidationError(
                    f"{where}: fc expects {n_in} inputs but receives "
                    f"{cur.flat}")
            lif = _parse_lif(obj["lif"], where) if "lif" in obj else None
            entries.append(LayerEntry("fc", n_in=n_in, n_out=n_out, lif=lif))
            cur = Geometry(1, 1, n_out)
        elif kind == "residual":
            out_ch = _require_int(obj, "out_ch", where)
            stride = _require_int(obj, "stride", where)
            in_ch = obj.get("in_ch", cur.c)
            if in_ch != cur.c:
                raise ValidationError(
                    f"{where}: in_ch {in_ch} does not match incoming "
                    f"channels {cur.c}")
            if "lif_mid" not in obj or "lif_out" not in obj:
                raise ValidationError(
                    f"{where}: residual blocks need lif_mid and lif_out")
            h = (cur.h + 2 - 3) // stride + 1
            w = (cur.w + 2 - 3) // stride + 1
            if h < 1 or w < 1:
                raise ValidationError(f"{where}: block does not fit input")
            entries.append(LayerEntry(
                "residual", in_ch=in_ch, out_ch=out_ch, kernel=3,
                stride=stride, padding=1,
                lif_mid=_parse_lif(obj["lif_mid"], where),
                lif_out=_parse_lif(obj["lif_out"], where)))
            cur = Geometry(out_ch, h, w)
        else:
            raise ValidationError(f"{where}: unknown layer type {kind!r}")
        geoms.append(cur)

    return NetworkSpec(name=name, input=geom, timesteps=timesteps,
                       entries=tuple(entries), geometries=tuple(geoms))


def _lif_to_json(s: LifSettings) -> dict:
    return {"scale": s.scale, "tau": s.tau, "threshold": s.threshold,
            "degree": s.degree}


def network_to_json(spec: NetworkSpec) -> str:
    """Inverse of parse_network (modulo key ordering)."""
    layers = []
    for e in spec.entries:
        if e.kind == "conv":
            obj = {"type": "conv", "in_ch": e.in_ch, "out_ch": e.out_ch,
                   "kernel": e.kernel, "stride": e.stride,
                   "padding": e.padding}
        elif e.kind == "avgpool":
            obj = {"type": "avgpool", "kernel": e.kernel, "stride": e.stride}
        elif e.kind == "fc":
            obj = {"type": "fc", "in": e.n_in, "out": e.n_out}
        else:
            obj = {"type": "residual", "in_ch": e.in_ch, "out_ch": e.out_ch,
                   "stride": e.stride,
                   "lif_mid": _lif_to_json(e.lif_mid),
                   "lif_out": _lif_to_json(e.lif_out)}
        if e.lif is not None:
            obj["lif"] = _lif_to_json(e.lif)
        layers.append(obj)
    doc = {
        "name": spec.name,
        "input": {"channels": spec.input.c, "height": spec.input.h,
                  "width": spec.input.w},
        "timesteps": spec.timesteps,
        "layers": layers,
    }
    return json.dumps(doc, indent=2) + "\n"


# --------------------------------------------------------------------------
# weight files
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class WeightUnit:
    """One CSV-backed tensor: csv rows are (rows, cols); tensor_shape is
    what the planner consumes."""
    index: int
    name: str
    rows: int
    cols: int
    tensor_shape: tuple[int, ...]


def weight_units(spec: NetworkSpec) -> list[WeightUnit]:
    """Weight-bearing units in file order (defines the layer<i> numbering)."""
    units: list[WeightUnit] = []
    cur = spec.input
    idx = 0

    def emit(name, rows, cols, shape):
        nonlocal idx
        units.append(WeightUnit(idx, name, rows, cols, shape))
        idx += 1

    for i, e in enumerate(spec.entries):
        if e.kind == "conv":
            emit(f"conv{i}", e.out_ch, e.in_ch * e.kernel * e.kernel,
                 (e.out_ch, e.in_ch, e.kernel, e.kernel))
            cur = spec.geometries[i]
        elif e.kind == "fc":
            emit(f"fc{i}", e.n_out, e.n_in, (e.n_out, e.n_in))
            cur = spec.geometries[i]
        elif e.kind == "residual":
            emit(f"block{i}.conv1", e.out_ch, e.in_ch * 9,
                 (e.out_ch, e.in_ch, 3, 3))
            emit(f"block{i}.conv2", e.out_ch, e.out_ch * 9,
                 (e.out_ch, e.out_ch, 3, 3))
            if e.stride != 1 or e.in_ch != e.out_ch:
                emit(f"block{i}.shortcut", e.out_ch, e.in_ch,
                     (e.out_ch, e.in_ch, 1, 1))
            cur = spec.geometries[i]
        else:
            cur = spec.geometries[i]
    return units


def _read_csv_matrix(path: Path) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise ValidationError(f"{path.name}: unreadable CSV ({e})") from e
    return data


def load_weights_csv(directory, spec: NetworkSpec) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Load ``layer<i>_weight.csv`` (+ optional bias) for every unit.

    Returns {unit index: (weight tensor, bias vector)}; every shape is
    validated against the spec before anything is returned.
    """
    directory = Path(directory)
    out: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for u in weight_units(spec):
        wpath = directory / f"layer{u.index}_weight.csv"
        if not wpath.exists():
            raise ValidationError(f"missing weight file {wpath.name} "
                                  f"(unit {u.name})")
        mat = _read_csv_matrix(wpath)
        if mat.shape != (u.rows, u.cols):
            raise ValidationError(
                f"{wpath.name}: expected {u.rows}x{u.cols} for {u.name}, "
                f"got {mat.shape[0]}x{mat.shape[1]}")
        bpath = directory / f"layer{u.index}_bias.csv"
        if bpath.exists():
            bias = _read_csv_matrix(bpath).reshape(-1)
            if bias.size != u.rows:
                raise ValidationError(
                    f"{bpath.name}: expected {u.rows} bias values for "
                    f"{u.name}, got {bias.size}")
        else:
            bias = np.zeros(u.rows)
        out[u.index] = (mat.reshape(u.tensor_shape), bias)
    return out


def save_weights_csv(directory, spec: NetworkSpec, weights) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for u in weight_units(spec):
        w, b = weights[u.index]
        np.savetxt(directory / f"layer{u.index}_weight.csv",
                   np.asarray(w).reshape(u.rows, u.cols), delimiter=",")
        np.savetxt(directory / f"layer{u.index}_bias.csv",
                   np.asarray(b).reshape(u.rows, 1), delimiter=",")


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass
class DatasetFrames:
    data: np.ndarray      # (count, T, c, h, w) float64
    labels: np.ndarray    # (count,) uint8

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def timesteps(self) -> int:
        return self.data.shape[1]

    @property
    def geometry(self) -> Geometry:
        return Geometry(*self.data.shape[2:])


def read_mnist_idx(images_path, labels_path) -> DatasetFrames:
    """Static grayscale images as single-timestep frames, pixels in [0,1]."""
    raw = Path(images_path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{images_path}: truncated IDX header")
    magic, count, h, w = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: bad IDX magic {magic:#010x}")
    need = 16 + count * h * w
    if len(raw) < need:
        raise FormatError(f"{images_path}: expected {need} bytes, "
                          f"got {len(raw)}")
    pixels = np.frombuffer(raw[16:need], dtype=np.uint8)
    data = pixels.reshape(count, 1, 1, h, w).astype(np.float64) / 255.0

    lraw = Path(labels_path).read_bytes()
    if len(lraw) < 8:
        raise FormatError(f"{labels_path}: truncated IDX header")
    lmagic, lcount = struct.unpack(">II", lraw[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad IDX magic {lmagic:#010x}")
    if lcount != count:
        raise FormatError(f"label count {lcount} != image count {count}")
    if len(lraw) < 8 + count:
        raise FormatError(f"{labels_path}: truncated label payload")
    labels = np.frombuffer(lraw[8 : 8 + count], dtype=np.uint8).copy()
    return DatasetFrames(data=data, labels=labels)


def write_mnist_idx(images_path, labels_path, images: np.ndarray,
                    labels: np.ndarray) -> None:
    """Inverse of read_mnist_idx for fixture generation; images in [0,1]."""
    images = np.asarray(images)
    count, h, w = images.shape
    payload = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, h, w))
        f.write(payload.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, count))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def read_frames_bin(path) -> DatasetFrames:
    """SPKF v1 reader; see the module docstring for the byte layout."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0 or nl > 120:
        raise FormatError(f"{path}: missing SPKF header line")
    parts = raw[:nl].decode("ascii", errors="replace").split()
    if len(parts) != 7 or parts[0] != SPKF_MAGIC or parts[1] != SPKF_VERSION:
        raise FormatError(f"{path}: bad SPKF header {raw[:nl]!r}")
    try:
        t, c, h, w, count = (int(p) for p in parts[2:])
    except ValueError as e:
        raise FormatError(f"{path}: non-integer SPKF dims") from e
    if min(t, c, h, w) < 1 or count < 0:
        raise FormatError(f"{path}: invalid SPKF dims")
    n_float = count * t * c * h * w
    need = nl + 1 + 4 * n_float + count
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes, got {len(raw)}")
    body = np.frombuffer(raw, dtype="<f4", count=n_float, offset=nl + 1)
    data = body.reshape(count, t, c, h, w).astype(np.float64)
    labels = np.frombuffer(raw[nl + 1 + 4 * n_float :],
                           dtype=np.uint8).copy()
    return DatasetFrames(data=data, labels=labels)


def write_frames_bin(path, frames: DatasetFrames) -> None:
    count, t, c, h, w = frames.data.shape
    with open(path, "wb") as f:
        f.write(f"SPKF v1 {t} {c} {h} {w} {count}\n".encode("ascii"))
        f.write(frames.data.astype("<f4").tobytes())
        f.write(np.asarray(frames.labels, dtype=np.uint8).tobytes())


def read_dataset(path, labels_path=None) -> DatasetFrames:
    """Dispatch on extension: .idx/.idx3-ubyte pairs or .spkf files."""
    p = str(path)
    if p.endswith(".spkf"):
        return read_frames_bin(path)
    if labels_path is None:
        raise ValidationError("IDX datasets need a labels file")
    return read_mnist_idx(path, labels_path)


# --------------------------------------------------------------------------
# packing
# --------------------------------------------------------------------------

def pack_frames(sample: np.ndarray, timesteps: int, slots: int) -> np.ndarray:
    """One sample (T0, c, h, w) -> (timesteps, slots) channel-major rows.

    Single-frame samples (T0 = 1, static images) are replicated across the
    requested timesteps; anything else must match exactly.
    """
    sample = np.asarray(sample, dtype=np.float64)
    if sample.ndim != 4:
        raise ValidationError("sample must be (T, c, h, w)")
    t0 = sample.shape[0]
    flat = sample.shape[1] * sample.shape[2] * sample.shape[3]
    if flat > slots:
        raise CapacityError("input", flat, slots)
    if t0 == timesteps:
        frames = sample
    elif t0 == 1:
        frames = np.repeat(sample, timesteps, axis=0)
    else:
        raise ValidationError(
            f"sample has {t0} timesteps, network expects {timesteps}")
    out = np.zeros((timesteps, slots))
    out[:, :flat] = frames.reshape(timesteps, flat)
    return out
