"""Binary checkpoints: a JSON header line plus raw little-endian tensor bytes.

The header carries a format version, the model kind, free-form metadata and a
tensor table (name, shape, dtype, byte_offset into the body).  Offsets are
contiguous; loading reproduces every array bit-exactly.
"""

import json

import numpy as np

from .errors import InputError, StateError

FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(path: str, model_kind: str, tensors: dict, meta: dict = None):
    table = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype == np.float32:
            dtype = "float32"
        elif arr.dtype == np.float64:
            dtype = "float64"
        else:
            raise InputError(f"tensor {name}: unsupported dtype {arr.dtype}")
        blob = np.ascontiguousarray(arr).astype(_DTYPES[dtype], copy=False).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                      "byte_offset": offset})
        chunks.append(blob)
        offset += len(blob)
    header = {"format_version": FORMAT_VERSION, "model_kind": model_kind,
              "meta": meta or {}, "tensors": table}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in chunks:
            fh.write(blob)


def load_checkpoint(path: str):
    """Returns (model_kind, meta, {name: array})."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise StateError(f"missing checkpoint: {path}") from exc
    newline = raw.find(b"\n")
    if newline < 0:
        raise InputError(f"{path}: no header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported format version {header.get('format_version')}")
    body = raw[newline + 1:]
    tensors = {}
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["byte_offset"]
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header["model_kind"], header["meta"], tensors


# -- model adapters -----------------------------------------------------------------

def save_teacher(path: str, model):
    meta = {
        "num_classes": model.cfg.num_classes,
        "input_size": model.cfg.input_size,
        "channels": list(model.cfg.channels),
        "roi_out": list(model.cfg.roi_out),
        "fc_width": model.cfg.fc_width,
        "top_n": model.cfg.top_n,
        "frozen": model.frozen,
    }
    save_checkpoint(path, "teacher", model.state_arrays(), meta)


def load_teacher(path: str):
    from .teacher import TeacherConfig, TeacherModel

    kind, meta, tensors = load_checkpoint(path)
    if kind != "teacher":
        raise InputError(f"{path}: expected a teacher checkpoint, got {kind!r}")
    cfg = TeacherConfig(num_classes=meta["num_classes"], input_size=meta["input_size"],
                        channels=tuple(meta["channels"]), roi_out=tuple(meta["roi_out"]),
                        fc_width=meta["fc_width"], top_n=meta["top_n"])
    model = TeacherModel(cfg, np.random.default_rng(0))
    _load_params(model, tensors, path)
    if meta.get("frozen"):
        model.freeze()
    return model


def save_student(path: str, model, temps=None):
    meta = {
        "num_classes": model.cfg.num_classes,
        "input_size": model.cfg.input_size,
        "channels": list(model.cfg.channels),
        "teacher_channels": list(model.cfg.teacher_channels),
        "fc_width": model.cfg.fc_width,
        "stage1_trained": model.stage1_trained,
    }
    tensors = model.state_arrays() if hasattr(model, "state_arrays") else \
        {p.name: p.tensor.data for p in model.parameters()}
    if temps is not None:
        for p in temps.parameters():
            tensors[p.name] = p.tensor.data
        meta["has_temperatures"] = True
    save_checkpoint(path, "student", tensors, meta)


def load_student(path: str, with_temperatures: bool = False):
    from .distill import TemperatureBank
    from .student import StudentConfig, StudentModel

    kind, meta, tensors = load_checkpoint(path)
    if kind != "student":
        raise InputError(f"{path}: expected a student checkpoint, got {kind!r}")
    cfg = StudentConfig(num_classes=meta["num_classes"], input_size=meta["input_size"],
                        channels=tuple(meta["channels"]),
                        teacher_channels=tuple(meta["teacher_channels"]),
                        fc_width=meta["fc_width"])
    model = StudentModel(cfg, np.random.default_rng(0))
    temp_arrays = {name: tensors.pop(name) for name in list(tensors)
                   if name.startswith("temps.")}
    _load_params(model, tensors, path)
    model.stage1_trained = bool(meta.get("stage1_trained", False))
    if not with_temperatures:
        return model
    temps = None
    if temp_arrays:
        some = next(iter(temp_arrays.values()))
        temps = TemperatureBank(meta["num_classes"], len(temp_arrays["temps.t_d"]),
                                dtype=some.dtype)
        for p in temps.parameters():
            p.tensor.data[...] = temp_arrays[p.name]
    return model, temps


def _load_params(model, tensors, path):
    expected = {p.name for p in model.parameters()}
    got = set(tensors)
    if expected != got:
        missing, extra = expected - got, got - expected
        raise InputError(f"{path}: parameter table mismatch "
                         f"(missing {sorted(missing)}, unexpected {sorted(extra)})")
    for p in model.parameters():
        arr = tensors[p.name]
        if tuple(arr.shape) != tuple(p.tensor.data.shape):
            raise InputError(f"{path}: {p.name} has shape {arr.shape}, "
                             f"expected {p.tensor.data.shape}")
        p.tensor.data = arr.astype(p.tensor.data.dtype, copy=False)
