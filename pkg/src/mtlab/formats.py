"""Binary image and checkpoint files, flat key=value configs and CSV reports.

Image file (little-endian)::

    b"MTIM" | u32 version=1 | u32 H | u32 W | u32 C | H*W*C f32, row-major, channel-last

Checkpoint file (little-endian)::

    b"MTFL" | u32 version=1 | u64 n | n f32 | u32 meta_len | meta_len bytes of UTF-8 JSON
"""

from __future__ import annotations

import csv
import dataclasses
import json
import struct
import typing
from pathlib import Path

import numpy as np

from .nnet import ModelConfig, ParamVec
from .synthgen import Scene

IMAGE_MAGIC = b"MTIM"
CKPT_MAGIC = b"MTFL"
VERSION = 1


class FormatError(ValueError):
    pass


def encode_image(image: np.ndarray) -> bytes:
    h, w, c = image.shape
    header = IMAGE_MAGIC + struct.pack("<IIII", VERSION, h, w, c)
    return header + np.ascontiguousarray(image, dtype="<f4").tobytes()


def decode_image(data: bytes) -> np.ndarray:
    if data[:4] != IMAGE_MAGIC:
        raise FormatError("not an MTIM image")
    version, h, w, c = struct.unpack_from("<IIII", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported image version {version}")
    body = data[20:]
    if len(body) != h * w * c * 4:
        raise FormatError("truncated image payload")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float64)


def save_scene(scene: Scene, directory: Path, stem: str) -> None:
    directory = Path(directory)
    (directory / f"{stem}.mtim").write_bytes(encode_image(scene.image))
    sidecar = {
        "boxes": [list(b) for b in scene.boxes],
        "classes": list(scene.classes),
        "weak_label": sorted(scene.weak_label),
        "domain_id": scene.domain_id,
        "seed": scene.seed,
    }
    (directory / f"{stem}.json").write_text(json.dumps(sidecar), encoding="utf-8")


def load_scene(directory: Path, stem: str) -> Scene:
    directory = Path(directory)
    image = decode_image((directory / f"{stem}.mtim").read_bytes())
    meta = json.loads((directory / f"{stem}.json").read_text(encoding="utf-8"))
    return Scene(image=image, boxes=[tuple(b) for b in meta["boxes"]],
                 classes=list(meta["classes"]), weak_label=frozenset(meta["weak_label"]),
                 domain_id=meta["domain_id"], seed=meta["seed"])


def save_dataset(dataset: dict[str, list[Scene]], root: Path) -> None:
    """One sub-directory per split (``val/s2`` becomes ``val_s2``)."""
    root = Path(root)
    for split, scenes in dataset.items():
        d = root / split.replace("/", "_")
        d.mkdir(parents=True, exist_ok=True)
        for i, sc in enumerate(scenes):
            save_scene(sc, d, f"{i:05d}")


def load_dataset(root: Path) -> dict[str, list[Scene]]:
    root = Path(root)
    out = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        stems = sorted(p.stem for p in d.glob("*.mtim"))
        out[d.name.replace("_", "/", 1) if d.name.startswith(("val_", "t_")) else d.name] = [
            load_scene(d, s) for s in stems]
    return out


def encode_checkpoint(params: ParamVec, metadata: dict) -> bytes:
    values = np.ascontiguousarray(params.values, dtype="<f4")
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return (CKPT_MAGIC + struct.pack("<IQ", VERSION, values.size) + values.tobytes()
            + struct.pack("<I", len(meta)) + meta)


def decode_checkpoint(data: bytes) -> tuple[ParamVec, dict]:
    if data[:4] != CKPT_MAGIC:
        raise FormatError("not an MTFL checkpoint")
    version, n = struct.unpack_from("<IQ", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = 16
    end = start + 4 * n
    if len(data) < end + 4:
        raise FormatError("truncated checkpoint")
    values = np.frombuffer(data[start:end], dtype="<f4").astype(np.float64)
    (meta_len,) = struct.unpack_from("<I", data, end)
    meta_bytes = data[end + 4:end + 4 + meta_len]
    if len(meta_bytes) != meta_len:
        raise FormatError("truncated checkpoint metadata")
    metadata = json.loads(meta_bytes.decode("utf-8"))
    config = ModelConfig.from_dict(metadata["config"])
    if config.param_count != n:
        raise FormatError("parameter count does not match the stored config")
    return ParamVec(values, config.config_hash()), metadata


def checkpoint_metadata(config: ModelConfig, iteration: int, mode: str, seed: int,
                        network: str = "teacher") -> dict:
    return {"config": config.to_dict(), "iteration": int(iteration), "mode": mode,
            "seed": int(seed), "network": network}


def save_checkpoint(path: Path, params: ParamVec, metadata: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(params, metadata))


def load_checkpoint(path: Path) -> tuple[ParamVec, dict]:
    return decode_checkpoint(Path(path).read_bytes())


def _coerce(value: str, annotation):
    if isinstance(annotation, str):
        annotation = {"float": float, "int": int, "str": str, "bool": bool}.get(annotation, str)
    if annotation is bool:
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"bad boolean {value!r}")
    return annotation(value)


def parse_kv(text: str) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in out:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_dataclass_config(cls, text: str, **overrides):
    """Build dataclass ``cls`` from key=value text; unknown keys are an error."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    raw = parse_kv(text)
    unknown = set(raw) - names
    if unknown:
        raise FormatError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {k: _coerce(v, hints[k]) for k, v in raw.items()}
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**kwargs)


def dump_dataclass_config(obj) -> str:
    return "".join(f"{f.name}={getattr(obj, f.name)}\n" for f in dataclasses.fields(obj))


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
