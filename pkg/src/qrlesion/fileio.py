"""File formats: the QTN1 tensor container, 8-bit PGM images, flat
key=value configs and model save/load (container plus JSON sidecar)."""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from . import nn

MAGIC = b"QTN1"


class FormatError(ValueError):
    """A file does not follow the expected layout."""


class ConfigError(ValueError):
    """Bad configuration text or value."""


# ---------------------------------------------------------------------------
# tensor container


def encode_container(records) -> bytes:
    """Serialize ``{name: array}`` (or a list of pairs) in the given order."""
    items = list(records.items()) if hasattr(records, "items") else list(records)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise FormatError("record names must be unique")
    out = [MAGIC, struct.pack("<I", len(items))]
    for name, arr in items:
        raw = name.encode("ascii")
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim > 255 or len(raw) > 0xFFFF:
            raise FormatError(f"record {name!r} cannot be encoded")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_container(data: bytes) -> dict:
    """Parse container bytes into an ordered ``{name: float64 array}``."""
    if data[:4] != MAGIC:
        raise FormatError("bad magic: not a QTN1 tensor container")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("truncated container")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    records = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("ascii")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = math.prod(dims)
        arr = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
        if name in records:
            raise FormatError(f"duplicate record {name!r}")
        records[name] = arr
    if pos != len(data):
        raise FormatError("trailing bytes after last record")
    return records


def write_container(path, records) -> None:
    Path(path).write_bytes(encode_container(records))


def read_container(path) -> dict:
    return decode_container(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# PGM


def to_uint8(image, scale=None):
    """Map a 2-D array to 0..255.  Boolean masks map to {0, 255}; real maps
    are min-max scaled (or by the given ``(lo, hi)``).  Returns
    ``(pixels, (lo, hi))``."""
    a = np.asarray(image)
    if a.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    if a.dtype == bool:
        return np.where(a, 255, 0).astype(np.uint8), (0.0, 1.0)
    a = a.astype(np.float64)
    lo, hi = scale if scale is not None else (float(a.min()), float(a.max()))
    span = hi - lo if hi > lo else 1.0
    px = np.clip(np.rint((a - lo) / span * 255.0), 0, 255).astype(np.uint8)
    return px, (float(lo), float(hi))


def write_pgm(path, image, scale=None):
    """Write a binary (P5) 8-bit PGM; returns the ``(lo, hi)`` scale used."""
    px, used = to_uint8(image, scale)
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes())
    return used


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        fields.append(data[start:pos])
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise FormatError("expected an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    px = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    if px.size != w * h:
        raise FormatError("truncated PGM payload")
    return px.reshape(h, w).copy()


# ---------------------------------------------------------------------------
# key=value configs


def _parse_value(key, text, kind):
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(float(t) for t in text.replace(",", " ").split())
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {text!r}") from None


def parse_config(text: str, schema: dict) -> dict:
    """Parse ``key = value`` lines.

    ``schema`` maps each allowed key to ``(type, default)``; ``type`` is one of
    ``int``, ``float``, ``str``, ``bool`` or ``tuple`` (of floats, comma or
    space separated).  Unknown or repeated keys are errors.  Returns the
    resolved config with defaults filled in.
    """
    seen = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in schema:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen[key] = _parse_value(key, value, schema[key][0])
    return {k: seen.get(k, default) for k, (_, default) in schema.items()}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg: dict) -> str:
    """Inverse of :func:`parse_config`, keys sorted."""
    return "".join(f"{k} = {format_value(cfg[k])}\n" for k in sorted(cfg))


# ---------------------------------------------------------------------------
# network description


_LAYERS = {cls.__name__: cls for cls in (nn.Dense, nn.Conv2D, nn.Upsample2D, nn.Activation,
                                         nn.Flatten, nn.Reshape, nn.Stash, nn.Concat)}


def _layer_to_dict(layer):
    d = {"type": type(layer).__name__}
    d.update({k: list(v) if isinstance(v, tuple) else v for k, v in vars(layer).items()})
    return d


def _layer_from_dict(d):
    d = dict(d)
    cls = _LAYERS.get(d.pop("type", None))
    if cls is None:
        raise FormatError(f"unknown layer description {d}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def spec_to_dict(spec: nn.NetworkSpec) -> dict:
    return {"input_shape": list(spec.input_shape),
            "trunk": [_layer_to_dict(l) for l in spec.trunk],
            "heads": {h: [_layer_to_dict(l) for l in spec.heads[h]] for h in spec.head_names()}}


def spec_from_dict(d) -> nn.NetworkSpec:
    return nn.NetworkSpec(tuple(d["input_shape"]), [_layer_from_dict(l) for l in d["trunk"]],
                          {h: [_layer_from_dict(l) for l in ls] for h, ls in d["heads"].items()})


def state_records(spec: nn.NetworkSpec, state: nn.NetworkState, prefix: str = ""):
    """Container records for a state: parameters in canonical order, then the
    Adam moments and step counter."""
    state.check(spec)
    names = list(spec.param_shapes())
    recs = [(prefix + n, state.params[n]) for n in names]
    recs += [(f"{prefix}adam_m.{n}", state.m[n]) for n in names]
    recs += [(f"{prefix}adam_v.{n}", state.v[n]) for n in names]
    recs.append((f"{prefix}adam_step", np.array(float(state.step))))
    return recs


def state_from_records(spec: nn.NetworkSpec, records: dict, prefix: str = "") -> nn.NetworkState:
    try:
        names = list(spec.param_shapes())
        state = nn.NetworkState({n: records[prefix + n].copy() for n in names},
                                {n: records[f"{prefix}adam_m.{n}"].copy() for n in names},
                                {n: records[f"{prefix}adam_v.{n}"].copy() for n in names},
                                int(records[f"{prefix}adam_step"]))
    except KeyError as exc:
        raise FormatError(f"missing record {exc}") from None
    state.check(spec)
    return state


def save_network(stem, spec, state, meta=None):
    """Write ``stem.qtn`` (parameters) and ``stem.json`` (layout + meta)."""
    stem = Path(stem)
    write_container(stem.with_suffix(".qtn"), state_records(spec, state))
    doc = {"kind": "network", "spec": spec_to_dict(spec), "meta": meta or {}}
    stem.with_suffix(".json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_network(stem):
    stem = Path(stem)
    doc = json.loads(stem.with_suffix(".json").read_text())
    if doc.get("kind") != "network":
        raise FormatError("sidecar does not describe a network")
    spec = spec_from_dict(doc["spec"])
    return spec, state_from_records(spec, read_container(stem.with_suffix(".qtn"))), doc["meta"]


def save_vae(stem, model) -> None:
    """Write a VAE as ``stem.qtn`` plus a ``stem.json`` sidecar holding both
    layouts, the head mode and its quantile levels."""
    from .vae import Quantiles

    stem = Path(stem)
    mode = model.head_mode
    head = ({"type": "quantiles", "alpha_lo": mode.alpha_lo, "alpha_hi": mode.alpha_hi}
            if isinstance(mode, Quantiles) else {"type": "meanvar"})
    recs = (state_records(model.encoder, model.encoder_state, "encoder.")
            + state_records(model.decoder, model.decoder_state, "decoder."))
    write_container(stem.with_suffix(".qtn"), recs)
    doc = {"kind": "vae", "latent_dim": model.latent_dim, "head_mode": head,
           "encoder": spec_to_dict(model.encoder), "decoder": spec_to_dict(model.decoder)}
    stem.with_suffix(".json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_vae(stem):
    from .vae import MeanVar, Quantiles, VaeModel

    stem = Path(stem)
    doc = json.loads(stem.with_suffix(".json").read_text())
    if doc.get("kind") != "vae":
        raise FormatError("sidecar does not describe a VAE")
    head = doc["head_mode"]
    mode = (Quantiles(head["alpha_lo"], head["alpha_hi"]) if head["type"] == "quantiles"
            else MeanVar())
    recs = read_container(stem.with_suffix(".qtn"))
    enc, dec = spec_from_dict(doc["encoder"]), spec_from_dict(doc["decoder"])
    return VaeModel(enc, state_from_records(enc, recs, "encoder."),
                    dec, state_from_records(dec, recs, "decoder."),
                    int(doc["latent_dim"]), mode)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
