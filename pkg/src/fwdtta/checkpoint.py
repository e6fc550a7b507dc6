"""Little-endian tagged container for models, source statistics and knowledge.

Layout (see docs/checkpoint_format.md):

    magic "ZOAF" | u16 version | u16 arch tag | u32 section count
    repeated: 4-byte ASCII tag | u64 payload length | payload
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .knowledge import DomainVector, KnowledgeBase
from .model import FeatureStats, LayeredVector, ParamSchema, QuantizedModel
from .quant import QuantSpec

MAGIC = b"ZOAF"
VERSION = 1
ARCH_TAGS = {"none": 0, "mlp": 1, "cnn": 2}


class CheckpointError(ValueError):
    pass


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt: str, *vals):
        self.buf.write(struct.pack("<" + fmt, *vals))

    def str(self, s: str):
        raw = s.encode("utf-8")
        self.pack("H", len(raw))
        self.buf.write(raw)

    def f64(self, arr):
        self.buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def bytes(self) -> bytes:
        return self.buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise CheckpointError("truncated payload")
        vals = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return vals if len(vals) > 1 else vals[0]

    def str(self) -> str:
        n = self.unpack("H")
        out = self.raw[self.pos:self.pos + n].decode("utf-8")
        self.pos += n
        return out

    def f64(self, count: int) -> np.ndarray:
        end = self.pos + 8 * count
        if end > len(self.raw):
            raise CheckpointError("truncated payload")
        arr = np.frombuffer(self.raw[self.pos:end], dtype="<f8").astype(np.float64)
        self.pos = end
        return arr


def write_container(path: str | Path | None, sections: dict[str, bytes], arch_kind: str = "none") -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<HHI", VERSION, ARCH_TAGS[arch_kind], len(sections))
    for tag, payload in sections.items():
        tag_b = tag.encode("ascii")
        if len(tag_b) != 4:
            raise CheckpointError(f"section tag must be 4 ASCII bytes: {tag!r}")
        out += tag_b + struct.pack("<Q", len(payload)) + payload
    data = bytes(out)
    if path is not None:
        Path(path).write_bytes(data)
    return data


def read_container(src: str | Path | bytes) -> tuple[dict, dict[str, bytes]]:
    raw = src if isinstance(src, (bytes, bytearray)) else Path(src).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint container")
    if len(raw) < 12:
        raise CheckpointError("truncated header")
    version, arch_tag, count = struct.unpack_from("<HHI", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    pos = 12
    sections = {}
    for _ in range(count):
        if pos + 12 > len(raw):
            raise CheckpointError("truncated section header")
        tag = raw[pos:pos + 4].decode("ascii")
        (length,) = struct.unpack_from("<Q", raw, pos + 4)
        pos += 12
        if pos + length > len(raw):
            raise CheckpointError(f"section {tag} runs past end of file")
        sections[tag] = raw[pos:pos + length]
        pos += length
    kinds = {v: k for k, v in ARCH_TAGS.items()}
    return {"version": version, "arch": kinds.get(arch_tag, "unknown")}, sections


# ---------------------------------------------------------------------------
# sections


def encode_schema(schema: ParamSchema) -> bytes:
    w = _Writer()
    w.pack("I", schema.num_layers)
    for name, size, frozen in zip(schema.names, schema.sizes, schema.frozen):
        w.str(name)
        w.pack("IB", size, int(frozen))
    return w.bytes()


def decode_schema(raw: bytes) -> ParamSchema:
    r = _Reader(raw)
    names, sizes, frozen = [], [], []
    for _ in range(r.unpack("I")):
        names.append(r.str())
        size, fz = r.unpack("IB")
        sizes.append(size)
        frozen.append(bool(fz))
    return ParamSchema(tuple(names), tuple(sizes), tuple(frozen))


def encode_model(model: QuantizedModel) -> dict[str, bytes]:
    arch = _Writer()
    arch.str(json.dumps(model.arch, sort_keys=True))

    q = _Writer()
    q.pack("I", len(model.quant))
    for name in sorted(model.quant):
        spec = model.quant[name]
        q.str(name)
        q.pack("Bd", 0 if spec is None else spec.bits, 0.0 if spec is None else spec.a)

    wt = _Writer()
    wt.pack("I", len(model.weights))
    for name in sorted(model.weights):
        arr = model.weights[name]
        wt.str(name)
        wt.pack("B", arr.ndim)
        wt.pack(f"{arr.ndim}I", *arr.shape)
        wt.f64(arr)

    nm = _Writer()
    nm.f64(model.source_params.data)
    nm.pack("I", len(model.running))
    for name in sorted(model.running):
        mean, var = model.running[name]
        nm.str(name)
        nm.pack("I", mean.size)
        nm.f64(mean)
        nm.f64(var)

    return {"ARCH": arch.bytes(), "SCHM": encode_schema(model.schema), "QSPC": q.bytes(),
            "WGHT": wt.bytes(), "NORM": nm.bytes()}


def decode_model(sections: dict[str, bytes]) -> QuantizedModel:
    for tag in ("ARCH", "SCHM", "QSPC", "WGHT", "NORM"):
        if tag not in sections:
            raise CheckpointError(f"missing section {tag}")
    arch = json.loads(_Reader(sections["ARCH"]).str())
    schema = decode_schema(sections["SCHM"])

    r = _Reader(sections["QSPC"])
    quant = {}
    for _ in range(r.unpack("I")):
        name = r.str()
        bits, a = r.unpack("Bd")
        quant[name] = None if bits == 0 else QuantSpec(bits, a)

    r = _Reader(sections["WGHT"])
    weights = {}
    for _ in range(r.unpack("I")):
        name = r.str()
        ndim = r.unpack("B")
        shape = r.unpack(f"{ndim}I") if ndim else ()
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        weights[name] = r.f64(int(np.prod(shape))).reshape(shape)

    r = _Reader(sections["NORM"])
    theta0 = LayeredVector(schema, r.f64(schema.total))
    running = {}
    for _ in range(r.unpack("I")):
        name = r.str()
        c = r.unpack("I")
        running[name] = (r.f64(c), r.f64(c))
    return QuantizedModel(arch, weights, quant, theta0, running)


def encode_stats(stats: FeatureStats) -> bytes:
    w = _Writer()
    w.pack("I", stats.num_blocks)
    for m, s in zip(stats.means, stats.stds):
        w.pack("I", m.size)
        w.f64(m)
        w.f64(s)
    return w.bytes()


def decode_stats(raw: bytes) -> FeatureStats:
    r = _Reader(raw)
    means, stds = [], []
    for _ in range(r.unpack("I")):
        c = r.unpack("I")
        means.append(r.f64(c))
        stds.append(r.f64(c))
    return FeatureStats(means, stds)


def encode_knowledge(kb: KnowledgeBase) -> bytes:
    w = _Writer()
    w.pack("IdIdQ", len(kb), kb.temperature, kb.capacity, kb.magnitude_cap, kb.next_index)
    w.f64(kb.logits)
    for v in kb.vectors:
        w.pack("Q", v.index)
    w.pack("I", kb.schema.total)
    for v in kb.vectors:
        w.f64(v.delta.data)
    return w.bytes()


def decode_knowledge(raw: bytes, schema: ParamSchema) -> KnowledgeBase:
    r = _Reader(raw)
    count, temperature, capacity, cap, next_index = r.unpack("IdIdQ")
    logits = r.f64(count)
    indices = [r.unpack("Q") for _ in range(count)]
    total = r.unpack("I")
    if total != schema.total:
        raise CheckpointError("knowledge payload does not match the model schema")
    vectors = [DomainVector(LayeredVector(schema, r.f64(total)), idx) for idx in indices]
    return KnowledgeBase(schema, temperature, capacity, cap, vectors, logits, next_index)


# ---------------------------------------------------------------------------
# file-level helpers


def save_checkpoint(path: str | Path | None, model: QuantizedModel, stats: FeatureStats | None = None,
                    kb: KnowledgeBase | None = None) -> bytes:
    sections = encode_model(model)
    if stats is not None:
        sections["STAT"] = encode_stats(stats)
    if kb is not None:
        sections["KNOW"] = encode_knowledge(kb)
    return write_container(path, sections, model.arch["kind"])


def load_checkpoint(src) -> tuple[QuantizedModel, FeatureStats | None, KnowledgeBase | None]:
    _, sections = read_container(src)
    model = decode_model(sections)
    stats = decode_stats(sections["STAT"]) if "STAT" in sections else None
    kb = decode_knowledge(sections["KNOW"], model.schema) if "KNOW" in sections else None
    return model, stats, kb
