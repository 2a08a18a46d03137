"""Checkpoint files, scratch initialisation and encoder-only weight transfer.

File layout (little-endian)::

    b"SEGW" | u32 version=1 | u32 meta_len | meta (UTF-8 key=value lines)
    u32 count | count x [u16 name_len | name | u8 dtype | u8 rank |
                         u32 extents[rank] | float32 payload]
    u32 crc32 of everything before it
"""
import logging
import struct
import zlib
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .checkpoint import Checkpoint
from .errors import FormatError, ShapeError
from .tensor import DTYPE

log = logging.getLogger(__name__)

MAGIC = b"SEGW"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4")}


def _escape(s):
    return s.replace("\\", "\\\\").replace("\n", "\\n")


def _unescape(s):
    out, i = [], 0
    while i < len(s):
        if s[i] == "\\" and i + 1 < len(s):
            out.append("\n" if s[i + 1] == "n" else s[i + 1])
            i += 2
        else:
            out.append(s[i])
            i += 1
    return "".join(out)


def to_bytes(ckpt):
    meta = "".join(f"{k}={_escape(str(v))}\n" for k, v in ckpt.metadata.items()).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(ckpt))]
    for name, t in ckpt.items():
        raw = name.encode("utf-8")
        arr = np.asarray(t, dtype="<f4", order="C")   # ascontiguousarray would make 0-d into 1-d
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf):
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a checkpoint file", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    (meta_len,) = r.unpack("<I", "metadata length")
    meta_at = r.pos
    try:
        meta_text = r.take(meta_len, "metadata").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("metadata is not valid UTF-8", meta_at) from exc
    metadata = {}
    for line in meta_text.splitlines():
        k, _, v = line.partition("=")
        metadata[k] = _unescape(v)
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        at = r.pos
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        code, rank = r.unpack("<BB", "dtype/rank")
        if code not in DTYPE_CODES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code}", at)
        shape = r.unpack(f"<{rank}I", "extents")
        dt = DTYPE_CODES[code]
        n = int(np.prod(shape)) if rank else 1
        payload = r.take(n * dt.itemsize, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype=dt).reshape(shape).astype(DTYPE)
    crc_at = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if crc != zlib.crc32(buf[:crc_at]) & 0xFFFFFFFF:
        raise FormatError("checksum mismatch", crc_at)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after checksum", r.pos)
    return Checkpoint(tensors, metadata)


def save(ckpt, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


# ---------------------------------------------------------------- initialisation


def _init_tensor(name, shape, rng):
    slot = name.rsplit(".", 1)[1]
    if slot == "weight":
        # He init; for both conv and transposed kernels axis 1..3 is the fan-in
        fan_in = shape[1] * shape[2] * shape[3]
        return (rng.standard_normal(shape, dtype=DTYPE) * DTYPE(np.sqrt(2.0 / fan_in))).astype(DTYPE)
    if slot in ("gamma", "running_var"):
        return np.ones(shape, DTYPE)
    return np.zeros(shape, DTYPE)


def scratch_init(spec, rng):
    """Random He-normal kernels, zero biases, identity batch-norm."""
    params = {name: _init_tensor(name, shape, rng) for name, shape in spec.param_shapes().items()}
    return Checkpoint(params, {"arch": spec.to_text()})


@dataclass
class TransferReport:
    copied: list = field(default_factory=list)
    initialized: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def load_mapping(preset):
    """Donor -> target name table shipped for ``preset`` (empty if none)."""
    res = resources.files("lesionseg") / "mappings" / f"{preset.lower()}.txt"
    if not res.is_file():
        return {}
    return parse_mapping(res.read_text(encoding="utf-8"))


def parse_mapping(text):
    table = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            donor, target = line.split()
            table[target] = donor
    return table


def transfer_init(target_spec, donor, rng, policy="encoder_only", mapping=None):
    """Copy encoder tensors from ``donor`` and scratch-initialise the rest.

    ``mapping`` maps target names to donor names.  When omitted, every
    encoder tensor is looked up under its own name, which is what transfer
    between two networks built by this package needs.  Returns
    ``(checkpoint, report)``; the donor is never modified.
    """
    if policy != "encoder_only":
        raise ValueError(f"unsupported transfer policy {policy!r}")
    params = scratch_init(target_spec, rng)
    report = TransferReport()
    encoder = set(target_spec.encoder_param_names())
    if mapping is None:
        mapping = {n: n for n in target_spec.encoder_param_names()}
    for name in params.names():
        if name not in encoder:
            report.initialized.append(name)
            continue
        src = mapping.get(name)
        if src is None or src not in donor:
            report.initialized.append(name)
            if len(donor):
                msg = f"encoder tensor {name!r} has no donor counterpart, initialised randomly"
                report.warnings.append(msg)
                log.warning(msg)
            continue
        if tuple(donor[src].shape) != tuple(params[name].shape):
            raise ShapeError(
                f"donor tensor {src!r} has shape {donor[src].shape} but target {name!r} needs {params[name].shape}")
        params[name] = np.array(donor[src], dtype=DTYPE, copy=True)
        report.copied.append(name)
    used = set(mapping.get(n) for n in report.copied)
    report.skipped = [n for n in donor.names() if n not in used]
    return params, report


def mapping_table(preset, donor_layout):
    """Render a donor->target table for a preset given ``donor_layout``.

    ``donor_layout`` lists the donor's conv counts per block, e.g. VGG16's
    (2, 2, 3, 3, 3); donor names follow the ``conv<block>_<i>`` convention.
    """
    from .netbuilder import build_preset

    spec = build_preset(preset)
    donor_convs = [f"conv{b}_{i}" for b, n in enumerate(donor_layout, start=1) for i in range(1, n + 1)]
    target_convs = [n.id for n in spec.nodes if n.kind == "conv" and n.group.startswith("enc")]
    lines = [f"# donor -> target for {preset}"]
    for d, t in zip(donor_convs, target_convs):
        lines.append(f"{d}.weight {t}.weight")
        lines.append(f"{d}.bias {t}.bias")
    return "\n".join(lines) + "\n"
