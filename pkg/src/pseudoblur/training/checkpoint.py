"""Single-file checkpoint archive.

Layout (little-endian)::

    magic    8 bytes  b"PBLURCKP"
    version  u32
    stage    u16 length + utf-8
    seed     u64
    meta     u32 length + utf-8 JSON (step, arch per role, optimizer hyper-parameters)
    count    u32
    records  count x (u16 length + utf-8 name, u8 dtype (0 = float32),
                      u8 rank, rank x u32 dims, payload)

Record names are ``<role>/<param>`` for parameters and ``<role>@m/<param>``,
``<role>@v/<param>`` for Adam moment buffers. Role ``main`` is the network
the checkpoint is about; training stages add their auxiliary networks
(discriminators) under other roles.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import IncompatibleCheckpointError
from ..networks import ParamSet
from .optim import OptimState

MAGIC = b"PBLURCKP"
VERSION = 1
_F32 = 0


@dataclass
class Checkpoint:
    stage_tag: str
    seed: int
    nets: "OrderedDict[str, ParamSet]"
    optims: dict[str, OptimState] = field(default_factory=dict)
    step: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def params(self) -> ParamSet:
        return self.nets["main"]


def _pack_str(s: str, width: str = "<H") -> bytes:
    b = s.encode("utf-8")
    return struct.pack(width, len(b)) + b


def _record(name: str, t: torch.Tensor) -> bytes:
    arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
    head = _pack_str(name) + struct.pack("<BB", _F32, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path: str | Path, params: ParamSet, optim: OptimState | None, stage_tag: str,
                    seed: int, *, step: int = 0, aux: dict | None = None,
                    extra: dict | None = None) -> Path:
    """Write ``params`` (role ``main``) plus optional auxiliary (ParamSet, OptimState) roles."""
    roles = OrderedDict(main=(params, optim))
    # sorted so a loaded checkpoint re-saves to the same bytes
    for role, value in sorted((aux or {}).items()):
        roles[role] = value
    meta = {"step": int(step), "roles": {}, "extra": extra or {}}
    records = []
    for role, (ps, opt) in roles.items():
        meta["roles"][role] = {"arch": ps.arch, "stage_tag": ps.stage_tag,
                               "optim": opt.hyper() if opt is not None else None}
        for name, t in ps.items():
            records.append(_record(f"{role}/{name}", t))
        if opt is not None and opt.kind == "adam":
            for buf, table in (("m", opt.m), ("v", opt.v)):
                for name in ps.names():
                    if name in table:
                        records.append(_record(f"{role}@{buf}/{name}", table[name]))
    body = [MAGIC, struct.pack("<I", VERSION), _pack_str(stage_tag), struct.pack("<Q", int(seed)),
            _pack_str(json.dumps(meta, sort_keys=True), "<I"), struct.pack("<I", len(records))]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(body + records))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IncompatibleCheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, width: str = "<H") -> str:
        (n,) = self.unpack(width)
        return self.take(n).decode("utf-8")


def load_checkpoint(path: str | Path, template: ParamSet | None = None) -> Checkpoint:
    """Read a checkpoint; with ``template``, the ``main`` role must match its inventory."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise IncompatibleCheckpointError(f"{path} is not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise IncompatibleCheckpointError(f"unsupported checkpoint version {version}")
    stage_tag = r.string()
    (seed,) = r.unpack("<Q")
    meta = json.loads(r.string("<I"))
    (count,) = r.unpack("<I")
    tensors: dict[str, torch.Tensor] = OrderedDict()
    for _ in range(count):
        name = r.string()
        dtype, rank = r.unpack("<BB")
        if dtype != _F32:
            raise IncompatibleCheckpointError(f"unsupported dtype code {dtype} for {name}")
        dims = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        tensors[name] = torch.from_numpy(arr.copy())

    nets: "OrderedDict[str, ParamSet]" = OrderedDict()
    optims: dict[str, OptimState] = {}
    for role, info in meta["roles"].items():
        prefix = f"{role}/"
        entries = OrderedDict((k[len(prefix):], v) for k, v in tensors.items() if k.startswith(prefix))
        nets[role] = ParamSet(entries, info["stage_tag"], info["arch"])
        hyper = info["optim"]
        if hyper is not None:
            opt = OptimState(hyper["kind"], hyper["lr"], hyper["beta1"], hyper["beta2"],
                             hyper["eps"], hyper["step"])
            if opt.kind == "adam":
                opt.m = {k[len(role) + 3:]: v for k, v in tensors.items() if k.startswith(f"{role}@m/")}
                opt.v = {k[len(role) + 3:]: v for k, v in tensors.items() if k.startswith(f"{role}@v/")}
            optims[role] = opt

    ckpt = Checkpoint(stage_tag, seed, nets, optims, meta["step"], meta.get("extra", {}))
    if template is not None:
        check_compatible(ckpt.params, template)
    return ckpt


def check_compatible(found: ParamSet, template: ParamSet) -> None:
    if found.arch != template.arch or found.inventory() != template.inventory():
        raise IncompatibleCheckpointError(
            f"checkpoint holds {found.arch} ({found.num_params()} params), "
            f"expected {template.arch} ({template.num_params()} params)")
