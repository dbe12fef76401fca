"""Single-file binary checkpoints: little-endian, magic string, version, a
config snapshot, the RNG state, and length-prefixed named tensors.
"""

from __future__ import annotations

import struct

import numpy as np
import torch

MAGIC = b"SSCK"
VERSION = 1

_DTYPE_CODES = {
    torch.float32: 0,
    torch.float64: 1,
    torch.int64: 2,
    torch.uint8: 3,
    torch.bool: 4,
    torch.int32: 5,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_NP_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("u1"),
    4: np.dtype("u1"),
    5: np.dtype("<i4"),
}


class CheckpointError(RuntimeError):
    """Raised on malformed or incompatible checkpoint files."""


def save_checkpoint(path: str, tensors: dict[str, torch.Tensor], config_text: str = "",
                    rng_state: bytes | None = None) -> None:
    """Write named tensors in sorted order for byte-stable output."""
    if rng_state is None:
        rng_state = bytes(torch.get_rng_state().numpy().tobytes())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        cfg = config_text.encode("utf-8")
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(rng_state)))
        fh.write(rng_state)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            tensor = tensors[name].detach().cpu().contiguous()
            if tensor.dtype not in _DTYPE_CODES:
                raise CheckpointError(f"unsupported dtype {tensor.dtype} for {name!r}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            code = _DTYPE_CODES[tensor.dtype]
            fh.write(struct.pack("<BB", code, tensor.dim()))
            for dim in tensor.shape:
                fh.write(struct.pack("<I", dim))
            arr = tensor.numpy()
            if tensor.dtype == torch.bool:
                arr = arr.astype("u1")
            data = np.ascontiguousarray(arr).astype(_NP_DTYPES[code], copy=False).tobytes()
            fh.write(struct.pack("<Q", len(data)))
            fh.write(data)


def load_checkpoint(path: str):
    """Read a checkpoint; returns (tensors, config_text, rng_state bytes)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
        off = 0

        def take(n):
            nonlocal off
            if off + n > len(blob):
                raise CheckpointError(f"{path}: truncated checkpoint")
            out = blob[off : off + n]
            off += n
            return out

        if take(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic string")
        (version,) = struct.unpack("<I", take(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: version {version} != expected {VERSION}")
        (cfg_len,) = struct.unpack("<I", take(4))
        config_text = take(cfg_len).decode("utf-8")
        (rng_len,) = struct.unpack("<I", take(4))
        rng_state = take(rng_len)
        (count,) = struct.unpack("<I", take(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(2))
            name = take(name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", take(2))
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"{path}: unknown dtype code {code}")
            shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
            (nbytes,) = struct.unpack("<Q", take(8))
            arr = np.frombuffer(take(nbytes), dtype=_NP_DTYPES[code]).reshape(shape)
            tensor = torch.from_numpy(arr.copy())
            if code == 4:
                tensor = tensor.to(torch.bool)
            tensors[name] = tensor
        return tensors, config_text, rng_state
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc


def restore_rng(rng_state: bytes) -> None:
    torch.set_rng_state(torch.from_numpy(np.frombuffer(rng_state, dtype=np.uint8).copy()))


def module_tensors(module: torch.nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}/{k}": v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str) -> None:
    state = {}
    want = prefix + "/"
    for key, value in tensors.items():
        if key.startswith(want):
            state[key[len(want):]] = value
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"missing tensors for {prefix!r}: {sorted(missing)[:4]}")
    module.load_state_dict(state)


def optimizer_tensors(opt: torch.optim.Optimizer, prefix: str) -> dict[str, torch.Tensor]:
    out = {}
    state = opt.state_dict()["state"]
    for pid in sorted(state):
        for key, value in state[pid].items():
            if isinstance(value, torch.Tensor):
                out[f"{prefix}/{pid}/{key}"] = value
            else:
                out[f"{prefix}/{pid}/{key}"] = torch.tensor(float(value), dtype=torch.float64)
    return out


def load_optimizer(opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor], prefix: str) -> None:
    """Restore per-parameter optimizer state saved by `optimizer_tensors`."""
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    want = prefix + "/"
    for key, value in tensors.items():
        if not key.startswith(want):
            continue
        pid_str, field = key[len(want):].split("/", 1)
        state.setdefault(int(pid_str), {})[field] = value
    sd["state"] = state
    opt.load_state_dict(sd)
