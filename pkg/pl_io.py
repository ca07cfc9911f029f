"""
PerfectLES — File Formats and Persistence
=========================================
Binary containers for snapshots, closure datasets and network checkpoints,
plus CSV/JSON helpers. All writes are atomic (temp file, then os.replace).

Container layout (little-endian):
    magic           8 bytes, ASCII, zero padded
    version         uint32
    header length   uint32
    header          canonical JSON (sorted keys, compact separators), UTF-8
    header sha256   32 bytes
    payload         float64 values; the header records payload size and sha256

Snapshot payload order is C order over (ex, ey, ez, i, j, k, var).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import psutil

from pl_basis import CartesianMesh, NodalBasis
from pl_dgsem import NVAR, SolutionField
from pl_errors import ConfigurationError, FormatError
from pl_filter import ClosureDataset
from pl_logging import get_logger
from pl_nn_layers import AdamState, Network, build_network

logger = get_logger("io")

FORMAT_VERSION = 1
SNAPSHOT_MAGIC = b"DHITSNAP"
DATASET_MAGIC = b"CLOSETRN"
CHECKPOINT_MAGIC = b"NNCHKPT\x00"
PAYLOAD_KINDS = ("state", "tendency")
CSV_FLOAT_FORMAT = "%.17g"
UNDEFINED = "undefined"

_PREAMBLE = struct.Struct("<8sII")
_F8 = np.dtype("<f8")


# =============================================================================
# ATOMIC WRITES
# =============================================================================


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# =============================================================================
# CONTAINER
# =============================================================================


def encode_container(magic: bytes, header: Dict[str, Any], payload: bytes) -> bytes:
    header = dict(header)
    header["payload_bytes"] = len(payload)
    header["payload_sha256"] = sha256_hex(payload)
    head = canonical_json(header)
    return _PREAMBLE.pack(magic, FORMAT_VERSION, len(head)) + head + hashlib.sha256(head).digest() + payload


def decode_container(data: bytes, magic: bytes, source: str = "<bytes>") -> Tuple[Dict[str, Any], bytes]:
    if len(data) < _PREAMBLE.size:
        raise FormatError("file too short", path=source)
    got_magic, version, head_len = _PREAMBLE.unpack_from(data, 0)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}", path=source)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", path=source)
    start = _PREAMBLE.size
    head = data[start:start + head_len]
    digest = data[start + head_len:start + head_len + 32]
    if len(head) != head_len or hashlib.sha256(head).digest() != digest:
        raise FormatError("header checksum mismatch", path=source)
    header = json.loads(head.decode("utf-8"))
    payload = data[start + head_len + 32:]
    if len(payload) != header["payload_bytes"]:
        raise FormatError(
            "payload size mismatch", path=source, expected=header["payload_bytes"], actual=len(payload)
        )
    if sha256_hex(payload) != header["payload_sha256"]:
        raise FormatError("payload checksum mismatch", path=source)
    return header, payload


def _read(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"file not found: {path}", path=str(path))
    return path.read_bytes()


def _floats(payload: bytes, count: int, offset: int, source: str) -> np.ndarray:
    end = offset + count * 8
    if end > len(payload):
        raise FormatError("payload shorter than declared arrays", path=source)
    return np.frombuffer(payload, dtype=_F8, count=count, offset=offset).astype(float)


# =============================================================================
# SNAPSHOTS
# =============================================================================


def encode_snapshot(field_: SolutionField, gas, kind: str = "state", seed: int = 0) -> bytes:
    if kind not in PAYLOAD_KINDS:
        raise ConfigurationError(f"payload kind must be one of {PAYLOAD_KINDS}")
    header = {
        "elements_per_dir": field_.mesh.elements_per_dir,
        "degree": field_.basis.degree,
        "domain_length": field_.mesh.domain_length,
        "gamma": gas.gamma,
        "gas_constant": gas.gas_constant,
        "prandtl": gas.prandtl,
        "mu0": gas.mu0,
        "time": field_.time,
        "seed": int(seed),
        "kind": kind,
    }
    payload = np.ascontiguousarray(np.moveaxis(field_.data, 0, -1), dtype=_F8).tobytes()
    return encode_container(SNAPSHOT_MAGIC, header, payload)


def write_snapshot(path, field_: SolutionField, gas, kind: str = "state", seed: int = 0) -> None:
    atomic_write_bytes(path, encode_snapshot(field_, gas, kind, seed))


def read_snapshot(path) -> Tuple[SolutionField, Dict[str, Any]]:
    header, payload = decode_container(_read(path), SNAPSHOT_MAGIC, str(path))
    K, N = header["elements_per_dir"], header["degree"]
    p = N + 1
    count = K ** 3 * p ** 3 * NVAR
    if len(payload) != count * 8:
        raise FormatError("snapshot payload length does not match its header", path=str(path))
    data = _floats(payload, count, 0, str(path)).reshape((K, K, K, p, p, p, NVAR))
    mesh = CartesianMesh(K, header["domain_length"])
    field_ = SolutionField(mesh, NodalBasis.from_degree(N), np.moveaxis(data, -1, 0).copy(), header["time"])
    return field_, header


def snapshot_bytes(elements_per_dir: int, degree: int) -> int:
    return elements_per_dir ** 3 * (degree + 1) ** 3 * NVAR * 8


# =============================================================================
# DATASETS
# =============================================================================


def encode_dataset(dataset: ClosureDataset) -> bytes:
    header = {
        "p": dataset.p,
        "channels": [dataset.features.shape[1], dataset.labels.shape[1], dataset.aux.shape[1]],
        "samples": len(dataset),
        "split": dataset.split,
        "run_ids": list(dataset.run_ids),
        "times": [float(t) for t in dataset.times],
        "elements": [[int(v) for v in e] for e in dataset.elements],
        "provenance": dataset.provenance,
    }
    payload = b"".join(
        np.ascontiguousarray(a, dtype=_F8).tobytes() for a in (dataset.features, dataset.labels, dataset.aux)
    )
    return encode_container(DATASET_MAGIC, header, payload)


def write_dataset(path, dataset: ClosureDataset) -> None:
    atomic_write_bytes(path, encode_dataset(dataset))


def read_dataset(path) -> ClosureDataset:
    header, payload = decode_container(_read(path), DATASET_MAGIC, str(path))
    n, p = header["samples"], header["p"]
    cf, cl, ca = header["channels"]
    if (cf, cl) != (6, 3):
        raise FormatError("dataset channel counts must be (6, 3)", path=str(path), channels=header["channels"])
    site = p ** 3
    if len(payload) != n * site * (cf + cl + ca) * 8:
        raise FormatError("dataset payload length does not match sample count", path=str(path))
    offset = 0
    arrays = []
    for c in (cf, cl, ca):
        count = n * c * site
        arrays.append(_floats(payload, count, offset, str(path)).reshape((n, c, p, p, p)))
        offset += count * 8
    return ClosureDataset(
        arrays[0], arrays[1], arrays[2], list(header["run_ids"]), np.asarray(header["times"], dtype=float),
        np.asarray(header["elements"], dtype=int).reshape(n, 3), header["split"], header["provenance"],
    )


# =============================================================================
# CHECKPOINTS
# =============================================================================


def encode_checkpoint(network: Network, optimizer: Optional[AdamState] = None, extra: Optional[Dict] = None) -> bytes:
    arrays: List[Tuple[str, np.ndarray]] = list(network.state_dict().items())
    if optimizer is not None:
        arrays += [(f"adam.m.{k}", v) for k, v in optimizer.m.items()]
        arrays += [(f"adam.v.{k}", v) for k, v in optimizer.v.items()]
    spec = network.spec
    header = {
        "tag": spec.tag,
        "nf1": spec.nf1,
        "nf2": spec.nf2,
        "p": spec.p,
        "in_channels": spec.in_channels,
        "out_channels": spec.out_channels,
        "seed": spec.seed,
        "arrays": [[name, list(value.shape)] for name, value in arrays],
        "optimizer": None if optimizer is None else {
            "beta1": optimizer.beta1, "beta2": optimizer.beta2, "epsilon": optimizer.epsilon, "step": optimizer.step,
        },
        "extra": extra or {},
    }
    payload = b"".join(np.ascontiguousarray(v, dtype=_F8).tobytes() for _, v in arrays)
    return encode_container(CHECKPOINT_MAGIC, header, payload)


def write_checkpoint(path, network: Network, optimizer: Optional[AdamState] = None, extra: Optional[Dict] = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(network, optimizer, extra))


def read_checkpoint(path) -> Tuple[Network, Optional[AdamState], Dict[str, Any]]:
    header, payload = decode_container(_read(path), CHECKPOINT_MAGIC, str(path))
    network = build_network(
        header["tag"], header["nf1"], header["nf2"], header["p"], header["seed"],
        header["in_channels"], header["out_channels"],
    )
    values: Dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        values[name] = _floats(payload, count, offset, str(path)).reshape(shape)
        offset += count * 8
    if offset != len(payload):
        raise FormatError("checkpoint payload has trailing bytes", path=str(path))
    network.load_state_dict({k: v for k, v in values.items() if not k.startswith("adam.")})
    optimizer = None
    if header["optimizer"] is not None:
        opt = header["optimizer"]
        optimizer = AdamState(opt["beta1"], opt["beta2"], opt["epsilon"], opt["step"])
        for key in network.parameters():
            optimizer.m[key] = values[f"adam.m.{key}"].copy()
            optimizer.v[key] = values[f"adam.v.{key}"].copy()
    return network, optimizer, header["extra"]


# =============================================================================
# CSV, MANIFESTS, STORAGE
# =============================================================================


def write_csv(path, frame: pd.DataFrame) -> None:
    text = frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, na_rep=UNDEFINED, lineterminator="\n")
    atomic_write_text(path, text)


def read_csv(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"file not found: {path}", path=str(path))
    return pd.read_csv(path, na_values=[UNDEFINED])


def write_manifest(path, manifest: Dict[str, Any]) -> None:
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")


def read_manifest(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"manifest not found: {path}", path=str(path))
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def check_storage(required_bytes: int, cap_gb: float, directory) -> None:
    """Refuse outputs above the configured cap or larger than the free disk space."""
    cap = cap_gb * 1024 ** 3
    if required_bytes > cap:
        raise ConfigurationError(
            f"archive needs {required_bytes / 1024 ** 3:.2f} GB, above the {cap_gb:g} GB cap",
            required_bytes=required_bytes,
        )
    directory = Path(directory)
    existing = directory if directory.exists() else next((p for p in directory.parents if p.exists()), Path("."))
    free = psutil.disk_usage(str(existing)).free
    if required_bytes > free:
        raise ConfigurationError("not enough free disk space for the archive", required_bytes=required_bytes, free=free)
    logger.debug(f"storage check passed: {required_bytes} bytes needed, {free} free")
