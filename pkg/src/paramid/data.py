"""Trajectory dataset container and its on-disk `.traj` format.

Layout: one JSON header line, then raw little-endian payload sections in
row-major order -- states, params, seeds. States and params use the header
dtype (float32 by default); seeds are uint64 (they do not survive a float
round trip). float32 datasets are generated with per-step quantisation so
every stored trajectory re-validates bit-exactly under the simulator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .envs import SystemSpec, initial_condition, rollout

__all__ = [
    "TrajectoryDataset",
    "DatasetFormatError",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
    "validate_dataset",
]

_FORMAT_VERSION = 1
_DTYPES = {"float32": np.float32, "float64": np.float64}


class DatasetFormatError(ValueError):
    """Malformed `.traj` header or payload."""


@dataclass
class TrajectoryDataset:
    spec: SystemSpec
    states: np.ndarray   # (N, horizon + 1, state_dim) float64 in memory
    params: np.ndarray   # (N, param_dim) float64
    seeds: np.ndarray    # (N,) uint64, one generator seed per row
    val_mask: np.ndarray  # (N,) bool, True = validation row
    dtype: str = "float32"

    def __post_init__(self):
        n = self.states.shape[0]
        if self.states.shape[1:] != (self.spec.horizon + 1, self.spec.state_dim):
            raise DatasetFormatError("state array inconsistent with spec")
        if self.params.shape != (n, self.spec.param_dim):
            raise DatasetFormatError("params array inconsistent with spec")
        if self.seeds.shape != (n,) or self.val_mask.shape != (n,):
            raise DatasetFormatError("seeds/split arrays inconsistent with row count")
        if self.dtype not in _DTYPES:
            raise DatasetFormatError(f"unsupported dtype {self.dtype!r}")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.val_mask)

    @property
    def val_indices(self) -> np.ndarray:
        return np.flatnonzero(self.val_mask)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectoryDataset):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.dtype == other.dtype
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.params, other.params)
            and np.array_equal(self.seeds, other.seeds)
            and np.array_equal(self.val_mask, other.val_mask)
        )


def _row_seeds(seed: int, count: int) -> np.ndarray:
    ss = np.random.SeedSequence(seed)
    return np.array(
        [child.generate_state(1, np.uint64)[0] for child in ss.spawn(count)], dtype=np.uint64
    )


def generate_dataset(
    spec: SystemSpec, count: int, seed: int, dtype: str = "float32"
) -> TrajectoryDataset:
    """Simulate ``count`` independent trajectories with fresh parameters each.

    Rows are tagged train/val 90/10 by their own seed value, so the split is a
    deterministic function of the dataset seed.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    if dtype not in _DTYPES:
        raise DatasetFormatError(f"unsupported dtype {dtype!r}")
    quantize = dtype == "float32"
    seeds = _row_seeds(seed, count)
    states = np.empty((count, spec.horizon + 1, spec.state_dim))
    params = np.empty((count, spec.param_dim))
    for i, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        theta, x0 = initial_condition(spec, rng)
        if quantize:
            theta = theta.astype(np.float32).astype(np.float64)
        states[i] = rollout(spec, x0, theta, quantize32=quantize)
        params[i] = theta
    val_mask = (seeds % np.uint64(10)) == 0
    return TrajectoryDataset(spec, states, params, seeds, val_mask, dtype)


def write_dataset(ds: TrajectoryDataset, path) -> None:
    np_dtype = _DTYPES[ds.dtype]
    header = {
        "format": "traj",
        "version": _FORMAT_VERSION,
        "spec": ds.spec.to_dict(),
        "count": len(ds),
        "dtype": ds.dtype,
        "seed_dtype": "uint64",
        "endianness": "little",
        "sections": ["states", "params", "seeds", "split"],
    }
    le = np.dtype(np_dtype).newbyteorder("<")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(ds.states).astype(le).tobytes())
        fh.write(np.ascontiguousarray(ds.params).astype(le).tobytes())
        fh.write(ds.seeds.astype("<u8").tobytes())
        fh.write(ds.val_mask.astype("<u1").tobytes())


def read_dataset(path) -> TrajectoryDataset:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"unreadable header: {exc}") from exc
    if header.get("format") != "traj":
        raise DatasetFormatError("not a traj file")
    if header.get("version") != _FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {header.get('version')!r}")
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise DatasetFormatError(f"unsupported dtype {dtype!r}")
    spec = SystemSpec.from_dict(header["spec"])  # raises on unknown env
    count = int(header["count"])
    np_dtype = np.dtype(_DTYPES[dtype]).newbyteorder("<")
    item = np_dtype.itemsize
    n_state = count * (spec.horizon + 1) * spec.state_dim
    n_param = count * spec.param_dim
    expected = (n_state + n_param) * item + count * 8 + count
    if len(payload) != expected:
        raise DatasetFormatError(
            f"payload length mismatch: expected {expected} bytes, found {len(payload)}"
        )
    off = 0
    states = np.frombuffer(payload, dtype=np_dtype, count=n_state, offset=off)
    off += n_state * item
    params = np.frombuffer(payload, dtype=np_dtype, count=n_param, offset=off)
    off += n_param * item
    seeds = np.frombuffer(payload, dtype="<u8", count=count, offset=off)
    off += count * 8
    val_mask = np.frombuffer(payload, dtype="<u1", count=count, offset=off).astype(bool)
    return TrajectoryDataset(
        spec=spec,
        states=states.astype(np.float64).reshape(count, spec.horizon + 1, spec.state_dim),
        params=params.astype(np.float64).reshape(count, spec.param_dim),
        seeds=seeds.astype(np.uint64),
        val_mask=val_mask,
        dtype=dtype,
    )


def validate_dataset(ds: TrajectoryDataset) -> None:
    """Re-run the simulator from each stored (x0, params) row; must match bit-exactly."""
    quantize = ds.dtype == "float32"
    for i in range(len(ds)):
        redo = rollout(ds.spec, ds.states[i, 0], ds.params[i], quantize32=quantize)
        if not np.array_equal(redo, ds.states[i]):
            raise DatasetFormatError(f"row {i} does not re-validate under the simulator")
