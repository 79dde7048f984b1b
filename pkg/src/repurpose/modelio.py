"""Architecture description, named parameter sets, and checkpoint files.

A checkpoint is a directory holding ``manifest.json`` and ``weights.bin``.
The blob is the little-endian concatenation of every tensor in manifest
order (row-major); the manifest records the tensor table, the dtype and the
SHA-256 of the blob.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

FORMAT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
PARAM_KINDS = ("conv", "dense")
LAYER_KINDS = ("conv", "dense", "relu", "maxpool", "flatten")


class CheckpointError(Exception):
    pass


class ChecksumMismatch(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedBlob(CheckpointError):
    pass


class SpecMismatch(CheckpointError, ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``conv``/``dense`` own parameters; BN follows the linear op when ``has_bn``."""

    kind: str
    out: int = 0
    kernel: int = 3
    padding: str = "same"
    has_bn: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "out": self.out, "kernel": self.kernel,
                "padding": self.padding, "has_bn": self.has_bn}


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]  # (H, W, C)
    n_outputs: int

    def __post_init__(self):
        if self.n_outputs < 2:
            raise ValueError("n_outputs must be >= 2")
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
        shapes = self.param_shapes()  # validates composition
        if not shapes:
            raise ValueError("no parameters")
        last = [l for l in self.layers if l.kind in PARAM_KINDS][-1]
        if last.kind != "dense" or last.out != self.n_outputs:
            raise ValueError("final parametric layer must be dense with n_outputs units")

    def param_shapes(self) -> list[tuple[str, int, tuple[int, ...], bool]]:
        """(name, layer_index, shape, is_bn) for every tensor, in canonical order."""
        out = []
        shape = tuple(self.input_shape)
        li = 0
        for pos, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ValueError(f"layer {pos} (conv) expects an (H, W, C) input, got {shape}")
                h, w, c = shape
                k = layer.kernel
                if layer.padding == "valid":
                    h, w = h - k + 1, w - k + 1
                elif layer.padding != "same":
                    raise ValueError(f"layer {pos}: padding must be 'same' or 'valid'")
                if h < 1 or w < 1:
                    raise ValueError(f"layer {pos} (conv): kernel larger than input")
                out += [(f"conv{li}.weight", li, (k, k, c, layer.out), False),
                        (f"conv{li}.bias", li, (layer.out,), False)]
                if layer.has_bn:
                    out += [(f"conv{li}.bn_gamma", li, (layer.out,), True),
                            (f"conv{li}.bn_beta", li, (layer.out,), True)]
                shape = (h, w, layer.out)
                li += 1
            elif layer.kind == "dense":
                if len(shape) != 1:
                    raise ValueError(f"layer {pos} (dense) expects a flat input, got {shape}")
                out += [(f"dense{li}.weight", li, (shape[0], layer.out), False),
                        (f"dense{li}.bias", li, (layer.out,), False)]
                if layer.has_bn:
                    out += [(f"dense{li}.bn_gamma", li, (layer.out,), True),
                            (f"dense{li}.bn_beta", li, (layer.out,), True)]
                shape = (layer.out,)
                li += 1
            elif layer.kind == "maxpool":
                if len(shape) != 3 or shape[0] % 2 or shape[1] % 2:
                    raise ValueError(f"layer {pos} (maxpool) needs even spatial dims, got {shape}")
                shape = (shape[0] // 2, shape[1] // 2, shape[2])
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
        if shape != (self.n_outputs,):
            raise ValueError(f"network output shape {shape} != ({self.n_outputs},)")
        return out

    @property
    def n_layers(self) -> int:
        return sum(1 for l in self.layers if l.kind in PARAM_KINDS)

    def to_dict(self) -> dict[str, Any]:
        return {"layers": [l.to_dict() for l in self.layers],
                "input_shape": list(self.input_shape), "n_outputs": self.n_outputs}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelSpec":
        return cls(tuple(LayerSpec(**l) for l in d["layers"]),
                   tuple(d["input_shape"]), int(d["n_outputs"]))


def conv_spec(n_way: int = 5, image_size: int = 16, channels: int = 1,
              filters: int = 8, blocks: int = 2) -> ModelSpec:
    """Shrunken 4-ConvNet: ``blocks`` x (conv3x3 + BN + ReLU + maxpool) and a linear head."""
    layers: list[LayerSpec] = []
    for _ in range(blocks):
        layers += [LayerSpec("conv", filters, 3, "same", True), LayerSpec("relu"),
                   LayerSpec("maxpool")]
    layers += [LayerSpec("flatten"), LayerSpec("dense", n_way)]
    return ModelSpec(tuple(layers), (image_size, image_size, channels), n_way)


def mlp_spec(n_way: int = 5, image_size: int = 16, channels: int = 1,
             hidden: Sequence[int] = (64, 32), bn: bool = True) -> ModelSpec:
    layers: list[LayerSpec] = [LayerSpec("flatten")]
    for h in hidden:
        layers += [LayerSpec("dense", h, has_bn=bn), LayerSpec("relu")]
    layers.append(LayerSpec("dense", n_way))
    return ModelSpec(tuple(layers), (image_size, image_size, channels), n_way)


@dataclass
class ParamEntry:
    name: str
    layer_index: int
    tensor: np.ndarray
    is_bn: bool = False


@dataclass
class ParamSet:
    """Ordered named tensors. Order is canonical and shared by gradients and stepsizes."""

    entries: list[ParamEntry] = field(default_factory=list)

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ParamEntry]:
        return iter(self.entries)

    def __getitem__(self, name: str) -> np.ndarray:
        for e in self.entries:
            if e.name == name:
                return e.tensor
        raise KeyError(name)

    @property
    def tensors(self) -> list[np.ndarray]:
        return [e.tensor for e in self.entries]

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def layer_indices(self) -> list[int]:
        return [e.layer_index for e in self.entries]

    @property
    def bn_mask(self) -> list[bool]:
        return [e.is_bn for e in self.entries]

    @property
    def n_layers(self) -> int:
        return len(set(self.layer_indices))

    def replace(self, tensors: Iterable[np.ndarray]) -> "ParamSet":
        tensors = list(tensors)
        if len(tensors) != len(self.entries):
            raise ValueError("tensor count does not match parameter set")
        return ParamSet([ParamEntry(e.name, e.layer_index, np.asarray(t, dtype=np.float64), e.is_bn)
                         for e, t in zip(self.entries, tensors)])

    def copy(self) -> "ParamSet":
        return self.replace(t.copy() for t in self.tensors)

    def size(self) -> int:
        return sum(t.size for t in self.tensors)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors])

    @staticmethod
    def stack(sets: Sequence["ParamSet"]) -> list[np.ndarray]:
        """Stack same-layout sets into tensors with a leading group axis."""
        return [np.stack(ts) for ts in zip(*(s.tensors for s in sets))]

    def unstack(self, stacked: Sequence[np.ndarray]) -> list["ParamSet"]:
        """Inverse of :meth:`stack`, using this set's names and layer layout."""
        return [self.replace(t[g] for t in stacked) for g in range(stacked[0].shape[0])]

    def check(self, spec: ModelSpec) -> None:
        expected = spec.param_shapes()
        if len(expected) != len(self.entries):
            raise SpecMismatch(f"spec has {len(expected)} tensors, params have {len(self.entries)}")
        for (name, li, shape, is_bn), e in zip(expected, self.entries):
            if (name, li, is_bn) != (e.name, e.layer_index, e.is_bn) or tuple(e.tensor.shape) != shape:
                raise SpecMismatch(f"parameter {e.name} {e.tensor.shape} does not match spec "
                                   f"{name} {shape}")


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamSet:
    """He-normal weights, zero biases, unit BN scale, zero BN shift."""
    entries = []
    for name, li, shape, is_bn in spec.param_shapes():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[:-1]))
            t = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif name.endswith(".bn_gamma"):
            t = np.ones(shape)
        else:
            t = np.zeros(shape)
        entries.append(ParamEntry(name, li, t.astype(np.float64), is_bn))
    return ParamSet(entries)


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: ParamSet
    meta: dict[str, Any] = field(default_factory=dict)


def _write_dir(path: Path, arrays: Sequence[tuple[str, np.ndarray, dict[str, Any]]],
               header: dict[str, Any], dtype: str) -> Path:
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    dt = _DTYPES[dtype]
    blob = b"".join(np.ascontiguousarray(a, dtype=dt).tobytes() for _, a, _ in arrays)
    table, offset = [], 0
    for name, a, extra in arrays:
        table.append({"name": name, **extra, "shape": list(a.shape), "offset": offset})
        offset += a.size * dt.itemsize
    manifest = {"format_version": FORMAT_VERSION, **header, "dtype": dtype, "tensors": table,
                "sha256": hashlib.sha256(blob).hexdigest()}
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "weights.bin").write_bytes(blob)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return path


def _read_dir(path: Path) -> tuple[dict[str, Any], list[np.ndarray]]:
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"unsupported format_version {manifest.get('format_version')!r}")
    dt = _DTYPES[manifest["dtype"]]
    blob = (path / "weights.bin").read_bytes()
    expected = sum(int(np.prod(t["shape"])) for t in manifest["tensors"]) * dt.itemsize
    if len(blob) < expected:
        raise TruncatedBlob(f"weights.bin has {len(blob)} bytes, expected {expected}")
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ChecksumMismatch(f"checksum mismatch for {path / 'weights.bin'}")
    if len(blob) != expected:
        raise TruncatedBlob(f"weights.bin has {len(blob)} bytes, expected {expected}")
    arrays = []
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"]))
        arr = np.frombuffer(blob, dtype=dt, count=n, offset=t["offset"]).reshape(t["shape"])
        arrays.append(arr.astype(np.float64))
    return manifest, arrays


def save_checkpoint(path: str | Path, spec: ModelSpec, params: ParamSet,
                    meta: dict[str, Any] | None = None, dtype: str = "f64") -> Path:
    """Write ``manifest.json`` + ``weights.bin`` under directory ``path``."""
    if len(params) == 0:
        raise SpecMismatch("no parameters")
    params.check(spec)
    arrays = [(e.name, e.tensor, {"layer_index": e.layer_index, "is_bn": e.is_bn}) for e in params]
    return _write_dir(Path(path), arrays, {"spec": spec.to_dict(), "meta": meta or {}}, dtype)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    manifest, arrays = _read_dir(path)
    if "spec" not in manifest:
        raise CheckpointError(f"{path} holds arrays, not a checkpoint")
    spec = ModelSpec.from_dict(manifest["spec"])
    entries = [ParamEntry(t["name"], t["layer_index"], a, t["is_bn"])
               for t, a in zip(manifest["tensors"], arrays)]
    params = ParamSet(entries)
    params.check(spec)
    return Checkpoint(spec, params, manifest.get("meta", {}))


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray],
                meta: dict[str, Any] | None = None, dtype: str = "f64") -> Path:
    """Write named arrays (e.g. episodes) in the checkpoint file format, without a spec."""
    if not arrays:
        raise ValueError("no arrays")
    items = [(k, np.asarray(v), {}) for k, v in arrays.items()]
    return _write_dir(Path(path), items, {"meta": meta or {}}, dtype)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    manifest, arrays = _read_dir(Path(path))
    return {t["name"]: a for t, a in zip(manifest["tensors"], arrays)}, manifest.get("meta", {})
