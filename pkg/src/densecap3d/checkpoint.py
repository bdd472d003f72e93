"""Single-file checkpoints: a readable text manifest followed by raw arrays.

Layout::

    DENSECAP3D-CHECKPOINT <version>\\n
    <manifest byte length>\\n
    <manifest JSON, sorted keys>\\n
    <float32 little-endian arrays in manifest order>

Array offsets in the manifest are relative to the first byte after the
manifest's trailing newline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from densecap3d.diffcore import AdamState, Tensor
from densecap3d.errors import CompatibilityError, FormatError, ValidationError
from densecap3d.model import Model, ModelConfig, init_params
from densecap3d.scenedata import Vocabulary

MAGIC = "DENSECAP3D-CHECKPOINT"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


@dataclass(eq=False)
class Checkpoint:
    config: ModelConfig
    vocab: Vocabulary
    embeddings: np.ndarray
    params: dict[str, np.ndarray]
    optimizer: AdamState | None = None
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: Model, optimizer: AdamState | None = None) -> "Checkpoint":
        return cls(model.config, model.vocab, model.embeddings,
                   {k: v.data for k, v in model.params.items()}, optimizer)

    def to_model(self) -> Model:
        params = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return Model(self.config, self.vocab, self.embeddings, params)


def expected_shapes(config: ModelConfig, vocab_size: int) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_params(config, vocab_size, seed=0).items()}


def _arrays(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [("embeddings", ckpt.embeddings)]
    out += [(f"param/{k}", ckpt.params[k]) for k in sorted(ckpt.params)]
    if ckpt.optimizer is not None:
        for k in sorted(ckpt.optimizer.m):
            out.append((f"adam.m/{k}", ckpt.optimizer.m[k]))
            out.append((f"adam.v/{k}", ckpt.optimizer.v[k]))
    return out


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in _arrays(ckpt):
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    opt = ckpt.optimizer
    manifest = {
        "version": ckpt.version,
        "hyperparameters": {**ckpt.config.to_dict(), "vocab_size": len(ckpt.vocab)},
        "vocab": list(ckpt.vocab.tokens),
        "arrays": entries,
        "optimizer": None if opt is None else {"t": opt.t, "beta1": opt.beta1, "beta2": opt.beta2,
                                                "eps": opt.eps},
    }
    text = json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8")
    header = f"{MAGIC} {ckpt.version}\n{len(text)}\n".encode("ascii")
    return header + text + b"\n" + b"".join(blobs)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(data: bytes) -> Checkpoint:
    first, sep, rest = data.partition(b"\n")
    parts = first.decode("ascii", errors="replace").split(" ")
    if not sep or len(parts) != 2 or parts[0] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic line)")
    try:
        version = int(parts[1])
    except ValueError:
        raise FormatError(f"bad version field {parts[1]!r}") from None
    if version != FORMAT_VERSION:
        raise CompatibilityError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    length_line, sep, rest = rest.partition(b"\n")
    try:
        length = int(length_line.decode("ascii"))
    except (UnicodeDecodeError, ValueError):
        raise FormatError(f"bad manifest length field {length_line[:40]!r}") from None
    if not sep or length < 0 or len(rest) < length + 1 or rest[length:length + 1] != b"\n":
        raise FormatError("manifest length field does not match the file")
    try:
        manifest = json.loads(rest[:length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from None
    if manifest.get("version") != version:
        raise FormatError("manifest version disagrees with the header")
    payload = rest[length + 1:]
    try:
        hyper = dict(manifest["hyperparameters"])
        vocab_size = hyper.pop("vocab_size")
        config = ModelConfig.from_dict(hyper)
        vocab = Vocabulary(tuple(manifest["vocab"]))
        entries = manifest["arrays"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"manifest is missing a field: {exc}") from None
    except ValidationError as exc:
        raise FormatError(f"manifest is inconsistent: {exc}") from None
    if len(vocab) != vocab_size:
        raise FormatError(f"vocabulary has {len(vocab)} tokens, manifest says {vocab_size}")
    end = max((e["offset"] + e["nbytes"] for e in entries), default=0)
    if len(payload) != end:
        raise FormatError(f"array payload is {len(payload)} bytes, manifest expects {end} (truncated?)")
    arrays = {}
    for e in entries:
        shape = tuple(e["shape"])
        if int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize != e["nbytes"]:
            raise FormatError(f"array {e['name']}: shape {shape} does not match {e['nbytes']} bytes")
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=_DTYPE).reshape(shape).astype(np.float32)

    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    expected = expected_shapes(config, vocab_size)
    if set(params) != set(expected):
        raise FormatError(f"parameter names differ from the configuration: "
                          f"{sorted(set(params) ^ set(expected))[:5]}")
    for k, shape in expected.items():
        if params[k].shape != shape:
            raise FormatError(f"parameter {k} has shape {params[k].shape}, configuration needs {shape}")
    if "embeddings" not in arrays:
        raise FormatError("checkpoint has no embedding table")
    optimizer = None
    if manifest.get("optimizer") is not None:
        o = manifest["optimizer"]
        optimizer = AdamState({k[len("adam.m/"):]: v for k, v in arrays.items() if k.startswith("adam.m/")},
                              {k[len("adam.v/"):]: v for k, v in arrays.items() if k.startswith("adam.v/")},
                              o["t"], o["beta1"], o["beta2"], o["eps"])
    return Checkpoint(config, vocab, arrays["embeddings"], params, optimizer, version)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
