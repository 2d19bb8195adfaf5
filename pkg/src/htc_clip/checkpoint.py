"""Single-file checkpoint archive: config, vocabulary, taxonomy and weights.

The archive is a zip with fixed member timestamps so identical weights give
byte-identical files. Arrays are stored as ``.npy`` members and round-trip
bit-exactly.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .corpus import Vocabulary
from .errors import IncompatibleCheckpoint
from .model import HTCCLIP
from .taxonomy import LabelHierarchy, parse_taxonomy

FORMAT_VERSION = "htc-clip-checkpoint/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    config: TrainConfig
    vocab: Vocabulary
    hierarchy: LabelHierarchy
    state: dict[str, np.ndarray]
    meta: dict

    def build_model(self) -> HTCCLIP:
        model = HTCCLIP(self.config, self.hierarchy)
        expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
        got = {k: tuple(v.shape) for k, v in self.state.items()}
        if expected != got:
            raise IncompatibleCheckpoint("checkpoint arrays do not match the configured model")
        dtype = next(iter(self.state.values())).dtype if self.state else np.float32
        if dtype == np.float64:
            model.double()
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.state.items()})
        model.eval()
        return model

    def check_compatible(self, hierarchy: LabelHierarchy | None = None, vocab: Vocabulary | None = None) -> None:
        if hierarchy is not None and not self.hierarchy.same_structure(hierarchy):
            raise IncompatibleCheckpoint("taxonomy differs from the one the checkpoint was trained on")
        if vocab is not None and vocab != self.vocab:
            raise IncompatibleCheckpoint("vocabulary differs from the checkpoint's")


def from_model(model: HTCCLIP, vocab: Vocabulary, meta: dict | None = None,
               state: dict[str, torch.Tensor] | None = None) -> Checkpoint:
    state = model.state_dict() if state is None else state
    arrays = {k: v.detach().cpu().numpy().copy() for k, v in state.items()}
    return Checkpoint(model.cfg, vocab, model.hierarchy, arrays, dict(meta or {}))


def _member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab.tokens,
        "taxonomy": ckpt.hierarchy.to_lines(),
        "arrays": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in ckpt.state.items()},
        "meta": ckpt.meta,
    }
    with zipfile.ZipFile(path, "w") as zf:
        _member(zf, "header.json", json.dumps(header, indent=1, sort_keys=True).encode("utf-8"))
        for name in sorted(ckpt.state):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(ckpt.state[name]), allow_pickle=False)
            _member(zf, f"arrays/{name}.npy", buf.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise IncompatibleCheckpoint(f"{path}: not a checkpoint archive") from None
    with zf:
        try:
            header = json.loads(zf.read("header.json"))
        except KeyError:
            raise IncompatibleCheckpoint(f"{path}: missing header") from None
        if header.get("format_version") != FORMAT_VERSION:
            raise IncompatibleCheckpoint(f"unsupported checkpoint format {header.get('format_version')!r}")
        state = {}
        for name, declared in header["arrays"].items():
            arr = np.lib.format.read_array(io.BytesIO(zf.read(f"arrays/{name}.npy")), allow_pickle=False)
            if list(arr.shape) != declared["shape"] or str(arr.dtype) != declared["dtype"]:
                raise IncompatibleCheckpoint(f"array {name} does not match its declared shape/dtype")
            state[name] = arr
    return Checkpoint(
        config=TrainConfig.from_dict(header["config"]),
        vocab=Vocabulary(header["vocab"]),
        hierarchy=parse_taxonomy(header["taxonomy"]),
        state=state,
        meta=header.get("meta", {}),
    )
