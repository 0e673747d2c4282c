"""Checkpoint archive: one zip holding every parameter array plus a text header.

Arrays are stored as .npy entries keyed by "network/layer/param" paths; the
header is flat key=value text carrying the format version, the stage, the
model config and the translation flags needed to rebuild the networks.
"""

from __future__ import annotations

import io
import zipfile
from dataclasses import asdict

import numpy as np
import torch
from torch import nn

from .config import ModelConfig

CKPT_VERSION = "gpunit-ckpt-v1"
HEADER_NAME = "header.txt"


def _param_key(net_name: str, param_name: str) -> str:
    return f"{net_name}/{param_name.replace('.', '/')}"


def _header_text(model: ModelConfig, extra: dict) -> str:
    lines = [f"version={CKPT_VERSION}"]
    for k, v in asdict(model).items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"model.{k}={v}")
    for k, v in sorted(extra.items()):
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def _parse_header(text: str) -> tuple[ModelConfig, dict]:
    model_kwargs: dict = {}
    extra: dict = {}
    version = None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        if key == "version":
            version = value
        elif key.startswith("model."):
            model_kwargs[key[len("model."):]] = value
        else:
            extra[key] = value
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}, expected {CKPT_VERSION}")
    kwargs: dict = {}
    for k, v in model_kwargs.items():
        if k == "dsc_layers":
            kwargs[k] = [int(x) for x in v.split(",")] if v else []
        elif k == "noise_std":
            kwargs[k] = float(v)
        else:
            kwargs[k] = int(v)
    return ModelConfig(**kwargs), extra


def save_checkpoint(path: str, nets: dict[str, nn.Module], model: ModelConfig,
                    extra: dict | None = None):
    extra = {k: str(v) for k, v in (extra or {}).items()}
    extra["networks"] = ",".join(sorted(nets))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr(HEADER_NAME, _header_text(model, extra))
        for net_name, net in sorted(nets.items()):
            for pname, tensor in net.state_dict().items():
                buf = io.BytesIO()
                np.save(buf, tensor.detach().cpu().numpy())
                zf.writestr(_param_key(net_name, pname) + ".npy", buf.getvalue())


def load_checkpoint(path: str) -> tuple[ModelConfig, dict, dict[str, np.ndarray]]:
    """Returns (model config, header extras, {path key: array})."""
    arrays: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path, "r") as zf:
        model, extra = _parse_header(zf.read(HEADER_NAME).decode("utf-8"))
        for info in zf.infolist():
            if info.filename == HEADER_NAME:
                continue
            with zf.open(info) as fh:
                arrays[info.filename[:-len(".npy")]] = np.load(io.BytesIO(fh.read()))
    return model, extra, arrays


def load_net(net: nn.Module, net_name: str, arrays: dict[str, np.ndarray]):
    """Loads one network's parameters from the array map, strictly."""
    state = {}
    prefix = net_name + "/"
    for key, arr in arrays.items():
        if key.startswith(prefix):
            state[key[len(prefix):].replace("/", ".")] = torch.from_numpy(arr.copy())
    current = net.state_dict()
    missing = set(current) - set(state)
    unexpected = set(state) - set(current)
    if missing or unexpected:
        raise ValueError(f"checkpoint mismatch for {net_name}: "
                         f"missing {sorted(missing)[:4]}, unexpected {sorted(unexpected)[:4]}")
    bad_shapes = [k for k in state if tuple(state[k].shape) != tuple(current[k].shape)]
    if bad_shapes:
        raise ValueError(f"checkpoint mismatch for {net_name}: "
                         f"shape differs at {bad_shapes[:4]}")
    net.load_state_dict(state)
