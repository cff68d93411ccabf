"""Versioned ``.npz`` checkpoints of named arrays plus a JSON metadata blob."""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import DataError
from .models import ModelDims, TrunkParams
from .optim import Adam
from .plugins import LightPlugin, NaivePlugin

FORMAT_VERSION = 1


def save_checkpoint(path, trunk: TrunkParams, plugins: Optional[Dict[int, object]] = None,
                    optimizers: Optional[Dict[str, Adam]] = None,
                    meta: Optional[dict] = None) -> None:
    arrays = {f"trunk/{k}": v for k, v in trunk.params.items()}
    kinds = {}
    for j, plugin in sorted((plugins or {}).items()):
        kinds[str(j)] = plugin.kind
        for k, v in plugin.params.items():
            arrays[f"plugin/{j}/{k}"] = v
    for tag, opt in (optimizers or {}).items():
        for k, v in opt.state_dict().items():
            arrays[f"optim/{tag}/{k}"] = v
    header = {
        "format_version": FORMAT_VERSION,
        "arch": trunk.arch,
        "dims": asdict(trunk.dims),
        "sections": trunk.sections,
        "param_order": list(trunk.params),
        "plugins": kinds,
        "meta": meta or {},
    }
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns (trunk, plugins, optimizers, meta)."""
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {header.get('format_version')}")
        params = {k: np.array(z[f"trunk/{k}"]) for k in header["param_order"]}
        trunk = TrunkParams(header["arch"], ModelDims(**header["dims"]), params,
                            dict(header["sections"]))
        plugins = {}
        for j, kind in header["plugins"].items():
            prefix = f"plugin/{j}/"
            p = {k[len(prefix):]: np.array(z[k]) for k in z.files if k.startswith(prefix)}
            cls = NaivePlugin if kind == "naive" else LightPlugin
            plugins[int(j)] = cls(int(j), p)
        optimizers = {}
        tags = {k.split("/")[1] for k in z.files if k.startswith("optim/")}
        for tag in sorted(tags):
            prefix = f"optim/{tag}/"
            opt = Adam()
            opt.load_state_dict({k[len(prefix):]: np.array(z[k]) for k in z.files
                                 if k.startswith(prefix)})
            optimizers[tag] = opt
    return trunk, plugins, optimizers, header["meta"]
