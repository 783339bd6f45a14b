"""Meta model plus per-deployment specialized clones, with on-disk persistence.

Layout of a registry directory::

    manifest.json        format tag, version, one entry per model
    meta.qm              weights of the meta model
    dep-<name>.qm        one file per specialized model

A ``.qm`` file is the magic ``CARMQM01`` followed by every parameter array
(W1, b1, W2, b2, ...) as little-endian IEEE-754 float64, row-major. Shapes come
from ``layer_sizes`` in the manifest. Each file's SHA-256 is recorded in the
manifest and checked on load.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from carm.drl.features import Action, DrlState
from carm.drl.qnet import QModel
from carm.errors import CorruptModel, IoFailure

FORMAT = "carm-qmodel-registry"
VERSION = 1
MAGIC = b"CARMQM01"
MANIFEST = "manifest.json"


@dataclass(frozen=True)
class FeedbackRecord:
    deployment: str
    state: DrlState
    action: Action
    reward: float
    tick: int = 0

    def __post_init__(self) -> None:
        if not -1.0 <= self.reward <= 1.0:
            raise ValueError(f"reward must lie in [-1, 1], got {self.reward}")


@dataclass(frozen=True)
class FeedbackConfig:
    steps: int = 20
    lr: float = 1e-3
    anchor_weight: float = 1.0


@dataclass
class ModelRegistry:
    meta: QModel
    specialized: dict[str, QModel] = field(default_factory=dict)
    storage_path: Path | None = None
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)

    def select_model(self, deployment: str) -> QModel:
        return self.specialized.get(deployment, self.meta)

    def feedback(self, record: FeedbackRecord, config: FeedbackConfig = FeedbackConfig()) -> QModel:
        with self.lock:
            model = self.specialized.get(record.deployment)
            if model is None:
                model = self.meta.clone(parent=record.deployment)
                self.specialized[record.deployment] = model
            corrective_update(model, record.state, int(record.action), record.reward, config)
            return model

    def save(self, path: str | Path | None = None) -> Path:
        target = Path(path) if path is not None else self.storage_path
        if target is None:
            raise IoFailure("registry has no storage path")
        with self.lock:
            return save_registry(self, target)


def select_model(registry: ModelRegistry, deployment: str) -> QModel:
    return registry.select_model(deployment)


def feedback(registry: ModelRegistry, record: FeedbackRecord, config: FeedbackConfig = FeedbackConfig()) -> ModelRegistry:
    registry.feedback(record, config)
    return registry


def corrective_update(model: QModel, state: DrlState, action: int, reward: float, config: FeedbackConfig) -> None:
    """Move Q(state, action) toward ``reward`` while pinning the other outputs.

    Negative feedback must always lower the chosen action, so when its value is
    already at or below the reward the target is pushed a further |reward| down.
    Plain gradient steps are used rather than Adam: Adam moves every weight by
    roughly ``lr`` regardless of how much it matters here, which shifts the
    greedy action on unrelated states.
    """
    x = state.array[None, :]
    q0 = model.forward(x)[0].copy()
    target = reward
    if reward < 0 and q0[action] <= reward:
        target = q0[action] - abs(reward)
    others = np.ones_like(q0, dtype=bool)
    others[action] = False
    for _ in range(config.steps):
        q = model.forward(x)[0]
        grad_out = np.zeros_like(q)
        grad_out[action] = q[action] - target
        grad_out[others] = config.anchor_weight * (q[others] - q0[others])
        for p, g in zip(model.params, model.backward(x, grad_out[None, :])):
            p -= config.lr * g
        model.steps += 1


# -- persistence --------------------------------------------------------------


def _file_name(name: str) -> str:
    if name == "meta":
        return "meta.qm"
    safe = re.sub(r"[^A-Za-z0-9_.-]", "_", name)
    digest = hashlib.sha1(name.encode()).hexdigest()[:8]
    return f"dep-{safe}-{digest}.qm"


def _encode(model: QModel) -> bytes:
    return MAGIC + model.weight_bytes()


def _decode(blob: bytes, sizes: list[int], where: str) -> list[np.ndarray]:
    if not blob.startswith(MAGIC):
        raise CorruptModel(f"{where}: bad magic")
    shapes = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        shapes += [(fan_in, fan_out), (fan_out,)]
    expected = sum(int(np.prod(s)) for s in shapes) * 8
    payload = blob[len(MAGIC) :]
    if len(payload) != expected:
        raise CorruptModel(f"{where}: expected {expected} weight bytes, found {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f8")
    params, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        params.append(flat[offset : offset + size].reshape(shape).astype(np.float64))
        offset += size
    return params


def save_registry(registry: ModelRegistry, path: str | Path) -> Path:
    path = Path(path)
    entries = []
    models = [("meta", registry.meta)] + sorted(registry.specialized.items())
    try:
        path.mkdir(parents=True, exist_ok=True)
        for name, model in models:
            blob = _encode(model)
            fname = _file_name(name)
            (path / fname).write_bytes(blob)
            entries.append(
                {
                    "name": name,
                    "file": fname,
                    "sha256": hashlib.sha256(blob).hexdigest(),
                    "parent": model.parent,
                    "steps": model.steps,
                    "layer_sizes": list(model.sizes),
                    "scales": model.scales,
                }
            )
        manifest = {"format": FORMAT, "version": VERSION, "dtype": "<f8", "models": entries}
        (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write registry to {path}: {exc}") from exc
    registry.storage_path = path
    return path


def load_registry(path: str | Path) -> ModelRegistry:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read {path / MANIFEST}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptModel(f"{path / MANIFEST}: invalid JSON") from exc
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION or manifest.get("dtype") != "<f8":
        raise CorruptModel(f"{path}: unsupported registry format {manifest.get('format')!r} v{manifest.get('version')!r}")

    meta = None
    specialized = {}
    for entry in manifest.get("models", []):
        fpath = path / entry["file"]
        try:
            blob = fpath.read_bytes()
        except OSError as exc:
            raise IoFailure(f"cannot read {fpath}: {exc}") from exc
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise CorruptModel(f"{fpath}: checksum mismatch")
        params = _decode(blob, entry["layer_sizes"], str(fpath))
        model = QModel(params, dict(entry["scales"]), int(entry["steps"]), entry["parent"])
        if entry["name"] == "meta":
            meta = model
        else:
            specialized[entry["name"]] = model
    if meta is None:
        raise CorruptModel(f"{path}: manifest has no meta model")
    return ModelRegistry(meta, specialized, path)
