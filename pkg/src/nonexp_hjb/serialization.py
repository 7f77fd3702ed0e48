"""Checkpoints, CSV tables and run manifests."""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .discount import DiscountModel
from .tasks import TaskModel, get_task, piecewise_task
from .valuenet import ValueNet

CHECKPOINT_FORMAT = "nonexp-hjb-checkpoint"
CHECKPOINT_VERSION = 1
MANIFEST_NAME = "manifest.json"


class CheckpointError(ValueError):
    pass


# -- checkpoints --------------------------------------------------------------

def task_reference(task: TaskModel):
    """Built-in task name, or the full structured config for custom tasks."""
    if task.name in ("line", "investment", "constant") and task.config in ({}, get_task(task.name).config):
        return task.name
    return task.to_config()


def resolve_task(ref) -> TaskModel:
    return get_task(ref) if isinstance(ref, str) else piecewise_task(ref)


@dataclass
class Checkpoint:
    net: ValueNet
    discount: DiscountModel
    task: TaskModel
    step_count: int = 0
    solver_config: dict = field(default_factory=dict)
    kind: str = "value"


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    mlp = ckpt.net.mlp
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": ckpt.kind,
        "state_dim": ckpt.net.state_dim,
        "width": mlp.width,
        "out_dim": mlp.out_dim,
        "layer_shapes": [list(s) for s in mlp.shapes],
        "lam_reparam": ckpt.net.lam_reparam,
        "step_count": int(ckpt.step_count),
        "task": task_reference(ckpt.task),
        "discount": ckpt.discount.to_dict(),
        "solver_config": ckpt.solver_config,
        "params": [float(v) for v in ckpt.net.params],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc.msg})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    net = ValueNet(doc["state_dim"], doc["width"], doc["out_dim"], doc["lam_reparam"],
                   params=np.asarray(doc["params"], dtype=float))
    if [list(s) for s in net.mlp.shapes] != doc["layer_shapes"]:
        raise CheckpointError(f"{path}: layer shapes do not match the stored architecture")
    return Checkpoint(net, DiscountModel.from_dict(doc["discount"]), resolve_task(doc["task"]),
                      doc.get("step_count", 0), doc.get("solver_config", {}), doc.get("kind", "value"))


# -- CSV ----------------------------------------------------------------------

def write_csv(path, header, rows, manifest_hash: str = "") -> None:
    """CSV with a ``# manifest: <hash>`` comment line followed by a header row."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# manifest: {manifest_hash}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path):
    """Returns ``(header, rows, manifest_hash)``; numeric cells become floats."""
    manifest = ""
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for ln in lines:
        if ln.startswith("#"):
            if ln.startswith("# manifest:"):
                manifest = ln.split(":", 1)[1].strip()
            continue
        body.append(ln)
    reader = csv.reader(body)
    header = next(reader)
    rows = [[_parse(c) for c in r] for r in reader]
    return header, rows, manifest


def _parse(cell):
    try:
        return float(cell)
    except ValueError:
        return cell


# -- manifests ----------------------------------------------------------------

def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_inputs(config: dict, files=()) -> str:
    payload = json.dumps(config, sort_keys=True, default=str).encode()
    for f in files:
        payload += b"\0" + Path(f).read_bytes()
    return git_blob_hash(payload)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    input_hash: str
    started: str = field(default_factory=_now)
    finished: str | None = None
    outputs: list = field(default_factory=list)
    status: str = "running"
    environment: dict = field(default_factory=lambda: {
        "python": platform.python_version(), "numpy": np.__version__})

    @classmethod
    def create(cls, command: str, config: dict, seed=None, input_files=()) -> "RunManifest":
        return cls(command, config, seed, hash_inputs({"command": command, **config}, input_files))

    def add_output(self, path) -> None:
        p = Path(path)
        self.outputs.append({"file": p.name, "hash": git_blob_hash(p.read_bytes())})

    def finish(self, run_dir, status: str = "ok") -> Path:
        self.finished = _now()
        self.status = status
        out = Path(run_dir) / MANIFEST_NAME
        out.write_text(json.dumps(asdict(self), indent=2, default=str))
        return out

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        return cls(**json.loads(path.read_text()))
