"""Instances, interaction graphs, JSONL ingestion and dataset splitting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

AGENT_CLASSES: tuple[str, ...] = (
    "car",
    "van",
    "truck",
    "bus",
    "motorcycle",
    "cyclist",
    "pedestrian",
    "other",
)


class DataError(ValueError):
    """Malformed input data or a violated data invariant."""


@dataclass(frozen=True)
class AgentState:
    uid: int
    cls: str
    x: float
    y: float
    z: float
    orientation: float

    def __post_init__(self):
        if self.cls not in AGENT_CLASSES:
            raise DataError(f"unknown agent class {self.cls!r}")
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z, self.orientation)):
            raise DataError(f"agent {self.uid}: non-finite coordinate")
        if not (-math.pi <= self.orientation < math.pi):
            raise DataError(f"agent {self.uid}: orientation {self.orientation} outside [-pi, pi)")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class Frame:
    t: int
    agents: tuple[AgentState, ...]
    target_uid: int

    def __post_init__(self):
        if self.t < 0:
            raise DataError(f"frame index {self.t} is negative")
        if not self.agents:
            raise DataError(f"frame {self.t} has no agents")
        uids = [a.uid for a in self.agents]
        if len(set(uids)) != len(uids):
            raise DataError(f"frame {self.t}: duplicate agent uids")
        if self.target_uid not in uids:
            raise DataError(f"frame {self.t}: target_uid {self.target_uid} not among agents")

    @property
    def target(self) -> AgentState:
        return next(a for a in self.agents if a.uid == self.target_uid)


@dataclass(frozen=True)
class InteractionGraph:
    vertices: tuple[AgentState, ...]
    edges: tuple[tuple[int, int], ...]
    target_uid: int

    def __post_init__(self):
        uids = {v.uid for v in self.vertices}
        for a, b in self.edges:
            if a not in uids or b not in uids:
                raise DataError(f"edge ({a}, {b}) references a missing vertex")
            if a >= b:
                raise DataError(f"edge ({a}, {b}) must be stored lower uid first without self-loops")

    def neighbors(self, uid: int) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == uid:
                out.append(b)
            elif b == uid:
                out.append(a)
        return out


@dataclass(frozen=True)
class Instance:
    instance_id: str
    frames: tuple[Frame, ...]
    label: str
    ttb_frames: int
    frame_rate_hz: float

    def __post_init__(self):
        where = f"instance {self.instance_id!r}"
        if not self.frames:
            raise DataError(f"{where}: no frames")
        if self.ttb_frames < 1:
            raise DataError(f"{where}: ttb_frames must be >= 1")
        if not self.frame_rate_hz > 0:
            raise DataError(f"{where}: frame_rate_hz must be positive")
        target = self.frames[0].target_uid
        t0 = self.frames[0].t
        for i, fr in enumerate(self.frames):
            if fr.target_uid != target:
                raise DataError(f"{where}, frame {i}: target_uid changes within the instance")
            if fr.t != t0 + i:
                raise DataError(f"{where}, frame {i}: frame indices must be sorted without gaps")

    @property
    def T(self) -> int:
        return len(self.frames)

    @property
    def target_uid(self) -> int:
        return self.frames[0].target_uid

    @property
    def ttb_seconds(self) -> float:
        return self.ttb_frames / self.frame_rate_hz

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "frame_rate_hz": self.frame_rate_hz,
            "ttb_frames": self.ttb_frames,
            "label": self.label,
            "frames": [
                {
                    "t": fr.t,
                    "target_uid": fr.target_uid,
                    "agents": [
                        {"uid": a.uid, "class": a.cls, "x": a.x, "y": a.y, "z": a.z,
                         "orientation": a.orientation}
                        for a in fr.agents
                    ],
                }
                for fr in self.frames
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, frame_rate_hz: float | None = None) -> "Instance":
        iid = d.get("instance_id", "<unknown>")
        try:
            rate = d.get("frame_rate_hz", frame_rate_hz)
            if rate is None:
                raise DataError("missing field 'frame_rate_hz'")
            if frame_rate_hz is not None and float(rate) != float(frame_rate_hz):
                raise DataError(f"frame_rate_hz {rate} differs from expected {frame_rate_hz}")
            frames = []
            for i, fd in enumerate(d["frames"]):
                try:
                    agents = tuple(
                        AgentState(int(a["uid"]), str(a["class"]), float(a["x"]), float(a["y"]),
                                   float(a["z"]), float(a["orientation"]))
                        for a in fd["agents"]
                    )
                    frames.append(Frame(int(fd["t"]), agents, int(fd["target_uid"])))
                except DataError as exc:
                    raise DataError(f"frame {i}: {exc}") from None
                except KeyError as exc:
                    raise DataError(f"frame {i}: missing field {exc}") from None
            return cls(str(d["instance_id"]), tuple(frames), str(d["label"]),
                       int(d["ttb_frames"]), float(rate))
        except KeyError as exc:
            raise DataError(f"instance {iid!r}: missing field {exc}") from None
        except DataError as exc:
            msg = str(exc)
            if not msg.startswith("instance "):
                msg = f"instance {iid!r}: {msg}"
            raise DataError(msg) from None


@dataclass(frozen=True)
class BehaviorTaxonomy:
    labels: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if len(self.labels) < 2:
            raise DataError("a taxonomy needs at least 2 behavior labels")
        names = [lab for lab, _ in self.labels]
        if len(set(names)) != len(names):
            raise DataError("taxonomy labels must be unique")
        for lab, desc in self.labels:
            if not lab or not desc:
                raise DataError(f"taxonomy entry {lab!r} needs a non-empty label and description")

    @property
    def names(self) -> list[str]:
        return [lab for lab, _ in self.labels]

    @property
    def M(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.names.index(label)

    def description(self, label: str) -> str:
        return dict(self.labels)[label]

    def to_json(self) -> list[dict]:
        return [{"label": lab, "description": desc} for lab, desc in self.labels]


@dataclass(frozen=True)
class Dataset:
    instances: tuple[Instance, ...]
    taxonomy: BehaviorTaxonomy

    def __post_init__(self):
        known = set(self.taxonomy.names)
        for inst in self.instances:
            if inst.label not in known:
                raise DataError(f"instance {inst.instance_id!r}: label {inst.label!r} not in taxonomy")

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def labels(self) -> list[str]:
        return [inst.label for inst in self.instances]

    @property
    def observation_length(self) -> int:
        """Shared T of all instances; raises when lengths differ."""
        lengths = {inst.T for inst in self.instances}
        if len(lengths) != 1:
            raise DataError(f"instances have differing observation lengths {sorted(lengths)}")
        return lengths.pop()

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.instances[i] for i in indices), self.taxonomy)


def load_taxonomy(path: str | Path) -> BehaviorTaxonomy:
    entries = json.loads(Path(path).read_text())
    if not isinstance(entries, list):
        raise DataError(f"{path}: taxonomy must be a JSON array")
    try:
        return BehaviorTaxonomy(tuple((str(e["label"]), str(e["description"])) for e in entries))
    except KeyError as exc:
        raise DataError(f"{path}: taxonomy entry missing {exc}") from None


def save_taxonomy(taxonomy: BehaviorTaxonomy, path: str | Path) -> None:
    Path(path).write_text(json.dumps(taxonomy.to_json(), indent=1) + "\n")


def taxonomy_from_labels(labels: Iterable[str]) -> BehaviorTaxonomy:
    names = sorted(set(labels))
    return BehaviorTaxonomy(tuple((n, n.replace("-", " ").replace("_", " ")) for n in names))


def read_instances(path: str | Path, frame_rate_hz: float | None = None) -> list[Instance]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    instances = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: JSON parse error: {exc.msg}") from None
            if not isinstance(d, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            try:
                instances.append(Instance.from_dict(d, frame_rate_hz))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return instances


def load_dataset(path: str | Path, frame_rate_hz: float | None = None,
                 taxonomy: BehaviorTaxonomy | None = None) -> Dataset:
    """Read a JSONL dataset, one instance per line.

    Without an explicit taxonomy the built-in synthetic one is used when it
    covers every label, otherwise one is derived from the sorted label set.
    """
    instances = read_instances(path, frame_rate_hz)
    if taxonomy is None:
        from .synthetic import SYNTHETIC_TAXONOMY

        labels = {inst.label for inst in instances}
        if labels <= set(SYNTHETIC_TAXONOMY.names):
            taxonomy = SYNTHETIC_TAXONOMY
        else:
            taxonomy = taxonomy_from_labels(labels)
    return Dataset(tuple(instances), taxonomy)


def instance_to_line(inst: Instance) -> str:
    return json.dumps(inst.to_dict(), separators=(",", ":"))


def save_dataset(dataset: Dataset | Sequence[Instance], path: str | Path) -> None:
    instances = dataset.instances if isinstance(dataset, Dataset) else dataset
    with Path(path).open("w") as fh:
        for inst in instances:
            fh.write(instance_to_line(inst) + "\n")


@dataclass(frozen=True)
class EdgePolicy:
    """``complete`` links every agent pair; ``radius`` only pairs closer than ``radius_m``."""

    kind: str = "complete"
    radius_m: float | None = None

    def __post_init__(self):
        if self.kind not in ("complete", "radius"):
            raise ValueError(f"unknown edge policy {self.kind!r}")
        if self.kind == "radius" and not (self.radius_m and self.radius_m > 0):
            raise ValueError("radius policy needs a positive radius_m")

    @classmethod
    def parse(cls, text: str) -> "EdgePolicy":
        text = text.strip()
        if text == "complete":
            return cls()
        if text.startswith("radius(") and text.endswith(")"):
            return cls("radius", float(text[len("radius("):-1]))
        raise ValueError(f"cannot parse edge policy {text!r}")

    def __str__(self) -> str:
        return "complete" if self.kind == "complete" else f"radius({self.radius_m:g})"


def build_interaction_graphs(instance: Instance,
                             edge_policy: EdgePolicy | None = None) -> list[InteractionGraph]:
    policy = edge_policy or EdgePolicy()
    graphs = []
    for fr in instance.frames:
        agents = sorted(fr.agents, key=lambda a: a.uid)
        edges = []
        for i, a in enumerate(agents):
            for b in agents[i + 1:]:
                if policy.kind == "radius":
                    if np.linalg.norm(a.position - b.position) > policy.radius_m:
                        continue
                edges.append((a.uid, b.uid))
        graphs.append(InteractionGraph(tuple(fr.agents), tuple(edges), fr.target_uid))
    return graphs


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified train/test partition; both parts keep the input order."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(dataset) < 2:
        raise ValueError("need at least 2 instances to split")
    rng = np.random.default_rng(seed)
    by_label: dict[str, list[int]] = {}
    for i, inst in enumerate(dataset.instances):
        by_label.setdefault(inst.label, []).append(i)
    train_idx: set[int] = set()
    for label in sorted(by_label):
        idx = by_label[label]
        n = len(idx)
        k = int(math.floor(n * train_fraction + 0.5))
        if n >= 2:
            k = min(max(k, 1), n - 1)
        else:
            k = n
        chosen = rng.permutation(n)[:k]
        train_idx.update(idx[j] for j in chosen)
    train = [i for i in range(len(dataset)) if i in train_idx]
    test = [i for i in range(len(dataset)) if i not in train_idx]
    return dataset.subset(train), dataset.subset(test)

