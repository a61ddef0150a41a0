"""On-disk scene datasets: PPM images, PFM depth, PGM masks and a JSON manifest."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import imageio
from .scenegen import ConditionTag, DepthMap, Scene, SceneSpec

SPLITS = ("diffusion", "train", "val", "test")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def scene_seed(base_seed: int, split: str, index: int) -> int:
    """64-bit scene seed derived from (global seed, split, index)."""
    ss = np.random.SeedSequence([int(base_seed), SPLITS.index(split), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def save_scene(root: Path, split: str, scene: Scene) -> dict:
    """Write one scene; returns its manifest entry (paths relative to ``root``)."""
    d = root / split
    d.mkdir(parents=True, exist_ok=True)
    files = {
        "easy": f"{split}/{scene.id}_easy.ppm",
        "depth": f"{split}/{scene.id}_depth.pfm",
        "valid": f"{split}/{scene.id}_valid.pgm",
        "objects": f"{split}/{scene.id}_objects.pgm",
        "material": f"{split}/{scene.id}_material.pgm",
    }
    imageio.write_ppm(root / files["easy"], scene.easy_image)
    imageio.write_pfm(root / files["depth"], scene.depth.values)
    imageio.write_pgm(root / files["valid"], scene.depth.valid_mask.astype(np.uint8) * 255)
    imageio.write_pgm(root / files["objects"], np.minimum(scene.object_mask, 255))
    imageio.write_pgm(root / files["material"], scene.material_mask)
    return {"id": scene.id, "seed": scene.seed, "split": split, "files": files, "conditions": {}}


@dataclass
class StoredScene:
    """A scene as read back from disk (no primitives; use ``regenerate`` for those)."""

    id: str
    seed: int
    split: str
    easy: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    objects: np.ndarray
    material: np.ndarray
    hard: dict = field(default_factory=dict)

    def as_scene(self, spec: SceneSpec) -> Scene:
        return Scene(id=self.id, seed=self.seed, spec=spec, depth=DepthMap(self.depth, self.valid),
                     easy_image=self.easy, object_mask=self.objects, material_mask=self.material,
                     primitives=(), horizon_row=float("nan"))


def load_entry(root: Path, entry: Mapping, with_hard: bool = True) -> StoredScene:
    f = entry["files"]
    hard = {}
    if with_hard:
        hard = {ConditionTag.parse(tag): imageio.read_ppm(root / c["file"]) for tag, c in entry["conditions"].items()}
    return StoredScene(
        id=entry["id"], seed=int(entry["seed"]), split=entry["split"],
        easy=imageio.read_ppm(root / f["easy"]),
        depth=imageio.read_pfm(root / f["depth"]).astype(np.float64),
        valid=imageio.read_pgm(root / f["valid"]) > 0,
        objects=imageio.read_pgm(root / f["objects"]).astype(np.int64),
        material=imageio.read_pgm(root / f["material"]).astype(np.uint8),
        hard=hard,
    )


def load_split(root: Path, manifest: Mapping, split: str, limit: int | None = None,
               with_hard: bool = True) -> list[StoredScene]:
    entries = [e for e in manifest["scenes"] if e["split"] == split]
    if limit is not None:
        entries = entries[:limit]
    return [load_entry(root, e, with_hard) for e in entries]


def stack_images(scenes: Sequence[StoredScene]) -> np.ndarray:
    return np.stack([s.easy for s in scenes])


def files_of(manifest: Mapping) -> Iterable[str]:
    for e in manifest["scenes"]:
        yield from e["files"].values()
        for c in e["conditions"].values():
            yield c["file"]
