"""Dataset manifests and the seven named recipes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..volume import LabelVolume, Volume
from .io import load_volume

SCHEMA_VERSION = 1
PROVENANCES = ("real", "synthetic")


@dataclass(frozen=True)
class Recipe:
    synthetic: int
    real: int
    wavelet: bool = False
    cone: bool = False


RECIPES = {
    "D_Synthetic": Recipe(27, 0),
    "D_Wavelet": Recipe(27, 0, wavelet=True),
    "D_Cone": Recipe(27, 0, cone=True),
    "D_WaveletCone": Recipe(27, 0, wavelet=True, cone=True),
    "D_Real": Recipe(0, 17),
    "D_17Real10Augmented": Recipe(10, 17),
    "D_17Real20Augmented": Recipe(20, 17),
}
SYNTHETIC_POOL = 27
REAL_POOL = 17


def model_name(recipe: str) -> str:
    return "M_" + recipe[2:] if recipe.startswith("D_") else "M_" + recipe


def variant_key(wavelet: bool, cone: bool) -> str:
    return {(False, False): "raw", (True, False): "wavelet", (False, True): "cone", (True, True): "waveletcone"}[
        (bool(wavelet), bool(cone))]


@dataclass
class DatasetEntry:
    image_path: str
    label_path: str
    provenance: str
    postproc: dict = field(default_factory=lambda: {"wavelet": False, "cone": False})

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}, got {self.provenance!r}")


@dataclass
class DatasetManifest:
    name: str
    entries: list
    created_from: str = ""
    root: str = ""
    schema_version: int = SCHEMA_VERSION

    def __len__(self) -> int:
        return len(self.entries)

    def counts(self) -> dict:
        out = {p: 0 for p in PROVENANCES}
        for e in self.entries:
            out[e.provenance] += 1
        return out

    def _resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() or not self.root else Path(self.root) / path

    def load_pairs(self) -> list:
        pairs = []
        for e in self.entries:
            img, lab = load_volume(self._resolve(e.image_path)), load_volume(self._resolve(e.label_path))
            if not isinstance(img, Volume) or not isinstance(lab, LabelVolume):
                raise ValueError(f"{self.name}: entry {e.image_path} is not an (image, labels) pair")
            if img.dims != lab.dims:
                raise ValueError(f"{self.name}: image and labels of {e.image_path} differ in extent")
            pairs.append((img, lab))
        return pairs

    def validate(self) -> None:
        if self.name in RECIPES:
            r = RECIPES[self.name]
            expected = {"synthetic": r.synthetic, "real": r.real}
            if self.counts() != expected:
                raise ValueError(f"{self.name}: counts {self.counts()} do not match recipe {expected}")
        for e in self.entries:
            for p in (e.image_path, e.label_path):
                if not self._resolve(p).exists():
                    raise FileNotFoundError(f"{self.name}: missing file {p}")
        self.load_pairs()

    def to_json(self) -> str:
        doc = {"schema_version": self.schema_version, "name": self.name, "created_from": self.created_from,
               "entries": [asdict(e) for e in self.entries]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str, root: str = "") -> "DatasetManifest":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported manifest schema_version {doc.get('schema_version')!r}")
        return cls(doc["name"], [DatasetEntry(**e) for e in doc["entries"]], doc.get("created_from", ""), root)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        return cls.from_json(path.read_text(), root=str(path.parent))


@dataclass
class DatasetSources:
    """Where the pooled volumes live.

    ``synthetic`` maps each post-processing variant (``raw``, ``wavelet``,
    ``cone``, ``waveletcone``) to the image paths of the synthetic pool;
    ``synthetic_labels`` holds the matching label paths. ``real`` is a list of
    ``(image_path, label_path)`` for the real stand-ins.
    """

    synthetic: dict = field(default_factory=dict)
    synthetic_labels: list = field(default_factory=list)
    real: list = field(default_factory=list)


def build_dataset(recipe: str, sources: DatasetSources, seed: int = 0, created_from: str = "") -> DatasetManifest:
    if recipe not in RECIPES:
        raise ValueError(f"unknown recipe {recipe!r}; valid names: {', '.join(RECIPES)}")
    r = RECIPES[recipe]
    entries = []
    if r.real:
        if len(sources.real) < r.real:
            raise ValueError(f"{recipe} needs {r.real} real pairs, only {len(sources.real)} available")
        entries += [DatasetEntry(img, lab, "real") for img, lab in sources.real[: r.real]]
    if r.synthetic:
        key = variant_key(r.wavelet, r.cone)
        images = sources.synthetic.get(key)
        if images is None:
            raise ValueError(f"{recipe} needs the {key!r} synthetic variant, which was not provided")
        if len(images) < r.synthetic or len(sources.synthetic_labels) < r.synthetic:
            raise ValueError(f"{recipe} needs {r.synthetic} synthetic pairs, only {len(images)} available")
        if r.synthetic == len(images):
            pick = np.arange(len(images))
        else:
            # subsets of the pool are drawn by seed, then kept in pool order
            pick = np.sort(np.random.default_rng(seed).permutation(len(images))[: r.synthetic])
        entries += [DatasetEntry(images[i], sources.synthetic_labels[i], "synthetic",
                                 {"wavelet": r.wavelet, "cone": r.cone}) for i in pick]
    return DatasetManifest(recipe, entries, created_from)
