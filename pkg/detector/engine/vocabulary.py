"""
Object, anomaly and texture tags, and their mapping onto procedural families
"""
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, LeakageError, VocabularyError

VOCABULARY_PATH = Path(__file__).resolve().parent / "data" / "vocabulary.json"

TEXTURE_FAMILIES = ("gradient", "value_noise", "stripes", "checker")
ANOMALY_FAMILIES = ("color_shift", "texture_swap", "scratch", "blob", "speckle")

# Keyword -> anomaly family; first match wins, tags without a match are hashed
ANOMALY_KEYWORDS = (
    (("scratch", "crack", "split", "tear", "torn", "fray", "scuff", "tangled", "stripped"), "scratch"),
    (("discolor", "stain", "faded", "fade", "oxid", "rust", "burn", "yellow", "black", "tarnish", "bleach"), "color_shift"),
    (("mold", "spot", "pit", "speck", "dust", "hole", "erod", "corro", "flak", "peel", "crumb"), "speckle"),
    (("dent", "bruise", "bulg", "missing", "broken", "chip", "swollen", "lump", "warp", "bent"), "blob"),
    (("wrinkl", "uneven", "deform", "misalign", "pattern", "print", "texture", "worn"), "texture_swap"),
)


def _stable_index(tag: str, modulo: int, salt: str = "") -> int:
    digest = hashlib.sha256(f"{salt}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % modulo


def texture_family(tag: str) -> str:
    return TEXTURE_FAMILIES[_stable_index(tag, len(TEXTURE_FAMILIES), "texture")]


def object_family(tag: str, background_family: str) -> str:
    """Texture family of an object's surface, never the background's family"""
    family = TEXTURE_FAMILIES[_stable_index(tag, len(TEXTURE_FAMILIES), "object")]
    if family == background_family:
        family = TEXTURE_FAMILIES[(TEXTURE_FAMILIES.index(family) + 1) % len(TEXTURE_FAMILIES)]
    return family


def anomaly_family(tag: str) -> str:
    lowered = tag.lower()
    for keywords, family in ANOMALY_KEYWORDS:
        if any(keyword in lowered for keyword in keywords):
            return family
    return ANOMALY_FAMILIES[_stable_index(tag, len(ANOMALY_FAMILIES), "anomaly")]


@dataclass
class Vocabulary:
    objects: list
    textures: list
    anomalies_by_object: dict = field(default_factory=dict)

    def __post_init__(self):
        for obj in self.objects:
            if not self.anomalies_by_object.get(obj):
                raise VocabularyError(f"Object '{obj}' has no anomaly tags")
        if not self.objects:
            raise VocabularyError("Vocabulary has no objects")
        if not self.textures:
            raise VocabularyError("Vocabulary has no textures")

    def require_object(self, tag: str):
        if tag not in self.anomalies_by_object:
            raise VocabularyError(f"Unknown object tag '{tag}'")

    def require_texture(self, tag: str):
        if tag not in self.textures:
            raise VocabularyError(f"Unknown texture tag '{tag}'")

    def restricted(self, objects) -> "Vocabulary":
        """Same textures, only the given objects"""
        for obj in objects:
            self.require_object(obj)
        return Vocabulary(
            objects=list(objects),
            textures=list(self.textures),
            anomalies_by_object={obj: list(self.anomalies_by_object[obj]) for obj in objects},
        )


def load_vocabulary(path: Optional[Path] = None) -> Vocabulary:
    path = Path(path) if path else VOCABULARY_PATH
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise VocabularyError(f"Could not read vocabulary {path}: {e}") from e
    objects = data.get("objects")
    if not isinstance(objects, dict):
        raise VocabularyError(f"Vocabulary {path} has no 'objects' mapping")
    return Vocabulary(
        objects=sorted(objects),
        textures=list(data.get("textures", [])),
        anomalies_by_object={obj: list(tags) for obj, tags in objects.items()},
    )


def split_vocabulary(vocab: Vocabulary, n_train: int, n_eval: int, seed: int) -> tuple:
    """Disjoint (train, eval) object lists drawn from one seeded permutation"""
    if n_train < 1 or n_eval < 1:
        raise ConfigurationError(f"Split sizes must be >= 1, got train={n_train} eval={n_eval}")
    if n_train + n_eval > len(vocab.objects):
        raise ConfigurationError(
            f"Cannot split {len(vocab.objects)} objects into {n_train} train + {n_eval} eval"
        )
    order = np.random.default_rng(seed).permutation(len(vocab.objects))
    shuffled = [vocab.objects[i] for i in order]
    train, held_out = sorted(shuffled[:n_train]), sorted(shuffled[n_train:n_train + n_eval])
    assert_disjoint(train, held_out)
    return train, held_out


def assert_disjoint(train_objects, held_out_objects):
    overlap = sorted(set(train_objects) & set(held_out_objects))
    if overlap:
        raise LeakageError(f"Object tags present in both train and held-out splits: {overlap}")
