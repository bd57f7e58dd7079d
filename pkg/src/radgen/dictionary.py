"""The anatomical entity dictionary: an ordered list of entity strings.

The dictionary is the source of the semantic branch. Entity order is
significant (it fixes the row order of the semantic features), entries
are lowercased before tokenization, and duplicates after normalization
are rejected.

File format: one entity per line, UTF-8, ``#`` starts a comment.
"""

from __future__ import annotations

from dataclasses import dataclass

DEFAULT_ENTITIES = ("pneumothorax", "pleural", "spine", "heart", "hernia")


@dataclass(frozen=True)
class AnatomicalDictionary:
    entities: tuple[str, ...]

    def __post_init__(self):
        if not self.entities:
            raise ValueError("anatomical dictionary must have at least one entity")
        normalized = [e.strip().lower() for e in self.entities]
        if any(not e for e in normalized):
            raise ValueError("anatomical dictionary entries must be non-empty")
        if len(set(normalized)) != len(normalized):
            raise ValueError("anatomical dictionary entries must be unique")
        object.__setattr__(self, "entities", tuple(normalized))

    def __len__(self):
        return len(self.entities)

    @classmethod
    def default(cls) -> "AnatomicalDictionary":
        return cls(DEFAULT_ENTITIES)

    @classmethod
    def from_file(cls, path) -> "AnatomicalDictionary":
        entities = []
        with open(path, "r", encoding="utf-8") as fh:
            for raw in fh:
                line = raw.split("#", 1)[0].strip()
                if line:
                    entities.append(line)
        return cls(tuple(entities))

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# anatomical entity dictionary, order significant\n")
            for e in self.entities:
                fh.write(e + "\n")
