"""Lineage document: which sources, configs and code produced each cohort."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..errors import ValidationError

LINEAGE_FORMAT = "cohortforge-lineage/1"
_PACKAGE_ROOT = Path(__file__).resolve().parent.parent


def code_digest(root: Path = _PACKAGE_ROOT) -> str:
    """SHA-256 over the package's Python sources, in sorted path order."""
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode("utf-8"))
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


@dataclass
class CohortEntry:
    name: str
    path: str
    category: str
    sources: list = field(default_factory=list)
    count: int = 0
    subjects: int = 0
    config_digest: str = ""
    code_digest: str = ""
    operations: list = field(default_factory=list)
    window: Optional[list] = None

    def to_dict(self) -> dict:
        # field order is part of the document format
        return {
            "name": self.name,
            "path": self.path,
            "category": self.category,
            "sources": self.sources,
            "count": self.count,
            "config_digest": self.config_digest,
            "code_digest": self.code_digest,
            "operations": list(self.operations),
            "subjects": self.subjects,
            "window": self.window,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CohortEntry":
        return cls(name=d["name"], path=d["path"], category=d["category"],
                   sources=d.get("sources", []), count=int(d.get("count", 0)),
                   subjects=int(d.get("subjects", 0)), config_digest=d.get("config_digest", ""),
                   code_digest=d.get("code_digest", ""), operations=list(d.get("operations", [])),
                   window=d.get("window"))


def build_metadata(entries, digest: Optional[str] = None, unique_categories: bool = True) -> dict:
    entries = list(entries)
    names, categories = set(), set()
    for e in entries:
        if e.name in names:
            raise ValidationError(f"duplicate cohort name {e.name!r} in lineage")
        if unique_categories and e.category in categories:
            raise ValidationError(f"duplicate event category {e.category!r} in lineage")
        names.add(e.name)
        categories.add(e.category)
    return {
        "format": LINEAGE_FORMAT,
        "code_digest": digest if digest is not None else code_digest(),
        "cohorts": [e.to_dict() for e in entries],
    }


def write_metadata(entries, path=None, digest: Optional[str] = None, unique_categories: bool = True) -> dict:
    """Validate and serialize lineage entries; writes JSON to ``path`` when given."""
    doc = build_metadata(entries, digest, unique_categories)
    if path is not None:
        Path(path).write_text(dumps_metadata(doc), encoding="utf-8")
    return doc


def dumps_metadata(doc: dict) -> str:
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def read_metadata(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return {"format": LINEAGE_FORMAT, "code_digest": "", "cohorts": []}
    doc = json.loads(text)
    if not isinstance(doc, dict) or not isinstance(doc.get("cohorts", []), list):
        raise ValidationError(f"{path}: not a lineage document")
    doc.setdefault("cohorts", [])
    return doc
