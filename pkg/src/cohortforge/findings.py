from __future__ import annotations

from dataclasses import asdict, dataclass

ERROR = "ERROR"
WARNING = "WARNING"
INFO = "INFO"


@dataclass(frozen=True)
class Finding:
    level: str
    code: str
    message: str

    def to_dict(self) -> dict:
        return asdict(self)

    def __str__(self):
        return f"{self.level} [{self.code}] {self.message}"


def has_errors(findings) -> bool:
    return any(f.level == ERROR for f in findings)
