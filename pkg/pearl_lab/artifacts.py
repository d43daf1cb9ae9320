"""Plain-text artefact helpers: CSV tables, JSON documents, JSON-lines logs."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any

from pearl_lab.errors import ArtifactError


def write_csv(path: Path, rows: list[dict], comment: dict[str, Any] | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        if comment is not None:
            f.write("# " + json.dumps(comment, sort_keys=True) + "\n")
        if not rows:
            return
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_csv_comment(path: Path) -> dict[str, Any] | None:
    with path.open(encoding="utf-8") as f:
        first = f.readline()
    if not first.startswith("# "):
        return None
    return json.loads(first[2:])


def write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: invalid JSON ({exc})") from exc


class JsonlLog:
    """Append-only JSON-lines file, one record per line."""

    def __init__(self, path: Path):
        self.path = path
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def start(self, header: dict[str, Any]) -> None:
        self.path.write_text(json.dumps(header, sort_keys=True) + "\n", encoding="utf-8")

    def append(self, record: dict[str, Any]) -> None:
        with self.path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def read(self) -> list[dict[str, Any]]:
        if not self.path.exists():
            return []
        lines = self.path.read_text(encoding="utf-8").splitlines()
        return [json.loads(line) for line in lines if line.strip()]

    def truncate_from(self, step: int) -> int:
        """Drop every record with `step >= step`; returns how many were dropped."""
        lines = self.path.read_text(encoding="utf-8").splitlines(keepends=True)
        kept = [
            line for line in lines if json.loads(line).get("step", -1) < step
        ]
        self.path.write_text("".join(kept), encoding="utf-8")
        return len(lines) - len(kept)
