"""Run logs and their NDJSON / CSV serialisation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1

RECORD_FIELDS = (
    "time", "version", "arrivals", "loss", "accuracy", "staleness",
    "wait", "buffer_latency", "active",
)


@dataclass
class RunLog:
    """Everything a run produced.

    ``records`` are evaluation points (one per ``eval_every`` aggregation
    events), ``arrivals`` is the full trace of client completions in the
    order the server processed them, and ``summary`` holds end-of-run totals.
    """

    header: dict = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)
    arrivals: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def strategy(self) -> str:
        return self.header.get("strategy", "")

    @property
    def aborted(self) -> bool:
        return bool(self.summary.get("aborted", False))

    def to_ndjson(self) -> str:
        lines = [json.dumps({"type": "header", "schema_version": SCHEMA_VERSION, **self.header},
                            sort_keys=True)]
        lines += [json.dumps({"type": "record", **r}, sort_keys=True) for r in self.records]
        lines += [json.dumps({"type": "arrival", **a}, sort_keys=True) for a in self.arrivals]
        lines.append(json.dumps({"type": "summary", **self.summary}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_ndjson(cls, text: str) -> RunLog:
        log = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            kind = obj.pop("type", None)
            if kind == "header":
                version = obj.pop("schema_version", None)
                if version != SCHEMA_VERSION:
                    raise ValueError(f"unsupported run log schema version {version!r}")
                log.header = obj
            elif kind == "record":
                log.records.append(obj)
            elif kind == "arrival":
                log.arrivals.append(obj)
            elif kind == "summary":
                log.summary = obj
            else:
                raise ValueError(f"line {lineno}: unknown entry type {kind!r}")
        return log

    def save(self, path) -> None:
        Path(path).write_text(self.to_ndjson(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> RunLog:
        return cls.from_ndjson(Path(path).read_text(encoding="utf-8"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema_version={SCHEMA_VERSION} strategy={self.strategy} "
                  f"seed={self.header.get('seed')}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RECORD_FIELDS)
        for r in self.records:
            writer.writerow([r.get(k) for k in RECORD_FIELDS])
        return buf.getvalue()
