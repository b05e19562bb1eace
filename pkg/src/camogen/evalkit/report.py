from __future__ import annotations

import json
import math
from dataclasses import dataclass, field


@dataclass
class MetricReport:
    metrics: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.metrics.items():
            if not isinstance(v, (int, float)) or math.isnan(v):
                raise ValueError(f"metric {k!r} is not a number: {v!r}")

    def to_dict(self) -> dict:
        return {"metrics": {k: float(v) for k, v in self.metrics.items()}, "meta": dict(self.meta)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        doc = json.loads(text)
        return cls(doc["metrics"], doc.get("meta", {}))
