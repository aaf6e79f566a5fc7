from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class StageReport:
    """Loss traces and metric snapshots of one training stage."""
    stage: str
    seed: int
    records: list[tuple[int, str, float]] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def log(self, step: int, **losses: float) -> None:
        for name, value in losses.items():
            self.records.append((int(step), name, float(value)))

    def trace(self, name: str) -> list[float]:
        return [v for _, n, v in self.records if n == name]

    def finish(self) -> "StageReport":
        self.wall_clock = time.perf_counter() - self._t0
        return self

    def extend(self, other: "StageReport") -> None:
        self.records.extend(other.records)

    def to_lines(self) -> str:
        # repr() keeps floats round-trippable so traces compare bit-for-bit
        out = [f"# stage={self.stage} seed={self.seed} wall_clock={self.wall_clock:.3f}\n"]
        out += [f"# config {k}={v}\n" for k, v in sorted(self.config.items())]
        out += [f"# metric {k}={v!r}\n" for k, v in sorted(self.metrics.items())]
        out += [f"{s}\t{n}\t{v!r}\n" for s, n, v in self.records]
        return "".join(out)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_lines())
        return path

    @staticmethod
    def read_records(path: str | Path) -> list[tuple[int, str, float]]:
        rows = []
        for ln in Path(path).read_text().splitlines():
            if ln and not ln.startswith("#"):
                s, n, v = ln.split("\t")
                rows.append((int(s), n, float(v)))
        return rows
