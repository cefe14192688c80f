"""Run manifest: everything needed to reproduce a run's output files."""
import json
import os
from typing import Any, Dict, List

from deersim import __version__

MANIFEST_SCHEMA = "deersim.manifest/1"


class RunManifest:
    """Accumulate run metadata while the orchestrator works."""

    def __init__(self, config: Dict[str, Any], engine: str):
        self.config = config
        self.engine = engine
        self.version = __version__
        self.child_seeds: List[Dict[str, int]] = []
        self.failures: List[Dict[str, Any]] = []
        self.stats: Dict[str, Any] = {}
        self.outputs: Dict[str, str] = {}
        self.wall_clock_s = 0.0

    def add_seeds(self, index: int, configuration_seed: int, sign_seed: int) -> None:
        self.child_seeds.append({"realization": index, "configuration": configuration_seed, "signs": sign_seed})

    def add_failure(self, point: int, sweep_value: float, realization: int, message: str) -> None:
        self.failures.append({"point": point, "sweep_value": sweep_value,
                              "realization": realization, "error": message})

    def add_stat(self, name: str, value: Any) -> None:
        self.stats[name] = value

    def add_output(self, kind: str, path: str) -> None:
        self.outputs[kind] = os.path.basename(path)

    @property
    def failed_points(self) -> List[int]:
        return sorted({f["point"] for f in self.failures})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema": MANIFEST_SCHEMA,
            "version": self.version,
            "engine": self.engine,
            "config": self.config,
            "child_seeds": list(self.child_seeds),
            "failures": list(self.failures),
            "failed_points": self.failed_points,
            "stats": dict(self.stats),
            "outputs": dict(self.outputs),
            "wall_clock_s": self.wall_clock_s,
        }

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")

    @staticmethod
    def read(path: str) -> Dict[str, Any]:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
